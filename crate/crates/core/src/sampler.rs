//! The layout-aware denoising loop.
//!
//! Each step estimates one noise per object plus one for the whole canvas,
//! applies classifier-free guidance to each estimate separately, merges them
//! with the object masks and takes one scheduler step. The `N + 1` estimates
//! of a step are independent and may run on a worker pool; results are
//! collected in object order so the output does not depend on the number of
//! workers.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::collage::{merge_noises, MergeConfig};
use crate::error::{Error, Result};
use crate::estimators::{
    AnalyticEstimator, Condition, EstimatorRequest, HintMap, NoiseEstimator, UNetEstimator,
    UNetWeights, UNET_CANVAS, UNET_CHANNELS,
};
use crate::geometry::{rasterize, Mask, MaskPyramid, RegionSpec};
use crate::numerics::Tensor;
pub use crate::rng::{NoiseSource, SAMPLER_STREAM};
use crate::scheduler::{cfg_combine, make_schedule, step, GuidanceConfig, NoiseSchedule, StepKind};

/// Smallest side kept in a scene's mask pyramid.
pub const PYRAMID_MIN_SIDE: usize = 4;

#[derive(Clone, Debug)]
pub enum Backend {
    Analytic,
    Unet(Arc<UNetWeights>),
}

impl Backend {
    pub fn name(&self) -> &'static str {
        match self {
            Backend::Analytic => "analytic",
            Backend::Unet(_) => "unet",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SceneObject {
    pub region: RegionSpec,
    pub condition: Condition,
    pub hint: Option<HintMap>,
}

#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub objects: Vec<SceneObject>,
    pub global_condition: Condition,
    pub merge: MergeConfig,
    pub guidance: GuidanceConfig,
    pub steps: usize,
    pub kind: StepKind,
    pub seed: u64,
    pub backend: Backend,
}

impl SceneSpec {
    /// Analytic-backend scene with the default sampler settings.
    pub fn analytic(channels: usize, height: usize, width: usize, global: Condition) -> Self {
        Self {
            channels,
            height,
            width,
            objects: Vec::new(),
            global_condition: global,
            merge: MergeConfig::default(),
            guidance: GuidanceConfig::default(),
            steps: crate::scheduler::DEFAULT_STEPS,
            kind: StepKind::Ddim,
            seed: 0,
            backend: Backend::Analytic,
        }
    }

    pub fn canvas(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    /// Validates the scene and precomputes masks, pyramids and hints.
    pub fn prepare(&self) -> Result<PreparedScene> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config("canvas extents must be positive"));
        }
        let schedule = make_schedule(self.steps)?;
        MergeConfig::new(self.merge.alpha)?;
        GuidanceConfig::new(self.guidance.scale)?;

        let canvas = self.canvas();
        let levels = MaskPyramid::standard_levels(canvas, PYRAMID_MIN_SIDE);
        let mut masks = Vec::with_capacity(self.objects.len());
        let mut pyramids = Vec::with_capacity(self.objects.len());
        for (n, obj) in self.objects.iter().enumerate() {
            let mask = rasterize(&obj.region, canvas).map_err(|e| match e {
                Error::Region(m) => Error::Region(format!("object {n}: {m}")),
                Error::DegenerateRegion(m) => Error::DegenerateRegion(format!("object {n}: {m}")),
                other => other,
            })?;
            pyramids.push(MaskPyramid::build(&mask, &levels)?);
            masks.push(mask);
        }
        self.merge.check_masks(&masks, canvas)?;

        let shape = self.shape();
        let check_condition = |what: &str, c: &Condition| -> Result<()> {
            match (&self.backend, c) {
                (_, Condition::Empty) => Ok(()),
                (Backend::Analytic, Condition::Analytic(t)) => {
                    if t.mean().shape() != shape {
                        return Err(Error::shape(format!(
                            "{what}: target mean {:?} does not match canvas {shape:?}",
                            t.mean().shape()
                        )));
                    }
                    Ok(())
                }
                (Backend::Unet(_), Condition::Tokens(_)) => Ok(()),
                (b, _) => Err(Error::config(format!(
                    "{what}: condition kind does not match the {} backend",
                    b.name()
                ))),
            }
        };
        check_condition("global condition", &self.global_condition)?;
        for (n, obj) in self.objects.iter().enumerate() {
            check_condition(&format!("object {n} condition"), &obj.condition)?;
            if let Some(h) = &obj.hint {
                if h.active().dims() != canvas {
                    return Err(Error::shape(format!(
                        "object {n} hint does not match the canvas"
                    )));
                }
            }
        }
        if let Backend::Unet(_) = self.backend {
            if shape != [UNET_CHANNELS, UNET_CANVAS, UNET_CANVAS] {
                return Err(Error::config(format!(
                    "unet backend needs a {UNET_CHANNELS}x{UNET_CANVAS}x{UNET_CANVAS} canvas"
                )));
            }
        }
        let hints: Vec<&HintMap> = self
            .objects
            .iter()
            .filter_map(|o| o.hint.as_ref())
            .collect();
        let global_hint = HintMap::compose(&hints)?;

        Ok(PreparedScene {
            schedule,
            masks,
            pyramids,
            global_hint,
        })
    }
}

#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub schedule: NoiseSchedule,
    pub masks: Vec<Mask>,
    pub pyramids: Vec<MaskPyramid>,
    /// Union of all object hints, supplied to the whole-canvas estimate.
    pub global_hint: Option<HintMap>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub workers: usize,
    /// Keep the merged noise of every step in the report.
    pub dump_noise: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub estimator_call_count: usize,
    pub objects: usize,
    pub steps: usize,
    pub alpha: f64,
    pub guidance: f64,
    pub kind: StepKind,
    pub seed: u64,
    pub backend: &'static str,
    pub workers: usize,
    /// Wall-clock seconds per step, in sampling order (t = T first).
    pub step_seconds: Vec<f64>,
    #[serde(skip)]
    pub noise_dumps: Vec<Tensor>,
}

impl RunReport {
    /// `(N + 1) * T * (2 if guidance != 1 else 1)`.
    pub fn expected_calls(objects: usize, steps: usize, guidance: f64) -> usize {
        (objects + 1) * steps * if guidance != 1.0 { 2 } else { 1 }
    }
}

struct CountingEstimator<'a> {
    inner: &'a dyn NoiseEstimator,
    calls: AtomicUsize,
}

impl NoiseEstimator for CountingEstimator<'_> {
    fn estimate(&self, req: &EstimatorRequest<'_>) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.estimate(req)
    }
}

pub fn generate(scene: &SceneSpec) -> Result<(Tensor, RunReport)> {
    generate_with(
        scene,
        &RunOptions {
            workers: 1,
            dump_noise: false,
        },
    )
}

pub fn generate_parallel(scene: &SceneSpec, workers: usize) -> Result<(Tensor, RunReport)> {
    generate_with(
        scene,
        &RunOptions {
            workers,
            dump_noise: false,
        },
    )
}

pub fn generate_with(scene: &SceneSpec, opts: &RunOptions) -> Result<(Tensor, RunReport)> {
    if opts.workers == 0 {
        return Err(Error::config("worker count must be at least 1"));
    }
    let prepared = scene.prepare()?;
    let estimator: Box<dyn NoiseEstimator> = match &scene.backend {
        Backend::Analytic => Box::new(AnalyticEstimator::new(prepared.schedule.clone())),
        Backend::Unet(w) => Box::new(UNetEstimator::new(w.clone())),
    };
    let counter = CountingEstimator {
        inner: estimator.as_ref(),
        calls: AtomicUsize::new(0),
    };
    let pool = if opts.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(opts.workers)
                .build()
                .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?,
        )
    } else {
        None
    };

    let steps = prepared.schedule.steps();
    let noise = NoiseSource::new(scene.seed);
    let mut x = noise.gaussian_tensor(SAMPLER_STREAM, steps as u64, &scene.shape());
    let mut step_seconds = Vec::with_capacity(steps);
    let mut noise_dumps = Vec::new();
    let n_obj = scene.objects.len();

    for t in (1..=steps).rev() {
        let started = Instant::now();
        let task = |i: usize| estimate_branch(scene, &prepared, &counter, &x, t, i);
        let mut estimates: Vec<Tensor> = match &pool {
            Some(pool) => {
                pool.install(|| (0..=n_obj).into_par_iter().map(task).collect::<Result<_>>())?
            }
            None => (0..=n_obj).map(task).collect::<Result<_>>()?,
        };
        let eps_global = estimates.pop().expect("global estimate");
        let eps = merge_noises(&estimates, &prepared.masks, &eps_global, &scene.merge)?;
        if !eps.is_finite() {
            return Err(Error::NumericFailure { step: t });
        }
        x = step(&x, &eps, t, &prepared.schedule, scene.kind, &noise)?;
        if !x.is_finite() {
            return Err(Error::NumericFailure { step: t });
        }
        if opts.dump_noise {
            noise_dumps.push(eps);
        }
        step_seconds.push(started.elapsed().as_secs_f64());
    }

    let report = RunReport {
        estimator_call_count: counter.calls.load(Ordering::Relaxed),
        objects: n_obj,
        steps,
        alpha: scene.merge.alpha,
        guidance: scene.guidance.scale,
        kind: scene.kind,
        seed: scene.seed,
        backend: scene.backend.name(),
        workers: opts.workers,
        step_seconds,
        noise_dumps,
    };
    Ok((x, report))
}

/// Guided estimate for object `index`, or for the whole canvas when
/// `index == objects.len()`.
fn estimate_branch(
    scene: &SceneSpec,
    prepared: &PreparedScene,
    est: &dyn NoiseEstimator,
    x: &Tensor,
    t: usize,
    index: usize,
) -> Result<Tensor> {
    let empty = Condition::Empty;
    let (cond_req, uncond_req) = if index < scene.objects.len() {
        let obj = &scene.objects[index];
        let pyramid = &prepared.pyramids[index];
        let hint = obj.hint.as_ref();
        (
            EstimatorRequest::object(x, t, &obj.condition, &scene.global_condition, pyramid)
                .with_hint(hint),
            EstimatorRequest::object(x, t, &empty, &empty, pyramid).with_hint(hint),
        )
    } else {
        let hint = prepared.global_hint.as_ref();
        (
            EstimatorRequest::global(x, t, &scene.global_condition).with_hint(hint),
            EstimatorRequest::global(x, t, &empty).with_hint(hint),
        )
    };
    let cond = est.estimate(&cond_req)?;
    if !scene.guidance.needs_unconditional() {
        return Ok(cond);
    }
    let uncond = est.estimate(&uncond_req)?;
    cfg_combine(&uncond, &cond, scene.guidance.scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{init_weights, AnalyticTarget};

    fn target(mean: f64, sigma: f64, h: usize, w: usize) -> Condition {
        Condition::Analytic(AnalyticTarget::uniform(&[mean], sigma, h, w).unwrap())
    }

    fn two_region_scene() -> SceneSpec {
        let mut s = SceneSpec::analytic(1, 8, 8, target(0.0, 1.0, 8, 8));
        s.steps = 10;
        s.objects = vec![
            SceneObject {
                region: RegionSpec::rect(0.0, 0.0, 4.0, 8.0),
                condition: target(2.0, 0.5, 8, 8),
                hint: None,
            },
            SceneObject {
                region: RegionSpec::rect(3.0, 0.0, 8.0, 8.0),
                condition: target(-2.0, 0.5, 8, 8),
                hint: None,
            },
        ];
        s
    }

    #[test]
    fn call_counts_follow_guidance() {
        let mut s = two_region_scene();
        let (_, r) = generate(&s).unwrap();
        assert_eq!(r.estimator_call_count, 3 * 10 * 2);
        s.guidance = GuidanceConfig::new(1.0).unwrap();
        let (_, r) = generate(&s).unwrap();
        assert_eq!(r.estimator_call_count, 3 * 10);
        assert_eq!(r.step_seconds.len(), 10);
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let mut s = two_region_scene();
        s.kind = StepKind::Ancestral;
        let (a, _) = generate(&s).unwrap();
        let (b, _) = generate_parallel(&s, 3).unwrap();
        assert!(a.bit_eq(&b));
        assert!(matches!(generate_parallel(&s, 0), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_inconsistent_scenes() {
        let mut s = two_region_scene();
        s.objects[0].condition = Condition::Tokens(vec![1]);
        assert!(matches!(generate(&s), Err(Error::Config(_))));

        let mut s = two_region_scene();
        s.objects.truncate(1);
        s.merge = MergeConfig { alpha: 0.0 };
        assert!(matches!(
            generate(&s),
            Err(Error::UncoveredPixel { x: 4, y: 0 })
        ));

        let mut s = two_region_scene();
        s.objects[1].region = RegionSpec::rect(20.0, 20.0, 30.0, 30.0);
        assert!(matches!(generate(&s), Err(Error::DegenerateRegion(_))));

        let mut s = two_region_scene();
        s.backend = Backend::Unet(Arc::new(init_weights(0)));
        assert!(generate(&s).is_err());
    }

    #[test]
    fn extreme_guidance_fails_loudly() {
        let mut s = two_region_scene();
        s.guidance = GuidanceConfig::new(f64::MAX).unwrap();
        match generate(&s) {
            Err(Error::NumericFailure { step }) => assert_eq!(step, 10),
            other => panic!("expected numeric failure, got {other:?}"),
        }
    }

    #[test]
    fn noise_dumps_are_optional() {
        let s = two_region_scene();
        let (_, r) = generate_with(
            &s,
            &RunOptions {
                workers: 1,
                dump_noise: true,
            },
        )
        .unwrap();
        assert_eq!(r.noise_dumps.len(), 10);
        assert!(generate(&s).unwrap().1.noise_dumps.is_empty());
    }
}
