//! JSON scene files.
//!
//! ```json
//! {
//!   "canvas": {"channels": 1, "height": 32, "width": 32},
//!   "objects": [
//!     {"region": {"box": {"x0": 0, "y0": 0, "x1": 16, "y1": 32}},
//!      "condition": {"analytic": {"mean": [1.0], "sigma": 0.5}}}
//!   ],
//!   "global": {"condition": "empty"},
//!   "sampler": {"alpha": 0.1, "steps": 50, "guidance": 7.5}
//! }
//! ```
//!
//! Unknown fields are rejected everywhere. Omitted sampler fields take the
//! library defaults.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::collage::{MergeConfig, DEFAULT_ALPHA};
use crate::error::{Error, Result};
use crate::estimators::{init_weights, load_weights, AnalyticTarget, Condition, HintMap};
use crate::geometry::{rasterize, RegionSpec};
use crate::sampler::{Backend, SceneObject, SceneSpec};
use crate::scheduler::{make_schedule, GuidanceConfig, StepKind, DEFAULT_GUIDANCE, DEFAULT_STEPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CanvasFile {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum ConditionFile {
    /// Spatially constant Gaussian target, one mean per channel.
    Analytic {
        mean: Vec<f64>,
        sigma: f64,
    },
    Tokens(Vec<u32>),
    Empty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HintFile {
    pub region: RegionSpec,
    pub value: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectFile {
    pub region: RegionSpec,
    pub condition: ConditionFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hint: Option<HintFile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalFile {
    pub condition: ConditionFile,
}

impl Default for GlobalFile {
    fn default() -> Self {
        Self {
            condition: ConditionFile::Empty,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Analytic,
    Unet,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}

fn default_guidance() -> f64 {
    DEFAULT_GUIDANCE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerFile {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_guidance")]
    pub guidance: f64,
    #[serde(default)]
    pub kind: StepKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub backend: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    /// UNet weight file, relative to the scene file. Without it the UNet
    /// backend uses the seed-0 initialization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
}

impl Default for SamplerFile {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            steps: DEFAULT_STEPS,
            guidance: DEFAULT_GUIDANCE,
            kind: StepKind::default(),
            seed: 0,
            backend: BackendKind::default(),
            workers: None,
            weights: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub canvas: CanvasFile,
    #[serde(default)]
    pub objects: Vec<ObjectFile>,
    #[serde(default)]
    pub global: GlobalFile,
    #[serde(default)]
    pub sampler: SamplerFile,
}

fn located(path: impl Into<String>) -> impl FnOnce(Error) -> Error {
    let path = path.into();
    move |e| match e {
        Error::Scene { .. } => e,
        other => Error::scene(path, other.to_string()),
    }
}

impl SceneFile {
    /// Parses JSON text; errors name the offending field path, line and column.
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            Error::scene(
                if path.is_empty() { ".".into() } else { path },
                format!("{inner}"),
            )
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Canonical form: every sampler default spelled out, fixed key order.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene files always serialize")
    }

    /// Builds and fully validates the engine scene. `base_dir` resolves a
    /// relative weights path.
    pub fn to_spec(&self, base_dir: &Path) -> Result<SceneSpec> {
        let CanvasFile {
            channels,
            height,
            width,
        } = self.canvas;
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::scene("canvas", "extents must be positive"));
        }
        let canvas = (height, width);
        let s = &self.sampler;
        let merge = MergeConfig::new(s.alpha).map_err(located("sampler.alpha"))?;
        let guidance = GuidanceConfig::new(s.guidance).map_err(located("sampler.guidance"))?;
        make_schedule(s.steps).map_err(located("sampler.steps"))?;
        if s.workers == Some(0) {
            return Err(Error::scene("sampler.workers", "must be at least 1"));
        }
        let backend = match s.backend {
            BackendKind::Analytic => {
                if s.weights.is_some() {
                    return Err(Error::scene(
                        "sampler.weights",
                        "weights only apply to the unet backend",
                    ));
                }
                Backend::Analytic
            }
            BackendKind::Unet => {
                let w = match &s.weights {
                    Some(p) => {
                        let bytes = std::fs::read(base_dir.join(p))
                            .map_err(Error::from)
                            .map_err(located("sampler.weights"))?;
                        load_weights(&bytes).map_err(located("sampler.weights"))?
                    }
                    None => init_weights(0),
                };
                Backend::Unet(Arc::new(w))
            }
        };

        let condition = |path: &str, c: &ConditionFile| -> Result<Condition> {
            match c {
                ConditionFile::Empty => Ok(Condition::Empty),
                ConditionFile::Tokens(ids) => Condition::tokens(ids.clone()).map_err(located(path)),
                ConditionFile::Analytic { mean, sigma } => {
                    if mean.len() != channels {
                        return Err(Error::scene(
                            format!("{path}.analytic.mean"),
                            format!("expected {channels} channel means, got {}", mean.len()),
                        ));
                    }
                    AnalyticTarget::uniform(mean, *sigma, height, width)
                        .map(Condition::Analytic)
                        .map_err(located(format!("{path}.analytic")))
                }
            }
        };

        let mut objects = Vec::with_capacity(self.objects.len());
        for (n, o) in self.objects.iter().enumerate() {
            let at = |f: &str| format!("objects[{n}].{f}");
            o.region.validate().map_err(located(at("region")))?;
            rasterize(&o.region, canvas).map_err(located(at("region")))?;
            let hint = match &o.hint {
                None => None,
                Some(h) => {
                    h.region.validate().map_err(located(at("hint.region")))?;
                    let active =
                        rasterize(&h.region, canvas).map_err(located(at("hint.region")))?;
                    if h.value.len() != channels {
                        return Err(Error::scene(
                            at("hint.value"),
                            format!("expected {channels} values, got {}", h.value.len()),
                        ));
                    }
                    Some(HintMap::constant(&h.value, active).map_err(located(at("hint")))?)
                }
            };
            objects.push(SceneObject {
                region: o.region.clone(),
                condition: condition(&at("condition"), &o.condition)?,
                hint,
            });
        }

        let spec = SceneSpec {
            channels,
            height,
            width,
            objects,
            global_condition: condition("global.condition", &self.global.condition)?,
            merge,
            guidance,
            steps: s.steps,
            kind: s.kind,
            seed: s.seed,
            backend,
        };
        spec.prepare().map_err(|e| match e {
            Error::UncoveredPixel { .. } => Error::scene("sampler.alpha", e.to_string()),
            other => Error::scene(".", other.to_string()),
        })?;
        Ok(spec)
    }
}
