//! Noise estimators: `eps_n(x_t | t, l_n, s_n)` for objects and
//! `eps_global(x_t | t, s_global)` for the whole canvas.
//!
//! Two backends share one request type: a closed-form Gaussian-field
//! predictor and a small forward-only cross-attention UNet.

mod analytic;
mod unet;

use std::sync::Arc;

pub use analytic::{analytic_eps, analytic_mixture_eps, MixtureComponent};
pub use unet::{
    init_weights, load_weights, save_weights, UNetOutput, UNetWeights, ATTN_DIM, UNET_CANVAS,
    UNET_CHANNELS, UNET_HINT_CHANNELS, WEIGHTS_MAGIC, WEIGHTS_VERSION,
};

use crate::error::{Error, Result};
use crate::geometry::{Mask, MaskPyramid};
use crate::numerics::Tensor;
use crate::scheduler::NoiseSchedule;

pub const VOCAB_SIZE: usize = 64;
pub const MAX_TOKENS: usize = 8;
/// Token used in place of an empty sequence on the UNet text path.
pub const NULL_TOKEN: u32 = 0;

/// Per-pixel Gaussian target `N(mean, sigma^2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticTarget {
    mean: Tensor,
    sigma: Tensor,
}

impl AnalyticTarget {
    /// `mean` is `C×H×W`, `sigma` is `H×W` and shared across channels.
    pub fn new(mean: Tensor, sigma: Tensor) -> Result<Self> {
        let (_, h, w) = mean.dims3()?;
        if sigma.shape() != [h, w] {
            return Err(Error::shape(format!(
                "sigma field must be [{h}, {w}], got {:?}",
                sigma.shape()
            )));
        }
        if !mean.is_finite() {
            return Err(Error::config("target mean must be finite"));
        }
        if !sigma.values().iter().all(|s| s.is_finite() && *s >= 0.0) {
            return Err(Error::config("target sigma must be finite and >= 0"));
        }
        Ok(Self { mean, sigma })
    }

    /// Spatially constant target.
    pub fn uniform(channel_means: &[f64], sigma: f64, height: usize, width: usize) -> Result<Self> {
        let plane = height * width;
        let mean = Tensor::from_fn(&[channel_means.len(), height, width], |i| {
            channel_means[i / plane]
        });
        Self::new(mean, Tensor::full(&[height, width], sigma))
    }

    /// Standard normal prior used by the unconditional branch.
    pub fn prior(channels: usize, height: usize, width: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels, height, width]),
            sigma: Tensor::full(&[height, width], 1.0),
        }
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn sigma(&self) -> &Tensor {
        &self.sigma
    }

    /// Per-channel mean of the target and average sigma over the mask.
    pub fn summary_over(&self, mask: &Mask) -> Result<(Vec<f64>, f64)> {
        let (c, h, w) = self.mean.dims3()?;
        if mask.dims() != (h, w) {
            return Err(Error::shape("target summary: mask resolution differs"));
        }
        let n = mask.count();
        if n == 0 {
            return Err(Error::DegenerateRegion("empty mask".into()));
        }
        let plane = h * w;
        let means = (0..c)
            .map(|ch| {
                (0..plane)
                    .filter(|&p| mask.bits()[p])
                    .map(|p| self.mean.values()[ch * plane + p])
                    .sum::<f64>()
                    / n as f64
            })
            .collect();
        let sigma = (0..plane)
            .filter(|&p| mask.bits()[p])
            .map(|p| self.sigma.values()[p])
            .sum::<f64>()
            / n as f64;
        Ok((means, sigma))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Condition {
    Analytic(AnalyticTarget),
    Tokens(Vec<u32>),
    Empty,
}

impl Condition {
    pub fn tokens(ids: Vec<u32>) -> Result<Self> {
        if ids.is_empty() || ids.len() > MAX_TOKENS {
            return Err(Error::config(format!(
                "token sequences hold 1..={MAX_TOKENS} ids, got {}",
                ids.len()
            )));
        }
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= VOCAB_SIZE) {
            return Err(Error::config(format!(
                "token id {bad} outside vocabulary of {VOCAB_SIZE}"
            )));
        }
        Ok(Condition::Tokens(ids))
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, Condition::Empty)
    }
}

/// Spatial side condition: `values` is `C_h×H×W`, applied where `active` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct HintMap {
    values: Tensor,
    active: Mask,
}

impl HintMap {
    pub fn new(values: Tensor, active: Mask) -> Result<Self> {
        let (_, h, w) = values.dims3()?;
        if active.dims() != (h, w) {
            return Err(Error::shape(format!(
                "hint mask is {}x{}, values are {h}x{w}",
                active.height(),
                active.width()
            )));
        }
        if !values.is_finite() {
            return Err(Error::config("hint values must be finite"));
        }
        Ok(Self { values, active })
    }

    /// A hint that paints `value` (one entry per channel) over `active`.
    pub fn constant(value: &[f64], active: Mask) -> Result<Self> {
        let (h, w) = active.dims();
        let plane = h * w;
        let values = Tensor::from_fn(&[value.len(), h, w], |i| {
            if active.bits()[i % plane] {
                value[i / plane]
            } else {
                0.0
            }
        });
        Self::new(values, active)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn active(&self) -> &Mask {
        &self.active
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    /// Union of several hints; where they overlap the later hint wins.
    pub fn compose(hints: &[&HintMap]) -> Result<Option<HintMap>> {
        let Some((first, rest)) = hints.split_first() else {
            return Ok(None);
        };
        let mut out = (*first).clone();
        let (c, h, w) = out.values.dims3()?;
        let plane = h * w;
        for hint in rest {
            if hint.values.shape() != out.values.shape() {
                return Err(Error::shape("hints to compose must share a shape"));
            }
            for p in (0..plane).filter(|&p| hint.active.bits()[p]) {
                for ch in 0..c {
                    out.values.values_mut()[ch * plane + p] = hint.values.values()[ch * plane + p];
                }
            }
            out.active = out.active.union(&hint.active)?;
        }
        Ok(Some(out))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    /// Estimating `eps_n` for one layout object.
    Object,
    /// Estimating `eps_global` for the whole canvas.
    Global,
}

#[derive(Clone, Copy, Debug)]
pub struct EstimatorRequest<'a> {
    pub x_t: &'a Tensor,
    pub t: usize,
    pub branch: Branch,
    pub condition: &'a Condition,
    pub global_condition: &'a Condition,
    /// Object region at canvas and attention resolutions (object branch only).
    pub mask_pyramid: Option<&'a MaskPyramid>,
    pub hint: Option<&'a HintMap>,
}

impl<'a> EstimatorRequest<'a> {
    pub fn global(x_t: &'a Tensor, t: usize, condition: &'a Condition) -> Self {
        Self {
            x_t,
            t,
            branch: Branch::Global,
            condition,
            global_condition: condition,
            mask_pyramid: None,
            hint: None,
        }
    }

    pub fn object(
        x_t: &'a Tensor,
        t: usize,
        condition: &'a Condition,
        global_condition: &'a Condition,
        mask_pyramid: &'a MaskPyramid,
    ) -> Self {
        Self {
            x_t,
            t,
            branch: Branch::Object,
            condition,
            global_condition,
            mask_pyramid: Some(mask_pyramid),
            hint: None,
        }
    }

    pub fn with_hint(mut self, hint: Option<&'a HintMap>) -> Self {
        self.hint = hint;
        self
    }
}

pub trait NoiseEstimator: Send + Sync {
    fn estimate(&self, req: &EstimatorRequest<'_>) -> Result<Tensor>;
}

/// Exact predictor for per-pixel Gaussian targets.
#[derive(Clone, Debug)]
pub struct AnalyticEstimator {
    schedule: NoiseSchedule,
}

impl AnalyticEstimator {
    pub fn new(schedule: NoiseSchedule) -> Self {
        Self { schedule }
    }
}

impl NoiseEstimator for AnalyticEstimator {
    fn estimate(&self, req: &EstimatorRequest<'_>) -> Result<Tensor> {
        analytic_eps(req, &self.schedule)
    }
}

#[derive(Clone, Debug)]
pub struct UNetEstimator {
    weights: Arc<UNetWeights>,
}

impl UNetEstimator {
    pub fn new(weights: Arc<UNetWeights>) -> Self {
        Self { weights }
    }

    pub fn weights(&self) -> &UNetWeights {
        &self.weights
    }
}

impl NoiseEstimator for UNetEstimator {
    fn estimate(&self, req: &EstimatorRequest<'_>) -> Result<Tensor> {
        unet::unet_eps(req, &self.weights)
    }
}
