//! Noise schedule, forward noising, reverse updates and guidance.
//!
//! Betas rise linearly from `1e-4` to `0.02` over a 1000-step horizon; a
//! `T`-step schedule visits that horizon at a constant stride starting from
//! the first training step. Step `t` is 1-based and `alpha_bar(0) == 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{NoiseSource, SAMPLER_STREAM};

pub const TRAIN_HORIZON: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;
pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_GUIDANCE: f64 = 7.5;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    /// Index into the training horizon visited at step `t` (stored at `t - 1`).
    train_index: Vec<usize>,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sqrt_alpha_bar: Vec<f64>,
    sqrt_one_minus_alpha_bar: Vec<f64>,
}

fn training_alpha_bar() -> Vec<f64> {
    let mut acc = 1.0;
    (0..TRAIN_HORIZON)
        .map(|i| {
            let beta = BETA_START + (BETA_END - BETA_START) * i as f64 / (TRAIN_HORIZON - 1) as f64;
            acc *= 1.0 - beta;
            acc
        })
        .collect()
}

pub fn make_schedule(steps: usize) -> Result<NoiseSchedule> {
    NoiseSchedule::new(steps)
}

impl NoiseSchedule {
    pub fn new(steps: usize) -> Result<Self> {
        if !(1..=TRAIN_HORIZON).contains(&steps) {
            return Err(Error::config(format!(
                "step count must be in 1..={TRAIN_HORIZON}, got {steps}"
            )));
        }
        let stride = TRAIN_HORIZON / steps;
        let train_bar = training_alpha_bar();
        let train_index: Vec<usize> = (0..steps).map(|k| k * stride).collect();
        let alpha_bar: Vec<f64> = train_index.iter().map(|&i| train_bar[i]).collect();
        let alpha: Vec<f64> = alpha_bar
            .iter()
            .enumerate()
            .map(|(k, &ab)| if k == 0 { ab } else { ab / alpha_bar[k - 1] })
            .collect();
        let beta = alpha.iter().map(|a| 1.0 - a).collect();
        Ok(Self {
            train_index,
            beta,
            alpha,
            sqrt_alpha_bar: alpha_bar.iter().map(|a| a.sqrt()).collect(),
            sqrt_one_minus_alpha_bar: alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect(),
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t < 1 || t > self.steps() {
            return Err(Error::Index(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(t - 1)
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        self.check(t).map(|_| ())
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train_index
    }

    /// `alpha_bar(t)` for `t` in `0..=T`, with `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.sqrt_alpha_bar[t - 1]
        }
    }

    pub fn sqrt_one_minus_alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.sqrt_one_minus_alpha_bar[t - 1]
        }
    }

    /// Ancestral posterior variance `beta_t (1 - abar_{t-1}) / (1 - abar_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        let k = t - 1;
        self.beta[k] * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar[k])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    #[default]
    Ddim,
    Ancestral,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub scale: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: DEFAULT_GUIDANCE,
        }
    }
}

impl GuidanceConfig {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(Error::config(format!(
                "guidance scale must be finite and >= 0, got {scale}"
            )));
        }
        Ok(Self { scale })
    }

    /// Whether the unconditional branch has to be evaluated at all.
    pub fn needs_unconditional(&self) -> bool {
        self.scale != 1.0
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: shapes differ ({:?} vs {:?})",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add_noise(x0: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape(x0, eps, "add_noise")?;
    sched.check(t)?;
    let (a, b) = (sched.sqrt_alpha_bar(t), sched.sqrt_one_minus_alpha_bar(t));
    let values = x0
        .values()
        .iter()
        .zip(eps.values())
        .map(|(&x, &e)| a * x + b * e)
        .collect();
    Tensor::new(x0.shape().to_vec(), values)
}

/// One reverse update from `x_t` to `x_{t-1}`.
///
/// DDIM is deterministic and does not touch `noise`. The ancestral update
/// draws `z` from stream 0 at label `t - 1` and adds no noise at `t == 1`.
pub fn step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    kind: StepKind,
    noise: &NoiseSource,
) -> Result<Tensor> {
    same_shape(x_t, eps_hat, "step")?;
    let k = sched.check(t)?;
    let values: Vec<f64> = match kind {
        StepKind::Ddim => {
            let (sa, sb) = (sched.sqrt_alpha_bar(t), sched.sqrt_one_minus_alpha_bar(t));
            let (pa, pb) = (
                sched.sqrt_alpha_bar(t - 1),
                sched.sqrt_one_minus_alpha_bar(t - 1),
            );
            x_t.values()
                .iter()
                .zip(eps_hat.values())
                .map(|(&x, &e)| {
                    let x0 = (x - sb * e) / sa;
                    if t == 1 {
                        x0
                    } else {
                        pa * x0 + pb * e
                    }
                })
                .collect()
        }
        StepKind::Ancestral => {
            let coef = sched.beta[k] / sched.sqrt_one_minus_alpha_bar(t);
            let inv_sqrt_alpha = 1.0 / sched.alpha[k].sqrt();
            let mean = x_t
                .values()
                .iter()
                .zip(eps_hat.values())
                .map(|(&x, &e)| inv_sqrt_alpha * (x - coef * e));
            if t == 1 {
                mean.collect()
            } else {
                let sigma = sched.posterior_variance(t).sqrt();
                let z = noise.gaussian_tensor(SAMPLER_STREAM, (t - 1) as u64, x_t.shape());
                mean.zip(z.values()).map(|(m, &z)| m + sigma * z).collect()
            }
        }
    };
    Tensor::new(x_t.shape().to_vec(), values)
}

/// `eps_uncond + g * (eps_cond - eps_uncond)`, returning the operands
/// unchanged at `g == 0` and `g == 1`.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, g: f64) -> Result<Tensor> {
    same_shape(eps_uncond, eps_cond, "cfg_combine")?;
    if g == 0.0 {
        return Ok(eps_uncond.clone());
    }
    if g == 1.0 {
        return Ok(eps_cond.clone());
    }
    let values = eps_uncond
        .values()
        .iter()
        .zip(eps_cond.values())
        .map(|(&u, &c)| u + g * (c - u))
        .collect();
    Tensor::new(eps_uncond.shape().to_vec(), values)
}
