use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scheduler::NoiseSchedule;

use super::{AnalyticTarget, Condition, EstimatorRequest};

/// Mean field for a request, with any hint painted over it.
fn effective_target(req: &EstimatorRequest<'_>) -> Result<AnalyticTarget> {
    let (c, h, w) = req.x_t.dims3()?;
    let target = match req.condition {
        Condition::Analytic(t) => t.clone(),
        Condition::Empty => AnalyticTarget::prior(c, h, w),
        Condition::Tokens(_) => {
            return Err(Error::config(
                "analytic backend needs an analytic or empty condition, got tokens",
            ))
        }
    };
    if target.mean.shape() != req.x_t.shape() {
        return Err(Error::shape(format!(
            "target mean {:?} does not match x_t {:?}",
            target.mean.shape(),
            req.x_t.shape()
        )));
    }
    let Some(hint) = req.hint else {
        return Ok(target);
    };
    if hint.values.shape() != req.x_t.shape() {
        return Err(Error::shape(format!(
            "analytic hint must have shape {:?}, got {:?}",
            req.x_t.shape(),
            hint.values.shape()
        )));
    }
    let plane = h * w;
    let mut mean = target.mean;
    for p in (0..plane).filter(|&p| hint.active.bits()[p]) {
        for ch in 0..c {
            mean.values_mut()[ch * plane + p] = hint.values.values()[ch * plane + p];
        }
    }
    Ok(AnalyticTarget {
        mean,
        sigma: target.sigma,
    })
}

/// `sqrt(1 - abar) (x - sqrt(abar) mu) / (abar sigma^2 + 1 - abar)`, the
/// minimum-error noise prediction under data prior `N(mu, sigma^2)`.
fn gaussian_eps(x: f64, mu: f64, sigma: f64, abar: f64) -> f64 {
    (1.0 - abar).sqrt() * (x - abar.sqrt() * mu) / (abar * sigma * sigma + 1.0 - abar)
}

/// Per-pixel optimal predictor; the empty condition means the `N(0, 1)` prior.
pub fn analytic_eps(req: &EstimatorRequest<'_>, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_timestep(req.t)?;
    let (_, h, w) = req.x_t.dims3()?;
    let target = effective_target(req)?;
    let abar = sched.alpha_bar(req.t);
    let plane = h * w;
    let mean = target.mean.values();
    let sigma = target.sigma.values();
    Ok(Tensor::from_fn(req.x_t.shape(), |i| {
        gaussian_eps(req.x_t.values()[i], mean[i], sigma[i % plane], abar)
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub target: AnalyticTarget,
}

/// Optimal predictor when every scalar entry is independently drawn from
/// `sum_k w_k N(mu_k, sigma_k^2)`. Uses only `x_t` and `t` from the request.
pub fn analytic_mixture_eps(
    req: &EstimatorRequest<'_>,
    components: &[MixtureComponent],
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if components.is_empty() {
        return Err(Error::config("mixture needs at least one component"));
    }
    if components
        .iter()
        .any(|c| !(c.weight > 0.0 && c.weight.is_finite()))
    {
        return Err(Error::config("mixture weights must be positive"));
    }
    let total: f64 = components.iter().map(|c| c.weight).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "mixture weights must sum to 1, got {total}"
        )));
    }
    for c in components {
        if c.target.mean.shape() != req.x_t.shape() {
            return Err(Error::shape("mixture component does not match x_t"));
        }
    }
    sched.check_timestep(req.t)?;
    let (_, h, w) = req.x_t.dims3()?;
    let plane = h * w;
    let abar = sched.alpha_bar(req.t);
    let sqrt_abar = abar.sqrt();

    let mut log_r = vec![0.0; components.len()];
    Ok(Tensor::from_fn(req.x_t.shape(), |i| {
        let x = req.x_t.values()[i];
        if let [only] = components {
            let c = &only.target;
            return gaussian_eps(x, c.mean.values()[i], c.sigma.values()[i % plane], abar);
        }
        for (lr, comp) in log_r.iter_mut().zip(components) {
            let s = comp.target.sigma.values()[i % plane];
            let var = abar * s * s + 1.0 - abar;
            let d = x - sqrt_abar * comp.target.mean.values()[i];
            *lr = comp.weight.ln() - 0.5 * var.ln() - 0.5 * d * d / var;
        }
        let max = log_r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = log_r.iter().map(|l| (l - max).exp()).sum();
        log_r
            .iter()
            .zip(components)
            .map(|(l, comp)| {
                let r = (l - max).exp() / z;
                r * gaussian_eps(
                    x,
                    comp.target.mean.values()[i],
                    comp.target.sigma.values()[i % plane],
                    abar,
                )
            })
            .sum()
    }))
}
