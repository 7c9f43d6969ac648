//! Region-level fidelity scores for sampled images with analytic targets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::Condition;
use crate::geometry::{coverage_counts, Mask};
use crate::numerics::Tensor;
use crate::sampler::SceneSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-channel mean and population standard deviation over the set pixels.
pub fn region_stats(image: &Tensor, mask: &Mask) -> Result<RegionStats> {
    let (c, h, w) = image.dims3()?;
    if mask.dims() != (h, w) {
        return Err(Error::shape(format!(
            "mask is {}x{}, image is {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    let n = mask.count();
    if n == 0 {
        return Err(Error::DegenerateRegion(
            "statistics over an empty mask".into(),
        ));
    }
    let plane = h * w;
    let mut mean = Vec::with_capacity(c);
    let mut std = Vec::with_capacity(c);
    for ch in 0..c {
        let px = || {
            (0..plane)
                .filter(|&p| mask.bits()[p])
                .map(move |p| image.values()[ch * plane + p])
        };
        let m = px().sum::<f64>() / n as f64;
        let var = px().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        mean.push(m);
        std.push(var.sqrt());
    }
    Ok(RegionStats { mean, std })
}

/// `exp(-|mean - target|^2 / (2 sigma^2 C))`; with `sigma == 0` the score is 1
/// for an exact match and 0 otherwise.
pub fn match_score(region_mean: &[f64], target_mean: &[f64], sigma: f64) -> f64 {
    let c = region_mean.len() as f64;
    let d2: f64 = region_mean
        .iter()
        .zip(target_mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if sigma == 0.0 {
        return if d2 == 0.0 { 1.0 } else { 0.0 };
    }
    (-d2 / (2.0 * sigma * sigma * c)).exp()
}

pub fn condition_match_score(image: &Tensor, mask: &Mask, target: &Condition) -> Result<f64> {
    let Condition::Analytic(t) = target else {
        return Err(Error::config("match score needs an analytic target"));
    };
    let stats = region_stats(image, mask)?;
    let (mu, sigma) = t.summary_over(mask)?;
    Ok(match_score(&stats.mean, &mu, sigma))
}

fn nearest(v: &[f64], targets: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, t) in targets.iter().enumerate() {
        let d: f64 = v.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

fn check_distinct(targets: &[Vec<f64>]) -> Result<()> {
    for i in 0..targets.len() {
        for j in i + 1..targets.len() {
            if targets[i] == targets[j] {
                return Err(Error::config(format!(
                    "targets of objects {i} and {j} coincide; layout accuracy is undefined"
                )));
            }
        }
    }
    Ok(())
}

fn pixel(image: &Tensor, p: usize) -> Vec<f64> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    (0..c).map(|ch| image.values()[ch * h * w + p]).collect()
}

/// Over pixels owned by exactly one mask, the fraction whose nearest target
/// (Euclidean over channels) is the owner's. Pixels in overlaps or outside
/// every mask are skipped. Returns `None` when no pixel is singly owned.
pub fn layout_accuracy_with(
    image: &Tensor,
    masks: &[Mask],
    targets: &[Vec<f64>],
) -> Result<Option<f64>> {
    let (_, h, w) = image.dims3()?;
    if masks.len() != targets.len() {
        return Err(Error::shape("one target per mask required"));
    }
    check_distinct(targets)?;
    let counts = coverage_counts(masks, (h, w))?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, _) in counts.iter().enumerate().filter(|(_, &c)| c == 1) {
        let owner = masks.iter().position(|m| m.bits()[p]).unwrap();
        total += 1;
        hit += (nearest(&pixel(image, p), targets) == owner) as usize;
    }
    Ok((total > 0).then(|| hit as f64 / total as f64))
}

fn object_targets(scene: &SceneSpec, masks: &[Mask]) -> Result<Vec<(Vec<f64>, f64)>> {
    scene
        .objects
        .iter()
        .zip(masks)
        .enumerate()
        .map(|(n, (o, m))| match &o.condition {
            Condition::Analytic(t) => t.summary_over(m),
            _ => Err(Error::config(format!(
                "object {n} has no analytic target to score against"
            ))),
        })
        .collect()
}

pub fn layout_accuracy(image: &Tensor, scene: &SceneSpec) -> Result<f64> {
    let prepared = scene.prepare()?;
    let targets: Vec<Vec<f64>> = object_targets(scene, &prepared.masks)?
        .into_iter()
        .map(|(m, _)| m)
        .collect();
    layout_accuracy_with(image, &prepared.masks, &targets)?
        .ok_or_else(|| Error::config("no pixel belongs to exactly one region"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub object: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub match_score: f64,
    /// Fraction of the region's pixels nearest to this object's target.
    pub assigned_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub regions: Vec<RegionScore>,
    pub layout_accuracy: Option<f64>,
    pub overlap_pixels_excluded: usize,
}

/// Scores every object of an analytic scene against `image`.
pub fn evaluate(image: &Tensor, scene: &SceneSpec) -> Result<Metrics> {
    if image.shape() != scene.shape() {
        return Err(Error::shape(format!(
            "image shape {:?} does not match canvas {:?}",
            image.shape(),
            scene.shape()
        )));
    }
    let prepared = scene.prepare()?;
    let targets = object_targets(scene, &prepared.masks)?;
    let means: Vec<Vec<f64>> = targets.iter().map(|(m, _)| m.clone()).collect();
    let mut regions = Vec::with_capacity(targets.len());
    for (n, (mask, (mu, sigma))) in prepared.masks.iter().zip(&targets).enumerate() {
        let stats = region_stats(image, mask)?;
        let set: Vec<usize> = (0..mask.bits().len()).filter(|&p| mask.bits()[p]).collect();
        let own = set
            .iter()
            .filter(|&&p| nearest(&pixel(image, p), &means) == n)
            .count();
        regions.push(RegionScore {
            object: n,
            match_score: match_score(&stats.mean, mu, *sigma),
            mean: stats.mean,
            std: stats.std,
            assigned_fraction: own as f64 / set.len() as f64,
        });
    }
    let layout_accuracy = if means.len() >= 2 {
        layout_accuracy_with(image, &prepared.masks, &means)?
    } else {
        None
    };
    let overlap_pixels_excluded = coverage_counts(&prepared.masks, scene.canvas())?
        .iter()
        .filter(|&&c| c > 1)
        .count();
    Ok(Metrics {
        regions,
        layout_accuracy,
        overlap_pixels_excluded,
    })
}
