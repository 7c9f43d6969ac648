//! Crop-and-merge of per-object noise estimates.
//!
//! At every pixel `p` and channel `c`:
//!
//! ```text
//! eps[c, p] = (sum_n l_n[p] * eps_n[c, p] + alpha * eps_global[c, p])
//!           / (sum_n l_n[p] + alpha)
//! ```
//!
//! Contributions are accumulated in ascending object order. A pixel outside
//! every mask takes `eps_global` unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{coverage_check, Mask};
use crate::numerics::Tensor;

pub const DEFAULT_ALPHA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub alpha: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
        }
    }
}

impl MergeConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::config(format!(
                "alpha must be finite and >= 0, got {alpha}"
            )));
        }
        Ok(Self { alpha })
    }

    /// Rejects `alpha == 0` when some pixel is covered by no mask.
    pub fn check_masks(&self, masks: &[Mask], canvas: (usize, usize)) -> Result<()> {
        if self.alpha == 0.0 {
            let cov = coverage_check(masks, canvas)?;
            if let Some((x, y)) = cov.first_uncovered {
                return Err(Error::UncoveredPixel { x, y });
            }
        }
        Ok(())
    }
}

pub fn merge_noises(
    eps_objects: &[Tensor],
    masks: &[Mask],
    eps_global: &Tensor,
    cfg: &MergeConfig,
) -> Result<Tensor> {
    let (channels, h, w) = eps_global.dims3()?;
    if eps_objects.len() != masks.len() {
        return Err(Error::shape(format!(
            "merge_noises: {} noises but {} masks",
            eps_objects.len(),
            masks.len()
        )));
    }
    for (n, (e, m)) in eps_objects.iter().zip(masks).enumerate() {
        if e.shape() != eps_global.shape() {
            return Err(Error::shape(format!(
                "merge_noises: object {n} noise has shape {:?}, expected {:?}",
                e.shape(),
                eps_global.shape()
            )));
        }
        if m.dims() != (h, w) {
            return Err(Error::shape(format!(
                "merge_noises: object {n} mask is {}x{}, expected {h}x{w}",
                m.height(),
                m.width()
            )));
        }
    }
    MergeConfig::new(cfg.alpha)?.check_masks(masks, (h, w))?;

    let alpha = cfg.alpha;
    let plane = h * w;
    let mut out = eps_global.clone();
    let values = out.values_mut();
    let mut covering: Vec<usize> = Vec::with_capacity(masks.len());
    for p in 0..plane {
        covering.clear();
        covering.extend((0..masks.len()).filter(|&n| masks[n].bits()[p]));
        let Some((&first, rest)) = covering.split_first() else {
            continue;
        };
        let denom = covering.len() as f64 + alpha;
        for c in 0..channels {
            let idx = c * plane + p;
            let mut acc = eps_objects[first].values()[idx];
            for &n in rest {
                acc += eps_objects[n].values()[idx];
            }
            if alpha != 0.0 {
                acc += alpha * eps_global.values()[idx];
            }
            values[idx] = acc / denom;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rasterize, RegionSpec};
    use crate::numerics::test_support::{random_tensor, rng};

    fn boxed(x0: f64, y0: f64, x1: f64, y1: f64) -> Mask {
        rasterize(&RegionSpec::rect(x0, y0, x1, y1), (4, 4)).unwrap()
    }

    #[test]
    fn no_objects_returns_global() {
        let mut r = rng(1);
        let g = random_tensor(&mut r, &[3, 4, 4]);
        for alpha in [0.1, 1.0, 3.7] {
            let out = merge_noises(&[], &[], &g, &MergeConfig { alpha }).unwrap();
            assert!(out.bit_eq(&g));
        }
    }

    #[test]
    fn single_and_double_cover_arithmetic() {
        let mut r = rng(2);
        let g = random_tensor(&mut r, &[1, 4, 4]);
        let e1 = random_tensor(&mut r, &[1, 4, 4]);
        let e2 = random_tensor(&mut r, &[1, 4, 4]);
        let m1 = boxed(0.0, 0.0, 2.0, 2.0);
        let m2 = boxed(1.0, 0.0, 3.0, 2.0);
        let out = merge_noises(
            &[e1.clone(), e2.clone()],
            &[m1, m2],
            &g,
            &MergeConfig::default(),
        )
        .unwrap();
        let at = |t: &Tensor, x: usize, y: usize| t.values()[y * 4 + x];
        // (0,0) only in mask 1
        assert_eq!(at(&out, 0, 0), (at(&e1, 0, 0) + 0.1 * at(&g, 0, 0)) / 1.1);
        // (1,0) in both
        assert_eq!(
            at(&out, 1, 0),
            (at(&e1, 1, 0) + at(&e2, 1, 0) + 0.1 * at(&g, 1, 0)) / 2.1
        );
        // (3,3) in neither
        assert_eq!(at(&out, 3, 3), at(&g, 3, 3));
    }

    #[test]
    fn zero_alpha_requires_coverage() {
        let g = Tensor::zeros(&[1, 4, 4]);
        let e = Tensor::zeros(&[1, 4, 4]);
        let err = merge_noises(
            &[e],
            &[boxed(0.0, 0.0, 4.0, 2.0)],
            &g,
            &MergeConfig { alpha: 0.0 },
        );
        assert!(matches!(err, Err(Error::UncoveredPixel { x: 0, y: 2 })));
        assert!(matches!(
            merge_noises(&[], &[], &g, &MergeConfig { alpha: 0.0 }),
            Err(Error::UncoveredPixel { x: 0, y: 0 })
        ));
    }

    #[test]
    fn zero_alpha_tiling_is_region_exact() {
        let mut r = rng(3);
        let g = random_tensor(&mut r, &[2, 4, 4]);
        let e1 = random_tensor(&mut r, &[2, 4, 4]);
        let e2 = random_tensor(&mut r, &[2, 4, 4]);
        let (m1, m2) = (boxed(0.0, 0.0, 2.0, 4.0), boxed(2.0, 0.0, 4.0, 4.0));
        let out = merge_noises(
            &[e1.clone(), e2.clone()],
            &[m1.clone(), m2],
            &g,
            &MergeConfig { alpha: 0.0 },
        )
        .unwrap();
        for c in 0..2 {
            for p in 0..16 {
                let src = if m1.bits()[p] { &e1 } else { &e2 };
                assert_eq!(
                    out.values()[c * 16 + p].to_bits(),
                    src.values()[c * 16 + p].to_bits()
                );
            }
        }
    }

    #[test]
    fn shape_mismatches() {
        let g = Tensor::zeros(&[1, 4, 4]);
        let bad = Tensor::zeros(&[1, 4, 5]);
        let m = boxed(0.0, 0.0, 2.0, 2.0);
        assert!(matches!(
            merge_noises(&[bad], std::slice::from_ref(&m), &g, &MergeConfig::default()),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            merge_noises(&[], &[m], &g, &MergeConfig::default()),
            Err(Error::Shape(_))
        ));
        assert!(MergeConfig::new(-0.5).is_err());
    }
}
