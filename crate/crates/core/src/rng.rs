//! Counter-based Gaussian noise.
//!
//! Every draw is a pure function of `(seed, stream, t, index)`, so any
//! subset of draws can be produced in any order, on any thread, with the
//! same result. Stream 0 carries the initial image `x_T` (labelled `t = T`)
//! and the ancestral-step noise (labelled `t - 1`).

use crate::numerics::Tensor;

pub const SAMPLER_STREAM: u64 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseSource {
    seed: u64,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn key(&self, stream: u64, t: u64) -> u64 {
        splitmix(splitmix(splitmix(self.seed) ^ stream) ^ t.wrapping_mul(GOLDEN))
    }

    fn bits(key: u64, counter: u64) -> u64 {
        splitmix(key ^ splitmix(counter))
    }

    /// Uniform draw in `(0, 1]`.
    pub fn uniform(&self, stream: u64, t: u64, index: u64) -> f64 {
        Self::uniform_keyed(self.key(stream, t), index)
    }

    fn uniform_keyed(key: u64, counter: u64) -> f64 {
        ((Self::bits(key, counter) >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw. Indices `2k` and `2k + 1` are the cosine and sine
    /// halves of one Box–Muller pair.
    pub fn gaussian(&self, stream: u64, t: u64, index: u64) -> f64 {
        Self::gaussian_keyed(self.key(stream, t), index)
    }

    fn gaussian_keyed(key: u64, index: u64) -> f64 {
        let pair = index / 2;
        let u1 = Self::uniform_keyed(key, 2 * pair);
        let u2 = Self::uniform_keyed(key, 2 * pair + 1);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        if index.is_multiple_of(2) {
            r * theta.cos()
        } else {
            r * theta.sin()
        }
    }

    pub fn gaussian_tensor(&self, stream: u64, t: u64, shape: &[usize]) -> Tensor {
        let key = self.key(stream, t);
        Tensor::from_fn(shape, |i| Self::gaussian_keyed(key, i as u64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_coordinates_same_draws() {
        let a = NoiseSource::new(42).gaussian_tensor(3, 17, &[64]);
        let b = NoiseSource::new(42).gaussian_tensor(3, 17, &[64]);
        assert!(a.bit_eq(&b));
        for i in [0u64, 5, 63] {
            assert_eq!(
                NoiseSource::new(42).gaussian(3, 17, i).to_bits(),
                a.values()[i as usize].to_bits()
            );
        }
    }

    #[test]
    fn coordinates_decorrelate() {
        let src = NoiseSource::new(1);
        let a = src.gaussian(0, 5, 0);
        assert_ne!(a, src.gaussian(1, 5, 0));
        assert_ne!(a, src.gaussian(0, 6, 0));
        assert_ne!(a, NoiseSource::new(2).gaussian(0, 5, 0));
    }

    #[test]
    fn distinct_seeds_give_distinct_first_draws() {
        let firsts: Vec<u64> = (0..100)
            .map(|s| {
                NoiseSource::new(s)
                    .gaussian(SAMPLER_STREAM, 50, 0)
                    .to_bits()
            })
            .collect();
        let mut dedup = firsts.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), firsts.len());
    }

    #[test]
    fn uniform_is_in_half_open_unit_interval() {
        let src = NoiseSource::new(9);
        for i in 0..10_000 {
            let u = src.uniform(2, 0, i);
            assert!(u > 0.0 && u <= 1.0);
        }
    }

    #[test]
    fn moments_of_a_million_draws() {
        let n = 1_000_000usize;
        let z = NoiseSource::new(2024).gaussian_tensor(7, 1, &[n]);
        let mean = z.values().iter().sum::<f64>() / n as f64;
        let var = z.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // Standard errors: 1/sqrt(n) for the mean, sqrt(2/n) for the variance.
        let se_mean = 1.0 / (n as f64).sqrt();
        let se_var = (2.0 / n as f64).sqrt();
        assert!(mean.abs() < 4.0 * se_mean, "mean {mean}");
        assert!((var - 1.0).abs() < 4.0 * se_var, "var {var}");
    }
}
