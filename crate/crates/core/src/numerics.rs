//! Dense row-major `f64` tensors and the handful of kernels the engine needs.
//!
//! Every kernel uses a fixed loop order, so identical inputs always produce
//! bit-identical outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        check_extents(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: (0..n).map(f).collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Equality on the IEEE bit patterns, so `-0.0 != 0.0` and NaNs compare by payload.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!(
                "expected a 2-D tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// `(channels, height, width)` of a 3-D tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(format!(
                "expected a 3-D tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.values[i * cols..(i + 1) * cols]
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        Ok(Tensor::from_fn(&[c, r], |i| {
            let (j, k) = (i / r, i % r);
            self.values[k * c + j]
        }))
    }

    /// Reinterprets `C×H×W` as `(H·W)×C` feature rows.
    pub fn chw_to_rows(&self) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        let hw = h * w;
        Ok(Tensor::from_fn(&[hw, c], |i| {
            let (p, ch) = (i / c, i % c);
            self.values[ch * hw + p]
        }))
    }

    /// Inverse of [`Tensor::chw_to_rows`].
    pub fn rows_to_chw(&self, h: usize, w: usize) -> Result<Tensor> {
        let (hw, c) = self.dims2()?;
        if hw != h * w {
            return Err(Error::shape(format!(
                "{hw} rows cannot be laid out as {h}x{w}"
            )));
        }
        Ok(Tensor::from_fn(&[c, h, w], |i| {
            let (ch, p) = (i / hw, i % hw);
            self.values[p * c + ch]
        }))
    }
}

fn check_extents(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::shape(format!(
            "extents must be positive and rank at least 1, got {shape:?}"
        )));
    }
    Ok(())
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(format!(
            "{op}: operand shapes differ ({:?} vs {:?})",
            a.shape, b.shape
        )));
    }
    Ok(())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (r, k) = a.dims2()?;
    let (k2, c) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul: inner extents differ ({r}x{k} times {k2}x{c})"
        )));
    }
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let arow = &a.values[i * k..(i + 1) * k];
        let orow = &mut out[i * c..(i + 1) * c];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b.values[kk * c..(kk + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![r, c], out)
}

/// In-place max-subtracted softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (_, c) = a.dims2()?;
    let mut out = a.clone();
    for row in out.values.chunks_mut(c) {
        softmax_in_place(row);
    }
    Ok(out)
}

/// 3×3 cross-correlation with zero padding of one ("same" output size).
pub fn conv2d(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (cin, h, wd) = x.dims3()?;
    let (cout, wcin, kh, kw) = match w.shape[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(Error::shape(format!(
                "conv2d: kernel must be 4-D, got {:?}",
                w.shape
            )))
        }
    };
    if (kh, kw) != (3, 3) {
        return Err(Error::shape(format!(
            "conv2d: only 3x3 kernels are supported, got {kh}x{kw}"
        )));
    }
    if wcin != cin {
        return Err(Error::shape(format!(
            "conv2d: input has {cin} channels, kernel expects {wcin}"
        )));
    }
    if bias.shape[..] != [cout] {
        return Err(Error::shape(format!(
            "conv2d: bias shape {:?} does not match {cout} output channels",
            bias.shape
        )));
    }
    let plane = h * wd;
    let mut out = vec![0.0; cout * plane];
    for co in 0..cout {
        let b = bias.values[co];
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = b;
                for ci in 0..cin {
                    let kbase = (co * cin + ci) * 9;
                    let xbase = ci * plane;
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= wd as isize {
                                continue;
                            }
                            acc += w.values[kbase + ky * 3 + kx]
                                * x.values[xbase + sy as usize * wd + sx as usize];
                        }
                    }
                }
                out[co * plane + y * wd + xx] = acc;
            }
        }
    }
    Tensor::new(vec![cout, h, wd], out)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn layer_norm(x: &Tensor, gain: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
    let (_, d) = x.dims2()?;
    if gain.shape[..] != [d] || shift.shape[..] != [d] {
        return Err(Error::shape(format!(
            "layer_norm: gain {:?} / shift {:?} must both be [{d}]",
            gain.shape, shift.shape
        )));
    }
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::config(format!(
            "layer_norm: eps must be > 0, got {eps}"
        )));
    }
    let mut out = x.clone();
    for row in out.values.chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gain.values[j] + shift.values[j];
        }
    }
    Ok(out)
}

fn zip_with(a: &Tensor, b: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    same_shape(a, b, op)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        values: a
            .values
            .iter()
            .zip(&b.values)
            .map(|(&x, &y)| f(x, y))
            .collect(),
    })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "sub", |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "mul", |x, y| x * y)
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "div")?;
    if let Some(index) = b.values.iter().position(|&v| v == 0.0) {
        return Err(Error::DivisionByZero { index });
    }
    zip_with(a, b, "div", |x, y| x / y)
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    a.map(|v| v * s)
}

pub fn silu(a: &Tensor) -> Tensor {
    a.map(|v| v / (1.0 + (-v).exp()))
}

impl Tensor {
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::Tensor;

    pub fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
    }
}
