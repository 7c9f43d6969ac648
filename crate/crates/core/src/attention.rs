//! Cross-attention and region-masked cross-attention.
//!
//! Masked attention splits the query rows of one attention layer into the
//! rows inside an object region and the rest. Rows inside attend to the
//! object's keys/values, rows outside to the global condition's. Each output
//! row therefore depends on exactly one condition.

use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, Tensor};

/// How the two branches of masked attention are recombined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskedMode {
    /// Each row takes the output of the branch that owns it.
    #[default]
    Select,
    /// Zero the query rows of the other region in each branch, run both
    /// attentions over all rows and add the results. Zeroed query rows still
    /// produce the mean value row, so each branch leaks into the other region.
    LiteralSum,
}

fn check_inputs(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize)> {
    let (rows, d) = q.dims2()?;
    let (m, dk) = k.dims2()?;
    let (mv, _) = v.dims2()?;
    if dk != d {
        return Err(Error::shape(format!(
            "attention: query width {d} differs from key width {dk}"
        )));
    }
    if mv != m {
        return Err(Error::shape(format!("attention: {m} keys but {mv} values")));
    }
    Ok((rows, d, m))
}

/// Attention output for one query row, written into `out`.
fn attend_row(
    q: &[f64],
    k: &Tensor,
    v: &Tensor,
    scale: f64,
    weights: &mut Vec<f64>,
    out: &mut [f64],
) {
    let m = k.shape()[0];
    weights.clear();
    weights.extend((0..m).map(|j| {
        let mut s = 0.0;
        for (a, b) in q.iter().zip(k.row(j)) {
            s += a * b;
        }
        s * scale
    }));
    softmax_in_place(weights);
    out.iter_mut().for_each(|o| *o = 0.0);
    for (j, &wj) in weights.iter().enumerate() {
        for (o, &vv) in out.iter_mut().zip(v.row(j)) {
            *o += wj * vv;
        }
    }
}

/// `softmax(Q K^T / sqrt(d))`, the row-stochastic attention weights.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (rows, d, m) = check_inputs(q, k, k)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Tensor::zeros(&[rows, m]);
    let mut w = Vec::with_capacity(m);
    for i in 0..rows {
        w.clear();
        w.extend((0..m).map(|j| {
            let mut s = 0.0;
            for (a, b) in q.row(i).iter().zip(k.row(j)) {
                s += a * b;
            }
            s * scale
        }));
        softmax_in_place(&mut w);
        out.values_mut()[i * m..(i + 1) * m].copy_from_slice(&w);
    }
    Ok(out)
}

/// `softmax(Q K^T / sqrt(d)) V`.
pub fn cross_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (rows, d, m) = check_inputs(q, k, v)?;
    let dv = v.shape()[1];
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Tensor::zeros(&[rows, dv]);
    let mut w = Vec::with_capacity(m);
    for (i, orow) in out.values_mut().chunks_mut(dv).enumerate() {
        attend_row(q.row(i), k, v, scale, &mut w, orow);
    }
    Ok(out)
}

pub fn masked_cross_attention(
    q: &Tensor,
    row_mask: &[usize],
    k_obj: &Tensor,
    v_obj: &Tensor,
    k_global: &Tensor,
    v_global: &Tensor,
) -> Result<Tensor> {
    masked_cross_attention_with(
        MaskedMode::Select,
        q,
        row_mask,
        k_obj,
        v_obj,
        k_global,
        v_global,
    )
}

pub fn masked_cross_attention_with(
    mode: MaskedMode,
    q: &Tensor,
    row_mask: &[usize],
    k_obj: &Tensor,
    v_obj: &Tensor,
    k_global: &Tensor,
    v_global: &Tensor,
) -> Result<Tensor> {
    let (rows, d, _) = check_inputs(q, k_obj, v_obj)?;
    check_inputs(q, k_global, v_global)?;
    let dv = v_obj.shape()[1];
    if v_global.shape()[1] != dv {
        return Err(Error::shape(format!(
            "masked attention: value widths differ ({dv} vs {})",
            v_global.shape()[1]
        )));
    }
    let mut inside = vec![false; rows];
    for &r in row_mask {
        if r >= rows {
            return Err(Error::Index(format!(
                "row mask index {r} out of range for {rows} query rows"
            )));
        }
        inside[r] = true;
    }

    match mode {
        MaskedMode::Select => {
            let scale = 1.0 / (d as f64).sqrt();
            let mut out = Tensor::zeros(&[rows, dv]);
            let mut w = Vec::new();
            for (i, orow) in out.values_mut().chunks_mut(dv).enumerate() {
                let (k, v) = if inside[i] {
                    (k_obj, v_obj)
                } else {
                    (k_global, v_global)
                };
                attend_row(q.row(i), k, v, scale, &mut w, orow);
            }
            Ok(out)
        }
        MaskedMode::LiteralSum => {
            let mut q_obj = q.clone();
            let mut q_rest = q.clone();
            for (i, &is_in) in inside.iter().enumerate() {
                let zeroed = if is_in { &mut q_rest } else { &mut q_obj };
                zeroed.values_mut()[i * d..(i + 1) * d].fill(0.0);
            }
            let a = cross_attention(&q_obj, k_obj, v_obj)?;
            let b = cross_attention(&q_rest, k_global, v_global)?;
            crate::numerics::add(&a, &b)
        }
    }
}
