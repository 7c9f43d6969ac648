//! Forward-only toy UNet with one masked cross-attention layer.
//!
//! Fixed architecture for a 3×32×32 canvas:
//!
//! ```text
//! [x_t ; hint] (6ch) -> stem conv (16ch)
//!   -> res block @32 (time-conditioned)                 = skip
//!   -> 2x2 avg pool -> conv (32ch) -> res block @16
//!   -> layer norm -> Q, tokens -> K/V -> (masked) cross-attention -> out proj, residual
//!   -> nearest 2x upsample -> conv (16ch) + skip -> SiLU -> conv head (3ch)
//! ```
//!
//! The weight file is little-endian: magic `NCUW`, `u32` version, then one
//! section per tensor until end of file: `u32` name length, UTF-8 name,
//! `u32` rank, `u32` extents, raw `f64` values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{cross_attention, masked_cross_attention};
use crate::error::{Error, Result};
use crate::geometry::mask_to_rows;
use crate::numerics::{self, conv2d, layer_norm, matmul, silu, Tensor, LAYER_NORM_EPS};

use super::{Branch, Condition, EstimatorRequest, NULL_TOKEN, VOCAB_SIZE};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"NCUW";
pub const WEIGHTS_VERSION: u32 = 1;
pub const UNET_CANVAS: usize = 32;
pub const UNET_CHANNELS: usize = 3;
pub const UNET_HINT_CHANNELS: usize = 3;
pub const ATTN_DIM: usize = 32;
const TIME_DIM: usize = 32;
const WIDTH_HI: usize = 16;
const WIDTH_LO: usize = 32;
const LOW_RES: usize = UNET_CANVAS / 2;

enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Uniform(f64),
    Const(f64),
}

fn layout() -> Vec<(&'static str, Vec<usize>, Init)> {
    use Init::*;
    let conv = |o: usize, i: usize| (vec![o, i, 3, 3], FanIn(i * 9));
    let mut v = Vec::new();
    let mut push =
        |name: &'static str, (shape, init): (Vec<usize>, Init)| v.push((name, shape, init));
    push("time.w", (vec![TIME_DIM, TIME_DIM], FanIn(TIME_DIM)));
    push("time.b", (vec![TIME_DIM], Const(0.0)));
    push("stem.w", conv(WIDTH_HI, UNET_CHANNELS + UNET_HINT_CHANNELS));
    push("stem.b", (vec![WIDTH_HI], Const(0.0)));
    push("res_hi.conv1.w", conv(WIDTH_HI, WIDTH_HI));
    push("res_hi.conv1.b", (vec![WIDTH_HI], Const(0.0)));
    push("res_hi.time.w", (vec![TIME_DIM, WIDTH_HI], FanIn(TIME_DIM)));
    push("res_hi.time.b", (vec![WIDTH_HI], Const(0.0)));
    push("res_hi.conv2.w", conv(WIDTH_HI, WIDTH_HI));
    push("res_hi.conv2.b", (vec![WIDTH_HI], Const(0.0)));
    push("down.w", conv(WIDTH_LO, WIDTH_HI));
    push("down.b", (vec![WIDTH_LO], Const(0.0)));
    push("res_lo.conv1.w", conv(WIDTH_LO, WIDTH_LO));
    push("res_lo.conv1.b", (vec![WIDTH_LO], Const(0.0)));
    push("res_lo.time.w", (vec![TIME_DIM, WIDTH_LO], FanIn(TIME_DIM)));
    push("res_lo.time.b", (vec![WIDTH_LO], Const(0.0)));
    push("res_lo.conv2.w", conv(WIDTH_LO, WIDTH_LO));
    push("res_lo.conv2.b", (vec![WIDTH_LO], Const(0.0)));
    push("attn.norm.gain", (vec![ATTN_DIM], Const(1.0)));
    push("attn.norm.shift", (vec![ATTN_DIM], Const(0.0)));
    push("attn.tokens", (vec![VOCAB_SIZE, ATTN_DIM], Uniform(1.0)));
    push("attn.q", (vec![ATTN_DIM, ATTN_DIM], FanIn(ATTN_DIM)));
    push("attn.k", (vec![ATTN_DIM, ATTN_DIM], FanIn(ATTN_DIM)));
    push("attn.v", (vec![ATTN_DIM, ATTN_DIM], FanIn(ATTN_DIM)));
    push("attn.out", (vec![ATTN_DIM, WIDTH_LO], FanIn(ATTN_DIM)));
    push("up.w", conv(WIDTH_HI, WIDTH_LO));
    push("up.b", (vec![WIDTH_HI], Const(0.0)));
    push("head.w", conv(UNET_CHANNELS, WIDTH_HI));
    push("head.b", (vec![UNET_CHANNELS], Const(0.0)));
    v
}

/// Named weight tensors in the fixed layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct UNetWeights {
    sections: Vec<(String, Tensor)>,
}

impl UNetWeights {
    pub fn sections(&self) -> &[(String, Tensor)] {
        &self.sections
    }

    fn get(&self, name: &str) -> &Tensor {
        // Layout is validated on construction, so every name is present.
        &self
            .sections
            .iter()
            .find(|(n, _)| n == name)
            .expect("validated weight layout")
            .1
    }

    pub fn bit_eq(&self, other: &UNetWeights) -> bool {
        self.sections.len() == other.sections.len()
            && self
                .sections
                .iter()
                .zip(&other.sections)
                .all(|((a, x), (b, y))| a == b && x.bit_eq(y))
    }
}

pub fn init_weights(seed: u64) -> UNetWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sections = layout()
        .into_iter()
        .map(|(name, shape, init)| {
            let t = match init {
                Init::FanIn(fan) => {
                    let bound = 1.0 / (fan as f64).sqrt();
                    Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound))
                }
                Init::Uniform(bound) => {
                    Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound))
                }
                Init::Const(c) => Tensor::full(&shape, c),
            };
            (name.to_string(), t)
        })
        .collect();
    UNetWeights { sections }
}

pub fn save_weights(weights: &UNetWeights) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    for (name, t) in &weights.sections {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn load_weights(bytes: &[u8]) -> Result<UNetWeights> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != WEIGHTS_MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic, expected \"NCUW\""));
    }
    let version = r.u32("version")?;
    if version != WEIGHTS_VERSION {
        r.pos -= 4;
        return Err(r.err(format!(
            "unsupported version {version}, expected {WEIGHTS_VERSION}"
        )));
    }
    let expected = layout();
    let mut sections = Vec::with_capacity(expected.len());
    while r.pos < bytes.len() {
        let start = r.pos;
        let name_len = r.u32("section name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "section name")?)
            .map_err(|_| Error::Format {
                offset: start + 4,
                message: "section name is not UTF-8".into(),
            })?
            .to_string();
        let Some((_, shape, _)) = expected.get(sections.len()) else {
            return Err(Error::Format {
                offset: start,
                message: format!("unexpected extra section {name:?}"),
            });
        };
        let want_name = expected[sections.len()].0;
        if name != want_name {
            return Err(Error::Format {
                offset: start,
                message: format!("expected section {want_name:?}, found {name:?}"),
            });
        }
        let rank = r.u32("rank")? as usize;
        let extents = (0..rank)
            .map(|_| r.u32("extent").map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        if &extents != shape {
            return Err(Error::Format {
                offset: start,
                message: format!("section {name:?} has shape {extents:?}, expected {shape:?}"),
            });
        }
        let n: usize = extents.iter().product();
        let raw = r.take(n * 8, "section values")?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        sections.push((name, Tensor::new(extents, values)?));
    }
    if sections.len() != expected.len() {
        return Err(r.err(format!(
            "missing sections: found {}, expected {}",
            sections.len(),
            expected.len()
        )));
    }
    Ok(UNetWeights { sections })
}

/// Noise estimate plus the attention layer's output rows (before the output
/// projection), `(16·16)×32`.
#[derive(Clone, Debug)]
pub struct UNetOutput {
    pub eps: Tensor,
    pub attention: Tensor,
}

fn time_embedding(t: usize) -> Tensor {
    let half = TIME_DIM / 2;
    Tensor::from_fn(&[1, TIME_DIM], |i| {
        let k = i % half;
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        if i < half {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

fn add_channel_bias(x: &mut Tensor, bias: &[f64]) {
    let plane = x.len() / bias.len();
    for (c, chunk) in x.values_mut().chunks_mut(plane).enumerate() {
        chunk.iter_mut().for_each(|v| *v += bias[c]);
    }
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let y = matmul(x, w)?;
    numerics::add(&y, &b.clone().reshape(y.shape())?)
}

fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let (oh, ow) = (h / 2, w / 2);
    Ok(Tensor::from_fn(&[c, oh, ow], |i| {
        let (ch, y, xx) = (i / (oh * ow), (i / ow) % oh, i % ow);
        let at = |dy: usize, dx: usize| x.values()[(ch * h + 2 * y + dy) * w + 2 * xx + dx];
        (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) * 0.25
    }))
}

fn upsample_nearest2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let (oh, ow) = (2 * h, 2 * w);
    Ok(Tensor::from_fn(&[c, oh, ow], |i| {
        let (ch, y, xx) = (i / (oh * ow), (i / ow) % oh, i % ow);
        x.values()[(ch * h + y / 2) * w + xx / 2]
    }))
}

impl UNetWeights {
    fn res_block(&self, prefix: &str, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let g = |s: &str| self.get(&format!("{prefix}.{s}"));
        let mut h = conv2d(&silu(x), g("conv1.w"), g("conv1.b"))?;
        let tproj = linear(temb, g("time.w"), g("time.b"))?;
        add_channel_bias(&mut h, tproj.values());
        let h = conv2d(&silu(&h), g("conv2.w"), g("conv2.b"))?;
        numerics::add(x, &h)
    }

    fn embed(&self, cond: &Condition) -> Result<Tensor> {
        let ids: Vec<u32> = match cond {
            Condition::Tokens(ids) => ids.clone(),
            Condition::Empty => vec![NULL_TOKEN],
            Condition::Analytic(_) => {
                return Err(Error::config(
                    "unet backend needs a token or empty condition, got an analytic target",
                ))
            }
        };
        let table = self.get("attn.tokens");
        let mut out = Vec::with_capacity(ids.len() * ATTN_DIM);
        for &id in &ids {
            if id as usize >= VOCAB_SIZE {
                return Err(Error::config(format!("token id {id} outside vocabulary")));
            }
            out.extend_from_slice(table.row(id as usize));
        }
        Tensor::new(vec![ids.len(), ATTN_DIM], out)
    }

    fn key_value(&self, cond: &Condition) -> Result<(Tensor, Tensor)> {
        let e = self.embed(cond)?;
        Ok((
            matmul(&e, self.get("attn.k"))?,
            matmul(&e, self.get("attn.v"))?,
        ))
    }

    pub fn forward(&self, req: &EstimatorRequest<'_>) -> Result<UNetOutput> {
        let want = [UNET_CHANNELS, UNET_CANVAS, UNET_CANVAS];
        if req.x_t.shape() != want {
            return Err(Error::shape(format!(
                "unet backend expects x_t of shape {want:?}, got {:?}",
                req.x_t.shape()
            )));
        }
        let plane = UNET_CANVAS * UNET_CANVAS;
        let mut input = req.x_t.values().to_vec();
        match req.hint {
            Some(hint) => {
                if hint.values.shape() != [UNET_HINT_CHANNELS, UNET_CANVAS, UNET_CANVAS] {
                    return Err(Error::shape(format!(
                        "unet hint must be {UNET_HINT_CHANNELS}x{UNET_CANVAS}x{UNET_CANVAS}"
                    )));
                }
                input.extend(hint.values.values().iter().enumerate().map(|(i, &v)| {
                    if hint.active.bits()[i % plane] {
                        v
                    } else {
                        0.0
                    }
                }));
            }
            None => input.extend(std::iter::repeat_n(0.0, UNET_HINT_CHANNELS * plane)),
        }
        let input = Tensor::new(
            vec![UNET_CHANNELS + UNET_HINT_CHANNELS, UNET_CANVAS, UNET_CANVAS],
            input,
        )?;

        let temb = silu(&linear(
            &time_embedding(req.t),
            self.get("time.w"),
            self.get("time.b"),
        )?);

        let h0 = conv2d(&input, self.get("stem.w"), self.get("stem.b"))?;
        let skip = self.res_block("res_hi", &h0, &temb)?;
        let h = conv2d(&avg_pool2(&skip)?, self.get("down.w"), self.get("down.b"))?;
        let h = self.res_block("res_lo", &h, &temb)?;

        let rows = h.chw_to_rows()?;
        let normed = layer_norm(
            &rows,
            self.get("attn.norm.gain"),
            self.get("attn.norm.shift"),
            LAYER_NORM_EPS,
        )?;
        let q = matmul(&normed, self.get("attn.q"))?;
        let attention = match req.branch {
            Branch::Global => {
                let (k, v) = self.key_value(req.condition)?;
                cross_attention(&q, &k, &v)?
            }
            Branch::Object => {
                let pyramid = req.mask_pyramid.ok_or_else(|| {
                    Error::config("object-branch unet call requires a mask pyramid")
                })?;
                let level = pyramid.level((LOW_RES, LOW_RES)).ok_or_else(|| {
                    Error::config(format!("mask pyramid lacks the {LOW_RES}x{LOW_RES} level"))
                })?;
                let (kn, vn) = self.key_value(req.condition)?;
                let (ks, vs) = self.key_value(req.global_condition)?;
                masked_cross_attention(&q, &mask_to_rows(level), &kn, &vn, &ks, &vs)?
            }
        };
        let projected = matmul(&attention, self.get("attn.out"))?;
        let h = numerics::add(&h, &projected.rows_to_chw(LOW_RES, LOW_RES)?)?;

        let up = conv2d(&upsample_nearest2(&h)?, self.get("up.w"), self.get("up.b"))?;
        let h = numerics::add(&up, &skip)?;
        let eps = conv2d(&silu(&h), self.get("head.w"), self.get("head.b"))?;
        Ok(UNetOutput { eps, attention })
    }
}

pub(super) fn unet_eps(req: &EstimatorRequest<'_>, weights: &UNetWeights) -> Result<Tensor> {
    Ok(weights.forward(req)?.eps)
}
