//! Binary PGM (P5) and PPM (P6) images with maxval 255.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::Condition;
use crate::numerics::Tensor;
use crate::sampler::{Backend, SceneSpec};

/// Affine display mapping: `lo` maps to 0, `hi` to 255, values outside are
/// clamped. Stored in run reports so images can be mapped back.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplayMap {
    pub lo: f64,
    pub hi: f64,
}

impl DisplayMap {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::config(format!(
                "display range needs finite lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(Self { lo, hi })
    }

    /// `[mu_min - 3 sigma, mu_max + 3 sigma]` over the scene's analytic
    /// targets (the `N(0, 1)` prior for empty conditions); `[-3, 3]` for UNet
    /// scenes.
    pub fn for_scene(scene: &SceneSpec) -> Self {
        if let Backend::Unet(_) = scene.backend {
            return Self { lo: -3.0, hi: 3.0 };
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let conditions = scene
            .objects
            .iter()
            .map(|o| &o.condition)
            .chain(std::iter::once(&scene.global_condition));
        for c in conditions {
            let (mlo, mhi, s) = match c {
                Condition::Analytic(t) => {
                    let m = t.mean().values();
                    let smax = t.sigma().values().iter().copied().fold(0.0, f64::max);
                    (
                        m.iter().copied().fold(f64::INFINITY, f64::min),
                        m.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                        smax,
                    )
                }
                _ => (0.0, 0.0, 1.0),
            };
            lo = lo.min(mlo - 3.0 * s);
            hi = hi.max(mhi + 3.0 * s);
        }
        // Hinted pixels follow the hint value; give them the prior's width.
        for h in scene.objects.iter().filter_map(|o| o.hint.as_ref()) {
            let bits = h.active().bits();
            for (i, v) in h.values().values().iter().enumerate() {
                if bits[i % bits.len()] {
                    lo = lo.min(v - 3.0);
                    hi = hi.max(v + 3.0);
                }
            }
        }
        if hi - lo < 1e-9 {
            lo -= 0.5;
            hi += 0.5;
        }
        Self { lo, hi }
    }

    pub fn to_byte(&self, v: f64) -> u8 {
        let u = ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0);
        (u * 255.0).round() as u8
    }

    /// Centre of the value interval that maps to `b`.
    pub fn from_byte(&self, b: u8) -> f64 {
        self.lo + (b as f64 / 255.0) * (self.hi - self.lo)
    }
}

/// Encodes a `1×H×W` tensor as P5 or a `3×H×W` tensor as P6.
pub fn encode(image: &Tensor, map: &DisplayMap) -> Result<Vec<u8>> {
    let (c, h, w) = image.dims3()?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => {
            return Err(Error::shape(format!(
                "images need 1 or 3 channels, got {c}"
            )))
        }
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    out.reserve(c * plane);
    for p in 0..plane {
        for ch in 0..c {
            out.push(map.to_byte(image.values()[ch * plane + p]));
        }
    }
    Ok(out)
}

/// Encodes raw bytes (`0..=255`) as a single-channel P5 image.
pub fn encode_gray(height: usize, width: usize, bytes: &[u8]) -> Result<Vec<u8>> {
    if bytes.len() != height * width {
        return Err(Error::shape("pixel count does not match dimensions"));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    Ok(out)
}

/// A decoded image: `channels` is 1 for P5 and 3 for P6, pixels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Pnm {
    /// Maps pixels back to values, channel-major.
    pub fn to_tensor(&self, map: &DisplayMap) -> Tensor {
        let plane = self.height * self.width;
        let c = self.channels;
        Tensor::from_fn(&[c, self.height, self.width], |i| {
            map.from_byte(self.pixels[(i % plane) * c + i / plane])
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Pnm> {
    let bad = |offset: usize, message: &str| Error::Format {
        offset,
        message: message.to_string(),
    };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(bad(0, "expected P5 or P6 magic")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(start, "expected a decimal header field"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad(pos, "only maxval 255 is supported"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad(pos, "expected whitespace after header"));
    }
    pos += 1;
    let need = width * height * channels;
    let pixels = bytes
        .get(pos..pos + need)
        .ok_or_else(|| bad(bytes.len(), "pixel data truncated"))?;
    if bytes.len() != pos + need {
        return Err(bad(pos + need, "trailing bytes after pixel data"));
    }
    Ok(Pnm {
        channels,
        height,
        width,
        pixels: pixels.to_vec(),
    })
}
