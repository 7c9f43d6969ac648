//! Layout regions rasterized into binary masks.
//!
//! A pixel `(x, y)` belongs to a region iff its center `(x + 0.5, y + 0.5)`
//! lies inside it. Boxes are half-open; polygons use the even-odd rule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum RegionSpec {
    Box { x0: f64, y0: f64, x1: f64, y1: f64 },
    Polygon(Vec<[f64; 2]>),
}

impl RegionSpec {
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        RegionSpec::Box { x0, y0, x1, y1 }
    }

    /// Checks the region's own invariants (independent of any canvas).
    pub fn validate(&self) -> Result<()> {
        match self {
            RegionSpec::Box { x0, y0, x1, y1 } => {
                if ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
                    return Err(Error::Region("box coordinates must be finite".into()));
                }
                if x1 <= x0 {
                    return Err(Error::Region(format!(
                        "box requires x0 < x1, got x0={x0} x1={x1}"
                    )));
                }
                if y1 <= y0 {
                    return Err(Error::Region(format!(
                        "box requires y0 < y1, got y0={y0} y1={y1}"
                    )));
                }
            }
            RegionSpec::Polygon(pts) => {
                if pts.len() < 3 {
                    return Err(Error::Region(format!(
                        "polygon needs at least 3 vertices, got {}",
                        pts.len()
                    )));
                }
                if !pts.iter().flatten().all(|v| v.is_finite()) {
                    return Err(Error::Region("polygon vertices must be finite".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::shape(format!(
                "mask {height}x{width} needs {} bits, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.bits[y * self.width + x] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        if self.dims() != other.dims() {
            return Err(Error::shape("mask union: resolutions differ"));
        }
        Ok(Mask {
            width: self.width,
            height: self.height,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(a, b)| *a || *b)
                .collect(),
        })
    }
}

pub fn rasterize(region: &RegionSpec, canvas: (usize, usize)) -> Result<Mask> {
    region.validate()?;
    let (h, w) = canvas;
    let mut mask = Mask::empty(h, w);
    match region {
        RegionSpec::Box { x0, y0, x1, y1 } => {
            // Pixel x is inside iff x0 <= x + 0.5 < x1.
            let xs = first_center_at_or_after(*x0, w)..first_center_at_or_after(*x1, w);
            let ys = first_center_at_or_after(*y0, h)..first_center_at_or_after(*y1, h);
            for y in ys {
                for x in xs.clone() {
                    mask.set(x, y, true);
                }
            }
        }
        RegionSpec::Polygon(pts) => fill_even_odd(pts, &mut mask),
    }
    if mask.count() == 0 {
        return Err(Error::DegenerateRegion(format!(
            "{region:?} covers no pixel centers on a {h}x{w} canvas"
        )));
    }
    Ok(mask)
}

/// Smallest pixel index whose center is `>= edge`, clamped to `[0, extent]`.
fn first_center_at_or_after(edge: f64, extent: usize) -> usize {
    let i = (edge - 0.5).ceil();
    if i <= 0.0 {
        0
    } else {
        (i as usize).min(extent)
    }
}

/// Scanline fill. For each row's center line, edge crossings are sorted and
/// the spans `[c0, c1), [c2, c3), ...` are filled.
fn fill_even_odd(pts: &[[f64; 2]], mask: &mut Mask) {
    let n = pts.len();
    let mut crossings = Vec::with_capacity(n);
    for y in 0..mask.height {
        let yc = y as f64 + 0.5;
        crossings.clear();
        for i in 0..n {
            let [ax, ay] = pts[i];
            let [bx, by] = pts[(i + 1) % n];
            if (ay > yc) != (by > yc) {
                crossings.push(ax + (yc - ay) * (bx - ax) / (by - ay));
            }
        }
        crossings.sort_by(f64::total_cmp);
        for span in crossings.chunks_exact(2) {
            let start = first_center_at_or_after(span[0], mask.width);
            let end = first_center_at_or_after(span[1], mask.width);
            for x in start..end {
                mask.set(x, y, true);
            }
        }
    }
}

/// Block-reduces a mask; a target bit is set when at least half of its source
/// block is set.
pub fn downsample(mask: &Mask, target: (usize, usize)) -> Result<Mask> {
    let (th, tw) = target;
    if th == 0 || tw == 0 || !mask.height.is_multiple_of(th) || !mask.width.is_multiple_of(tw) {
        return Err(Error::shape(format!(
            "cannot block-reduce {}x{} mask to {th}x{tw}",
            mask.height, mask.width
        )));
    }
    let (by, bx) = (mask.height / th, mask.width / tw);
    let area = by * bx;
    let mut out = Mask::empty(th, tw);
    for ty in 0..th {
        for tx in 0..tw {
            let mut count = 0;
            for y in ty * by..(ty + 1) * by {
                for x in tx * bx..(tx + 1) * bx {
                    count += mask.get(x, y) as usize;
                }
            }
            out.set(tx, ty, 2 * count >= area);
        }
    }
    Ok(out)
}

/// Row-major flat indices (`y * width + x`) of set pixels, ascending.
pub fn mask_to_rows(mask: &Mask) -> Vec<usize> {
    mask.bits
        .iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coverage {
    pub covered: bool,
    pub uncovered_count: usize,
    /// First uncovered pixel in row-major order, as `(x, y)`.
    pub first_uncovered: Option<(usize, usize)>,
}

/// Per-pixel count of masks that contain the pixel.
pub fn coverage_counts(masks: &[Mask], canvas: (usize, usize)) -> Result<Vec<u32>> {
    let (h, w) = canvas;
    let mut counts = vec![0u32; h * w];
    for m in masks {
        if m.dims() != canvas {
            return Err(Error::shape(format!(
                "mask is {}x{}, expected {h}x{w}",
                m.height, m.width
            )));
        }
        for (c, &b) in counts.iter_mut().zip(&m.bits) {
            *c += b as u32;
        }
    }
    Ok(counts)
}

pub fn coverage_check(masks: &[Mask], canvas: (usize, usize)) -> Result<Coverage> {
    let counts = coverage_counts(masks, canvas)?;
    let uncovered_count = counts.iter().filter(|&&c| c == 0).count();
    let first_uncovered = counts
        .iter()
        .position(|&c| c == 0)
        .map(|i| (i % canvas.1, i / canvas.1));
    Ok(Coverage {
        covered: uncovered_count == 0,
        uncovered_count,
        first_uncovered,
    })
}

/// Canvas mask plus its block-reduced copies, keyed by `(height, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPyramid {
    levels: BTreeMap<(usize, usize), Mask>,
}

impl MaskPyramid {
    pub fn build(canvas_mask: &Mask, levels: &[(usize, usize)]) -> Result<Self> {
        let mut map = BTreeMap::new();
        map.insert(canvas_mask.dims(), canvas_mask.clone());
        for &lvl in levels {
            if let std::collections::btree_map::Entry::Vacant(e) = map.entry(lvl) {
                e.insert(downsample(canvas_mask, lvl)?);
            }
        }
        Ok(Self { levels: map })
    }

    /// The canvas level plus every halving that divides the canvas, down to
    /// `min_side` pixels.
    pub fn standard_levels(canvas: (usize, usize), min_side: usize) -> Vec<(usize, usize)> {
        let (mut h, mut w) = canvas;
        let mut out = vec![(h, w)];
        while h % 2 == 0 && w % 2 == 0 && h / 2 >= min_side && w / 2 >= min_side {
            h /= 2;
            w /= 2;
            out.push((h, w));
        }
        out
    }

    pub fn level(&self, dims: (usize, usize)) -> Option<&Mask> {
        self.levels.get(&dims)
    }

    pub fn levels(&self) -> impl Iterator<Item = (&(usize, usize), &Mask)> {
        self.levels.iter().rev()
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::numerics::test_support::rng;

    fn random_mask(seed: u64, h: usize, w: usize, p: f64) -> Mask {
        let mut r = rng(seed);
        Mask::from_bits(h, w, (0..h * w).map(|_| r.random_bool(p)).collect()).unwrap()
    }

    /// Independent per-pixel ray cast to +x.
    fn point_in_polygon(pts: &[[f64; 2]], px: f64, py: f64) -> bool {
        let mut inside = false;
        let mut j = pts.len() - 1;
        for i in 0..pts.len() {
            let (xi, yi) = (pts[i][0], pts[i][1]);
            let (xj, yj) = (pts[j][0], pts[j][1]);
            if (yi > py) != (yj > py) && px < xi + (py - yi) * (xj - xi) / (yj - yi) {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    #[test]
    fn half_open_box() {
        let m = rasterize(&RegionSpec::rect(0.0, 0.0, 2.0, 2.0), (4, 4)).unwrap();
        let set: Vec<_> = (0..16)
            .filter(|i| m.bits()[*i])
            .map(|i| (i % 4, i / 4))
            .collect();
        assert_eq!(set, vec![(0, 0), (1, 0), (0, 1), (1, 1)]);
    }

    #[test]
    fn full_canvas_box_and_clamping() {
        assert!(rasterize(&RegionSpec::rect(0.0, 0.0, 4.0, 4.0), (4, 4))
            .unwrap()
            .is_full());
        let m = rasterize(&RegionSpec::rect(-3.0, 2.0, 9.0, 40.0), (4, 5)).unwrap();
        assert_eq!(m.count(), 5 * 2);
    }

    #[test]
    fn invalid_and_degenerate_regions() {
        assert!(matches!(
            rasterize(&RegionSpec::rect(3.0, 0.0, 3.0, 2.0), (4, 4)),
            Err(Error::Region(_))
        ));
        assert!(matches!(
            rasterize(&RegionSpec::rect(10.0, 0.0, 12.0, 2.0), (4, 4)),
            Err(Error::DegenerateRegion(_))
        ));
        assert!(matches!(
            rasterize(&RegionSpec::Polygon(vec![[0.0, 0.0], [1.0, 1.0]]), (4, 4)),
            Err(Error::Region(_))
        ));
        // Sliver between pixel centers.
        assert!(matches!(
            rasterize(&RegionSpec::rect(0.6, 0.0, 1.4, 4.0), (4, 4)),
            Err(Error::DegenerateRegion(_))
        ));
    }

    #[test]
    fn triangle_matches_ray_casting() {
        let tri = vec![[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]];
        let m = rasterize(&RegionSpec::Polygon(tri.clone()), (4, 4)).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(
                    m.get(x, y),
                    point_in_polygon(&tri, x as f64 + 0.5, y as f64 + 0.5),
                    "pixel ({x},{y})"
                );
            }
        }
    }

    #[test]
    fn self_intersecting_polygon_uses_even_odd() {
        // Pentagram: the inner pentagon is outside under even-odd.
        let star: Vec<[f64; 2]> = (0..5)
            .map(|k| {
                let a = std::f64::consts::PI * (0.5 + 0.8 * k as f64);
                [16.0 + 15.0 * a.cos(), 16.0 - 15.0 * a.sin()]
            })
            .collect();
        let m = rasterize(&RegionSpec::Polygon(star.clone()), (32, 32)).unwrap();
        assert!(!m.get(16, 16));
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(
                    m.get(x, y),
                    point_in_polygon(&star, x as f64 + 0.5, y as f64 + 0.5)
                );
            }
        }
    }

    #[test]
    fn downsample_examples() {
        assert!(downsample(&Mask::full(32, 32), (16, 16)).unwrap().is_full());
        assert_eq!(
            downsample(&Mask::empty(32, 32), (16, 16)).unwrap().count(),
            0
        );
        assert!(matches!(
            downsample(&Mask::full(6, 6), (4, 4)),
            Err(Error::Shape(_))
        ));
        // Exactly half of a 2x2 block counts as set.
        let mut m = Mask::empty(2, 2);
        m.set(0, 0, true);
        m.set(1, 0, true);
        assert!(downsample(&m, (1, 1)).unwrap().get(0, 0));
    }

    #[test]
    fn downsample_matches_block_counting() {
        for seed in 0..20 {
            let m = random_mask(seed, 8, 8, 0.5);
            let d = downsample(&m, (4, 4)).unwrap();
            for ty in 0..4 {
                for tx in 0..4 {
                    let c = [(0, 0), (1, 0), (0, 1), (1, 1)]
                        .iter()
                        .filter(|(dx, dy)| m.get(2 * tx + dx, 2 * ty + dy))
                        .count();
                    assert_eq!(d.get(tx, ty), c >= 2);
                }
            }
        }
    }

    #[test]
    fn mask_rows() {
        let mut m = Mask::empty(2, 2);
        m.set(0, 1, true);
        assert_eq!(mask_to_rows(&m), vec![2]);
        assert_eq!(mask_to_rows(&Mask::full(2, 2)), vec![0, 1, 2, 3]);

        let r = random_mask(11, 7, 9, 0.3);
        let mut expect = vec![];
        for y in 0..7 {
            for x in 0..9 {
                if r.get(x, y) {
                    expect.push(y * 9 + x);
                }
            }
        }
        assert_eq!(mask_to_rows(&r), expect);
    }

    #[test]
    fn coverage_examples() {
        let a = rasterize(&RegionSpec::rect(0.0, 0.0, 2.0, 4.0), (4, 4)).unwrap();
        let b = rasterize(&RegionSpec::rect(2.0, 0.0, 4.0, 4.0), (4, 4)).unwrap();
        assert!(coverage_check(&[a.clone(), b], (4, 4)).unwrap().covered);

        let small = rasterize(&RegionSpec::rect(1.0, 1.0, 2.0, 3.0), (4, 4)).unwrap();
        let c = coverage_check(&[small], (4, 4)).unwrap();
        assert!(!c.covered);
        assert_eq!(c.uncovered_count, 16 - 2);
        assert_eq!(c.first_uncovered, Some((0, 0)));

        let none = coverage_check(&[], (3, 3)).unwrap();
        assert_eq!(none.uncovered_count, 9);
    }

    #[test]
    fn coverage_matches_or_oracle() {
        for seed in 0..10 {
            let masks: Vec<_> = (0..3)
                .map(|k| random_mask(seed * 7 + k, 6, 5, 0.3))
                .collect();
            let c = coverage_check(&masks, (6, 5)).unwrap();
            let uncovered = (0..30)
                .filter(|&i| !masks.iter().any(|m| m.bits()[i]))
                .count();
            assert_eq!(c.uncovered_count, uncovered);
            assert_eq!(c.covered, uncovered == 0);
        }
    }

    #[test]
    fn pyramid_levels() {
        let m = rasterize(&RegionSpec::rect(0.0, 0.0, 16.0, 32.0), (32, 32)).unwrap();
        let levels = MaskPyramid::standard_levels((32, 32), 16);
        assert_eq!(levels, vec![(32, 32), (16, 16)]);
        let p = MaskPyramid::build(&m, &levels).unwrap();
        assert_eq!(p.level((32, 32)), Some(&m));
        assert_eq!(p.level((16, 16)).unwrap().count(), 128);
        let full = MaskPyramid::build(
            &Mask::full(32, 32),
            &MaskPyramid::standard_levels((32, 32), 1),
        )
        .unwrap();
        assert!(full.levels().all(|(_, m)| m.is_full()));
    }

    proptest! {
        #[test]
        fn box_area_is_exact(x0 in 0usize..20, y0 in 0usize..20, dx in 1usize..20, dy in 1usize..20) {
            let (x1, y1) = (x0 + dx, y0 + dy);
            let m = rasterize(&RegionSpec::rect(x0 as f64, y0 as f64, x1 as f64, y1 as f64), (24, 24)).unwrap();
            prop_assert_eq!(m.count(), (x1.min(24) - x0) * (y1.min(24) - y0));
        }

        #[test]
        fn downsample_is_monotone(seed in any::<u64>(), extra in any::<u64>()) {
            let a = random_mask(seed, 8, 12, 0.4);
            let b = a.union(&random_mask(extra, 8, 12, 0.2)).unwrap();
            let (da, db) = (downsample(&a, (4, 6)).unwrap(), downsample(&b, (4, 6)).unwrap());
            prop_assert!(da.bits().iter().zip(db.bits()).all(|(x, y)| !*x || *y));
        }

        #[test]
        fn polygon_scanline_matches_ray_cast(seed in any::<u64>(), n in 3usize..8) {
            let mut r = rng(seed);
            let pts: Vec<[f64; 2]> = (0..n).map(|_| [r.random_range(-2.0..18.0), r.random_range(-2.0..18.0)]).collect();
            if let Ok(m) = rasterize(&RegionSpec::Polygon(pts.clone()), (16, 16)) {
                for y in 0..16 {
                    for x in 0..16 {
                        prop_assert_eq!(m.get(x, y), point_in_polygon(&pts, x as f64 + 0.5, y as f64 + 0.5));
                    }
                }
            }
        }
    }
}
