//! Feature pyramid data model: boxes, masks, per-level feature maps and the
//! scale-to-level mapping used to read an object's template.
//!
//! Levels carry their FPN level number (`P2..P5` are levels 2..5) and the
//! stride of level `k` is `2^k` image pixels per cell. Boxes are
//! `(x, y, w, h)` with a top-left origin in pixel units.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::template::{TemplateKind, TemplateVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::invalid(format!(
                "box ({x}, {y}, {w}, {h}) has non-finite coordinates"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::invalid(format!(
                "box ({x}, {y}, {w}, {h}) has non-positive extent"
            )));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Half-open containment: `x <= px < x + w`.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }

    /// Same extent, moved so its center sits at `(cx, cy)`.
    pub fn recentered(&self, cx: f64, cy: f64) -> Self {
        Self {
            x: cx - self.w / 2.0,
            y: cy - self.h / 2.0,
            ..*self
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

impl std::str::FromStr for BoundingBox {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::invalid(format!("box '{s}': {e}")))?;
        match parts.as_slice() {
            [x, y, w, h] => BoundingBox::new(*x, *y, *w, *h),
            _ => Err(Error::invalid(format!(
                "box '{s}' must have four comma-separated values x,y,w,h"
            ))),
        }
    }
}

/// Binary mask stored as row-major run lengths, alternating background and
/// foreground and always starting with a (possibly empty) background run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawMask", into = "RawMask")]
pub struct Mask {
    height: usize,
    width: usize,
    runs: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct RawMask {
    height: usize,
    width: usize,
    counts: Vec<u32>,
}

impl TryFrom<RawMask> for Mask {
    type Error = Error;

    fn try_from(raw: RawMask) -> Result<Self> {
        Mask::new(raw.height, raw.width, raw.counts)
    }
}

impl From<Mask> for RawMask {
    fn from(m: Mask) -> Self {
        RawMask {
            height: m.height,
            width: m.width,
            counts: m.runs,
        }
    }
}

impl Mask {
    pub fn new(height: usize, width: usize, runs: Vec<u32>) -> Result<Self> {
        let total: u64 = runs.iter().map(|&r| r as u64).sum();
        if total != (height * width) as u64 {
            return Err(Error::invalid(format!(
                "mask runs sum to {total}, expected {height}x{width} = {}",
                height * width
            )));
        }
        Ok(Self {
            height,
            width,
            runs,
        })
    }

    pub fn from_bits(height: usize, width: usize, bits: &[bool]) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::invalid(format!(
                "mask has {} pixels, expected {height}x{width}",
                bits.len()
            )));
        }
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &b in bits {
            if b != current {
                runs.push(len);
                current = b;
                len = 0;
            }
            len += 1;
        }
        runs.push(len);
        Ok(Self {
            height,
            width,
            runs,
        })
    }

    /// Rasterizes `bbox` onto a `height x width` canvas. A pixel is set when
    /// its center lies inside the box (half-open).
    pub fn from_box(bbox: &BoundingBox, height: usize, width: usize) -> Self {
        let span = |lo: f64, len: f64, limit: usize| {
            // pixel i is covered iff lo <= i + 0.5 < lo + len
            let start = (lo - 0.5).ceil().max(0.0);
            let end = (lo + len - 0.5).ceil().clamp(0.0, limit as f64);
            let start = start.min(limit as f64) as usize;
            (start, (end as usize).max(start))
        };
        let (c0, c1) = span(bbox.x, bbox.w, width);
        let (r0, r1) = span(bbox.y, bbox.h, height);
        let mut bits = vec![false; height * width];
        for r in r0..r1 {
            bits[r * width + c0..r * width + c1].fill(true);
        }
        Self::from_bits(height, width, &bits).expect("canvas sized by construction")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn runs(&self) -> &[u32] {
        &self.runs
    }

    pub fn to_bits(&self) -> Vec<bool> {
        let mut bits = Vec::with_capacity(self.height * self.width);
        for (i, &run) in self.runs.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, run as usize));
        }
        bits
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> u64 {
        self.runs.iter().skip(1).step_by(2).map(|&r| r as u64).sum()
    }

    /// Foreground intervals `[start, end)` over the flattened canvas.
    pub(crate) fn intervals(&self) -> Vec<(u64, u64)> {
        let mut out = Vec::with_capacity(self.runs.len() / 2);
        let mut pos = 0u64;
        for (i, &run) in self.runs.iter().enumerate() {
            let end = pos + run as u64;
            if i % 2 == 1 && run > 0 {
                out.push((pos, end));
            }
            pos = end;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    level: u32,
    height: usize,
    width: usize,
    depth: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(level: u32, height: usize, width: usize, depth: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || depth == 0 {
            return Err(Error::invalid(format!(
                "level {level}: shape {height}x{width}x{depth} has a zero dimension"
            )));
        }
        if data.len() != height * width * depth {
            return Err(Error::invalid(format!(
                "level {level}: data length {} does not match {height}x{width}x{depth}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "level {level}: non-finite value at index {i}"
            )));
        }
        Ok(Self {
            level,
            height,
            width,
            depth,
            data,
        })
    }

    pub fn zeros(level: u32, height: usize, width: usize, depth: usize) -> Self {
        Self::new(level, height, width, depth, vec![0.0; height * width * depth])
            .expect("zero map is valid")
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Image pixels per cell.
    pub fn stride(&self) -> f64 {
        stride(self.level)
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.depth;
        &self.data[start..start + self.depth]
    }

    pub(crate) fn cell_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let start = (row * self.width + col) * self.depth;
        &mut self.data[start..start + self.depth]
    }

    /// Receptive-field center of a cell in image pixels.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let s = self.stride();
        ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.height).flat_map(move |r| (0..self.width).map(move |c| (r, c)))
    }
}

pub fn stride(level: u32) -> f64 {
    (1u64 << level) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    image_width: usize,
    image_height: usize,
    levels: Vec<FeatureMap>,
}

impl FeaturePyramid {
    pub fn new(image_width: usize, image_height: usize, levels: Vec<FeatureMap>) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| Error::invalid("pyramid has no levels"))?;
        let depth = first.depth;
        for pair in levels.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if b.level != a.level + 1 {
                return Err(Error::invalid(format!(
                    "pyramid levels must be consecutive and increasing, found {} after {}",
                    b.level, a.level
                )));
            }
            let halves = |fine: usize, coarse: usize| coarse == fine / 2 || coarse == fine.div_ceil(2);
            if !halves(a.height, b.height) || !halves(a.width, b.width) {
                return Err(Error::invalid(format!(
                    "level {} ({}x{}) does not halve level {} ({}x{})",
                    b.level, b.height, b.width, a.level, a.height, a.width
                )));
            }
        }
        if let Some(m) = levels.iter().find(|m| m.depth != depth) {
            return Err(Error::invalid(format!(
                "level {} has depth {}, expected {depth}",
                m.level, m.depth
            )));
        }
        Ok(Self {
            image_width,
            image_height,
            levels,
        })
    }

    pub fn image_width(&self) -> usize {
        self.image_width
    }

    pub fn image_height(&self) -> usize {
        self.image_height
    }

    pub fn depth(&self) -> usize {
        self.levels[0].depth
    }

    pub fn levels(&self) -> &[FeatureMap] {
        &self.levels
    }

    pub fn into_levels(self) -> Vec<FeatureMap> {
        self.levels
    }

    pub fn min_level(&self) -> u32 {
        self.levels[0].level
    }

    pub fn max_level(&self) -> u32 {
        self.levels[self.levels.len() - 1].level
    }

    pub fn level(&self, level: u32) -> Option<&FeatureMap> {
        level
            .checked_sub(self.min_level())
            .and_then(|i| self.levels.get(i as usize))
    }

    /// Level for `bbox` under `config`, further clamped to the levels this
    /// pyramid actually holds.
    pub fn assign_level(&self, bbox: &BoundingBox, config: &LevelConfig) -> Result<u32> {
        let k = config.assign(bbox)?;
        Ok(k.clamp(self.min_level(), self.max_level()))
    }
}

/// Scale-to-level heuristic `k = floor(k0 + log2(sqrt(w h) / canonical))`,
/// clamped to `[k_min, k_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelConfig {
    pub k0: f64,
    pub canonical_size: f64,
    pub k_min: u32,
    pub k_max: u32,
}

impl Default for LevelConfig {
    fn default() -> Self {
        Self {
            k0: 4.0,
            canonical_size: 224.0,
            k_min: 2,
            k_max: 5,
        }
    }
}

impl LevelConfig {
    pub fn assign(&self, bbox: &BoundingBox) -> Result<u32> {
        let area = bbox.area();
        if !(area > 0.0) || !area.is_finite() {
            return Err(Error::invalid(format!("degenerate box with area {area}")));
        }
        let k = (self.k0 + (area.sqrt() / self.canonical_size).log2()).floor();
        Ok(k.clamp(self.k_min as f64, self.k_max as f64) as u32)
    }
}

/// Level for `bbox` in a pyramid of `num_levels` levels starting at the
/// default `k_min`.
pub fn assign_level(bbox: &BoundingBox, num_levels: usize) -> Result<u32> {
    if num_levels == 0 {
        return Err(Error::invalid("num_levels must be at least 1"));
    }
    let config = LevelConfig::default();
    let top = config.k_min + num_levels as u32 - 1;
    Ok(config.assign(bbox)?.min(top))
}

/// Grid cell containing the box center at `level`, clamped to the grid.
pub fn center_cell(bbox: &BoundingBox, pyramid: &FeaturePyramid, level: u32) -> Result<(usize, usize)> {
    let map = pyramid
        .level(level)
        .ok_or_else(|| Error::invalid(format!("pyramid has no level {level}")))?;
    Ok(grid_cell(map, bbox.center()))
}

pub(crate) fn grid_cell(map: &FeatureMap, (cx, cy): (f64, f64)) -> (usize, usize) {
    let s = map.stride();
    let clamp = |v: f64, n: usize| {
        let i = (v / s).floor();
        if i.is_nan() || i < 0.0 {
            0
        } else {
            (i as usize).min(n - 1)
        }
    };
    (clamp(cy, map.height), clamp(cx, map.width))
}

pub fn extract_template(pyramid: &FeaturePyramid, bbox: &BoundingBox) -> Result<TemplateVector> {
    extract_template_with(pyramid, bbox, &LevelConfig::default())
}

pub fn extract_template_with(
    pyramid: &FeaturePyramid,
    bbox: &BoundingBox,
    config: &LevelConfig,
) -> Result<TemplateVector> {
    let level = pyramid.assign_level(bbox, config)?;
    let (r, c) = center_cell(bbox, pyramid, level)?;
    let map = pyramid.level(level).expect("assigned level exists");
    let values = map.cell(r, c).iter().map(|&v| v as f64).collect();
    TemplateVector::new(values, TemplateKind::Center)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    /// Levels 2..=5 over a `w x h` image, cell (r, c) at level k holds
    /// `[k, r, c]`.
    fn indexed_pyramid(w: usize, h: usize) -> FeaturePyramid {
        let levels = (2u32..=5)
            .map(|k| {
                let s = 1usize << k;
                let (hh, ww) = (h.div_ceil(s), w.div_ceil(s));
                let mut data = Vec::new();
                for r in 0..hh {
                    for c in 0..ww {
                        data.extend([k as f32, r as f32, c as f32]);
                    }
                }
                FeatureMap::new(k, hh, ww, 3, data).unwrap()
            })
            .collect();
        FeaturePyramid::new(w, h, levels).unwrap()
    }

    #[test]
    fn level_assignment_examples() {
        assert_eq!(assign_level(&bx(0.0, 0.0, 224.0, 224.0), 4).unwrap(), 4);
        assert_eq!(assign_level(&bx(0.0, 0.0, 448.0, 448.0), 4).unwrap(), 5);
        // floor(4 + log2(10/224)) = floor(-0.485) = -1, clamped up to 2
        let raw = (4.0f64 + (10.0f64 / 224.0).log2()).floor();
        assert_eq!(raw, -1.0);
        assert_eq!(assign_level(&bx(0.0, 0.0, 10.0, 10.0), 4).unwrap(), 2);
        assert_eq!(assign_level(&bx(0.0, 0.0, 2000.0, 2000.0), 4).unwrap(), 5);
        assert_eq!(assign_level(&bx(0.0, 0.0, 2000.0, 2000.0), 2).unwrap(), 3);
        assert!(assign_level(&bx(0.0, 0.0, 1.0, 1.0), 0).is_err());
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BoundingBox::new(0.0, 0.0, 0.0, 5.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 5.0, -1.0).is_err());
        assert!(BoundingBox::new(f64::NAN, 0.0, 5.0, 5.0).is_err());
        let tiny = BoundingBox {
            x: 0.0,
            y: 0.0,
            w: 0.0,
            h: 0.0,
        };
        assert!(LevelConfig::default().assign(&tiny).is_err());
    }

    #[test]
    fn center_cell_examples() {
        let p = indexed_pyramid(64, 64);
        assert_eq!(center_cell(&bx(0.0, 0.0, 16.0, 16.0), &p, 3).unwrap(), (1, 1));
        assert_eq!(center_cell(&bx(0.0, 0.0, 8.0, 8.0), &p, 3).unwrap(), (0, 0));
        // center at x = 100 lies beyond the 8-cell grid
        assert_eq!(center_cell(&bx(90.0, 0.0, 20.0, 8.0), &p, 3).unwrap(), (0, 7));
        assert_eq!(center_cell(&bx(-50.0, -50.0, 4.0, 4.0), &p, 3).unwrap(), (0, 0));
        assert!(center_cell(&bx(0.0, 0.0, 8.0, 8.0), &p, 6).is_err());
    }

    #[test]
    fn extract_reads_assigned_level_center() {
        let p = indexed_pyramid(256, 256);
        let t = extract_template(&p, &bx(16.0, 16.0, 16.0, 16.0)).unwrap();
        // 16x16 box: floor(4 + log2(16/224)) < 2, so level 2, center (24,24)/4 = (6,6)
        assert_eq!(t.values(), &[2.0, 6.0, 6.0]);
        assert_eq!(t.kind(), TemplateKind::Center);
    }

    #[test]
    fn extract_four_times_area_moves_up_one_level() {
        let p = indexed_pyramid(512, 512);
        let small = bx(200.0, 200.0, 120.0, 120.0);
        let big = bx(140.0, 140.0, 240.0, 240.0);
        assert_eq!(small.center(), big.center());
        // hand evaluation: floor(4 + log2(120/224)) = floor(3.10) = 3; 240 -> floor(4.10) = 4
        let a = extract_template(&p, &small).unwrap();
        let b = extract_template(&p, &big).unwrap();
        assert_eq!(a.values()[0], 3.0);
        assert_eq!(b.values()[0], 4.0);
        // center (260, 260): level 3 stride 8 -> 32, level 4 stride 16 -> 16
        assert_eq!(a.values()[1..], [32.0, 32.0]);
        assert_eq!(b.values()[1..], [16.0, 16.0]);
    }

    #[test]
    fn extract_direct_read() {
        let mut data = vec![0.0f32; 4 * 4 * 3];
        data[(4 + 1) * 3..(4 + 1) * 3 + 3].copy_from_slice(&[1.0, 2.0, 3.0]);
        let map = FeatureMap::new(2, 4, 4, 3, data).unwrap();
        let p = FeaturePyramid::new(16, 16, vec![map]).unwrap();
        let t = extract_template(&p, &bx(4.0, 4.0, 2.0, 2.0)).unwrap();
        assert_eq!(t.values(), &[1.0, 2.0, 3.0]);
        let t2 = extract_template(&p, &bx(4.0, 4.0, 2.0, 2.0)).unwrap();
        assert_eq!(t, t2);
    }

    #[test]
    fn pyramid_validation() {
        let a = FeatureMap::zeros(2, 8, 8, 4);
        let b = FeatureMap::zeros(3, 4, 4, 4);
        let bad_depth = FeatureMap::zeros(3, 4, 4, 3);
        let bad_half = FeatureMap::zeros(3, 3, 4, 4);
        let gap = FeatureMap::zeros(4, 4, 4, 4);
        assert!(FeaturePyramid::new(32, 32, vec![a.clone(), b]).is_ok());
        assert!(FeaturePyramid::new(32, 32, vec![a.clone(), bad_depth]).is_err());
        assert!(FeaturePyramid::new(32, 32, vec![a.clone(), bad_half]).is_err());
        assert!(FeaturePyramid::new(32, 32, vec![a, gap]).is_err());
        assert!(FeaturePyramid::new(32, 32, vec![]).is_err());
        // odd sizes may round up
        let odd = FeatureMap::zeros(2, 5, 7, 1);
        let up = FeatureMap::zeros(3, 3, 4, 1);
        assert!(FeaturePyramid::new(28, 20, vec![odd, up]).is_ok());
    }

    #[test]
    fn feature_map_rejects_bad_data() {
        assert!(FeatureMap::new(2, 2, 2, 1, vec![0.0; 3]).is_err());
        assert!(FeatureMap::new(2, 2, 2, 1, vec![0.0, 1.0, f32::NAN, 0.0]).is_err());
        assert!(FeatureMap::new(2, 2, 2, 1, vec![0.0, 1.0, f32::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn mask_runs_validate_and_roundtrip() {
        assert!(Mask::new(2, 2, vec![1, 2]).is_err());
        let m = Mask::new(2, 3, vec![1, 2, 3]).unwrap();
        assert_eq!(m.to_bits(), vec![false, true, true, false, false, false]);
        assert_eq!(m.area(), 2);
        assert_eq!(Mask::from_bits(2, 3, &m.to_bits()).unwrap(), m);
        let starts_set = Mask::from_bits(1, 2, &[true, true]).unwrap();
        assert_eq!(starts_set.runs(), &[0, 2]);
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, r#"{"height":2,"width":3,"counts":[1,2,3]}"#);
        assert_eq!(serde_json::from_str::<Mask>(&json).unwrap(), m);
        assert!(serde_json::from_str::<Mask>(r#"{"height":2,"width":3,"counts":[1]}"#).is_err());
    }

    #[test]
    fn box_rasterization() {
        let m = Mask::from_box(&bx(1.0, 1.0, 2.0, 1.0), 3, 4);
        let expected = [
            false, false, false, false, //
            false, true, true, false, //
            false, false, false, false,
        ];
        assert_eq!(m.to_bits(), expected);
        let clipped = Mask::from_box(&bx(-5.0, -5.0, 100.0, 100.0), 3, 4);
        assert_eq!(clipped.area(), 12);
        let outside = Mask::from_box(&bx(50.0, 50.0, 2.0, 2.0), 3, 4);
        assert_eq!(outside.area(), 0);
    }

    #[test]
    fn box_parsing() {
        let b: BoundingBox = "1, 2,3,4".parse().unwrap();
        assert_eq!(b.to_array(), [1.0, 2.0, 3.0, 4.0]);
        assert!("1,2,3".parse::<BoundingBox>().is_err());
        assert!("1,2,0,4".parse::<BoundingBox>().is_err());
        assert!(serde_json::from_str::<BoundingBox>("[0,0,-1,1]").is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn assign_level_monotone_in_area(w in 1.0f64..2000.0, h in 1.0f64..2000.0, s in 1.0f64..4.0) {
                let a = assign_level(&bx(0.0, 0.0, w, h), 4).unwrap();
                let b = assign_level(&bx(0.0, 0.0, w * s, h * s), 4).unwrap();
                prop_assert!(a <= b);
            }

            #[test]
            fn center_cell_inside_grid(x in -1e4f64..1e4, y in -1e4f64..1e4, w in 0.1f64..1e4, h in 0.1f64..1e4, level in 2u32..=5) {
                let p = indexed_pyramid(100, 60);
                let (r, c) = center_cell(&bx(x, y, w, h), &p, level).unwrap();
                let m = p.level(level).unwrap();
                prop_assert!(r < m.height() && c < m.width());
            }
        }
    }
}
