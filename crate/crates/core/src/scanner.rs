//! Sub-window search over the feature maps of every pyramid level.

use std::fmt;

use rayon::prelude::*;

use crate::backbone::{Backbone, Geometry};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::experts::ExpertBank;
use crate::pyramid::{build_pyramid, preprocess, PyramidLevel, RawImage};
use crate::tensor::Tensor3;

/// Inclusive range of window sides, in feature cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ShapeRange {
    pub min: usize,
    pub max: usize,
}

impl ShapeRange {
    pub const fn new(min: usize, max: usize) -> Self {
        ShapeRange { min, max }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min == 0 || self.min > self.max {
            return Err(Error::Config(format!(
                "invalid window shape range {}..{}",
                self.min, self.max
            )));
        }
        Ok(())
    }

    /// All `(w, h)` keys, ordered by `h` then `w`.
    pub fn shapes(&self) -> Vec<WindowShape> {
        let mut out = Vec::new();
        for h in self.min..=self.max {
            for w in self.min..=self.max {
                out.push(WindowShape { w, h });
            }
        }
        out
    }

    pub fn contains(&self, shape: WindowShape) -> bool {
        (self.min..=self.max).contains(&shape.w) && (self.min..=self.max).contains(&shape.h)
    }
}

impl Default for ShapeRange {
    fn default() -> Self {
        ShapeRange::new(4, 6)
    }
}

/// Window width and height in feature cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WindowShape {
    pub w: usize,
    pub h: usize,
}

impl fmt::Display for WindowShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.w, self.h)
    }
}

/// One candidate region: top-left cell and size on one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SubWindowRef {
    pub level: usize,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl SubWindowRef {
    pub fn shape(&self) -> WindowShape {
        WindowShape {
            w: self.w,
            h: self.h,
        }
    }

    /// Enumeration order key.
    pub fn sort_key(&self) -> (usize, usize, usize, usize, usize) {
        (self.level, self.y, self.x, self.h, self.w)
    }
}

/// Windows of every shape in `range` on each level, ordered by
/// `(level, y, x, h, w)`.
pub fn enumerate_subwindows(featmap_sides: &[usize], range: ShapeRange) -> Vec<SubWindowRef> {
    let mut out = Vec::new();
    for (level, &s) in featmap_sides.iter().enumerate() {
        for y in 0..s {
            for x in 0..s {
                for h in range.min..=range.max {
                    if y + h > s {
                        break;
                    }
                    for w in range.min..=range.max {
                        if x + w > s {
                            break;
                        }
                        out.push(SubWindowRef { level, x, y, w, h });
                    }
                }
            }
        }
    }
    out
}

/// Windows of a single shape on a map of side `s`, row-major by top-left.
pub fn windows_of_shape(level: usize, s: usize, shape: WindowShape) -> Vec<SubWindowRef> {
    if shape.w > s || shape.h > s {
        return Vec::new();
    }
    let mut out = Vec::with_capacity((s - shape.w + 1) * (s - shape.h + 1));
    for y in 0..=s - shape.h {
        for x in 0..=s - shape.w {
            out.push(SubWindowRef {
                level,
                x,
                y,
                w: shape.w,
                h: shape.h,
            });
        }
    }
    out
}

/// `Σ_w Σ_h max(0, s-w+1) * max(0, s-h+1)`.
pub fn window_count(featmap_side: usize, range: ShapeRange) -> usize {
    let per_axis: usize = (range.min..=range.max)
        .map(|k| (featmap_side + 1).saturating_sub(k))
        .sum();
    per_axis * per_axis
}

/// Fixed-size classifier input: a `side x side x C` block holding the window
/// features centred, zeros elsewhere. Only the window content is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    shape: WindowShape,
    side: usize,
    channels: usize,
    /// `channels x h x w`, channel-major.
    content: Vec<f32>,
}

impl Blob {
    pub fn shape(&self) -> WindowShape {
        self.shape
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Length of the flattened dense blob.
    pub fn dense_len(&self) -> usize {
        self.side * self.side * self.channels
    }

    /// Column and row offset of the content inside the blob.
    pub fn offset(&self) -> (usize, usize) {
        (
            (self.side - self.shape.w) / 2,
            (self.side - self.shape.h) / 2,
        )
    }

    /// Non-zero-region entries as `(dense index, value)`, ascending by index.
    pub fn entries(&self) -> impl Iterator<Item = (usize, f32)> + '_ {
        let (ox, oy) = self.offset();
        let (w, h, side) = (self.shape.w, self.shape.h, self.side);
        self.content.iter().enumerate().map(move |(i, &v)| {
            let col = i % w;
            let row = (i / w) % h;
            let c = i / (w * h);
            ((c * side + oy + row) * side + ox + col, v)
        })
    }

    pub fn to_tensor(&self) -> Tensor3 {
        let mut t = Tensor3::zeros(self.channels, self.side, self.side);
        let data = t.data_mut();
        for (i, v) in self.entries() {
            data[i] = v;
        }
        t
    }
}

/// Copies a window's features into a blob of side `blob_side`.
pub fn extract_blob(featmap: &Tensor3, win: &SubWindowRef, blob_side: usize) -> Result<Blob> {
    if win.x + win.w > featmap.width()
        || win.y + win.h > featmap.height()
        || win.w > blob_side
        || win.h > blob_side
    {
        return Err(Error::Invariant(format!(
            "window {}x{} at ({}, {}) outside {}x{} feature map or blob side {blob_side}",
            win.w,
            win.h,
            win.x,
            win.y,
            featmap.width(),
            featmap.height()
        )));
    }
    let c = featmap.channels();
    let mut content = Vec::with_capacity(c * win.w * win.h);
    for ch in 0..c {
        for row in 0..win.h {
            let start = featmap.index(ch, win.y + row, win.x);
            content.extend_from_slice(&featmap.data()[start..start + win.w]);
        }
    }
    Ok(Blob {
        shape: win.shape(),
        side: blob_side,
        channels: c,
        content,
    })
}

/// How feature-cell windows map to image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoxMapping {
    /// Feature fraction to image fraction: `round(x / S * side)`.
    #[default]
    Proportional,
    /// `x * stride_total + offset`.
    ReceptiveField { offset: i32 },
}

/// Everything needed to map a window on one level back to original pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelFrame {
    pub level: usize,
    /// Side of the padded square fed to the backbone.
    pub side: usize,
    pub featmap_side: usize,
    pub stride_total: usize,
    /// Original pixels per level pixel.
    pub to_original: f64,
    pub original_width: usize,
    pub original_height: usize,
}

impl LevelFrame {
    pub fn new(level: &PyramidLevel, geometry: Geometry) -> Self {
        LevelFrame {
            level: level.index,
            side: level.side,
            featmap_side: geometry.featmap_side,
            stride_total: geometry.stride_total,
            to_original: level.to_original(),
            original_width: level.original_width,
            original_height: level.original_height,
        }
    }
}

/// Image-space box of a window in original-image pixels, clipped to the image.
pub fn subwindow_to_bbox(win: &SubWindowRef, frame: &LevelFrame, mapping: BoxMapping) -> BBox {
    let s = frame.featmap_side as f64;
    let side = frame.side as f64;
    let to_level = |cell: usize| -> f64 {
        match mapping {
            BoxMapping::Proportional => (cell as f64 / s * side).round(),
            BoxMapping::ReceptiveField { offset } => {
                (cell * frame.stride_total) as f64 + offset as f64
            }
        }
    };
    let to_orig = |v: f64| (v * frame.to_original).round() as i32;
    BBox::new(
        to_orig(to_level(win.x)),
        to_orig(to_level(win.y)),
        to_orig(to_level(win.x + win.w)),
        to_orig(to_level(win.y + win.h)),
    )
    .clip(frame.original_width as i32, frame.original_height as i32)
}

/// Same mapping, but in padded level-square pixels (used to crop windows).
pub fn subwindow_to_level_box(win: &SubWindowRef, frame: &LevelFrame, mapping: BoxMapping) -> BBox {
    let s = frame.featmap_side as f64;
    let side = frame.side as f64;
    let f = |cell: usize| -> i32 {
        match mapping {
            BoxMapping::Proportional => (cell as f64 / s * side).round() as i32,
            BoxMapping::ReceptiveField { offset } => (cell * frame.stride_total) as i32 + offset,
        }
    };
    BBox::new(f(win.x), f(win.y), f(win.x + win.w), f(win.y + win.h))
        .clip(frame.side as i32, frame.side as i32)
}

/// Scores from one sub-window.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub window: SubWindowRef,
    pub bbox: BBox,
    /// Softmax probability of each object class (background excluded).
    pub scores: Vec<f32>,
}

impl Detection {
    /// Highest-scoring object class and its score; first class wins ties.
    pub fn best_class(&self) -> (usize, f32) {
        self.scores
            .iter()
            .copied()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |best, (k, s)| if s > best.1 { (k, s) } else { best })
    }
}

/// Computed feature map for one pyramid level.
#[derive(Debug, Clone)]
pub struct LevelFeatures {
    pub frame: LevelFrame,
    pub featmap: Tensor3,
}

/// Runs the backbone once per level.
pub fn compute_features(backbone: &Backbone, levels: &[PyramidLevel]) -> Result<Vec<LevelFeatures>> {
    levels
        .iter()
        .map(|level| {
            let geometry = backbone.geometry(level.side)?;
            let featmap = backbone.forward(&level.image)?;
            Ok(LevelFeatures {
                frame: LevelFrame::new(level, geometry),
                featmap,
            })
        })
        .collect()
}

/// Classifies every sub-window of every level with its shape's expert.
/// Output order is the enumeration order regardless of thread count.
pub fn scan_image(
    levels: &[LevelFeatures],
    bank: &ExpertBank,
    mapping: BoxMapping,
) -> Result<Vec<Detection>> {
    let range = bank.shapes();
    for shape in range.shapes() {
        if bank.unit_for(shape).is_none() {
            return Err(Error::Config(format!("no expert unit for window shape {shape}")));
        }
    }
    let sides: Vec<usize> = levels.iter().map(|l| l.frame.featmap_side).collect();
    let windows = enumerate_subwindows(&sides, range);
    windows
        .par_iter()
        .map(|win| {
            let level = &levels[win.level];
            let blob = extract_blob(&level.featmap, win, range.max)?;
            let probs = bank.classify(&blob)?;
            Ok(Detection {
                window: *win,
                bbox: subwindow_to_bbox(win, &level.frame, mapping),
                scores: probs[1..].iter().map(|&p| p as f32).collect(),
            })
        })
        .collect()
}

/// Input normalisation and search settings shared by training and inference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanConfig {
    /// Long side of pyramid level 0.
    pub base_side: usize,
    pub levels: usize,
    pub shapes: ShapeRange,
    pub mapping: BoxMapping,
    /// Subtracted from content pixels (in `[0, 1]` units) before the backbone.
    pub pixel_offset: f32,
}

impl ScanConfig {
    pub fn tinynet_default() -> Self {
        ScanConfig {
            base_side: 96,
            levels: 2,
            shapes: ShapeRange::default(),
            mapping: BoxMapping::Proportional,
            pixel_offset: 0.0,
        }
    }

    pub fn alexnet_default() -> Self {
        ScanConfig {
            base_side: 227,
            ..Self::tinynet_default()
        }
    }
}

/// Normalises an image, builds its pyramid and runs the backbone on each level.
pub fn image_features(image: &RawImage, backbone: &Backbone, scan: &ScanConfig) -> Result<Vec<LevelFeatures>> {
    let level0 = preprocess(image, scan.base_side, scan.pixel_offset)?;
    let levels = build_pyramid(&level0, scan.levels)?;
    compute_features(backbone, &levels)
}

/// Full detection pass for one image: one backbone run per level, then every
/// sub-window classified by its expert.
pub fn detect_image(
    image: &RawImage,
    backbone: &Backbone,
    bank: &ExpertBank,
    scan: &ScanConfig,
) -> Result<Vec<Detection>> {
    if bank.shapes() != scan.shapes {
        return Err(Error::Config(format!(
            "expert bank covers shapes {}..{} but the scan uses {}..{}",
            bank.shapes().min,
            bank.shapes().max,
            scan.shapes.min,
            scan.shapes.max
        )));
    }
    let features = image_features(image, backbone, scan)?;
    scan_image(&features, bank, scan.mapping)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    /// Every (x, y, w, h) combination checked one by one.
    fn brute_force_count(s: usize, range: ShapeRange) -> usize {
        let mut n = 0;
        for w in range.min..=range.max {
            for h in range.min..=range.max {
                for x in 0..s {
                    for y in 0..s {
                        if x + w <= s && y + h <= s {
                            n += 1;
                        }
                    }
                }
            }
        }
        n
    }

    #[test]
    fn paper_and_tinynet_counts() {
        let r = ShapeRange::default();
        assert_eq!(enumerate_subwindows(&[6], r).len(), 36);
        assert_eq!(enumerate_subwindows(&[13], r).len(), 729);
        assert_eq!(enumerate_subwindows(&[6, 13], r).len(), 765);
        assert_eq!(enumerate_subwindows(&[6, 12], r).len(), 612);
        assert_eq!(enumerate_subwindows(&[3], r).len(), 0);
    }

    #[test]
    fn enumeration_is_sorted_by_key() {
        let wins = enumerate_subwindows(&[7, 9], ShapeRange::default());
        assert!(wins.windows(2).all(|p| p[0].sort_key() < p[1].sort_key()));
    }

    fn random_map(c: usize, s: usize, seed: u64) -> Tensor3 {
        let mut rng = SplitMix64::new(seed);
        Tensor3::new(c, s, s, (0..c * s * s).map(|_| rng.uniform(-1.0, 1.0) as f32).collect())
            .unwrap()
    }

    #[test]
    fn full_window_blob_equals_map() {
        let map = random_map(3, 6, 1);
        let blob = extract_blob(&map, &SubWindowRef { level: 0, x: 0, y: 0, w: 6, h: 6 }, 6).unwrap();
        assert_eq!(blob.to_tensor(), map);
    }

    #[test]
    fn small_windows_are_centred() {
        let map = Tensor3::new(1, 6, 6, vec![1.0; 36]).unwrap();
        let b = extract_blob(&map, &SubWindowRef { level: 0, x: 2, y: 1, w: 4, h: 4 }, 6).unwrap();
        let t = b.to_tensor();
        for y in 0..6 {
            for x in 0..6 {
                let inside = (1..=4).contains(&x) && (1..=4).contains(&y);
                assert_eq!(t.get(0, y, x), if inside { 1.0 } else { 0.0 });
            }
        }
        let b = extract_blob(&map, &SubWindowRef { level: 0, x: 0, y: 0, w: 5, h: 4 }, 6).unwrap();
        let t = b.to_tensor();
        for y in 0..6 {
            for x in 0..6 {
                let inside = x <= 4 && (1..=4).contains(&y);
                assert_eq!(t.get(0, y, x), if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn out_of_bounds_window_is_a_logic_error() {
        let map = random_map(2, 6, 3);
        let win = SubWindowRef { level: 0, x: 3, y: 0, w: 4, h: 4 };
        assert!(matches!(extract_blob(&map, &win, 6), Err(Error::Invariant(_))));
    }

    fn frame(side: usize, s: usize, orig: usize) -> LevelFrame {
        LevelFrame {
            level: 0,
            side,
            featmap_side: s,
            stride_total: 32,
            to_original: orig as f64 / side as f64,
            original_width: orig,
            original_height: orig,
        }
    }

    #[test]
    fn proportional_box_examples() {
        let m = BoxMapping::Proportional;
        let full = SubWindowRef { level: 0, x: 0, y: 0, w: 6, h: 6 };
        assert_eq!(subwindow_to_bbox(&full, &frame(227, 6, 227), m), BBox::new(0, 0, 227, 227));
        let four = SubWindowRef { level: 0, x: 0, y: 0, w: 4, h: 4 };
        assert_eq!(subwindow_to_bbox(&four, &frame(227, 6, 227), m), BBox::new(0, 0, 151, 151));
        let lvl1 = SubWindowRef { level: 1, ..four };
        assert_eq!(subwindow_to_bbox(&lvl1, &frame(454, 13, 227), m), BBox::new(0, 0, 70, 70));
    }

    #[test]
    fn receptive_field_mapping() {
        let m = BoxMapping::ReceptiveField { offset: 0 };
        let win = SubWindowRef { level: 0, x: 1, y: 2, w: 4, h: 4 };
        let mut f = frame(96, 6, 96);
        f.stride_total = 16;
        assert_eq!(subwindow_to_bbox(&win, &f, m), BBox::new(16, 32, 80, 96));
    }

    proptest! {
        #[test]
        fn count_matches_brute_force(s in 0usize..20, lo in 1usize..5, extra in 0usize..4) {
            let r = ShapeRange::new(lo, lo + extra);
            let n = brute_force_count(s, r);
            prop_assert_eq!(enumerate_subwindows(&[s], r).len(), n);
            prop_assert_eq!(window_count(s, r), n);
        }

        #[test]
        fn blob_content_is_bit_exact(seed in any::<u64>(), x in 0usize..4, y in 0usize..4, w in 4usize..7, h in 4usize..7) {
            let map = random_map(3, 10, seed);
            let win = SubWindowRef { level: 0, x, y, w, h };
            let t = extract_blob(&map, &win, 6).unwrap().to_tensor();
            let (ox, oy) = ((6 - w) / 2, (6 - h) / 2);
            for c in 0..3 {
                for by in 0..6 {
                    for bx in 0..6 {
                        let v = t.get(c, by, bx);
                        if bx >= ox && bx < ox + w && by >= oy && by < oy + h {
                            prop_assert_eq!(v.to_bits(), map.get(c, y + by - oy, x + bx - ox).to_bits());
                        } else {
                            prop_assert_eq!(v.to_bits(), 0f32.to_bits());
                        }
                    }
                }
            }
        }

        #[test]
        fn content_windows_stay_within_image(w0 in 20usize..300, h0 in 20usize..300, s in 6usize..14) {
            // A window inside the content region maps inside the image up to rounding.
            let long = w0.max(h0);
            let side = 227usize;
            let f = LevelFrame { level: 0, side, featmap_side: s, stride_total: 32,
                to_original: long as f64 / side as f64, original_width: w0, original_height: h0 };
            let content_w = (w0 as f64 * side as f64 / long as f64).round();
            let content_h = (h0 as f64 * side as f64 / long as f64).round();
            for win in enumerate_subwindows(&[s], ShapeRange::new(1, 6)) {
                let x1 = ((win.x + win.w) as f64 / s as f64 * side as f64).round();
                let y1 = ((win.y + win.h) as f64 / s as f64 * side as f64).round();
                if x1 > content_w || y1 > content_h { continue; }
                let unclipped_x1 = (x1 * f.to_original).round() as i64;
                let unclipped_y1 = (y1 * f.to_original).round() as i64;
                prop_assert!(unclipped_x1 <= w0 as i64 + 1);
                prop_assert!(unclipped_y1 <= h0 as i64 + 1);
            }
        }
    }
}
