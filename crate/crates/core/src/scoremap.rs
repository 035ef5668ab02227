//! Per-pixel score aggregation over detection boxes.
//!
//! For a class `k` and exponent `n`, the score at pixel `x` is the mean of
//! `sc_i[k]^n` over the `M(x)` detections whose box contains `x`, or 0 where
//! no box does. Sums are accumulated with a 2D difference array in 64.64
//! fixed point, so they are exact: the result does not depend on detection
//! order, and changing one detection only affects pixels inside its box.

use std::path::Path;

use crate::bbox::BBox;
use crate::data_io::ppm::save_pgm;
use crate::error::Result;
use crate::scanner::Detection;

/// Exponent applied to detection scores before averaging.
pub const DEFAULT_EXPONENT: u32 = 5;

const FIXED_ONE: f64 = 18_446_744_073_709_551_616.0; // 2^64

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    width: usize,
    height: usize,
    scores: Vec<f64>,
    counts: Vec<u32>,
}

impl ScoreMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.scores[y * self.width + x]
    }

    /// Number of boxes containing the pixel.
    pub fn count(&self, x: usize, y: usize) -> u32 {
        self.counts[y * self.width + x]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn max(&self) -> f64 {
        self.scores.iter().copied().fold(0.0, f64::max)
    }
}

fn to_fixed(v: f64) -> i128 {
    (v * FIXED_ONE).round() as i128
}

/// Builds the map from `(box, score)` pairs. Boxes are clipped to the image;
/// scores are probabilities and are clamped to `[0, 1]`.
pub fn accumulate_scoremap(
    items: impl IntoIterator<Item = (BBox, f64)>,
    width: usize,
    height: usize,
    n: u32,
) -> ScoreMap {
    assert!(n >= 1, "score exponent must be at least 1");
    let (w1, h1) = (width + 1, height + 1);
    let mut sum = vec![0i128; w1 * h1];
    let mut cnt = vec![0i64; w1 * h1];
    for (bbox, score) in items {
        let b = bbox.clip(width as i32, height as i32);
        if b.is_empty() {
            continue;
        }
        let v = to_fixed(score.clamp(0.0, 1.0).powi(n as i32));
        let (x0, y0, x1, y1) = (b.x0 as usize, b.y0 as usize, b.x1 as usize, b.y1 as usize);
        for (x, y, sign) in [(x0, y0, 1), (x1, y0, -1), (x0, y1, -1), (x1, y1, 1)] {
            sum[y * w1 + x] += sign as i128 * v;
            cnt[y * w1 + x] += sign;
        }
    }
    // Prefix sums along rows, then columns.
    for y in 0..h1 {
        for x in 1..w1 {
            sum[y * w1 + x] += sum[y * w1 + x - 1];
            cnt[y * w1 + x] += cnt[y * w1 + x - 1];
        }
    }
    for y in 1..h1 {
        for x in 0..w1 {
            sum[y * w1 + x] += sum[(y - 1) * w1 + x];
            cnt[y * w1 + x] += cnt[(y - 1) * w1 + x];
        }
    }
    let mut scores = Vec::with_capacity(width * height);
    let mut counts = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let m = cnt[y * w1 + x];
            counts.push(m as u32);
            scores.push(if m == 0 {
                0.0
            } else {
                sum[y * w1 + x] as f64 / FIXED_ONE / m as f64
            });
        }
    }
    ScoreMap {
        width,
        height,
        scores,
        counts,
    }
}

/// Score map of object class `class` (0-based, background excluded).
pub fn scoremap_for_class(
    detections: &[Detection],
    class: usize,
    width: usize,
    height: usize,
    n: u32,
) -> ScoreMap {
    accumulate_scoremap(
        detections.iter().map(|d| (d.bbox, d.scores[class] as f64)),
        width,
        height,
        n,
    )
}

/// Maximising pixel `(x, y)`; the first in row-major order wins ties.
pub fn argmax_location(map: &ScoreMap) -> (usize, usize) {
    let mut best = 0;
    for (i, &v) in map.scores.iter().enumerate() {
        if v > map.scores[best] {
            best = i;
        }
    }
    (best % map.width.max(1), best / map.width.max(1))
}

/// 8-bit rendering, linearly scaled so the maximum maps to 255.
pub fn to_gray(map: &ScoreMap) -> Vec<u8> {
    let max = map.max();
    if max <= 0.0 {
        return vec![0; map.scores.len()];
    }
    map.scores
        .iter()
        .map(|&v| (v / max * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

pub fn emit_scoremap_image(map: &ScoreMap, path: &Path) -> Result<()> {
    save_pgm(map.width, map.height, &to_gray(map), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn naive(items: &[(BBox, f64)], width: usize, height: usize, n: u32) -> Vec<f64> {
        let mut out = Vec::new();
        for y in 0..height as i32 {
            for x in 0..width as i32 {
                let inside: Vec<f64> = items
                    .iter()
                    .filter(|(b, _)| b.contains(x, y))
                    .map(|(_, s)| s.powi(n as i32))
                    .collect();
                out.push(if inside.is_empty() {
                    0.0
                } else {
                    inside.iter().sum::<f64>() / inside.len() as f64
                });
            }
        }
        out
    }

    fn random_items(rng: &mut SplitMix64, count: usize, w: usize, h: usize) -> Vec<(BBox, f64)> {
        (0..count)
            .map(|_| {
                let x0 = rng.below(w as u64) as i32;
                let y0 = rng.below(h as u64) as i32;
                let x1 = rng.range_inclusive(x0 as i64 + 1, w as i64) as i32;
                let y1 = rng.range_inclusive(y0 as i64 + 1, h as i64) as i32;
                (BBox::new(x0, y0, x1, y1), rng.next_f64())
            })
            .collect()
    }

    #[test]
    fn worked_examples() {
        let b = BBox::new(2, 2, 6, 6);
        let m = accumulate_scoremap([(b, 0.5)], 8, 8, 5);
        assert_eq!(m.get(3, 3), 0.03125);
        assert_eq!(m.get(7, 7), 0.0);
        let m = accumulate_scoremap([(b, 1.0), (b, 0.5)], 8, 8, 5);
        assert_eq!(m.get(2, 5), 0.515625);
        assert_eq!(m.count(2, 5), 2);
        let m = accumulate_scoremap([(b, 0.37)], 8, 8, 1);
        assert_eq!(m.get(5, 2), 0.37);
    }

    #[test]
    fn matches_naive_on_random_grid() {
        let mut rng = SplitMix64::new(8);
        let items = random_items(&mut rng, 100, 64, 64);
        let fast = accumulate_scoremap(items.clone(), 64, 64, 5);
        for (a, b) in fast.scores().iter().zip(naive(&items, 64, 64, 5)) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn argmax_tie_breaks() {
        let zero = accumulate_scoremap(std::iter::empty(), 5, 4, 5);
        assert_eq!(argmax_location(&zero), (0, 0));
        let peak = accumulate_scoremap([(BBox::new(3, 2, 4, 3), 0.9)], 5, 4, 5);
        assert_eq!(argmax_location(&peak), (3, 2));
        let plateau = accumulate_scoremap([(BBox::new(1, 1, 4, 3), 0.9)], 5, 4, 5);
        assert_eq!(argmax_location(&plateau), (1, 1));
    }

    #[test]
    fn gray_image_normalisation() {
        let m = accumulate_scoremap([(BBox::new(0, 0, 2, 1), 1.0), (BBox::new(1, 0, 2, 1), 0.0)], 3, 1, 1);
        assert_eq!(to_gray(&m), vec![255, 128, 0]);
        let zero = accumulate_scoremap(std::iter::empty(), 3, 2, 5);
        assert_eq!(to_gray(&zero), vec![0; 6]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        emit_scoremap_image(&m, &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"P5\n3 1\n255\n\xff\x80\x00");
    }

    proptest! {
        #[test]
        fn summed_area_equals_naive(seed in any::<u64>(), w in 1usize..40, h in 1usize..40, count in 0usize..60) {
            let mut rng = SplitMix64::new(seed);
            let items = random_items(&mut rng, count, w, h);
            let fast = accumulate_scoremap(items.clone(), w, h, 5);
            for (a, b) in fast.scores().iter().zip(naive(&items, w, h, 5)) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn raising_one_score_is_monotone_and_local(seed in any::<u64>(), count in 1usize..30, bump in 0.0f64..1.0) {
            let mut rng = SplitMix64::new(seed);
            let mut items = random_items(&mut rng, count, 24, 24);
            let before = accumulate_scoremap(items.clone(), 24, 24, 5);
            let j = rng.below(count as u64) as usize;
            items[j].1 = items[j].1 + bump * (1.0 - items[j].1);
            let after = accumulate_scoremap(items.clone(), 24, 24, 5);
            for y in 0..24 {
                for x in 0..24 {
                    if items[j].0.contains(x as i32, y as i32) {
                        prop_assert!(after.get(x, y) >= before.get(x, y));
                    } else {
                        prop_assert_eq!(after.get(x, y), before.get(x, y));
                    }
                }
            }
        }

        #[test]
        fn argmax_ignores_detection_order(seed in any::<u64>(), count in 1usize..40) {
            let mut rng = SplitMix64::new(seed);
            let mut items = random_items(&mut rng, count, 20, 20);
            let a = argmax_location(&accumulate_scoremap(items.clone(), 20, 20, 5));
            rng.shuffle(&mut items);
            let shuffled = accumulate_scoremap(items, 20, 20, 5);
            prop_assert_eq!(a, argmax_location(&shuffled));
        }

        #[test]
        fn unit_exponent_single_box_is_raw_score(score in 0.0f64..=1.0) {
            let m = accumulate_scoremap([(BBox::new(1, 1, 3, 3), score)], 4, 4, 1);
            prop_assert!((m.get(2, 2) - score).abs() <= 1e-15);
        }
    }
}
