//! Training labels for sub-window boxes.

use crate::bbox::BBox;
use crate::data_io::dataset::GtBox;
use crate::error::{Error, Result};

/// Overlap thresholds used to label a window box `B_r` against ground truth
/// `B_gt`, with `B_ov` their intersection area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelThresholds {
    /// Positive needs `B_ov / B_r >= positive_r` ...
    pub positive_r: f64,
    /// ... and `B_ov / B_gt >= positive_gt`.
    pub positive_gt: f64,
    /// Background needs `B_ov / B_r <= background_r` for every ground truth ...
    pub background_r: f64,
    /// ... and `B_ov / B_gt <= background_gt`.
    pub background_gt: f64,
}

impl Default for LabelThresholds {
    fn default() -> Self {
        LabelThresholds {
            positive_r: 0.5,
            positive_gt: 0.65,
            background_r: 0.1,
            background_gt: 0.1,
        }
    }
}

impl LabelThresholds {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.positive_r,
            self.positive_gt,
            self.background_r,
            self.background_gt,
        ];
        if all.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config(format!("label thresholds must lie in [0, 1]: {all:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    /// Object class index (0-based, background excluded).
    Class(usize),
    Background,
    Unused,
}

impl Label {
    /// Target index in the `K + 1` softmax output, background at 0.
    pub fn target(&self) -> Option<usize> {
        match self {
            Label::Class(k) => Some(k + 1),
            Label::Background => Some(0),
            Label::Unused => None,
        }
    }
}

fn ratios(ov: i64, r_area: i64, gt_area: i64) -> (f64, f64) {
    (ov as f64 / r_area as f64, ov as f64 / gt_area as f64)
}

/// Labels one window box. A window that is positive for two different
/// classes, or whose box has zero area, is unused.
pub fn label_subwindow(box_r: &BBox, gt: &[GtBox], t: &LabelThresholds) -> Label {
    let r_area = box_r.area();
    if r_area == 0 {
        return Label::Unused;
    }
    let mut positive: Option<usize> = None;
    let mut background = true;
    for g in gt {
        let gt_area = g.bbox.area();
        if gt_area == 0 {
            continue;
        }
        let (fr, fgt) = ratios(box_r.overlap_area(&g.bbox), r_area, gt_area);
        if fr >= t.positive_r && fgt >= t.positive_gt {
            match positive {
                Some(k) if k != g.class => return Label::Unused,
                _ => positive = Some(g.class),
            }
        }
        if fr > t.background_r || fgt > t.background_gt {
            background = false;
        }
    }
    match positive {
        Some(k) => Label::Class(k),
        None if background => Label::Background,
        None => Label::Unused,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn gt(class: usize, x0: i32, y0: i32, x1: i32, y1: i32) -> GtBox {
        GtBox {
            class,
            bbox: BBox::new(x0, y0, x1, y1),
        }
    }

    #[test]
    fn worked_examples() {
        let t = LabelThresholds::default();
        let r = BBox::new(0, 0, 10, 10);
        assert_eq!(label_subwindow(&r, &[gt(2, 0, 0, 12, 12)], &t), Label::Class(2));
        assert_eq!(label_subwindow(&r, &[gt(0, 50, 50, 60, 60)], &t), Label::Background);
        assert_eq!(label_subwindow(&r, &[gt(0, 5, 0, 15, 10)], &t), Label::Unused);
        assert_eq!(label_subwindow(&r, &[], &t), Label::Background);
        assert_eq!(label_subwindow(&BBox::new(3, 3, 3, 9), &[], &t), Label::Unused);
    }

    #[test]
    fn two_classes_make_a_window_unused() {
        let t = LabelThresholds {
            positive_r: 0.4,
            positive_gt: 0.65,
            ..LabelThresholds::default()
        };
        let r = BBox::new(0, 0, 10, 10);
        let both = [gt(0, 0, 0, 10, 5), gt(1, 0, 5, 10, 10)];
        assert_eq!(label_subwindow(&r, &both, &t), Label::Unused);
        let same = [gt(1, 0, 0, 10, 5), gt(1, 0, 5, 10, 10)];
        assert_eq!(label_subwindow(&r, &same, &t), Label::Class(1));
    }

    /// Overlap by counting pixels one at a time.
    fn pixel_overlap(a: &BBox, b: &BBox) -> i64 {
        let mut n = 0;
        for y in a.y0.min(b.y0)..a.y1.max(b.y1) {
            for x in a.x0.min(b.x0)..a.x1.max(b.x1) {
                if a.contains(x, y) && b.contains(x, y) {
                    n += 1;
                }
            }
        }
        n
    }

    fn pixel_area(a: &BBox) -> i64 {
        pixel_overlap(a, a)
    }

    fn oracle_label(r: &BBox, g: &GtBox, t: &LabelThresholds) -> Label {
        let ar = pixel_area(r);
        if ar == 0 {
            return Label::Unused;
        }
        let ov = pixel_overlap(r, &g.bbox) as f64;
        let ag = pixel_area(&g.bbox) as f64;
        let ar = ar as f64;
        if ov / ar >= t.positive_r && ov / ag >= t.positive_gt {
            Label::Class(g.class)
        } else if ov / ar <= t.background_r && ov / ag <= t.background_gt {
            Label::Background
        } else {
            Label::Unused
        }
    }

    fn random_box(rng: &mut SplitMix64) -> BBox {
        let x0 = rng.range_inclusive(0, 30) as i32;
        let y0 = rng.range_inclusive(0, 30) as i32;
        BBox::new(
            x0,
            y0,
            x0 + rng.range_inclusive(1, 20) as i32,
            y0 + rng.range_inclusive(1, 20) as i32,
        )
    }

    #[test]
    fn agrees_with_pixel_counting_oracle() {
        let t = LabelThresholds::default();
        let mut rng = SplitMix64::new(77);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..1000 {
            let r = random_box(&mut rng);
            let g = gt(1, 0, 0, 0, 0);
            let g = GtBox {
                bbox: random_box(&mut rng),
                ..g
            };
            let expected = oracle_label(&r, &g, &t);
            seen.insert(expected);
            assert_eq!(label_subwindow(&r, &[g], &t), expected, "{r} vs {}", g.bbox);
        }
        assert_eq!(seen.len(), 3, "random pairs should exercise every label");
    }
}
