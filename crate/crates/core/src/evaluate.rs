//! Localization evaluation: point-in-box with tolerance, IoU detection, and
//! all-points average precision.

use std::fmt;

use log::warn;
use rayon::prelude::*;

use crate::bbox::BBox;
use crate::data_io::dataset::LoadedImage;
use crate::error::{Error, Result};
use crate::experts::classify_image;
use crate::scanner::Detection;
use crate::scoremap::{argmax_location, scoremap_for_class};

pub const DEFAULT_TOLERANCE: i32 = 18;

/// Produces scored detections for an image. Implemented by trained models
/// and by test oracles.
pub trait Detector: Sync {
    fn detect(&self, sample: &LoadedImage) -> Result<Vec<Detection>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalMode {
    /// Score-map argmax inside a ground-truth box grown by `tolerance` pixels.
    Criterion1 { tolerance: i32 },
    /// Best detection box overlapping a ground-truth box with IoU at least `threshold`.
    Iou { threshold: f64 },
}

/// True when `point` lies in some box expanded by `tolerance` on every side
/// and clipped to the image.
pub fn criterion1_match(point: (i32, i32), gt: &[BBox], tolerance: i32, width: usize, height: usize) -> bool {
    gt.iter().any(|b| {
        b.expand(tolerance)
            .clip(width as i32, height as i32)
            .contains(point.0, point.1)
    })
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.overlap_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub image: usize,
    pub class: usize,
    pub score: f64,
    pub correct: bool,
}

/// Stable sort by descending score: equal scores keep their input order.
pub fn rank_records(records: &mut [EvalRecord]) {
    records.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// All-points interpolated AP of ranked records against `positives` ground
/// truth items. `None` when there are no positives.
pub fn average_precision(ranked: &[EvalRecord], positives: usize) -> Option<f64> {
    if positives == 0 {
        return None;
    }
    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (i, r) in ranked.iter().enumerate() {
        if r.correct {
            tp += 1;
        }
        recall.push(tp as f64 / positives as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // Precision envelope: best precision at any recall at least this high.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Per class: name and AP, `None` when the class had no positives.
    pub per_class: Vec<(String, Option<f64>)>,
    pub map: f64,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, ap) in &self.per_class {
            if let Some(ap) = ap {
                writeln!(f, "{name}\t{ap:.6}")?;
            }
        }
        writeln!(f, "mAP\t{:.6}", self.map)
    }
}

/// Records of one image for every class, given its detections.
pub fn image_records(
    index: usize,
    sample: &LoadedImage,
    detections: &[Detection],
    classes: usize,
    mode: EvalMode,
    exponent: u32,
) -> Result<Vec<EvalRecord>> {
    let (w, h) = (sample.image.width(), sample.image.height());
    match mode {
        EvalMode::Criterion1 { tolerance } => {
            let scores: Vec<Vec<f32>> = detections.iter().map(|d| d.scores.clone()).collect();
            let image_scores = classify_image(&scores)?;
            Ok((0..classes)
                .map(|k| {
                    let gt: Vec<BBox> = gt_of(sample, k);
                    let correct = !gt.is_empty() && {
                        let map = scoremap_for_class(detections, k, w, h, exponent);
                        let (x, y) = argmax_location(&map);
                        criterion1_match((x as i32, y as i32), &gt, tolerance, w, h)
                    };
                    EvalRecord {
                        image: index,
                        class: k,
                        score: image_scores[k] as f64,
                        correct,
                    }
                })
                .collect())
        }
        EvalMode::Iou { threshold } => {
            if detections.is_empty() {
                return Err(Error::Input(format!("{}: no detections", sample.id)));
            }
            Ok((0..classes)
                .map(|k| {
                    // First detection in enumeration order wins ties.
                    let best = detections
                        .iter()
                        .reduce(|a, b| if b.scores[k] > a.scores[k] { b } else { a })
                        .expect("nonempty");
                    let correct = gt_of(sample, k).iter().any(|g| iou(&best.bbox, g) >= threshold);
                    EvalRecord {
                        image: index,
                        class: k,
                        score: best.scores[k] as f64,
                        correct,
                    }
                })
                .collect())
        }
    }
}

fn gt_of(sample: &LoadedImage, class: usize) -> Vec<BBox> {
    sample
        .boxes
        .iter()
        .filter(|b| b.class == class)
        .map(|b| b.bbox)
        .collect()
}

/// Runs `detector` over every image and computes per-class AP and mAP.
/// Each (image, class) pair is one ranked item; the positives of a class are
/// the images containing it. Classes without positives are left out of the
/// mean.
pub fn evaluate_localization(
    images: &[LoadedImage],
    classes: &[String],
    detector: &dyn Detector,
    mode: EvalMode,
    exponent: u32,
) -> Result<EvalReport> {
    let per_image: Vec<Vec<EvalRecord>> = images
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let detections = detector.detect(sample)?;
            image_records(i, sample, &detections, classes.len(), mode, exponent)
        })
        .collect::<Result<_>>()?;
    let mut per_class = Vec::with_capacity(classes.len());
    for (k, name) in classes.iter().enumerate() {
        let mut records: Vec<EvalRecord> = per_image.iter().map(|r| r[k].clone()).collect();
        rank_records(&mut records);
        let positives = images.iter().filter(|s| s.boxes.iter().any(|b| b.class == k)).count();
        let ap = average_precision(&records, positives);
        if ap.is_none() {
            warn!("class {name} has no positive images; left out of mAP");
        }
        per_class.push((name.clone(), ap));
    }
    let aps: Vec<f64> = per_class.iter().filter_map(|(_, ap)| *ap).collect();
    if aps.is_empty() {
        return Err(Error::Input("no class has any positive image to evaluate".into()));
    }
    Ok(EvalReport {
        map: aps.iter().sum::<f64>() / aps.len() as f64,
        per_class,
    })
}
