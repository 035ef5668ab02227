//! Timing of feature-map scanning against per-window backbone recomputation.

use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::pyramid::{build_pyramid, preprocess, resize_bilinear, RawImage};
use crate::scanner::{
    enumerate_subwindows, extract_blob, subwindow_to_bbox, subwindow_to_level_box, Detection, LevelFrame,
    SubWindowRef,
};
use crate::tensor::Tensor3;

/// The strawman: every window's image region is cropped from its pyramid
/// level, resized to the base input and pushed through the whole backbone.
/// The window's `w x h` cells are then taken from the centre of the
/// resulting map and classified by the same expert.
pub fn naive_detect(model: &Model, image: &RawImage) -> Result<Vec<Detection>> {
    let scan = &model.config.scan;
    let level0 = preprocess(image, scan.base_side, scan.pixel_offset)?;
    let levels = build_pyramid(&level0, scan.levels)?;
    let frames: Vec<LevelFrame> = levels
        .iter()
        .map(|l| Ok(LevelFrame::new(l, model.backbone.geometry(l.side)?)))
        .collect::<Result<_>>()?;
    let base_geometry = model.backbone.geometry(scan.base_side)?;
    let s = base_geometry.featmap_side;
    let sides: Vec<usize> = frames.iter().map(|f| f.featmap_side).collect();
    let windows = enumerate_subwindows(&sides, scan.shapes);
    windows
        .par_iter()
        .map(|win| {
            let level = &levels[win.level];
            let frame = &frames[win.level];
            let region = subwindow_to_level_box(win, frame, scan.mapping);
            if region.is_empty() {
                return Err(Error::Invariant(format!("window {win:?} maps to an empty region")));
            }
            let crop = crop_region(&level.image, region.x0 as usize, region.y0 as usize, region.width() as usize, region.height() as usize);
            let input = resize_bilinear(&crop, crop.width(), crop.height(), scan.base_side, scan.base_side);
            let featmap = model.backbone.forward(&input)?;
            if win.w > s || win.h > s {
                return Err(Error::Config(format!(
                    "base feature map {s}x{s} cannot hold a {}x{} window",
                    win.w, win.h
                )));
            }
            let centred = SubWindowRef {
                level: 0,
                x: (s - win.w) / 2,
                y: (s - win.h) / 2,
                w: win.w,
                h: win.h,
            };
            let blob = extract_blob(&featmap, &centred, model.bank.blob_side())?;
            let probs = model.bank.classify(&blob)?;
            Ok(Detection {
                window: *win,
                bbox: subwindow_to_bbox(win, frame, scan.mapping),
                scores: probs[1..].iter().map(|&p| p as f32).collect(),
            })
        })
        .collect()
}

fn crop_region(t: &Tensor3, x0: usize, y0: usize, w: usize, h: usize) -> Tensor3 {
    let mut out = Tensor3::zeros(t.channels(), h, w);
    for c in 0..t.channels() {
        for y in 0..h {
            let src = t.index(c, y0 + y, x0);
            let dst = out.index(c, y, 0);
            out.data_mut()[dst..dst + w].copy_from_slice(&t.data()[src..src + w]);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    /// Seconds per image, feature-map scanning.
    pub featmap: Vec<f64>,
    /// Seconds per image, per-window recomputation.
    pub naive: Vec<f64>,
    pub windows_per_image: usize,
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl BenchReport {
    pub fn median_featmap(&self) -> f64 {
        median(&self.featmap)
    }

    pub fn median_naive(&self) -> f64 {
        median(&self.naive)
    }

    /// Naive median time over feature-map median time.
    pub fn speedup(&self) -> f64 {
        self.median_naive() / self.median_featmap()
    }

    pub fn to_text(&self) -> String {
        format!(
            "images\t{}\nwindows_per_image\t{}\nfeatmap_median_s\t{:.6}\nfeatmap_mean_s\t{:.6}\nnaive_median_s\t{:.6}\nnaive_mean_s\t{:.6}\nspeedup\t{:.2}\n",
            self.featmap.len(),
            self.windows_per_image,
            self.median_featmap(),
            mean(&self.featmap),
            self.median_naive(),
            mean(&self.naive),
            self.speedup()
        )
    }
}

/// Times both strategies on each image after one untimed warm-up pass.
/// Image decoding is not timed; everything from preprocessing to the
/// detection list is.
pub fn run_bench(model: &Model, images: &[RawImage]) -> Result<BenchReport> {
    let first = images
        .first()
        .ok_or_else(|| Error::Input("benchmark needs at least one image".into()))?;
    model.detect_raw(first)?;
    naive_detect(model, first)?;
    let mut featmap = Vec::with_capacity(images.len());
    let mut naive = Vec::with_capacity(images.len());
    let mut windows_per_image = 0;
    for img in images {
        let t = Instant::now();
        let fast = model.detect_raw(img)?;
        featmap.push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        let slow = naive_detect(model, img)?;
        naive.push(t.elapsed().as_secs_f64());
        if fast.len() != slow.len() {
            return Err(Error::Invariant(format!(
                "scan produced {} windows, naive mode {}",
                fast.len(),
                slow.len()
            )));
        }
        windows_per_image = fast.len();
    }
    Ok(BenchReport {
        featmap,
        naive,
        windows_per_image,
    })
}
