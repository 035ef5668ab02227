//! Seeded synthetic shapes corpus: flat-coloured rectangles and discs on a
//! noisy grey background, with exact ground-truth boxes.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::bbox::BBox;
use crate::data_io::dataset::{write_annotations, write_classes, AnnotatedImage, GtBox, LoadedImage, CLASSES_FILE};
use crate::data_io::ppm::save_ppm;
use crate::error::{Error, Result};
use crate::pyramid::RawImage;
use crate::rng::{mix64, SplitMix64};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Archetype {
    /// Width about twice the height.
    WideRect,
    /// Height about twice the width.
    TallRect,
    Disc,
}

impl FromStr for Archetype {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wide-rect" => Ok(Archetype::WideRect),
            "tall-rect" => Ok(Archetype::TallRect),
            "disc" => Ok(Archetype::Disc),
            other => Err(Error::Config(format!("unknown shape archetype {other:?}"))),
        }
    }
}

impl Archetype {
    pub fn name(&self) -> &'static str {
        match self {
            Archetype::WideRect => "wide-rect",
            Archetype::TallRect => "tall-rect",
            Archetype::Disc => "disc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorMode {
    /// Each class has its own base colour (jittered per object).
    PerClass,
    /// Every object gets a random saturated colour.
    Random,
}

impl FromStr for ColorMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-class" => Ok(ColorMode::PerClass),
            "random" => Ok(ColorMode::Random),
            other => Err(Error::Config(format!("unknown colour mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub image_side: usize,
    pub classes: Vec<(String, Archetype)>,
    /// Range of the object's long side, in pixels.
    pub size_min: usize,
    pub size_max: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Amplitude of uniform per-pixel noise, in `[0, 1]` intensity units.
    pub noise: f64,
    pub color_mode: ColorMode,
    pub count: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            image_side: 96,
            classes: vec![
                ("wide".into(), Archetype::WideRect),
                ("tall".into(), Archetype::TallRect),
                ("disc".into(), Archetype::Disc),
            ],
            size_min: 28,
            size_max: 52,
            objects_min: 1,
            objects_max: 2,
            noise: 0.08,
            color_mode: ColorMode::PerClass,
            count: 500,
            val_fraction: 0.2,
            seed: 1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.image_side < 8 {
            return bad("image side must be at least 8");
        }
        if self.classes.is_empty() {
            return bad("at least one class is required");
        }
        if self.size_min < 4 || self.size_min > self.size_max || self.size_max > self.image_side {
            return bad("object size range must satisfy 4 <= min <= max <= image side");
        }
        if self.objects_min > self.objects_max {
            return bad("objects_min exceeds objects_max");
        }
        if !(0.0..=1.0).contains(&self.noise) || !(0.0..1.0).contains(&self.val_fraction) {
            return bad("noise must be in [0,1] and val_fraction in [0,1)");
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|(n, _)| n.clone()).collect()
    }
}

/// Generated corpus held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub classes: Vec<String>,
    pub images: Vec<LoadedImage>,
    /// Per image: true when it belongs to the held-out split.
    pub is_val: Vec<bool>,
}

impl SyntheticCorpus {
    pub fn split(&self, val: bool) -> Vec<LoadedImage> {
        self.images
            .iter()
            .zip(&self.is_val)
            .filter(|(_, &v)| v == val)
            .map(|(img, _)| img.clone())
            .collect()
    }
}

const PALETTE: [[f64; 3]; 6] = [
    [0.90, 0.20, 0.20],
    [0.20, 0.85, 0.30],
    [0.25, 0.40, 0.95],
    [0.95, 0.85, 0.15],
    [0.85, 0.25, 0.85],
    [0.15, 0.85, 0.90],
];

/// FNV-1a over the id bytes, finalised with the SplitMix mixer.
pub fn id_hash(id: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    mix64(h)
}

/// The `round(n * fraction)` ids with the smallest hash form the held-out split.
pub fn val_membership(ids: &[String], fraction: f64) -> Vec<bool> {
    let n_val = (ids.len() as f64 * fraction).round() as usize;
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| (id_hash(&ids[i]), i));
    let mut is_val = vec![false; ids.len()];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    is_val
}

pub fn image_id(index: usize) -> String {
    format!("images/{index:05}.ppm")
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let k = config.classes.len();

    // Classes come from a reshuffled deck so instance counts stay balanced.
    let mut deck_rng = SplitMix64::stream(config.seed, &[0xDEC4]);
    let mut deck: Vec<usize> = Vec::new();
    let mut plans = Vec::with_capacity(config.count);
    for i in 0..config.count {
        let mut rng = SplitMix64::stream(config.seed, &[i as u64, 0]);
        let n = rng.range_inclusive(config.objects_min as i64, config.objects_max as i64) as usize;
        let classes: Vec<usize> = (0..n)
            .map(|_| {
                if deck.is_empty() {
                    deck = (0..k).collect();
                    deck_rng.shuffle(&mut deck);
                }
                deck.pop().unwrap()
            })
            .collect();
        plans.push(classes);
    }

    let images: Vec<LoadedImage> = plans
        .par_iter()
        .enumerate()
        .map(|(i, classes)| {
            let mut rng = SplitMix64::stream(config.seed, &[i as u64, 1]);
            let (image, boxes) = render(config, classes, &mut rng);
            LoadedImage {
                id: image_id(i),
                image,
                boxes,
            }
        })
        .collect();
    let ids: Vec<String> = images.iter().map(|im| im.id.clone()).collect();
    Ok(SyntheticCorpus {
        classes: config.class_names(),
        is_val: val_membership(&ids, config.val_fraction),
        images,
    })
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h * 6.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn object_dims(arch: Archetype, long: usize, rng: &mut SplitMix64) -> (usize, usize) {
    let short = |rng: &mut SplitMix64| ((long as f64 * rng.uniform(0.45, 0.6)).round() as usize).max(2);
    match arch {
        Archetype::WideRect => (long, short(rng)),
        Archetype::TallRect => (short(rng), long),
        Archetype::Disc => {
            let d = ((long as f64 * 0.8).round() as usize).max(2);
            (d, d)
        }
    }
}

/// Pixel mask of one shape inside its `w x h` frame.
fn shape_mask(arch: Archetype, w: usize, h: usize) -> Vec<bool> {
    match arch {
        Archetype::WideRect | Archetype::TallRect => vec![true; w * h],
        Archetype::Disc => {
            let r = w as f64 / 2.0;
            let mut m = Vec::with_capacity(w * h);
            for y in 0..h {
                for x in 0..w {
                    let dx = x as f64 + 0.5 - r;
                    let dy = y as f64 + 0.5 - r;
                    m.push(dx * dx + dy * dy <= r * r);
                }
            }
            m
        }
    }
}

fn render(config: &SyntheticConfig, classes: &[usize], rng: &mut SplitMix64) -> (RawImage, Vec<GtBox>) {
    let side = config.image_side;
    let base = rng.uniform(0.25, 0.45);
    let tint: Vec<f64> = (0..3).map(|_| base + rng.uniform(-0.05, 0.05)).collect();
    let mut pixels = vec![0f64; side * side * 3];
    for px in pixels.chunks_exact_mut(3) {
        px.copy_from_slice(&tint);
    }

    let mut boxes = Vec::new();
    let mut placed: Vec<BBox> = Vec::new();
    for &class in classes {
        let arch = config.classes[class].1;
        let long = rng.range_inclusive(config.size_min as i64, config.size_max as i64) as usize;
        let (w, h) = object_dims(arch, long, rng);
        let (w, h) = (w.min(side), h.min(side));
        let mut spot = None;
        for _ in 0..50 {
            let x0 = rng.range_inclusive(0, (side - w) as i64) as i32;
            let y0 = rng.range_inclusive(0, (side - h) as i64) as i32;
            let b = BBox::new(x0, y0, x0 + w as i32, y0 + h as i32);
            if placed.iter().all(|p| p.expand(2).overlap_area(&b) == 0) {
                spot = Some(b);
                break;
            }
        }
        let Some(frame) = spot else { continue };
        placed.push(frame);

        let color = match config.color_mode {
            ColorMode::PerClass => {
                let c = PALETTE[class % PALETTE.len()];
                [0, 1, 2].map(|i| (c[i] + rng.uniform(-0.06, 0.06)).clamp(0.0, 1.0))
            }
            ColorMode::Random => {
                hsv_to_rgb(rng.next_f64(), rng.uniform(0.7, 1.0), rng.uniform(0.8, 1.0))
            }
        };
        let mask = shape_mask(arch, w, h);
        let (mut tx0, mut ty0, mut tx1, mut ty1) = (i32::MAX, i32::MAX, i32::MIN, i32::MIN);
        for y in 0..h {
            for x in 0..w {
                if !mask[y * w + x] {
                    continue;
                }
                let (px, py) = (frame.x0 + x as i32, frame.y0 + y as i32);
                let i = (py as usize * side + px as usize) * 3;
                pixels[i..i + 3].copy_from_slice(&color);
                tx0 = tx0.min(px);
                ty0 = ty0.min(py);
                tx1 = tx1.max(px + 1);
                ty1 = ty1.max(py + 1);
            }
        }
        boxes.push(GtBox {
            class,
            bbox: BBox::new(tx0, ty0, tx1, ty1),
        });
    }

    let data = pixels
        .iter()
        .map(|&v| {
            let n = if config.noise > 0.0 {
                rng.uniform(-config.noise, config.noise)
            } else {
                0.0
            };
            ((v + n).clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    (
        RawImage::new(side, side, data).expect("dimensions are consistent"),
        boxes,
    )
}

/// Writes `images/*.ppm`, `train.txt`, `val.txt` and `classes.txt` under `dir`.
pub fn write_corpus(corpus: &SyntheticCorpus, dir: &Path) -> Result<()> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    corpus
        .images
        .par_iter()
        .try_for_each(|img| save_ppm(&img.image, &dir.join(&img.id)))?;
    for (name, val) in [("train.txt", false), ("val.txt", true)] {
        let items: Vec<AnnotatedImage> = corpus
            .images
            .iter()
            .zip(&corpus.is_val)
            .filter(|(_, &v)| v == val)
            .map(|(img, _)| AnnotatedImage {
                path: img.id.clone(),
                boxes: img.boxes.clone(),
            })
            .collect();
        write_annotations(&dir.join(name), &items, &corpus.classes)?;
    }
    write_classes(&dir.join(CLASSES_FILE), &corpus.classes)
}

pub fn generate_synthetic(config: &SyntheticConfig, dir: &Path) -> Result<SyntheticCorpus> {
    let corpus = generate(config)?;
    write_corpus(&corpus, dir)?;
    Ok(corpus)
}
