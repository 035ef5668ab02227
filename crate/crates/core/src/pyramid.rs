//! Image normalisation and the multi-level image pyramid.
//!
//! The input is resized (bilinear, aspect ratio kept) so its longest side is
//! `base_side`, then zero padded on the right and bottom to a square. Level
//! `l` is the level-0 content upsampled by `2^l` and padded to
//! `base_side * 2^l`.

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// 8-bit RGB image, interleaved row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Input(format!("empty image {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Input(format!(
                "image buffer has {} bytes, expected {}",
                data.len(),
                width * height * 3
            )));
        }
        Ok(RawImage {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        Self::new(width, height, rgb.repeat(width * height))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel-major tensor with values scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor3 {
        let n = self.width * self.height;
        let mut out = vec![0f32; 3 * n];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + i] = px[c] as f32 / 255.0;
            }
        }
        Tensor3::from_raw(3, self.height, self.width, out)
    }
}

/// One square input to the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    pub index: usize,
    pub side: usize,
    /// Level pixels per level-0 pixel.
    pub scale: f64,
    /// Region of the square holding image content; the rest is zero.
    pub content: BBox,
    pub image: Tensor3,
    /// Dimensions of the original (un-normalised) image.
    pub original_width: usize,
    pub original_height: usize,
}

impl PyramidLevel {
    /// Original-image pixels per level pixel.
    pub fn to_original(&self) -> f64 {
        self.original_width.max(self.original_height) as f64 / self.side as f64
    }
}

/// Short side after scaling the long side to `base_side`: `round(short * base / long)`, at least 1.
pub fn resized_dims(width: usize, height: usize, base_side: usize) -> (usize, usize) {
    let long = width.max(height) as f64;
    let scale = |n: usize| ((n as f64 * base_side as f64 / long).round() as usize).max(1);
    if width >= height {
        (base_side, scale(height))
    } else {
        (scale(width), base_side)
    }
}

/// Normalises an image into pyramid level 0. `pixel_offset` is subtracted from
/// content pixels only, so the padding stays exactly zero.
pub fn preprocess(image: &RawImage, base_side: usize, pixel_offset: f32) -> Result<PyramidLevel> {
    if base_side == 0 {
        return Err(Error::Config("base side must be positive".into()));
    }
    let (cw, ch) = resized_dims(image.width, image.height, base_side);
    let src = image.to_tensor();
    let mut content = if (cw, ch) == (image.width, image.height) {
        src
    } else {
        resize_bilinear(&src, image.width, image.height, cw, ch)
    };
    if pixel_offset != 0.0 {
        content.data_mut().iter_mut().for_each(|v| *v -= pixel_offset);
    }
    Ok(PyramidLevel {
        index: 0,
        side: base_side,
        scale: 1.0,
        content: BBox::new(0, 0, cw as i32, ch as i32),
        image: pad_to_square(&content, base_side),
        original_width: image.width,
        original_height: image.height,
    })
}

/// Levels `0..levels` with sides `base * 2^l`.
pub fn build_pyramid(level0: &PyramidLevel, levels: usize) -> Result<Vec<PyramidLevel>> {
    if !(1..=3).contains(&levels) {
        return Err(Error::Config(format!(
            "pyramid levels must be 1, 2 or 3, got {levels}"
        )));
    }
    let mut out = vec![level0.clone()];
    for l in 1..levels {
        let mut level = rescale_level(level0, (1usize << l) as f64);
        level.index = l;
        out.push(level);
    }
    Ok(out)
}

/// Level-0 content upsampled by `factor` and padded to `round(base * factor)`.
pub fn rescale_level(level0: &PyramidLevel, factor: f64) -> PyramidLevel {
    let side = ((level0.side as f64 * factor).round() as usize).max(1);
    let cw0 = level0.content.width() as usize;
    let ch0 = level0.content.height() as usize;
    let cw = ((cw0 as f64 * factor).round() as usize).clamp(1, side);
    let ch = ((ch0 as f64 * factor).round() as usize).clamp(1, side);
    let content = crop(&level0.image, cw0, ch0);
    let resized = resize_bilinear(&content, cw0, ch0, cw, ch);
    PyramidLevel {
        index: level0.index,
        side,
        scale: side as f64 / level0.side as f64,
        content: BBox::new(0, 0, cw as i32, ch as i32),
        image: pad_to_square(&resized, side),
        original_width: level0.original_width,
        original_height: level0.original_height,
    }
}

fn crop(t: &Tensor3, w: usize, h: usize) -> Tensor3 {
    let mut out = Vec::with_capacity(t.channels() * w * h);
    for c in 0..t.channels() {
        for y in 0..h {
            let start = t.index(c, y, 0);
            out.extend_from_slice(&t.data()[start..start + w]);
        }
    }
    Tensor3::from_raw(t.channels(), h, w, out)
}

fn pad_to_square(t: &Tensor3, side: usize) -> Tensor3 {
    let mut out = Tensor3::zeros(t.channels(), side, side);
    for c in 0..t.channels() {
        for y in 0..t.height().min(side) {
            let w = t.width().min(side);
            let src = t.index(c, y, 0);
            let dst = out.index(c, y, 0);
            out.data_mut()[dst..dst + w].copy_from_slice(&t.data()[src..src + w]);
        }
    }
    out
}

/// Per-output-coordinate sample positions for half-pixel-centred bilinear resampling.
fn axis_weights(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

/// Bilinear resize of a `src_w x src_h` tensor.
pub fn resize_bilinear(t: &Tensor3, src_w: usize, src_h: usize, dst_w: usize, dst_h: usize) -> Tensor3 {
    debug_assert_eq!((t.width(), t.height()), (src_w, src_h));
    let xs = axis_weights(src_w, dst_w);
    let ys = axis_weights(src_h, dst_h);
    let mut out = Vec::with_capacity(t.channels() * dst_w * dst_h);
    for c in 0..t.channels() {
        let plane = t.plane(c);
        for &(y0, y1, fy) in &ys {
            let r0 = &plane[y0 * src_w..(y0 + 1) * src_w];
            let r1 = &plane[y1 * src_w..(y1 + 1) * src_w];
            for &(x0, x1, fx) in &xs {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
    }
    Tensor3::from_raw(t.channels(), dst_h, dst_w, out)
}
