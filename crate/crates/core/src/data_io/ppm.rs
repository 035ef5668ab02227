//! Binary PPM (P6) and PGM (P5) images, 8 bits per sample.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pyramid::RawImage;

pub fn load_ppm(path: &Path) -> Result<RawImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_ppm(image: &RawImage, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(image)).map_err(|e| Error::io(path, e))
}

pub fn encode_ppm(image: &RawImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend_from_slice(image.data());
    out
}

/// Writes a single-channel 8-bit image as P5.
pub fn save_pgm(width: usize, height: usize, pixels: &[u8], path: &Path) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Invariant(format!(
            "PGM buffer has {} bytes for {width}x{height}",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Decodes P6 (RGB) or P5 (grey, expanded to RGB).
pub fn decode(bytes: &[u8]) -> Result<RawImage> {
    let mut pos = 0;
    let magic = token(bytes, &mut pos)?;
    let channels = match magic.as_slice() {
        b"P6" => 3,
        b"P5" => 1,
        b"P3" | b"P2" => {
            return Err(Error::Format("ASCII PNM variants are not supported".into()))
        }
        _ => return Err(Error::Format("not a binary PPM/PGM file".into())),
    };
    let width = number(bytes, &mut pos)?;
    let height = number(bytes, &mut pos)?;
    let maxval = number(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "unsupported maxval {maxval}, only 255 is accepted"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("empty image {width}x{height}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Format("missing whitespace after header".into())),
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(Error::Format(format!(
            "raster truncated: {} of {need} bytes",
            raster.len()
        )));
    }
    let data = if channels == 3 {
        raster[..need].to_vec()
    } else {
        raster[..need].iter().flat_map(|&g| [g, g, g]).collect()
    };
    RawImage::new(width, height, data)
}

fn token(bytes: &[u8], pos: &mut usize) -> Result<Vec<u8>> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated header".into()));
    }
    Ok(bytes[start..*pos].to_vec())
}

fn number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let t = token(bytes, pos)?;
    std::str::from_utf8(&t)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad header field {:?}", String::from_utf8_lossy(&t))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ascii_and_deep_variants_are_rejected() {
        assert!(matches!(decode(b"P3\n1 1\n255\n0 0 0\n"), Err(Error::Format(_))));
        let mut deep = b"P6\n1 1\n65535\n".to_vec();
        deep.extend_from_slice(&[0; 6]);
        assert!(matches!(decode(&deep), Err(Error::Format(_))));
        assert!(matches!(decode(b"P6\n2 2\n255\n\x00\x01"), Err(Error::Format(_))));
        assert!(matches!(decode(b"JPEG"), Err(Error::Format(_))));
    }

    #[test]
    fn header_comments_and_grey_input() {
        let img = decode(b"P5\n# made by hand\n2 1\n255\n\x10\x20").unwrap();
        assert_eq!(img.pixel(0, 0), [16, 16, 16]);
        assert_eq!(img.pixel(1, 0), [32, 32, 32]);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        let img = RawImage::new(2, 1, vec![1, 2, 3, 250, 251, 252]).unwrap();
        save_ppm(&img, &p).unwrap();
        assert_eq!(load_ppm(&p).unwrap(), img);
    }

    proptest! {
        #[test]
        fn encode_decode_is_identity(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            let mut rng = crate::rng::SplitMix64::new(seed);
            let data: Vec<u8> = (0..w * h * 3).map(|_| rng.below(256) as u8).collect();
            let img = RawImage::new(w, h, data).unwrap();
            prop_assert_eq!(decode(&encode_ppm(&img)).unwrap(), img);
        }
    }
}
