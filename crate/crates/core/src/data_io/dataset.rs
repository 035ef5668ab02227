//! Annotated datasets.
//!
//! Annotation files hold one image per line:
//!
//! ```text
//! images/0001.ppm<TAB>wide,10,12,50,30;disc,60,60,80,80
//! ```
//!
//! Boxes are half-open pixel boxes `x0,y0,x1,y1`; an image without objects
//! has nothing after the tab. The class manifest lists one name per line.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;

use crate::bbox::BBox;
use crate::data_io::ppm::load_ppm;
use crate::error::{Error, Result};
use crate::pyramid::RawImage;

/// Ground-truth box with a class index into the dataset's class list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GtBox {
    pub class: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedImage {
    /// Path as written in the annotation file, relative to the images root.
    pub path: String,
    pub boxes: Vec<GtBox>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub images_root: PathBuf,
    pub items: Vec<AnnotatedImage>,
}

/// An image decoded into memory together with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedImage {
    pub id: String,
    pub image: RawImage,
    pub boxes: Vec<GtBox>,
}

pub const CLASSES_FILE: &str = "classes.txt";

pub fn read_classes(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let classes: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if classes.is_empty() {
        return Err(Error::Format(format!("{}: no class names", path.display())));
    }
    for (i, c) in classes.iter().enumerate() {
        if c.contains([',', ';', '\t']) || classes[..i].contains(c) {
            return Err(Error::Format(format!(
                "{}: invalid or duplicate class name {c:?}",
                path.display()
            )));
        }
    }
    Ok(classes)
}

pub fn write_classes(path: &Path, classes: &[String]) -> Result<()> {
    let mut text = classes.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn format_annotation_line(item: &AnnotatedImage, classes: &[String]) -> String {
    let boxes: Vec<String> = item
        .boxes
        .iter()
        .map(|b| format!("{},{}", classes[b.class], b.bbox))
        .collect();
    format!("{}\t{}", item.path, boxes.join(";"))
}

pub fn write_annotations(path: &Path, items: &[AnnotatedImage], classes: &[String]) -> Result<()> {
    let mut text = String::new();
    for item in items {
        text.push_str(&format_annotation_line(item, classes));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses annotation text without touching the images.
pub fn parse_annotations(text: &str, classes: &[String], source: &str) -> Result<Vec<AnnotatedImage>> {
    let mut items = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        let err = |msg: String| Error::Format(format!("{source}:{lineno}: {msg}"));
        if line.trim().is_empty() {
            continue;
        }
        let (path, rest) = line
            .split_once('\t')
            .ok_or_else(|| err("expected image path and a tab".into()))?;
        if path.is_empty() {
            return Err(err("empty image path".into()));
        }
        let mut boxes = Vec::new();
        for field in rest.trim_end().split(';').filter(|f| !f.is_empty()) {
            let parts: Vec<&str> = field.split(',').collect();
            if parts.len() != 5 {
                return Err(err(format!("box {field:?} must be class,x0,y0,x1,y1")));
            }
            let class = classes
                .iter()
                .position(|c| c == parts[0])
                .ok_or_else(|| err(format!("unknown class {:?}", parts[0])))?;
            let mut c = [0i32; 4];
            for (slot, p) in c.iter_mut().zip(&parts[1..]) {
                *slot = p
                    .trim()
                    .parse()
                    .map_err(|_| err(format!("bad coordinate {p:?}")))?;
            }
            let bbox = BBox::new(c[0], c[1], c[2], c[3]);
            if bbox.x1 <= bbox.x0 || bbox.y1 <= bbox.y0 {
                return Err(err(format!("degenerate box {bbox}")));
            }
            boxes.push(GtBox { class, bbox });
        }
        items.push(AnnotatedImage {
            path: path.to_string(),
            boxes,
        });
    }
    Ok(items)
}

impl Dataset {
    /// Loads and validates an annotation file. Every image is decoded once to
    /// check it exists and to clip boxes to its bounds.
    pub fn load(annotations: &Path, images_root: &Path, classes: Vec<String>) -> Result<Self> {
        let text = fs::read_to_string(annotations).map_err(|e| Error::io(annotations, e))?;
        let mut items = parse_annotations(&text, &classes, &annotations.display().to_string())?;
        items.par_iter_mut().try_for_each(|item| -> Result<()> {
            let full = images_root.join(&item.path);
            if !full.is_file() {
                return Err(Error::Input(format!("missing image {}", full.display())));
            }
            let img = load_ppm(&full)?;
            let (w, h) = (img.width() as i32, img.height() as i32);
            for b in &mut item.boxes {
                let clipped = b.bbox.clip(w, h);
                if clipped != b.bbox {
                    warn!("{}: box {} clipped to {}x{} image", item.path, b.bbox, w, h);
                    if clipped.is_empty() {
                        return Err(Error::Format(format!(
                            "{}: box {} lies outside the {w}x{h} image",
                            item.path, b.bbox
                        )));
                    }
                    b.bbox = clipped;
                }
            }
            Ok(())
        })?;
        Ok(Dataset {
            classes,
            images_root: images_root.to_path_buf(),
            items,
        })
    }

    /// Loads `<dir>/<split>.txt` with the class manifest `<dir>/classes.txt`.
    pub fn load_split(dir: &Path, split: &str) -> Result<Self> {
        let classes = read_classes(&dir.join(CLASSES_FILE))?;
        Self::load(&dir.join(format!("{split}.txt")), dir, classes)
    }

    pub fn image_path(&self, item: &AnnotatedImage) -> PathBuf {
        self.images_root.join(&item.path)
    }

    pub fn load_images(&self) -> Result<Vec<LoadedImage>> {
        self.items
            .par_iter()
            .map(|item| {
                Ok(LoadedImage {
                    id: item.path.clone(),
                    image: load_ppm(&self.image_path(item))?,
                    boxes: item.boxes.clone(),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes() -> Vec<String> {
        vec!["wide".into(), "tall".into()]
    }

    #[test]
    fn parse_reports_line_numbers() {
        let text = "a.ppm\twide,0,0,4,4\nb.ppm\tround,0,0,4,4\n";
        match parse_annotations(text, &classes(), "ann.txt") {
            Err(Error::Format(msg)) => assert!(msg.starts_with("ann.txt:2:"), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert!(parse_annotations("a.ppm wide\n", &classes(), "x").is_err());
        assert!(parse_annotations("a.ppm\twide,5,0,5,4\n", &classes(), "x").is_err());
    }

    #[test]
    fn empty_box_list_is_allowed() {
        let items = parse_annotations("a.ppm\t\nb.ppm\ttall,1,2,3,4\n", &classes(), "x").unwrap();
        assert!(items[0].boxes.is_empty());
        assert_eq!(items[1].boxes[0].bbox, BBox::new(1, 2, 3, 4));
    }

    #[test]
    fn annotation_round_trip() {
        let items = vec![
            AnnotatedImage {
                path: "images/0.ppm".into(),
                boxes: vec![
                    GtBox { class: 1, bbox: BBox::new(3, 4, 10, 30) },
                    GtBox { class: 0, bbox: BBox::new(40, 41, 90, 60) },
                ],
            },
            AnnotatedImage { path: "images/1.ppm".into(), boxes: vec![] },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_annotations(&p, &items, &classes()).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(parse_annotations(&text, &classes(), "a").unwrap(), items);
    }

    #[test]
    fn missing_image_is_an_input_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        fs::write(&p, "nope.ppm\twide,0,0,2,2\n").unwrap();
        assert!(matches!(
            Dataset::load(&p, dir.path(), classes()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn out_of_bounds_boxes_are_clipped() {
        let dir = tempfile::tempdir().unwrap();
        let img = RawImage::filled(20, 10, [0, 0, 0]).unwrap();
        crate::data_io::ppm::save_ppm(&img, &dir.path().join("i.ppm")).unwrap();
        let p = dir.path().join("a.txt");
        fs::write(&p, "i.ppm\twide,-3,2,25,8\n").unwrap();
        let ds = Dataset::load(&p, dir.path(), classes()).unwrap();
        assert_eq!(ds.items[0].boxes[0].bbox, BBox::new(0, 2, 20, 8));
    }
}
