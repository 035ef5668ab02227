//! Multi-scale training sample collection.

use rayon::prelude::*;

use crate::backbone::Backbone;
use crate::data_io::dataset::LoadedImage;
use crate::error::{Error, Result};
use crate::experts::labeling::{label_subwindow, Label};
use crate::experts::train::TrainingConfig;
use crate::pyramid::{preprocess, rescale_level};
use crate::rng::SplitMix64;
use crate::scanner::{
    extract_blob, subwindow_to_bbox, windows_of_shape, Blob, LevelFrame, ScanConfig, SubWindowRef,
    WindowShape,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Provenance {
    /// Index of the image in the training list.
    pub image: usize,
    /// Scale factor the image was rescaled by.
    pub lambda: f64,
    pub window: SubWindowRef,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub blob: Blob,
    pub label: Label,
    pub provenance: Provenance,
}

/// Samples of one window shape from every image and scale factor.
pub fn collect_training_samples(
    images: &[LoadedImage],
    backbone: &Backbone,
    shape: WindowShape,
    scan: &ScanConfig,
    config: &TrainingConfig,
) -> Result<Vec<LabeledSample>> {
    Ok(collect_for_shapes(images, backbone, &[shape], scan, config)?
        .pop()
        .unwrap_or_default())
}

/// Samples for several shapes at once, one list per shape in `shapes` order.
/// Each feature map is computed once and shared by all shapes. Positives are
/// all kept, backgrounds with probability `background_rate`, unused windows
/// never.
pub fn collect_for_shapes(
    images: &[LoadedImage],
    backbone: &Backbone,
    shapes: &[WindowShape],
    scan: &ScanConfig,
    config: &TrainingConfig,
) -> Result<Vec<Vec<LabeledSample>>> {
    if images.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    config.validate()?;
    let per_image: Vec<Vec<Vec<LabeledSample>>> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| collect_image(i, img, backbone, shapes, scan, config))
        .collect::<Result<_>>()?;
    let mut out: Vec<Vec<LabeledSample>> = vec![Vec::new(); shapes.len()];
    for image_samples in per_image {
        for (dst, src) in out.iter_mut().zip(image_samples) {
            dst.extend(src);
        }
    }
    Ok(out)
}

fn collect_image(
    index: usize,
    img: &LoadedImage,
    backbone: &Backbone,
    shapes: &[WindowShape],
    scan: &ScanConfig,
    config: &TrainingConfig,
) -> Result<Vec<Vec<LabeledSample>>> {
    let level0 = preprocess(&img.image, scan.base_side, scan.pixel_offset)?;
    let mut out: Vec<Vec<LabeledSample>> = vec![Vec::new(); shapes.len()];
    for (li, &lambda) in config.lambdas.iter().enumerate() {
        let level = if lambda == 1.0 {
            level0.clone()
        } else {
            rescale_level(&level0, lambda)
        };
        let geometry = backbone.geometry(level.side)?;
        let featmap = backbone.forward(&level.image)?;
        let frame = LevelFrame::new(&level, geometry);
        for (si, &shape) in shapes.iter().enumerate() {
            let mut rng = SplitMix64::stream(
                config.seed,
                &[0xC011_EC7, index as u64, li as u64, shape.w as u64, shape.h as u64],
            );
            for win in windows_of_shape(0, geometry.featmap_side, shape) {
                let bbox = subwindow_to_bbox(&win, &frame, scan.mapping);
                let label = label_subwindow(&bbox, &img.boxes, &config.thresholds);
                let keep = match label {
                    Label::Class(_) => true,
                    Label::Background => rng.bernoulli(config.background_rate),
                    Label::Unused => false,
                };
                if keep {
                    out[si].push(LabeledSample {
                        blob: extract_blob(&featmap, &win, scan.shapes.max)?,
                        label,
                        provenance: Provenance {
                            image: index,
                            lambda,
                            window: win,
                        },
                    });
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::bbox::BBox;
    use crate::data_io::dataset::GtBox;
    use crate::pyramid::RawImage;

    fn tiny() -> Backbone {
        Backbone::init(BackboneConfig::tinynet(), 3).unwrap()
    }

    fn scan() -> ScanConfig {
        ScanConfig::tinynet_default()
    }

    fn image(boxes: Vec<GtBox>) -> LoadedImage {
        let mut rng = SplitMix64::new(5);
        let data = (0..96 * 96 * 3).map(|_| rng.below(256) as u8).collect();
        LoadedImage {
            id: "x".into(),
            image: RawImage::new(96, 96, data).unwrap(),
            boxes,
        }
    }

    #[test]
    fn full_image_object_makes_the_largest_window_positive() {
        let img = image(vec![GtBox {
            class: 1,
            bbox: BBox::new(0, 0, 96, 96),
        }]);
        let cfg = TrainingConfig {
            lambdas: vec![1.0],
            ..TrainingConfig::default()
        };
        let big = WindowShape { w: 6, h: 6 };
        let samples = collect_training_samples(&[img], &tiny(), big, &scan(), &cfg).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].label, Label::Class(1));
        assert_eq!(samples[0].provenance.window.x, 0);
    }

    #[test]
    fn background_rate_one_keeps_every_background() {
        let img = image(vec![]);
        let shape = WindowShape { w: 4, h: 5 };
        let cfg = TrainingConfig {
            lambdas: vec![1.0, 2.0],
            background_rate: 1.0,
            ..TrainingConfig::default()
        };
        let samples = collect_training_samples(&[img], &tiny(), shape, &scan(), &cfg).unwrap();
        // 6x6 map at lambda 1 and 12x12 at lambda 2.
        assert_eq!(samples.len(), 3 * 2 + 9 * 8);
        assert!(samples.iter().all(|s| s.label == Label::Background));
    }

    #[test]
    fn background_subsampling_is_reproducible() {
        let imgs = vec![image(vec![]), image(vec![])];
        let cfg = TrainingConfig {
            lambdas: vec![1.0, 2.0, 3.0],
            background_rate: 0.1,
            ..TrainingConfig::default()
        };
        let shape = WindowShape { w: 4, h: 4 };
        let a = collect_training_samples(&imgs, &tiny(), shape, &scan(), &cfg).unwrap();
        let b = collect_training_samples(&imgs, &tiny(), shape, &scan(), &cfg).unwrap();
        assert_eq!(a, b);
        // 9 + 81 + 225 windows per image: about 63 expected in total.
        let total = 2 * (9 + 81 + 225);
        assert!(a.len() > total / 20 && a.len() < total / 5, "{}", a.len());
    }

    #[test]
    fn unused_only_image_gives_no_samples() {
        // Every window lies inside the object but covers too little of it.
        let img = image(vec![GtBox {
            class: 0,
            bbox: BBox::new(0, 0, 96, 96),
        }]);
        let cfg = TrainingConfig {
            lambdas: vec![2.0],
            ..TrainingConfig::default()
        };
        let shape = WindowShape { w: 4, h: 4 };
        let samples = collect_training_samples(&[img], &tiny(), shape, &scan(), &cfg).unwrap();
        assert!(samples.is_empty());
    }
}
