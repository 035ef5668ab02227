//! A complete detector: backbone, expert bank and the settings tying them
//! together, plus persistence as a weight file with a `.cfg` sidecar.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use crate::backbone::{Backbone, BackboneConfig};
use crate::bbox::BBox;
use crate::config::KeyValues;
use crate::data_io::dataset::LoadedImage;
use crate::error::{Error, Result};
use crate::evaluate::{Detector, DEFAULT_TOLERANCE};
use crate::experts::{collect_for_shapes, train_experts, BankLayout, ExpertBank, TrainingConfig, UnitReport};
use crate::pyramid::RawImage;
use crate::scanner::{detect_image, BoxMapping, Detection, ScanConfig, SubWindowRef};
use crate::scoremap::DEFAULT_EXPONENT;
use crate::weights::WeightFile;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub backbone: String,
    pub scan: ScanConfig,
    /// Hidden width of every expert unit.
    pub hidden: usize,
    pub layout: BankLayout,
    /// Score exponent of the aggregated score map.
    pub exponent: u32,
    /// Criterion-1 tolerance in pixels.
    pub tolerance: i32,
    /// Also carries the seed used for backbone initialisation.
    pub training: TrainingConfig,
}

pub const RUN_CONFIG_KEYS: &[&str] = &[
    "backbone",
    "levels",
    "base_side",
    "min_shape",
    "max_shape",
    "mapping",
    "pixel_offset",
    "hidden",
    "layout",
    "exponent",
    "tolerance",
    "seed",
    "lambdas",
    "background_rate",
    "pos_ratio_r",
    "pos_ratio_gt",
    "bg_ratio_r",
    "bg_ratio_gt",
    "learning_rate",
    "momentum",
    "epochs",
    "batch_size",
    "dropout",
    "lr_decay",
];

pub fn parse_mapping(s: &str) -> Result<BoxMapping> {
    if s == "proportional" {
        return Ok(BoxMapping::Proportional);
    }
    if let Some(off) = s.strip_prefix("receptive-field") {
        let offset = match off.strip_prefix(':') {
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("bad receptive-field offset {v:?}")))?,
            None if off.is_empty() => 0,
            None => return Err(Error::Config(format!("unknown box mapping {s:?}"))),
        };
        return Ok(BoxMapping::ReceptiveField { offset });
    }
    Err(Error::Config(format!("unknown box mapping {s:?}")))
}

pub fn format_mapping(m: BoxMapping) -> String {
    match m {
        BoxMapping::Proportional => "proportional".into(),
        BoxMapping::ReceptiveField { offset } => format!("receptive-field:{offset}"),
    }
}

impl RunConfig {
    /// Defaults for a named backbone.
    pub fn for_backbone(name: &str) -> Result<Self> {
        let (scan, hidden) = match name {
            "tinynet" => (ScanConfig::tinynet_default(), 64),
            "alexnet-geom" => (ScanConfig::alexnet_default(), 256),
            other => return Err(Error::Config(format!("unknown backbone {other:?}"))),
        };
        Ok(RunConfig {
            backbone: name.to_string(),
            scan,
            hidden,
            layout: BankLayout::MultiFc,
            exponent: DEFAULT_EXPONENT,
            tolerance: DEFAULT_TOLERANCE,
            training: TrainingConfig::default(),
        })
    }

    pub fn from_key_values(kv: &KeyValues, extra_keys: &[&str]) -> Result<Self> {
        let known: Vec<&str> = RUN_CONFIG_KEYS.iter().chain(extra_keys).copied().collect();
        kv.check_known(&known)?;
        let mut c = Self::for_backbone(kv.raw("backbone").unwrap_or("tinynet"))?;
        kv.set("levels", &mut c.scan.levels)?;
        kv.set("base_side", &mut c.scan.base_side)?;
        kv.set("min_shape", &mut c.scan.shapes.min)?;
        kv.set("max_shape", &mut c.scan.shapes.max)?;
        if let Some(m) = kv.raw("mapping") {
            c.scan.mapping = parse_mapping(m)?;
        }
        kv.set("pixel_offset", &mut c.scan.pixel_offset)?;
        kv.set("hidden", &mut c.hidden)?;
        kv.set("layout", &mut c.layout)?;
        kv.set("exponent", &mut c.exponent)?;
        kv.set("tolerance", &mut c.tolerance)?;
        let t = &mut c.training;
        kv.set("seed", &mut t.seed)?;
        if let Some(l) = kv.get_list("lambdas")? {
            t.lambdas = l;
        }
        kv.set("background_rate", &mut t.background_rate)?;
        kv.set("pos_ratio_r", &mut t.thresholds.positive_r)?;
        kv.set("pos_ratio_gt", &mut t.thresholds.positive_gt)?;
        kv.set("bg_ratio_r", &mut t.thresholds.background_r)?;
        kv.set("bg_ratio_gt", &mut t.thresholds.background_gt)?;
        kv.set("learning_rate", &mut t.learning_rate)?;
        kv.set("momentum", &mut t.momentum)?;
        kv.set("epochs", &mut t.epochs)?;
        kv.set("batch_size", &mut t.batch_size)?;
        kv.set("dropout", &mut t.dropout)?;
        kv.set("lr_decay", &mut t.lr_decay)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let t = &self.training;
        let lambdas: Vec<String> = t.lambdas.iter().map(|l| l.to_string()).collect();
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("backbone", self.backbone.clone());
        put("levels", self.scan.levels.to_string());
        put("base_side", self.scan.base_side.to_string());
        put("min_shape", self.scan.shapes.min.to_string());
        put("max_shape", self.scan.shapes.max.to_string());
        put("mapping", format_mapping(self.scan.mapping));
        put("pixel_offset", self.scan.pixel_offset.to_string());
        put("hidden", self.hidden.to_string());
        put("layout", self.layout.to_string());
        put("exponent", self.exponent.to_string());
        put("tolerance", self.tolerance.to_string());
        put("seed", t.seed.to_string());
        put("lambdas", lambdas.join(","));
        put("background_rate", t.background_rate.to_string());
        put("pos_ratio_r", t.thresholds.positive_r.to_string());
        put("pos_ratio_gt", t.thresholds.positive_gt.to_string());
        put("bg_ratio_r", t.thresholds.background_r.to_string());
        put("bg_ratio_gt", t.thresholds.background_gt.to_string());
        put("learning_rate", t.learning_rate.to_string());
        put("momentum", t.momentum.to_string());
        put("epochs", t.epochs.to_string());
        put("batch_size", t.batch_size.to_string());
        put("dropout", t.dropout.to_string());
        put("lr_decay", t.lr_decay.to_string());
        s
    }

    pub fn backbone_config(&self) -> Result<BackboneConfig> {
        BackboneConfig::by_name(&self.backbone)
    }

    /// Checks the settings against the backbone geometry.
    pub fn validate(&self) -> Result<()> {
        let bb = self.backbone_config()?;
        self.scan.shapes.validate()?;
        self.training.validate()?;
        if !(1..=3).contains(&self.scan.levels) {
            return Err(Error::Config(format!(
                "pyramid levels must be 1, 2 or 3, got {}",
                self.scan.levels
            )));
        }
        if self.hidden == 0 || self.exponent == 0 || self.tolerance < 0 {
            return Err(Error::Config("hidden width and exponent must be positive, tolerance non-negative".into()));
        }
        let g = bb.geometry(self.scan.base_side)?;
        if g.featmap_side < self.scan.shapes.min {
            return Err(Error::Config(format!(
                "base side {} gives a {}x{} feature map, smaller than the {}-cell minimum window",
                self.scan.base_side, g.featmap_side, g.featmap_side, self.scan.shapes.min
            )));
        }
        for l in 1..self.scan.levels {
            bb.geometry(self.scan.base_side << l)?;
        }
        for &lambda in &self.training.lambdas {
            bb.geometry(((self.scan.base_side as f64 * lambda).round() as usize).max(1))?;
        }
        Ok(())
    }

    pub fn sidecar_path(weights: &Path) -> PathBuf {
        let mut s = weights.as_os_str().to_owned();
        s.push(".cfg");
        PathBuf::from(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: RunConfig,
    pub backbone: Backbone,
    pub bank: ExpertBank,
}

impl Model {
    pub fn classes(&self) -> &[String] {
        self.bank.classes()
    }

    pub fn detect_raw(&self, image: &RawImage) -> Result<Vec<Detection>> {
        detect_image(image, &self.backbone, &self.bank, &self.config.scan)
    }

    /// Writes the weight file and its `<weights>.cfg` sidecar.
    pub fn save(&self, weights: &Path) -> Result<()> {
        let mut file = WeightFile::default();
        self.backbone.append_tensors(&mut file);
        self.bank.append_tensors(&mut file);
        file.save(weights)?;
        let mut text = self.config.to_text();
        let _ = writeln!(text, "classes = {}", self.classes().join(","));
        let _ = writeln!(text, "fingerprint = {:016x}", self.bank.fingerprint());
        let side = RunConfig::sidecar_path(weights);
        fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }

    pub fn load(weights: &Path) -> Result<Self> {
        let side = RunConfig::sidecar_path(weights);
        let kv = KeyValues::load(&side)?;
        let config = RunConfig::from_key_values(&kv, &["classes", "fingerprint"])?;
        let classes: Vec<String> = kv
            .get_list("classes")?
            .ok_or_else(|| Error::Format(format!("{}: missing classes", side.display())))?;
        let file = WeightFile::load(weights)?;
        let bb = config.backbone_config()?;
        let channels = bb.feature_channels;
        let backbone = Backbone::from_weight_file(bb, &file)?;
        let bank = ExpertBank::from_weight_file(
            &file,
            classes,
            config.scan.shapes,
            config.layout,
            channels,
            config.hidden,
        )?;
        if let Some(fp) = kv.raw("fingerprint") {
            if fp != format!("{:016x}", bank.fingerprint()) {
                return Err(Error::Format(format!(
                    "{}: fingerprint does not match the weight file",
                    side.display()
                )));
            }
        }
        Ok(Model {
            config,
            backbone,
            bank,
        })
    }
}

impl Detector for Model {
    fn detect(&self, sample: &LoadedImage) -> Result<Vec<Detection>> {
        self.detect_raw(&sample.image)
    }
}

/// Initialises the backbone from the seed, collects samples for every shape
/// and trains the expert bank.
pub fn train_model(
    images: &[LoadedImage],
    classes: Vec<String>,
    config: &RunConfig,
) -> Result<(Model, Vec<UnitReport>)> {
    config.validate()?;
    let backbone = Backbone::init(config.backbone_config()?, config.training.seed)?;
    let shapes = config.scan.shapes.shapes();
    let samples = collect_for_shapes(images, &backbone, &shapes, &config.scan, &config.training)?;
    info!(
        "collected {} samples over {} shapes",
        samples.iter().map(Vec::len).sum::<usize>(),
        shapes.len()
    );
    let (bank, reports) = train_experts(
        &samples,
        classes,
        config.scan.shapes,
        config.layout,
        config.hidden,
        &config.training,
    )?;
    Ok((
        Model {
            config: config.clone(),
            backbone,
            bank,
        },
        reports,
    ))
}

/// Upper-bound detector that reads the ground truth: one single-pixel box at
/// each object's centre with a one-hot score, and one zero-score box over
/// the whole image when it has no objects.
#[derive(Debug, Clone, Copy)]
pub struct GtCenterOracle {
    pub classes: usize,
}

impl Detector for GtCenterOracle {
    fn detect(&self, sample: &LoadedImage) -> Result<Vec<Detection>> {
        let window = SubWindowRef {
            level: 0,
            x: 0,
            y: 0,
            w: 1,
            h: 1,
        };
        if sample.boxes.is_empty() {
            let (w, h) = (sample.image.width() as i32, sample.image.height() as i32);
            return Ok(vec![Detection {
                window,
                bbox: BBox::new(0, 0, w, h),
                scores: vec![0.0; self.classes],
            }]);
        }
        Ok(sample
            .boxes
            .iter()
            .map(|b| {
                let (cx, cy) = b.bbox.center();
                let mut scores = vec![0.0; self.classes];
                scores[b.class] = 1.0;
                Detection {
                    window,
                    bbox: BBox::new(cx, cy, cx + 1, cy + 1),
                    scores,
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::synth::{generate, SyntheticConfig};
    use crate::evaluate::{evaluate_localization, EvalMode};
    use crate::experts::BankLayout;

    #[test]
    fn config_text_round_trip() {
        let mut c = RunConfig::for_backbone("tinynet").unwrap();
        c.training.lambdas = vec![1.0, 1.5];
        c.scan.mapping = BoxMapping::ReceptiveField { offset: -3 };
        c.layout = BankLayout::SingleFc;
        let kv = KeyValues::parse(&c.to_text(), "x").unwrap();
        assert_eq!(RunConfig::from_key_values(&kv, &[]).unwrap(), c);
    }

    #[test]
    fn inconsistent_geometry_is_rejected() {
        let kv = KeyValues::parse("base_side = 40\n", "x").unwrap();
        assert!(matches!(RunConfig::from_key_values(&kv, &[]), Err(Error::Config(_))));
        let kv = KeyValues::parse("levels = 4\n", "x").unwrap();
        assert!(RunConfig::from_key_values(&kv, &[]).is_err());
        let kv = KeyValues::parse("epoch = 4\n", "x").unwrap();
        assert!(RunConfig::from_key_values(&kv, &[]).is_err());
    }

    #[test]
    fn gt_center_oracle_scores_perfectly() {
        let corpus = generate(&SyntheticConfig {
            count: 30,
            objects_min: 0,
            objects_max: 2,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let oracle = GtCenterOracle { classes: 3 };
        for mode in [EvalMode::Criterion1 { tolerance: 0 }, EvalMode::Iou { threshold: 0.0 }] {
            let report = evaluate_localization(&corpus.images, &corpus.classes, &oracle, mode, 5).unwrap();
            assert_eq!(report.map, 1.0, "{mode:?}");
        }
    }
}
