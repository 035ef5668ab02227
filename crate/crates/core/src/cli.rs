//! The `fmscan` command line.

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use crate::bench::run_bench;
use crate::config::KeyValues;
use crate::data_io::dataset::{Dataset, LoadedImage};
use crate::data_io::ppm::load_ppm;
use crate::data_io::synth::{generate_synthetic, Archetype, ColorMode, SyntheticConfig};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_localization, Detector, EvalMode};
use crate::experts::{classify_image, BankLayout};
use crate::model::{train_model, GtCenterOracle, Model, RunConfig};
use crate::scanner::Detection;
use crate::scoremap::{emit_scoremap_image, scoremap_for_class};

#[derive(Debug, Parser)]
#[command(name = "fmscan", version, about = "Object localization by scanning convolutional feature maps")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "FMSCAN_THREADS")]
    pub threads: Option<usize>,
    /// Overrides the seed from the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic shapes dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the expert units on a dataset split.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output weight file; settings go to `<weights>.cfg`.
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, value_enum)]
        layout: Option<LayoutArg>,
    },
    /// Print every sub-window detection of an image.
    Detect(ImageArgs),
    /// Print image-level class scores.
    Classify(ImageArgs),
    /// Write the aggregated score map of one class as a PGM image.
    Scoremap {
        #[command(flatten)]
        image: ImageArgs,
        #[arg(long)]
        class: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate localization AP on a dataset split.
    Eval {
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, value_enum, default_value_t = ModeArg::Criterion1)]
        mode: ModeArg,
        /// IoU threshold for `--mode iou`.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Pixel tolerance for `--mode criterion1` (default from the model).
        #[arg(long)]
        tolerance: Option<i32>,
        #[arg(long)]
        levels: Option<usize>,
        #[arg(long, value_enum, default_value_t = DetectorArg::Model)]
        detector: DetectorArg,
        /// Also write the report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Time feature-map scanning against per-window recomputation.
    Bench {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Number of images to time.
        #[arg(long, default_value_t = 20)]
        images: usize,
        #[arg(long)]
        levels: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct ImageArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub levels: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Criterion1,
    Iou,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DetectorArg {
    Model,
    GtCenter,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LayoutArg {
    Multi,
    Single,
}

pub const SYNTH_KEYS: &[&str] = &[
    "image_side",
    "classes",
    "size_min",
    "size_max",
    "objects_min",
    "objects_max",
    "noise",
    "color_mode",
    "count",
    "val_fraction",
    "seed",
];

/// `classes = name:archetype,...`, e.g. `wide:wide-rect,tall:tall-rect`.
pub fn synthetic_config_from(kv: &KeyValues) -> Result<SyntheticConfig> {
    kv.check_known(SYNTH_KEYS)?;
    let mut c = SyntheticConfig::default();
    kv.set("image_side", &mut c.image_side)?;
    if let Some(list) = kv.get_list::<String>("classes")? {
        c.classes = list
            .iter()
            .map(|item| {
                let (name, arch) = item
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("class {item:?} must be name:archetype")))?;
                Ok((name.trim().to_string(), arch.trim().parse::<Archetype>()?))
            })
            .collect::<Result<_>>()?;
    }
    kv.set("size_min", &mut c.size_min)?;
    kv.set("size_max", &mut c.size_max)?;
    kv.set("objects_min", &mut c.objects_min)?;
    kv.set("objects_max", &mut c.objects_max)?;
    kv.set("noise", &mut c.noise)?;
    kv.set::<ColorMode>("color_mode", &mut c.color_mode)?;
    kv.set("count", &mut c.count)?;
    kv.set("val_fraction", &mut c.val_fraction)?;
    kv.set("seed", &mut c.seed)?;
    c.validate()?;
    Ok(c)
}

fn load_kv(path: &Option<PathBuf>) -> Result<KeyValues> {
    match path {
        Some(p) => KeyValues::load(p),
        None => Ok(KeyValues::default()),
    }
}

fn load_model(weights: &Path, levels: Option<usize>) -> Result<Model> {
    let mut model = Model::load(weights)?;
    if let Some(l) = levels {
        model.config.scan.levels = l;
        model.config.validate()?;
    }
    Ok(model)
}

/// `class<TAB>score<TAB>x0,y0,x1,y1<TAB>level,w,h,x,y` with the best class.
pub fn format_detection(d: &Detection, classes: &[String]) -> String {
    let (k, score) = d.best_class();
    let w = &d.window;
    format!(
        "{}\t{:.6}\t{}\t{},{},{},{},{}",
        classes[k], score, d.bbox, w.level, w.w, w.h, w.x, w.y
    )
}

fn run_command(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let write_err = |e: io::Error| Error::io("<stdout>", e);
    match cli.command {
        Command::Synth { config, out: dir } => {
            let mut c = synthetic_config_from(&load_kv(&config)?)?;
            if let Some(s) = cli.seed {
                c.seed = s;
            }
            let corpus = generate_synthetic(&c, &dir)?;
            let val = corpus.is_val.iter().filter(|&&v| v).count();
            writeln!(out, "wrote {} images ({} train, {val} val) to {}", corpus.images.len(), corpus.images.len() - val, dir.display())
                .map_err(write_err)?;
        }
        Command::Train {
            dataset,
            split,
            config,
            weights,
            layout,
        } => {
            let mut c = RunConfig::from_key_values(&load_kv(&config)?, &[])?;
            if let Some(s) = cli.seed {
                c.training.seed = s;
            }
            match layout {
                Some(LayoutArg::Multi) => c.layout = BankLayout::MultiFc,
                Some(LayoutArg::Single) => c.layout = BankLayout::SingleFc,
                None => {}
            }
            let ds = Dataset::load_split(&dataset, &split)?;
            let images = ds.load_images()?;
            info!("training on {} images", images.len());
            let (model, reports) = train_model(&images, ds.classes.clone(), &c)?;
            for r in &reports {
                let name = r.shape.map_or("shared".to_string(), |s| s.to_string());
                info!(
                    "unit {name}: {} positives, {} backgrounds, final loss {:.4}",
                    r.positives,
                    r.backgrounds,
                    r.epoch_loss.last().copied().unwrap_or(f64::NAN)
                );
            }
            model.save(&weights)?;
            writeln!(out, "wrote {}", weights.display()).map_err(write_err)?;
        }
        Command::Detect(a) => {
            let model = load_model(&a.weights, a.levels)?;
            let dets = model.detect_raw(&load_ppm(&a.image)?)?;
            let mut text = String::new();
            for d in &dets {
                text.push_str(&format_detection(d, model.classes()));
                text.push('\n');
            }
            out.write_all(text.as_bytes()).map_err(write_err)?;
        }
        Command::Classify(a) => {
            let model = load_model(&a.weights, a.levels)?;
            let dets = model.detect_raw(&load_ppm(&a.image)?)?;
            let scores: Vec<Vec<f32>> = dets.into_iter().map(|d| d.scores).collect();
            for (name, s) in model.classes().iter().zip(classify_image(&scores)?) {
                writeln!(out, "{name}\t{s:.6}").map_err(write_err)?;
            }
        }
        Command::Scoremap { image, class, out: path } => {
            let model = load_model(&image.weights, image.levels)?;
            let k = model
                .classes()
                .iter()
                .position(|c| *c == class)
                .ok_or_else(|| Error::Input(format!("unknown class {class:?}")))?;
            let img = load_ppm(&image.image)?;
            let dets = model.detect_raw(&img)?;
            let map = scoremap_for_class(&dets, k, img.width(), img.height(), model.config.exponent);
            emit_scoremap_image(&map, &path)?;
            let (x, y) = crate::scoremap::argmax_location(&map);
            writeln!(out, "argmax\t{x},{y}\t{:.6}", map.get(x, y)).map_err(write_err)?;
        }
        Command::Eval {
            weights,
            dataset,
            split,
            mode,
            threshold,
            tolerance,
            levels,
            detector,
            report,
        } => {
            let ds = Dataset::load_split(&dataset, &split)?;
            let images: Vec<LoadedImage> = ds.load_images()?;
            let model = match (&weights, detector) {
                (Some(w), _) => Some(load_model(w, levels)?),
                (None, DetectorArg::Model) => {
                    return Err(Error::Config("--weights is required with the model detector".into()))
                }
                (None, DetectorArg::GtCenter) => None,
            };
            if let Some(m) = &model {
                if m.classes() != ds.classes.as_slice() {
                    return Err(Error::Input(format!(
                        "model classes {:?} differ from dataset classes {:?}",
                        m.classes(),
                        ds.classes
                    )));
                }
            }
            let oracle = GtCenterOracle {
                classes: ds.classes.len(),
            };
            let det: &dyn Detector = match detector {
                DetectorArg::Model => model.as_ref().expect("checked above"),
                DetectorArg::GtCenter => &oracle,
            };
            let default_tol = model.as_ref().map_or(crate::evaluate::DEFAULT_TOLERANCE, |m| m.config.tolerance);
            let exponent = model.as_ref().map_or(crate::scoremap::DEFAULT_EXPONENT, |m| m.config.exponent);
            let mode = match mode {
                ModeArg::Criterion1 => EvalMode::Criterion1 {
                    tolerance: tolerance.unwrap_or(default_tol),
                },
                ModeArg::Iou => {
                    if !(0.0..=1.0).contains(&threshold) {
                        return Err(Error::Config(format!("IoU threshold {threshold} outside [0, 1]")));
                    }
                    EvalMode::Iou { threshold }
                }
            };
            let rep = evaluate_localization(&images, &ds.classes, det, mode, exponent)?;
            let text = rep.to_string();
            if let Some(p) = report {
                std::fs::write(&p, &text).map_err(|e| Error::io(&p, e))?;
            }
            out.write_all(text.as_bytes()).map_err(write_err)?;
        }
        Command::Bench {
            weights,
            dataset,
            split,
            images,
            levels,
        } => {
            let model = load_model(&weights, levels)?;
            let ds = Dataset::load_split(&dataset, &split)?;
            let raws = ds
                .items
                .iter()
                .take(images)
                .map(|item| load_ppm(&ds.image_path(item)))
                .collect::<Result<Vec<_>>>()?;
            let rep = run_bench(&model, &raws)?;
            out.write_all(rep.to_text().as_bytes()).map_err(write_err)?;
        }
    }
    Ok(())
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 1;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return 3;
        }
    }
    match run_command(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
