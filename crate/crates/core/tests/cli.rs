use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn fmscan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fmscan"))
        .args(args)
        .env_remove("FMSCAN_THREADS")
        .output()
        .expect("spawn fmscan")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).expect("utf-8 stdout")
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// A small corpus and a quickly trained model shared by the tests below.
struct Fixture {
    _dir: TempDir,
    data: PathBuf,
    weights: PathBuf,
    image: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let synth_cfg = dir.path().join("synth.cfg");
        fs::write(&synth_cfg, "count = 30\nseed = 4\n").unwrap();
        let train_cfg = dir.path().join("train.cfg");
        fs::write(&train_cfg, "lambdas = 1,2\nepochs = 2\nhidden = 16\n").unwrap();
        let data = dir.path().join("data");
        let weights = dir.path().join("model.fmsw");

        let o = fmscan(&["synth", "--config", p(&synth_cfg), "--out", p(&data)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("wrote 30 images (24 train, 6 val)"));

        let o = fmscan(&[
            "train",
            "--dataset",
            p(&data),
            "--config",
            p(&train_cfg),
            "--weights",
            p(&weights),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(weights.exists());

        let val = fs::read_to_string(data.join("val.txt")).unwrap();
        let first = val.lines().next().unwrap().split('\t').next().unwrap();
        let image = data.join(first);
        Fixture {
            _dir: dir,
            data,
            weights,
            image,
        }
    })
}

#[test]
fn detect_lists_every_window() {
    let f = fixture();
    let o = fmscan(&["detect", "--weights", p(&f.weights), "--image", p(&f.image)]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 612);
    for line in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 4, "{line}");
        assert!(["wide", "tall", "disc"].contains(&fields[0]));
        let score: f64 = fields[1].parse().unwrap();
        assert!((0.0..=1.0).contains(&score));
        assert_eq!(fields[2].split(',').count(), 4);
        assert_eq!(fields[3].split(',').count(), 5);
    }
}

#[test]
fn detect_is_identical_across_thread_counts() {
    let f = fixture();
    let one = fmscan(&["--threads", "1", "detect", "--weights", p(&f.weights), "--image", p(&f.image)]);
    let three = fmscan(&["--threads", "3", "detect", "--weights", p(&f.weights), "--image", p(&f.image)]);
    assert!(one.status.success() && three.status.success());
    assert_eq!(one.stdout, three.stdout);
}

#[test]
fn classify_prints_one_score_per_class() {
    let f = fixture();
    let o = fmscan(&["classify", "--weights", p(&f.weights), "--image", p(&f.image)]);
    assert!(o.status.success());
    let text = stdout(&o);
    let names: Vec<&str> = text.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(names, ["wide", "tall", "disc"]);
}

#[test]
fn scoremap_writes_a_gray_image() {
    let f = fixture();
    let out = f.data.join("map.pgm");
    let o = fmscan(&[
        "scoremap",
        "--weights",
        p(&f.weights),
        "--image",
        p(&f.image),
        "--class",
        "disc",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("argmax\t"));
    let bytes = fs::read(&out).unwrap();
    assert!(bytes.starts_with(b"P5\n96 96\n255\n"));
    assert_eq!(bytes.len(), b"P5\n96 96\n255\n".len() + 96 * 96);
}

#[test]
fn oracle_detector_scores_perfectly() {
    let f = fixture();
    let o = fmscan(&["eval", "--dataset", p(&f.data), "--detector", "gt-center"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("mAP\t1.000000"), "{}", stdout(&o));
}

#[test]
fn model_eval_reports_every_class() {
    let f = fixture();
    let o = fmscan(&["eval", "--dataset", p(&f.data), "--weights", p(&f.weights), "--mode", "iou"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).lines().any(|l| l.starts_with("mAP\t")));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(fmscan(&["detect", "--bogus"]).status.code(), Some(1));
    assert_eq!(fmscan(&[]).status.code(), Some(1));
    assert_eq!(fmscan(&["--help"]).status.code(), Some(0));
}

#[test]
fn input_errors_exit_with_two() {
    let f = fixture();
    let o = fmscan(&["detect", "--weights", p(&f.weights), "--image", "/nonexistent.ppm"]);
    assert_eq!(o.status.code(), Some(2));

    let ascii = f.data.join("ascii.ppm");
    fs::write(&ascii, "P3\n1 1\n255\n0 0 0\n").unwrap();
    let o = fmscan(&["detect", "--weights", p(&f.weights), "--image", p(&ascii)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
}
