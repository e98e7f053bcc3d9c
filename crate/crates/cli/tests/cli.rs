use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;
use zsad::app::read_map;
use zsad::data::{read_mask, resize_nearest};

fn zsad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zsad"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = zsad(args);
    assert!(
        out.status.success(),
        "zsad {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// One synthetic training run shared by the tests below.
struct Trained {
    dir: TempDir,
    stdout: String,
}

impl Trained {
    fn run_dir(&self) -> PathBuf {
        self.dir.path().join("run")
    }

    fn model(&self) -> PathBuf {
        self.run_dir().join("model.ckpt")
    }
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("run");
        let stdout = ok(&["train", "--layout", "synthetic", "--out", s(&run)]);
        Trained { dir, stdout }
    })
}

fn test_set() -> &'static Path {
    static D: OnceLock<TempDir> = OnceLock::new();
    D.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        ok(&["synth", "--layout", "synthetic", "--split", "test", "--out", s(dir.path())]);
        dir
    })
    .path()
}

fn images_under(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map(|rd| rd.map(|e| e.unwrap().path()).filter(|p| p.extension().is_some_and(|e| e == "png")).collect())
        .unwrap_or_default();
    out.sort();
    out
}

#[test]
fn train_writes_checkpoints_and_log() {
    let t = trained();
    for f in ["main.ckpt", "model.ckpt", "train_log.json"] {
        assert!(t.run_dir().join(f).is_file(), "{f}");
    }
    let log: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.run_dir().join("train_log.json")).unwrap()).unwrap();
    let epochs = log["epochs"].as_array().unwrap();
    assert_eq!(epochs[0]["phase"], "initial");
    assert!(epochs.iter().any(|e| e["phase"] == "adapter"));
    assert!(t.stdout.contains("checkpoints written"));
}

#[test]
fn same_seed_gives_the_same_log() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    ok(&["train", "--layout", "synthetic", "--out", s(dir.path())]);
    assert_eq!(
        fs::read(dir.path().join("train_log.json")).unwrap(),
        fs::read(t.run_dir().join("train_log.json")).unwrap()
    );
    assert_eq!(
        fs::read(dir.path().join("model.ckpt")).unwrap(),
        fs::read(t.model()).unwrap()
    );
}

#[test]
fn eval_then_plot() {
    let t = trained();
    let out = tempfile::tempdir().unwrap();
    let maps = out.path().join("maps");
    let table = ok(&[
        "eval",
        "--layout",
        "synthetic",
        "--checkpoint",
        s(&t.model()),
        "--dump-maps",
        s(&maps),
        "--out",
        s(out.path()),
    ]);
    assert!(table.starts_with("class"));
    assert!(table.lines().any(|l| l.starts_with("mean")));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.path().join("report.json")).unwrap()).unwrap();
    assert!(report["mean"]["image_auroc"].as_f64().unwrap() >= 0.9);
    let scores: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(out.path().join("scores.json")).unwrap()).unwrap();
    assert!(!scores.is_empty());
    assert!(scores.iter().all(|r| (0.0..=2.0).contains(&r["s_global"].as_f64().unwrap())));
    assert!(fs::read_dir(&maps).unwrap().next().is_some());

    let plots = out.path().join("plots");
    let listed = ok(&["plot", s(&out.path().join("scores.json")), "--out", s(&plots), "--bins", "10"]);
    assert!(listed.lines().count() >= 1);
    for line in listed.lines() {
        assert!(Path::new(line).is_file(), "{line}");
    }
}

#[test]
fn infer_localises_a_planted_defect() {
    let t = trained();
    let root = test_set();
    let class_dir = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).min().unwrap();
    let class = class_dir.file_name().unwrap().to_str().unwrap().to_string();
    let defect_dir = fs::read_dir(class_dir.join("test"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| !p.ends_with("good"))
        .min()
        .unwrap();
    let bad = images_under(&defect_dir)[0].clone();
    let good = images_under(&class_dir.join("test/good"))[0].clone();
    let defect = defect_dir.file_name().unwrap().to_str().unwrap();
    let stem = bad.file_stem().unwrap().to_str().unwrap();
    assert_ne!(bad.file_stem(), good.file_stem());
    let mask_path = class_dir.join("ground_truth").join(defect).join(format!("{stem}_mask.png"));

    let out = tempfile::tempdir().unwrap();
    let mut terms = Vec::new();
    for img in [&bad, &good] {
        let printed = ok(&[
            "infer",
            "--layout",
            "synthetic",
            "--checkpoint",
            s(&t.model()),
            "--class",
            &class,
            "--out",
            s(out.path()),
            s(img),
        ]);
        assert!(printed.contains("anomaly score"));
        let id = img.file_stem().unwrap().to_str().unwrap();
        assert!(out.path().join(format!("{id}.png")).is_file());
        let record: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.path().join(format!("{id}.json"))).unwrap()).unwrap();
        terms.push(record["map_term"].as_f64().unwrap());
    }
    let map = read_map(&out.path().join(format!("{stem}.map"))).unwrap();
    let mask = resize_nearest(&read_mask(&mask_path).unwrap(), map.dim());
    let (arg, _) = map.indexed_iter().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    assert_eq!(mask[arg], 1.0, "peak at {arg:?} lies outside the defect");
    assert!(terms[1] < terms[0], "map terms {terms:?}");
}

#[test]
fn config_prints_parseable_toml() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("synthetic.toml");
    fs::write(&path, ok(&["config", "--synthetic"])).unwrap();
    let text = ok(&["config"]);
    assert!(text.contains("[train]"));
    let cfg = zsad::config::RunConfig::load(&path).unwrap();
    assert_eq!(cfg, zsad::config::RunConfig::synthetic());
}

#[test]
fn user_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nlr_ctx = \"fast\"\n").unwrap();
    let missing = dir.path().join("absent.ckpt");
    let cases: Vec<Vec<&str>> = vec![
        vec!["train", "--config", s(&bad), "--out", s(dir.path())],
        vec!["eval", "--layout", "synthetic", "--checkpoint", s(&missing)],
        vec!["train", "--layout", "nonsense"],
        vec!["frobnicate"],
    ];
    for args in cases {
        let out = zsad(&args);
        assert_eq!(out.status.code(), Some(1), "zsad {args:?}");
        assert!(!out.stderr.is_empty());
    }
    assert_eq!(zsad(&["--help"]).status.code(), Some(0));
}
