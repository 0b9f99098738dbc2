use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use axai::dataio::{synth_dataset, write_ppm, SyntheticConfig};
use axai::network::{read_records, Record};
use serde_json::Value;

fn axai(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_axai")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> Output {
    let o = axai(args);
    assert_eq!(o.status.code(), Some(0), "{args:?}\n{}", stderr(&o));
    o
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn json(p: impl AsRef<Path>) -> Value {
    serde_json::from_str(&read(p)).unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn path(&self, name: &str) -> String {
        self.root.join(name).display().to_string()
    }
}

const TRAIN_ARGS: [&str; 8] = ["--synthetic", "40", "--arch", "small", "--epochs", "20", "--batch", "8"];

/// One small trained model and a synthetic high-risk image, shared by the tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let out = root.join("train").display().to_string();
        let mut args = vec!["train", "--out", &out];
        args.extend(TRAIN_ARGS);
        ok(&args);
        let ds = synth_dataset(&SyntheticConfig {
            per_class: 1,
            size: 56,
            seed: 99,
            ..SyntheticConfig::default()
        })
        .unwrap();
        write_ppm(&root.join("image.ppm"), &ds.images[1]).unwrap();
        Fixture { _dir: dir, root }
    })
}

fn model() -> String {
    fixture().path("train/model.ckpt")
}

#[test]
fn train_writes_artifacts() {
    let f = fixture();
    for name in ["model.ckpt", "train_log.csv", "metrics.json", "holdout.json", "split.json", "config.txt", "roc.csv"] {
        assert!(f.root.join("train").join(name).is_file(), "{name}");
    }
    let log = read(f.root.join("train/train_log.csv"));
    assert_eq!(log.lines().count(), 21);
    let holdout = json(f.root.join("train/holdout.json"));
    assert_eq!(holdout["sizes"]["train"], 32);
    assert!(holdout["final_train_accuracy"].as_f64().unwrap() >= 0.95, "{holdout}");
    let config = read(f.root.join("train/config.txt"));
    assert!(config.contains("arch=small\n") && config.contains("epochs=20\n"), "{config}");
}

#[test]
fn eval_on_train_split_matches_log() {
    let f = fixture();
    let out = f.path("eval");
    ok(&["eval", "--model", &model(), "--synthetic", "40", "--split", "train", "--out", &out]);
    let log = read(f.root.join("train/train_log.csv"));
    let last: f64 = log.lines().last().unwrap().rsplit(',').next().unwrap().parse().unwrap();
    let metrics = json(f.root.join("eval/metrics.json"));
    let keys: BTreeSet<&str> = metrics.as_object().unwrap().keys().map(String::as_str).collect();
    let expected = BTreeSet::from(["acc", "sen", "spf", "prc", "f1", "mcc", "fpr", "npv", "b_acc", "auc"]);
    assert_eq!(keys, expected);
    assert!((metrics["acc"].as_f64().unwrap() - last).abs() < 1e-6);
    assert!(read(f.root.join("eval/roc.csv")).starts_with("fpr,tpr,threshold\n"));
    assert!(read(f.root.join("eval/metrics.txt")).contains("ACC"));
}

#[test]
fn usage_errors_exit_2() {
    let f = fixture();
    let o = axai(&["train", "--arch", "small", "--out", &f.path("nodata")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--synthetic"));

    let o = axai(&["explain", "--model", &model(), "--image", &f.path("image.ppm"), "--method", "shap"]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    for m in ["gradcam", "lime", "rde", "cartoonx"] {
        assert!(msg.contains(m), "{msg}");
    }

    assert_eq!(axai(&["train", "--synthetic", "40", "--arch", "huge"]).status.code(), Some(2));
    assert_eq!(axai(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(axai(&["eval", "--model", &f.path("missing.ckpt"), "--synthetic", "4"]).status.code(), Some(2));
    assert_eq!(axai(&["train", "--data", &f.path("no-such-dir"), "--arch", "small"]).status.code(), Some(2));
    // flag belonging to another method
    let o = axai(&["explain", "--model", &model(), "--image", &f.path("image.ppm"), "--method", "gradcam", "--lambda", "3"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let cfg = f.root.join("bad.cfg");
    std::fs::write(&cfg, "colour = red\n").unwrap();
    let o = axai(&["train", "--config", cfg.to_str().unwrap(), "--synthetic", "40"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("colour"));
}

#[test]
fn runtime_failure_exits_3() {
    let f = fixture();
    let flat = f.root.join("flat.ppm");
    write_ppm(&flat, &axai::Tensor::full([3, 56, 56], 0.5)).unwrap();
    // a constant image has a single superpixel
    let o = axai(&["explain", "--model", &model(), "--image", flat.to_str().unwrap(), "--method", "lime", "--out", &f.path("flat")]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

fn explain(method: &str, extra: &[&str]) -> (PathBuf, Value) {
    let f = fixture();
    let out = f.root.join(format!("explain-{method}"));
    let (m, image) = (model(), f.path("image.ppm"));
    let mut args = vec!["explain", "--model", &m, "--image", &image, "--method", method, "--out", out.to_str().unwrap()];
    args.extend(extra);
    ok(&args);
    let sidecar = json(out.join("explanation.json"));
    (out, sidecar)
}

fn mask_shape(dir: &Path) -> Vec<usize> {
    read_records(&dir.join("mask.rec"))
        .unwrap()
        .into_iter()
        .find_map(|r| match r {
            Record::Tensor { name, tensor } if name == "mask" => Some(tensor.shape().to_vec()),
            _ => None,
        })
        .expect("mask record")
}

#[test]
fn gradcam_writes_seven_by_seven_map() {
    let (dir, s) = explain("gradcam", &[]);
    assert_eq!(mask_shape(&dir), vec![7, 7]);
    assert!(dir.join("overlay.ppm").is_file());
    assert_eq!(s["method"], "gradcam");
    assert!(s["distortion_to_flip"].as_f64().is_some());
}

#[test]
fn lime_echoes_defaults() {
    let (dir, s) = explain("lime", &[]);
    assert_eq!(s["hyperparameters"]["num_features"], 20);
    assert_eq!(s["hyperparameters"]["num_samples"], 2000);
    assert_eq!(mask_shape(&dir), vec![56, 56]);
}

#[test]
fn rde_reports_distortion_and_norm() {
    let (dir, s) = explain("rde", &["--steps", "20", "--lambda", "2"]);
    assert_eq!(s["lambda"], 2.0);
    assert_eq!(s["hyperparameters"]["steps"], 20);
    assert_eq!(s["distortion_trace"].as_array().unwrap().len(), 20);
    assert!(s["final_distortion"].as_f64().unwrap() >= 0.0);
    assert!(s["l1"].as_f64().unwrap() <= 56.0 * 56.0);
    assert_eq!(mask_shape(&dir), vec![56, 56]);
}

#[test]
fn cartoonx_echoes_defaults() {
    let (dir, s) = explain("cartoonx", &[]);
    let h = &s["hyperparameters"];
    assert_eq!(h["lambda"], 285.0);
    assert_eq!(h["steps"], 100);
    assert_eq!(h["batch"], 16);
    assert_eq!(s["lambda"], 285.0);
    assert!(dir.join("cartoon.ppm").is_file() && dir.join("overlay.ppm").is_file());
    assert_eq!(mask_shape(&dir).len(), 1);
}

#[test]
fn perturb_grid_rows() {
    let f = fixture();
    let full = f.path("perturb-full");
    ok(&["perturb", "--model", &model(), "--synthetic", "16", "--synthetic-seed", "5", "--out", &full]);
    let csv = read(Path::new(&full).join("sweep.csv"));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "kind,level,kernel_or_sigma,n_images,accuracy");
    assert_eq!(lines.len(), 1 + 9);
    assert!(lines[1].starts_with("clean,0,0,16,"));

    let none = f.path("perturb-none");
    ok(&["perturb", "--model", &model(), "--synthetic", "16", "--noise", "", "--blur", "", "--out", &none]);
    assert_eq!(read(Path::new(&none).join("sweep.csv")).lines().count(), 2);
}

#[test]
fn crossval_two_folds() {
    let f = fixture();
    let out = f.path("crossval");
    ok(&[
        "crossval", "--synthetic", "40", "--folds", "2", "--arch", "small", "--epochs", "3", "--batch", "8", "--out", &out,
    ]);
    let dir = Path::new(&out);
    assert_eq!(read(dir.join("folds.csv")).lines().count(), 3);
    assert_eq!(json(dir.join("metrics.json")).as_object().unwrap().len(), 10);
    assert_eq!(json(dir.join("pooled_metrics.json")).as_object().unwrap().len(), 10);
    assert!(read(dir.join("metrics.txt")).contains("pooled"));
}

#[test]
fn config_file_and_output_root() {
    let f = fixture();
    let cfg = f.root.join("perturb.cfg");
    std::fs::write(&cfg, "# sweep settings\nnoise = 10\nblur = 5, 10\nsynthetic = 8\nseed = 3\n").unwrap();
    let root = f.root.join("runs-root");
    let o = Command::new(env!("CARGO_BIN_EXE_axai"))
        .args(["perturb", "--config", cfg.to_str().unwrap(), "--model", &model(), "--seed", "4"])
        .env("AXAI_OUTPUT_ROOT", &root)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let runs: Vec<PathBuf> = std::fs::read_dir(&root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1);
    let name = runs[0].file_name().unwrap().to_str().unwrap().to_string();
    assert!(name.starts_with("perturb-") && name.ends_with('Z'), "{name}");
    let config = read(runs[0].join("config.txt"));
    assert!(config.contains("seed=4\n") && config.contains("noise=10\n") && config.contains("blur=5, 10\n"), "{config}");
    let mut sorted: Vec<&str> = config.lines().collect();
    sorted.sort_unstable();
    assert_eq!(sorted, config.lines().collect::<Vec<_>>());
    assert_eq!(read(runs[0].join("sweep.csv")).lines().count(), 1 + 1 + 1 + 2);
}
