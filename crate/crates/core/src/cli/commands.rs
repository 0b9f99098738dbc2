use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};

use super::config::{parse_config_file, Settings};
use super::{
    CliError, Command, CommonArgs, CrossvalArgs, DataArgs, EvalArgs, ExplainArgs, FitArgs, PerturbArgs, TrainArgs,
    OUTPUT_ROOT_VAR,
};
use crate::autodiff::AdamConfig;
use crate::dataio::{load_dataset, load_image, synth_dataset, write_ppm, Dataset, SyntheticConfig};
use crate::error::Error;
use crate::evaluation::{
    crossval_run_with, evaluate_model, holdout_run_with, holdout_split, ConfusionMatrix, MetricsReport, SplitPlan,
    HOLDOUT_MIN,
};
use crate::explain::{
    cartoonx, distortion_to_flip, grad_cam, lime_explain, overlay_heatmap, pixel_rde, predicted_class,
    wavelet_distortion_to_flip, CartoonXConfig, Classifier, LimeConfig, QuickshiftConfig, RdeConfig,
};
use crate::network::{load_checkpoint, save_checkpoint, write_records, CheckpointMeta, Model, ModelSpec, TrainConfig};
use crate::perturb::{robustness_sweep, sweep_csv, sweep_grid};
use crate::tensor::Tensor;
use crate::wavelet::Wavelet;

pub const METHODS: [&str; 4] = ["gradcam", "lime", "rde", "cartoonx"];

/// Bad inputs (data, checkpoint, image) are configuration errors.
fn input(e: Error) -> CliError {
    CliError::usage(e.to_string())
}

fn runtime(e: Error) -> CliError {
    CliError::runtime(e.to_string())
}

pub fn dispatch(cmd: Command) -> Result<PathBuf, CliError> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Crossval(a) => crossval(a),
        Command::Explain(a) => explain(a),
        Command::Perturb(a) => perturb(a),
    }
}

fn text<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

fn path(v: &Option<PathBuf>) -> Option<String> {
    v.as_ref().map(|p| p.display().to_string())
}

fn config_file(common: &CommonArgs) -> Result<BTreeMap<String, String>, CliError> {
    match &common.config {
        Some(p) => parse_config_file(p),
        None => Ok(BTreeMap::new()),
    }
}

fn data_flags(d: &DataArgs) -> [(&'static str, Option<String>); 3] {
    [
        ("data", path(&d.data)),
        ("synthetic", text(&d.synthetic)),
        ("synthetic_seed", text(&d.synthetic_seed)),
    ]
}

fn fit_flags(f: &FitArgs) -> [(&'static str, Option<String>); 4] {
    [
        ("epochs", text(&f.epochs)),
        ("batch", text(&f.batch)),
        ("lr", text(&f.lr)),
        ("arch", f.arch.clone()),
    ]
}

const FIT_DEFAULTS: [(&str, &str); 6] = [
    ("seed", "0"),
    ("synthetic_seed", "0"),
    ("epochs", "25"),
    ("batch", "32"),
    ("lr", "0.001"),
    ("arch", "full"),
];

/// `YYYYMMDDTHHMMSSZ` for a Unix time.
fn utc_stamp(secs: u64) -> String {
    let days = (secs / 86_400) as i64;
    let rem = secs % 86_400;
    // civil-from-days on the proleptic Gregorian calendar
    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let day = doy - (153 * mp + 2) / 5 + 1;
    let month = if mp < 10 { mp + 3 } else { mp - 9 };
    let year = yoe + era * 400 + i64::from(month <= 2);
    format!(
        "{year:04}{month:02}{day:02}T{:02}{:02}{:02}Z",
        rem / 3600,
        rem / 60 % 60,
        rem % 60
    )
}

fn output_dir(common: &CommonArgs, command: &str) -> Result<PathBuf, CliError> {
    let dir = match &common.out {
        Some(d) => d.clone(),
        None => {
            let root = std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
            let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
            let stamp = utc_stamp(secs);
            let mut dir = root.join(format!("{command}-{stamp}"));
            let mut i = 1;
            while dir.exists() {
                dir = root.join(format!("{command}-{stamp}-{i}"));
                i += 1;
            }
            dir
        }
    };
    std::fs::create_dir_all(&dir).map_err(|e| CliError::usage(format!("cannot create output directory {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    let p = dir.join(name);
    std::fs::write(&p, contents).map_err(|e| CliError::runtime(format!("{}: {e}", p.display())))
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values serialize");
    s.push('\n');
    s
}

fn arch(s: &Settings) -> Result<ModelSpec, CliError> {
    match s.raw("arch") {
        Some("full") => Ok(ModelSpec::default()),
        Some("small") => Ok(ModelSpec::small()),
        other => Err(CliError::usage(format!("unknown --arch {:?} (valid: full, small)", other.unwrap_or("")))),
    }
}

fn train_config(s: &Settings) -> Result<TrainConfig, CliError> {
    let cfg = TrainConfig {
        epochs: s.require("epochs")?,
        batch_size: s.require("batch")?,
        adam: AdamConfig {
            learning_rate: s.require("lr")?,
            ..AdamConfig::default()
        },
        seed: s.require("seed")?,
    };
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.adam.learning_rate.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(CliError::usage("--epochs, --batch and --lr must be positive"));
    }
    Ok(cfg)
}

/// The dataset named by `--data` or `--synthetic`, at `size x size`.
fn load_data(s: &Settings, size: usize) -> Result<Dataset, CliError> {
    match (s.raw("data"), s.get::<usize>("synthetic")?) {
        (Some(_), Some(_)) => Err(CliError::usage("--data and --synthetic are mutually exclusive")),
        (None, None) => Err(CliError::usage("one of --data DIR or --synthetic N is required")),
        (Some(dir), None) => load_dataset(Path::new(dir), size).map_err(input),
        (None, Some(n)) => {
            if n < 2 || n % 2 != 0 {
                return Err(CliError::usage(format!("--synthetic needs an even count of at least 2, got {n}")));
            }
            synth_dataset(&SyntheticConfig {
                per_class: n / 2,
                size,
                seed: s.require("synthetic_seed")?,
                ..SyntheticConfig::default()
            })
            .map_err(input)
        }
    }
}

fn load_model(s: &Settings) -> Result<(Model<f32>, CheckpointMeta), CliError> {
    let p: String = s.require("model")?;
    load_checkpoint(Path::new(&p)).map_err(input)
}

fn confusion_line(cm: &ConfusionMatrix) -> String {
    format!("n={} tp={} tn={} fp={} fn={}\n", cm.total(), cm.tp, cm.tn, cm.fp, cm.fn_)
}

fn write_report(dir: &Path, prefix: &str, cm: &ConfusionMatrix, report: &MetricsReport) -> Result<(), CliError> {
    write(dir, &format!("{prefix}metrics.json"), report.to_json() + "\n")?;
    write(dir, &format!("{prefix}metrics.txt"), confusion_line(cm) + &report.to_table())?;
    write(dir, &format!("{prefix}roc.csv"), report.roc_csv())
}

fn train(a: TrainArgs) -> Result<PathBuf, CliError> {
    let file = config_file(&a.common)?;
    let mut flags = vec![("seed", text(&a.common.seed))];
    flags.extend(data_flags(&a.data));
    flags.extend(fit_flags(&a.fit));
    let s = Settings::merge(&FIT_DEFAULTS, &["data", "synthetic"], &file, &flags)?;
    let spec = arch(&s)?;
    let cfg = train_config(&s)?;
    let data = load_data(&s, spec.input_size)?;
    if data.len() < HOLDOUT_MIN {
        return Err(CliError::usage(format!("training needs at least {HOLDOUT_MIN} images, got {}", data.len())));
    }
    let dir = output_dir(&a.common, "train")?;
    write(&dir, "config.txt", s.echo())?;
    let out = holdout_run_with(&data, &spec, &cfg, |e| {
        eprintln!("epoch {:>3}  loss {:.5}  train acc {:.4}", e.epoch, e.loss, e.accuracy);
    })
    .map_err(runtime)?;
    let mut meta = CheckpointMeta::default();
    for key in ["seed", "epochs", "batch", "lr", "data", "synthetic", "synthetic_seed"] {
        if let Some(v) = s.raw(key) {
            meta.entries.insert(key.to_string(), v.to_string());
        }
    }
    save_checkpoint(&out.model, &meta, &dir.join("model.ckpt")).map_err(runtime)?;
    write(&dir, "train_log.csv", out.log.to_csv())?;
    let SplitPlan::Holdout { train, val, test } = &out.plan else { unreachable!("holdout plan") };
    write(&dir, "split.json", pretty(&json!({ "train": train, "val": val, "test": test })))?;
    let (test_cm, test_report) = &out.test;
    write_report(&dir, "", test_cm, test_report)?;
    let holdout = json!({
        "sizes": { "train": train.len(), "val": val.len(), "test": test.len() },
        "final_train_accuracy": out.log.last().map(|e| e.accuracy),
        "val": out.val.as_ref().map(|(cm, r)| json!({ "confusion": cm, "metrics": r.to_value() })),
        "test": { "confusion": test_cm, "metrics": test_report.to_value() },
    });
    write(&dir, "holdout.json", pretty(&holdout))?;
    Ok(dir)
}

fn eval(a: EvalArgs) -> Result<PathBuf, CliError> {
    let file = config_file(&a.common)?;
    let mut flags = vec![
        ("seed", text(&a.common.seed)),
        ("model", path(&a.model)),
        ("split", a.split.clone()),
    ];
    flags.extend(data_flags(&a.data));
    let s = Settings::merge(
        &[("synthetic_seed", "0"), ("split", "all")],
        &["model", "data", "synthetic"],
        &file,
        &flags,
    )?;
    let (model, meta) = load_model(&s)?;
    let data = load_data(&s, model.spec.input_size)?;
    let data = match s.raw("split") {
        Some("all") => data,
        Some(which @ ("train" | "val" | "test")) => {
            let seed: u64 = meta
                .entries
                .get("seed")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| CliError::usage("checkpoint records no training seed; use --split all"))?;
            let plan = holdout_split(data.len(), seed).map_err(input)?;
            let SplitPlan::Holdout { train, val, test } = plan else { unreachable!("holdout plan") };
            let idx = match which {
                "train" => train,
                "val" => val,
                _ => test,
            };
            if idx.is_empty() {
                return Err(CliError::usage(format!("the {which} split is empty for {} images", data.len())));
            }
            data.subset(&idx)
        }
        other => return Err(CliError::usage(format!("unknown --split {:?} (valid: all, train, val, test)", other.unwrap_or("")))),
    };
    let dir = output_dir(&a.common, "eval")?;
    write(&dir, "config.txt", s.echo())?;
    let (cm, report) = evaluate_model(&model, &data).map_err(runtime)?;
    write_report(&dir, "", &cm, &report)?;
    Ok(dir)
}

fn crossval(a: CrossvalArgs) -> Result<PathBuf, CliError> {
    let file = config_file(&a.common)?;
    let mut flags = vec![("seed", text(&a.common.seed)), ("folds", text(&a.folds))];
    flags.extend(data_flags(&a.data));
    flags.extend(fit_flags(&a.fit));
    let mut defaults = FIT_DEFAULTS.to_vec();
    defaults.push(("folds", "10"));
    let s = Settings::merge(&defaults, &["data", "synthetic"], &file, &flags)?;
    let spec = arch(&s)?;
    let cfg = train_config(&s)?;
    let k: usize = s.require("folds")?;
    let data = load_data(&s, spec.input_size)?;
    if k < 2 || k > data.len() {
        return Err(CliError::usage(format!("--folds must be between 2 and the dataset size {}, got {k}", data.len())));
    }
    let dir = output_dir(&a.common, "crossval")?;
    write(&dir, "config.txt", s.echo())?;
    let out = crossval_run_with(&data, &spec, &cfg, k, |f| {
        eprintln!("fold {:>2}/{k}  acc {:.4}", f.fold + 1, f.report.acc);
    })
    .map_err(runtime)?;
    write(&dir, "metrics.json", out.mean.to_json() + "\n")?;
    write_report(&dir, "pooled_", &out.pooled_cm, &out.pooled)?;
    let mut table = format!("mean of {k} folds\n{}\npooled\n", out.mean.to_table());
    table += &confusion_line(&out.pooled_cm);
    table += &out.pooled.to_table();
    write(&dir, "metrics.txt", table)?;
    let mut folds = String::from("fold,n_test,acc,sen,spf,prc,f1,mcc,fpr,npv,b_acc,auc\n");
    for f in &out.folds {
        let r = &f.report;
        let auc = r.auc.map(|v| v.to_string()).unwrap_or_default();
        folds += &format!(
            "{},{},{},{},{},{},{},{},{},{},{},{auc}\n",
            f.fold,
            f.cm.total(),
            r.acc,
            r.sen,
            r.spf,
            r.prc,
            r.f1,
            r.mcc,
            r.fpr,
            r.npv,
            r.b_acc
        );
    }
    write(&dir, "folds.csv", folds)?;
    Ok(dir)
}

/// Defaults for each explainer's flags.
fn method_defaults(method: &str) -> Vec<(&'static str, String)> {
    match method {
        "gradcam" => vec![],
        "lime" => {
            let c = LimeConfig::default();
            vec![
                ("seed", c.seed.to_string()),
                ("num_features", c.num_features.to_string()),
                ("num_samples", c.num_samples.to_string()),
                ("kernel_width", c.kernel_width.to_string()),
                ("alpha", c.alpha.to_string()),
                ("kernel_size", c.segmentation.kernel_size.to_string()),
                ("max_dist", c.segmentation.max_dist.to_string()),
                ("ratio", c.segmentation.ratio.to_string()),
            ]
        }
        "rde" => {
            let c = RdeConfig::default();
            vec![
                ("seed", c.seed.to_string()),
                ("lambda", c.lambda.to_string()),
                ("step", c.step.to_string()),
                ("steps", c.steps.to_string()),
                ("samples", c.noise_samples.to_string()),
            ]
        }
        _ => {
            let c = CartoonXConfig::default();
            vec![
                ("seed", c.seed.to_string()),
                ("lambda", c.lambda.to_string()),
                ("step", c.step.to_string()),
                ("steps", c.steps.to_string()),
                ("batch", c.batch.to_string()),
                ("wavelet", c.wavelet.to_string()),
                ("levels", c.levels.to_string()),
            ]
        }
    }
}

struct Explained {
    /// Raw explainer output written to `mask.rec`.
    raw: Tensor<f32>,
    /// `H x W` map drawn over the image.
    heat: Tensor<f32>,
    fields: Value,
}

fn explain(a: ExplainArgs) -> Result<PathBuf, CliError> {
    let file = config_file(&a.common)?;
    let method = a
        .method
        .clone()
        .or_else(|| file.get("method").cloned())
        .ok_or_else(|| CliError::usage(format!("--method is required (valid methods: {})", METHODS.join(", "))))?;
    if !METHODS.contains(&method.as_str()) {
        return Err(CliError::usage(format!("unknown method {method:?} (valid methods: {})", METHODS.join(", "))));
    }
    let own = method_defaults(&method);
    let mut defaults: Vec<(&str, &str)> = own.iter().map(|(k, v)| (*k, v.as_str())).collect();
    defaults.push(("method", &method));
    let flags = [
        ("seed", text(&a.common.seed)),
        ("model", path(&a.model)),
        ("image", path(&a.image)),
        ("method", a.method.clone()),
        ("target", text(&a.target)),
        ("num_features", text(&a.num_features)),
        ("num_samples", text(&a.num_samples)),
        ("kernel_width", text(&a.kernel_width)),
        ("alpha", text(&a.alpha)),
        ("kernel_size", text(&a.kernel_size)),
        ("max_dist", text(&a.max_dist)),
        ("ratio", text(&a.ratio)),
        ("lambda", text(&a.lambda)),
        ("step", text(&a.step)),
        ("steps", text(&a.steps)),
        ("samples", text(&a.samples)),
        ("batch", text(&a.batch)),
        ("wavelet", a.wavelet.clone()),
        ("levels", text(&a.levels)),
    ];
    let s = Settings::merge(&defaults, &["model", "image", "target"], &file, &flags)?;
    let (model, _) = load_model(&s)?;
    let image_path: String = s.require("image")?;
    let image = load_image(Path::new(&image_path), model.spec.input_size).map_err(input)?;
    let target = match s.get::<usize>("target")? {
        Some(t) if t >= model.num_classes() => {
            return Err(CliError::usage(format!("--target {t} is outside [0, {})", model.num_classes())))
        }
        Some(t) => t,
        None => predicted_class(&model, &image).map_err(runtime)?,
    };
    let probs = model.predict_proba(&Tensor::stack(std::slice::from_ref(&image)).map_err(runtime)?).map_err(runtime)?;
    let dir = output_dir(&a.common, "explain")?;
    write(&dir, "config.txt", s.echo())?;
    let (_, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let ex = match method.as_str() {
        "gradcam" => {
            let map = grad_cam(&model, &image, target).map_err(runtime)?;
            let mask = map.upsampled(h, w).map_err(runtime)?;
            let flip = distortion_to_flip(&model, &image, &mask).map_err(runtime)?;
            Explained {
                fields: json!({
                    "hyperparameters": {},
                    "seed": null,
                    "lambda": null,
                    "final_distortion": null,
                    "l1": l1(&mask),
                    "distortion_to_flip": flip,
                    "weights": map.weights,
                }),
                raw: map.values,
                heat: mask,
            }
        }
        "lime" => {
            let cfg = LimeConfig {
                num_features: s.require("num_features")?,
                num_samples: s.require("num_samples")?,
                kernel_width: s.require("kernel_width")?,
                alpha: s.require("alpha")?,
                segmentation: QuickshiftConfig {
                    kernel_size: s.require("kernel_size")?,
                    max_dist: s.require("max_dist")?,
                    ratio: s.require("ratio")?,
                    ..QuickshiftConfig::default()
                },
                target: Some(target),
                seed: s.require("seed")?,
            };
            let e = lime_explain(&model, &image, &cfg).map_err(runtime)?;
            let mask = e.positive_mask().map_err(runtime)?;
            let flip = distortion_to_flip(&model, &image, &mask).map_err(runtime)?;
            let coef = e.coefficient_map().map_err(runtime)?;
            Explained {
                fields: json!({
                    "hyperparameters": {
                        "num_features": cfg.num_features,
                        "num_samples": cfg.num_samples,
                        "kernel_width": cfg.kernel_width,
                        "alpha": cfg.alpha,
                        "kernel_size": cfg.segmentation.kernel_size,
                        "max_dist": cfg.segmentation.max_dist,
                        "ratio": cfg.segmentation.ratio,
                    },
                    "seed": cfg.seed,
                    "lambda": null,
                    "final_distortion": null,
                    "l1": l1(&mask),
                    "distortion_to_flip": flip,
                    "segments": e.segments.count,
                    "selected": e.selected,
                    "intercept": e.intercept,
                    "score": e.score,
                }),
                heat: coef.map(|v| v.max(0.0)),
                raw: coef,
            }
        }
        "rde" => {
            let cfg = RdeConfig {
                lambda: s.require("lambda")?,
                step: s.require("step")?,
                steps: s.require("steps")?,
                noise_samples: s.require("samples")?,
                target: Some(target),
                seed: s.require("seed")?,
            };
            let e = pixel_rde(&model, &image, &cfg).map_err(runtime)?;
            let flip = distortion_to_flip(&model, &image, &e.mask).map_err(runtime)?;
            Explained {
                fields: json!({
                    "hyperparameters": {
                        "lambda": cfg.lambda,
                        "step": cfg.step,
                        "steps": cfg.steps,
                        "samples": cfg.noise_samples,
                    },
                    "seed": cfg.seed,
                    "lambda": cfg.lambda,
                    "final_distortion": e.final_distortion,
                    "l1": e.l1(),
                    "distortion_to_flip": flip,
                    "distortion_trace": e.distortion_trace,
                    "loss_trace": e.loss_trace,
                }),
                heat: e.mask.clone(),
                raw: e.mask,
            }
        }
        _ => {
            let wavelet: Wavelet = s
                .raw("wavelet")
                .unwrap_or("")
                .parse()
                .map_err(|e: Error| CliError::usage(format!("--wavelet: {e}")))?;
            let cfg = CartoonXConfig {
                lambda: s.require("lambda")?,
                step: s.require("step")?,
                steps: s.require("steps")?,
                batch: s.require("batch")?,
                wavelet,
                levels: s.require("levels")?,
                target: Some(target),
                seed: s.require("seed")?,
            };
            let e = cartoonx(&model, &image, &cfg).map_err(runtime)?;
            let flip = wavelet_distortion_to_flip(&model, &image, e.mask.data(), cfg.wavelet, cfg.levels).map_err(runtime)?;
            let cartoon = e.rendered.clone().expect("cartoonx renders").reshape([h, w]).map_err(runtime)?;
            let grey = Tensor::stack(&[cartoon.clone(), cartoon.clone(), cartoon.clone()]).map_err(runtime)?;
            write_ppm(&dir.join("cartoon.ppm"), &grey).map_err(runtime)?;
            Explained {
                fields: json!({
                    "hyperparameters": {
                        "lambda": cfg.lambda,
                        "step": cfg.step,
                        "steps": cfg.steps,
                        "batch": cfg.batch,
                        "wavelet": cfg.wavelet.to_string(),
                        "levels": cfg.levels,
                    },
                    "seed": cfg.seed,
                    "lambda": cfg.lambda,
                    "final_distortion": e.final_distortion,
                    "l1": e.l1(),
                    "distortion_to_flip": flip,
                    "distortion_trace": e.distortion_trace,
                    "loss_trace": e.loss_trace,
                }),
                heat: cartoon,
                raw: e.mask,
            }
        }
    };
    let overlay = overlay_heatmap(&ex.heat, &image).map_err(runtime)?;
    write_ppm(&dir.join("overlay.ppm"), &overlay).map_err(runtime)?;
    let rec_meta = BTreeMap::from([("method".to_string(), method.clone()), ("target".to_string(), target.to_string())]);
    write_records(&dir.join("mask.rec"), &[("mask", &ex.raw)], &rec_meta).map_err(runtime)?;
    let mut sidecar = json!({
        "method": method,
        "image": image_path,
        "target": target,
        "probabilities": probs.data(),
        "mask_shape": ex.raw.shape(),
    });
    let (Value::Object(out), Value::Object(extra)) = (&mut sidecar, ex.fields) else { unreachable!("objects") };
    out.extend(extra);
    write(&dir, "explanation.json", pretty(&sidecar))?;
    Ok(dir)
}

fn l1(mask: &Tensor<f32>) -> f64 {
    mask.data().iter().map(|&v| v.abs() as f64).sum()
}

fn perturb(a: PerturbArgs) -> Result<PathBuf, CliError> {
    let file = config_file(&a.common)?;
    let mut flags = vec![
        ("seed", text(&a.common.seed)),
        ("model", path(&a.model)),
        ("noise", a.noise.clone()),
        ("blur", a.blur.clone()),
    ];
    flags.extend(data_flags(&a.data));
    let s = Settings::merge(
        &[("seed", "0"), ("synthetic_seed", "0"), ("noise", "3,5,10,30"), ("blur", "5,10,20,30")],
        &["model", "data", "synthetic"],
        &file,
        &flags,
    )?;
    let grid = sweep_grid(&s.list("noise")?, &s.list("blur")?);
    let seed: u64 = s.require("seed")?;
    let (model, _) = load_model(&s)?;
    let data = load_data(&s, model.spec.input_size)?;
    let dir = output_dir(&a.common, "perturb")?;
    write(&dir, "config.txt", s.echo())?;
    let rows = robustness_sweep(&model, &data.images, &data.labels, &grid, seed).map_err(runtime)?;
    for r in &rows {
        eprintln!("{:<12} {:>5}  acc {:.4}", r.corruption.kind(), r.corruption.level(), r.accuracy);
    }
    write(&dir, "sweep.csv", sweep_csv(&rows))?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn utc_stamps() {
        assert_eq!(utc_stamp(0), "19700101T000000Z");
        assert_eq!(utc_stamp(951_782_400), "20000229T000000Z");
        assert_eq!(utc_stamp(1_700_000_000), "20231114T221320Z");
    }
}
