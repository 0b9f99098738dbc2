use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::network::{train, train_with_callback, EpochLog, Model, ModelSpec, TrainConfig, TrainLog};
use crate::tensor::Tensor;

use super::metrics::{evaluate_predictions, ConfusionMatrix, MetricsReport};
use super::split::{holdout_split, kfold_split, SplitPlan};

/// Class-1 probabilities and argmax predictions for each image.
pub fn score_images(model: &Model<f32>, images: &[Tensor<f32>]) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut scores = Vec::with_capacity(images.len());
    let mut predicted = Vec::with_capacity(images.len());
    for chunk in images.chunks(crate::network::INFER_CHUNK) {
        let p = model.predict_proba(&Tensor::stack(chunk)?)?;
        let k = model.spec.num_classes;
        for row in p.data().chunks(k) {
            scores.push(row[1] as f64);
        }
        predicted.extend(p.argmax_rows());
    }
    Ok((scores, predicted))
}

/// Scores `model` on a labelled dataset.
pub fn evaluate_model(model: &Model<f32>, data: &Dataset) -> Result<(ConfusionMatrix, MetricsReport)> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation", "dataset is empty"));
    }
    let (scores, predicted) = score_images(model, &data.images)?;
    evaluate_predictions(&predicted, &scores, &data.labels)
}

#[derive(Clone, Debug)]
pub struct HoldoutOutcome {
    pub plan: SplitPlan,
    pub model: Model<f32>,
    pub log: TrainLog,
    pub val: Option<(ConfusionMatrix, MetricsReport)>,
    pub test: (ConfusionMatrix, MetricsReport),
}

/// Trains on the holdout train split and reports on validation and test.
/// The model and split are seeded from `train_cfg.seed`.
pub fn holdout_run(data: &Dataset, spec: &ModelSpec, train_cfg: &TrainConfig) -> Result<HoldoutOutcome> {
    holdout_run_with(data, spec, train_cfg, |_| {})
}

/// As [`holdout_run`], calling `on_epoch` after each training epoch.
pub fn holdout_run_with(
    data: &Dataset,
    spec: &ModelSpec,
    train_cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<HoldoutOutcome> {
    let plan = holdout_split(data.len(), train_cfg.seed)?;
    let SplitPlan::Holdout { train: tr, val, test } = &plan else { unreachable!() };
    let train_set = data.subset(tr);
    let mut model = Model::new(spec.clone(), train_cfg.seed)?;
    let log = train_with_callback(&mut model, &train_set.images, &train_set.labels, train_cfg, on_epoch)?;
    let val = if val.is_empty() { None } else { Some(evaluate_model(&model, &data.subset(val))?) };
    let test = evaluate_model(&model, &data.subset(test))?;
    Ok(HoldoutOutcome {
        plan,
        model,
        log,
        val,
        test,
    })
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub fold: usize,
    pub log: TrainLog,
    pub cm: ConfusionMatrix,
    pub report: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct CrossvalOutcome {
    pub folds: Vec<FoldOutcome>,
    /// Field-wise mean of the fold reports.
    pub mean: MetricsReport,
    pub pooled_cm: ConfusionMatrix,
    /// Metrics of the pooled matrix; ROC over the pooled out-of-fold scores.
    pub pooled: MetricsReport,
}

/// Seed for fold `k`, derived from the master seed.
pub fn fold_seed(master: u64, k: usize) -> u64 {
    master.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64 + 1)
}

/// k-fold cross-validation training a fresh model per fold.
pub fn crossval_run(data: &Dataset, spec: &ModelSpec, train_cfg: &TrainConfig, k: usize) -> Result<CrossvalOutcome> {
    crossval_run_with(data, spec, train_cfg, k, |_| {})
}

/// As [`crossval_run`], calling `on_fold` after each fold finishes.
pub fn crossval_run_with(
    data: &Dataset,
    spec: &ModelSpec,
    train_cfg: &TrainConfig,
    k: usize,
    mut on_fold: impl FnMut(&FoldOutcome),
) -> Result<CrossvalOutcome> {
    let plan = kfold_split(data.len(), k, train_cfg.seed)?;
    let mut folds = Vec::with_capacity(k);
    let mut all_scores = Vec::with_capacity(data.len());
    let mut all_pred = Vec::with_capacity(data.len());
    let mut all_labels = Vec::with_capacity(data.len());
    for (fold, test_idx) in plan.test_sets().into_iter().enumerate() {
        let tr = plan.kfold_train(fold).expect("fold index in range");
        let train_set = data.subset(&tr);
        let test_set = data.subset(test_idx);
        let cfg = TrainConfig {
            seed: fold_seed(train_cfg.seed, fold),
            ..*train_cfg
        };
        let ctx = |e: Error| Error::Training(format!("fold {fold}: {e}"));
        let mut model = Model::new(spec.clone(), cfg.seed).map_err(ctx)?;
        let log = train(&mut model, &train_set.images, &train_set.labels, &cfg).map_err(ctx)?;
        let (scores, predicted) = score_images(&model, &test_set.images).map_err(ctx)?;
        let (cm, report) = evaluate_predictions(&predicted, &scores, &test_set.labels).map_err(ctx)?;
        all_scores.extend(scores);
        all_pred.extend(predicted);
        all_labels.extend_from_slice(&test_set.labels);
        let outcome = FoldOutcome { fold, log, cm, report };
        on_fold(&outcome);
        folds.push(outcome);
    }
    let reports: Vec<MetricsReport> = folds.iter().map(|f| f.report.clone()).collect();
    let mean = MetricsReport::mean(&reports).expect("k >= 2 folds");
    let (pooled_cm, pooled) = evaluate_predictions(&all_pred, &all_scores, &all_labels)?;
    debug_assert_eq!(pooled_cm, folds.iter().fold(ConfusionMatrix::default(), |a, f| a.add(&f.cm)));
    Ok(CrossvalOutcome {
        folds,
        mean,
        pooled_cm,
        pooled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synth_dataset, SyntheticConfig};

    fn tiny() -> (Dataset, ModelSpec, TrainConfig) {
        let data = synth_dataset(&SyntheticConfig {
            per_class: 10,
            size: 56,
            seed: 2,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            seed: 3,
            ..TrainConfig::default()
        };
        (data, ModelSpec::small(), cfg)
    }

    #[test]
    fn two_fold_pooled_matrix_covers_everything() {
        let (data, spec, cfg) = tiny();
        let out = crossval_run(&data, &spec, &cfg, 2).unwrap();
        assert_eq!(out.folds.len(), 2);
        assert_eq!(out.pooled_cm.total(), 20);
        let again = crossval_run(&data, &spec, &cfg, 2).unwrap();
        assert_eq!(out.mean, again.mean);
        assert_eq!(out.pooled, again.pooled);
    }

    #[test]
    fn holdout_reports_on_the_test_split() {
        let (data, spec, cfg) = tiny();
        let out = holdout_run(&data, &spec, &cfg).unwrap();
        assert_eq!(out.test.0.total(), 4);
        assert!(out.val.is_none());
        assert_eq!(out.log.epochs.len(), 2);
    }
}
