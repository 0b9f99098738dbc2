//! Splits, metrics and the holdout / cross-validation harnesses.

mod harness;
mod metrics;
mod split;

pub use harness::{
    crossval_run, crossval_run_with, evaluate_model, fold_seed, holdout_run, holdout_run_with, score_images, CrossvalOutcome, FoldOutcome,
    HoldoutOutcome,
};
pub use metrics::{compute_metrics, evaluate_predictions, roc_auc, ConfusionMatrix, MetricsReport, RocPoint};
pub use split::{holdout_split, kfold_split, largest_remainder, SplitPlan, HOLDOUT_MIN};
