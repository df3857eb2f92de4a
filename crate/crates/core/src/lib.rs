//! Fairness-regularized training for grouped classification data.
//!
//! The crate trains a small softmax classifier with a penalty on the worst
//! within-language gender loss gap, adjusts the penalty weight by projected
//! dual ascent on a development-set gap, and reports gender-bias metrics
//! (one-vs-rest TPR/FPR gaps, weighted-F1 and accuracy gaps, and their mean).
//!
//! Modules:
//! - [`data`]: utterance manifests, group statistics, synthetic benchmarks, stratified batching.
//! - [`model`]: linear / one-hidden-layer softmax classifier with analytic gradients.
//! - [`fairness`]: group losses, language gaps, the gap regularizer and the weight controller.
//! - [`train`]: the training loop and the ablation matrix.
//! - [`metrics`]: SER metrics and gender gap reports.
//! - [`report`]: CSV / markdown rendering of reports and histories.

pub mod data;
pub mod fairness;
pub mod metrics;
pub mod model;
mod numfmt;
pub mod report;
pub mod train;

pub use data::{Dataset, Gender, Split, Utterance};
pub use fairness::{ControllerState, GapReport, GroupLossTable, PenaltyConfig};
pub use metrics::{EvalRecord, MetricsReport};
pub use model::{Architecture, ModelParams};
pub use train::{LambdaMode, TrainConfig, TrainedModel};
