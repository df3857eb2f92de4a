//! Training loop: mean cross-entropy plus the worst-language gap penalty,
//! with the penalty weight held fixed, switched off, or adapted once per
//! epoch from the development-set gap. Early stopping monitors dev
//! weighted-F1 and the best epoch's parameters are returned.

use std::fmt;
use std::str::FromStr;
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{stratified_batches, DataError, Dataset, Gender, Split, Utterance};
use crate::fairness::{
    fairness_example_weights, group_mean_losses, language_gaps, loss_gap_report, regularizer_value,
    regularizer_weights, ControllerConfig, ControllerState, ControllerStep, FairnessError, PenaltyConfig,
};
use crate::metrics::{accuracy, full_report, weighted_f1, EvalRecord, FullReport, MetricsError};
use crate::model::{
    backward_weighted, forward, init_params, per_example_loss, predict, sgd_step, Architecture, ModelError,
    ModelParams,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("the {0} split is empty")]
    EmptySplit(Split),
    #[error(
        "dataset has class_count={dataset_c}, feature_dim={dataset_d}; model expects {model_c} and {model_d}"
    )]
    DimMismatch {
        dataset_c: usize,
        dataset_d: usize,
        model_c: usize,
        model_d: usize,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fairness(#[from] FairnessError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// How the penalty weight evolves during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaMode {
    /// Projected ascent on the dev gap after every epoch.
    Adaptive,
    /// Constant weight.
    Fixed(f64),
    /// Weight forced to zero: plain ERM.
    Off,
}

impl fmt::Display for LambdaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaMode::Adaptive => f.write_str("adaptive"),
            LambdaMode::Fixed(v) => write!(f, "fixed:{v}"),
            LambdaMode::Off => f.write_str("off"),
        }
    }
}

impl FromStr for LambdaMode {
    type Err = TrainError;

    /// `adaptive`, `off`, or `fixed:<value>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adaptive" => Ok(LambdaMode::Adaptive),
            "off" => Ok(LambdaMode::Off),
            _ => s
                .strip_prefix("fixed:")
                .and_then(|v| v.parse().ok())
                .map(LambdaMode::Fixed)
                .ok_or_else(|| TrainError::Config(format!("unknown lambda mode `{s}`"))),
        }
    }
}

fn default_arch() -> String {
    "linear".to_string()
}

/// Training hyperparameters. Defaults are the LLM fine-tuning values; the
/// desk-scale benchmark configs override `lr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_max: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub seed: u64,
    pub penalty_power: PenaltyConfig,
    pub controller: ControllerConfig,
    pub lambda_mode: LambdaMode,
    /// `linear` or `mlp-1h`.
    #[serde(default = "default_arch")]
    pub arch: String,
    /// Hidden width for `mlp-1h`.
    pub hidden: usize,
    /// Include the mean-loss term. Off gives a penalty-only objective.
    pub erm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_max: 20,
            batch_size: 64,
            lr: 5e-5,
            weight_decay: 0.01,
            patience: 5,
            seed: 42,
            penalty_power: PenaltyConfig::default(),
            controller: ControllerConfig::default(),
            lambda_mode: LambdaMode::Adaptive,
            arch: default_arch(),
            hidden: 16,
            erm: true,
        }
    }
}

impl TrainConfig {
    pub fn architecture(&self) -> Result<Architecture, TrainError> {
        Ok(Architecture::from_tag(&self.arch, self.hidden)?)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs_max == 0 {
            return bad("epochs_max must be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.patience == 0 {
            return bad("patience must be >= 1".into());
        }
        self.controller.validate()?;
        if let LambdaMode::Fixed(v) = self.lambda_mode {
            if !(0.0..=self.controller.lambda_max).contains(&v) {
                return bad(format!(
                    "fixed lambda {v} outside [0, {}]",
                    self.controller.lambda_max
                ));
            }
        }
        if let Architecture::Mlp { hidden: 0 } = self.architecture()? {
            return bad("hidden must be >= 1 for mlp-1h".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-example training loss over the epoch.
    pub train_erm_loss: f64,
    /// Mean batch penalty value `max_gap^p` over the epoch.
    pub train_reg_value: f64,
    pub dev_gap: f64,
    /// Penalty weight in effect during the epoch.
    pub lambda: f64,
    pub dev_weighted_f1: f64,
    pub dev_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
    /// Adaptive mode only: every weight update.
    pub controller_trace: Vec<ControllerStep>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    /// Snapshot from `history.best_epoch`.
    pub params: ModelParams,
    pub config: TrainConfig,
    pub history: TrainHistory,
}

/// Per-batch quantities of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss_sum: f64,
    pub reg_value: f64,
    pub max_gap: f64,
}

fn keys_of<'a>(batch: &[&'a Utterance]) -> Vec<(&'a str, Gender)> {
    batch.iter().map(|u| (u.language.as_str(), u.gender)).collect()
}

/// One SGD step on `mean loss + lambda * max_gap^p` over `batch`.
pub fn train_step(
    params: &ModelParams,
    batch: &[&Utterance],
    lambda: f64,
    cfg: &TrainConfig,
    languages: &[String],
) -> Result<(ModelParams, StepStats), TrainError> {
    let mut losses = Vec::with_capacity(batch.len());
    for u in batch {
        losses.push(per_example_loss(&forward(params, &u.features)?, u.label)?);
    }
    let keys = keys_of(batch);
    let table = group_mean_losses(&losses, &keys)?;
    let report = language_gaps(&table, languages);
    let reg_value = regularizer_value(&report, cfg.penalty_power);
    let weights = if cfg.erm {
        fairness_example_weights(&report, &table, cfg.penalty_power, lambda, &keys, batch.len())?
    } else {
        regularizer_weights(&report, &table, cfg.penalty_power, lambda, &keys)?
    };
    let examples: Vec<(&[f64], usize)> = batch.iter().map(|u| (u.features.as_slice(), u.label)).collect();
    let grads = backward_weighted(params, &examples, &weights)?;
    let next = sgd_step(params, &grads, cfg.lr, cfg.weight_decay)?;
    Ok((
        next,
        StepStats {
            loss_sum: losses.iter().sum(),
            reg_value,
            max_gap: report.max_gap,
        },
    ))
}

/// Predictions of `params` on `utts` as evaluation records.
pub fn eval_records(params: &ModelParams, utts: &[Utterance]) -> Result<Vec<EvalRecord>, ModelError> {
    utts.iter()
        .map(|u| {
            Ok(EvalRecord {
                true_label: u.label,
                predicted_label: predict(params, &u.features)?,
                language: u.language.clone(),
                gender: u.gender,
            })
        })
        .collect()
}

/// Seed of the batch shuffle in `epoch` (1-based).
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_add(epoch as u64)
}

fn check_compatible(ds: &Dataset, params: &ModelParams) -> Result<(), TrainError> {
    if ds.class_count != params.class_count || ds.feature_dim != params.feature_dim {
        return Err(TrainError::DimMismatch {
            dataset_c: ds.class_count,
            dataset_d: ds.feature_dim,
            model_c: params.class_count,
            model_d: params.feature_dim,
        });
    }
    Ok(())
}

/// Trains from a fresh initialization seeded with `cfg.seed`.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainedModel, TrainError> {
    cfg.validate()?;
    let init = init_params(cfg.architecture()?, ds.class_count, ds.feature_dim, cfg.seed)?;
    train_from(ds, cfg, init)
}

/// Trains starting from `init`.
pub fn train_from(ds: &Dataset, cfg: &TrainConfig, init: ModelParams) -> Result<TrainedModel, TrainError> {
    cfg.validate()?;
    for split in [Split::Train, Split::Valid] {
        if ds.split(split).is_empty() {
            return Err(TrainError::EmptySplit(split));
        }
    }
    check_compatible(ds, &init)?;

    let mut controller = ControllerState::new(cfg.controller)?;
    let current_lambda = |c: &ControllerState| match cfg.lambda_mode {
        LambdaMode::Adaptive => c.lambda,
        LambdaMode::Fixed(v) => v,
        LambdaMode::Off => 0.0,
    };

    let mut params = init;
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut since_best = 0usize;
    let mut records = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=cfg.epochs_max {
        let lambda = current_lambda(&controller);
        let batches = stratified_batches(ds, Split::Train, cfg.batch_size, epoch_seed(cfg.seed, epoch))?;
        let mut loss_sum = 0.0;
        let mut reg_sum = 0.0;
        for idx in &batches {
            let batch: Vec<&Utterance> = idx.iter().map(|&i| &ds.train[i]).collect();
            let (next, stats) = train_step(&params, &batch, lambda, cfg, &ds.languages)?;
            params = next;
            loss_sum += stats.loss_sum;
            reg_sum += stats.reg_value;
        }
        if !params.is_finite() {
            return Err(ModelError::NonFinite.into());
        }

        let (_, _, gap_report) = loss_gap_report(&params, &ds.valid, &ds.languages)?;
        let dev_records = eval_records(&params, &ds.valid)?;
        let dev_wf1 = weighted_f1(&dev_records)?;
        records.push(EpochRecord {
            epoch,
            train_erm_loss: loss_sum / ds.train.len() as f64,
            train_reg_value: reg_sum / batches.len() as f64,
            dev_gap: gap_report.max_gap,
            lambda,
            dev_weighted_f1: dev_wf1,
            dev_acc: accuracy(&dev_records)?,
        });
        if cfg.lambda_mode == LambdaMode::Adaptive {
            controller = controller.update_lambda(gap_report.max_gap)?;
        }

        if best.as_ref().is_none_or(|(_, f1, _)| dev_wf1 > *f1) {
            best = Some((epoch, dev_wf1, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stop_reason = StopReason::Patience;
                break;
            }
        }
    }

    let (best_epoch, _, best_params) = best.expect("at least one epoch");
    Ok(TrainedModel {
        params: best_params,
        config: cfg.clone(),
        history: TrainHistory {
            records,
            best_epoch,
            stop_reason,
            controller_trace: controller.history,
        },
    })
}

/// One configuration of the ablation sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    /// Row label, e.g. `λ = 5`.
    pub label: String,
    /// File-name-safe identifier, e.g. `lambda-5`.
    pub key: String,
    pub config: TrainConfig,
}

/// The sweep: ERM only, fixed weights 1 / 5 / 10, adaptive weight with the
/// base penalty power, and adaptive weight with p = 1 and p = 2. Every cell
/// shares `base.seed`, hence initialization and batch order.
pub fn ablation_cells(base: &TrainConfig) -> Vec<AblationCell> {
    let with = |mode: LambdaMode, power: u32| TrainConfig {
        lambda_mode: mode,
        penalty_power: PenaltyConfig::new(power).expect("power is 1 or 2"),
        ..base.clone()
    };
    let p = base.penalty_power.power();
    let mut cells = vec![AblationCell {
        label: "λ = 0 (SFT)".into(),
        key: "lambda-0".into(),
        config: with(LambdaMode::Off, p),
    }];
    for v in [1.0, 5.0, 10.0] {
        cells.push(AblationCell {
            label: format!("λ = {v}"),
            key: format!("lambda-{v}"),
            config: with(LambdaMode::Fixed(v), p),
        });
    }
    cells.push(AblationCell {
        label: "λ = adaptive".into(),
        key: "lambda-adaptive".into(),
        config: with(LambdaMode::Adaptive, p),
    });
    for power in [1, 2] {
        cells.push(AblationCell {
            label: format!("p = {power}"),
            key: format!("p-{power}"),
            config: with(LambdaMode::Adaptive, power),
        });
    }
    cells
}

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub cell: AblationCell,
    pub model: TrainedModel,
    /// Test-split report of the best-epoch model.
    pub report: FullReport,
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub variant: String,
    /// Test-split report of the untrained initialization.
    pub baseline: FullReport,
    pub runs: Vec<AblationRun>,
}

impl AblationResult {
    pub fn run(&self, key: &str) -> Option<&AblationRun> {
        self.runs.iter().find(|r| r.cell.key == key)
    }
}

pub fn evaluate(params: &ModelParams, ds: &Dataset, split: Split) -> Result<FullReport, TrainError> {
    check_compatible(ds, params)?;
    let records = eval_records(params, ds.split(split))?;
    Ok(full_report(&records, &ds.languages)?)
}

/// Runs every cell of [`ablation_cells`] on `ds`, using up to `threads`
/// worker threads. Results keep cell order; cells with identical configs are
/// trained once.
pub fn ablation_matrix(
    ds: &Dataset,
    base: &TrainConfig,
    threads: usize,
) -> Result<AblationResult, TrainError> {
    base.validate()?;
    let cells = ablation_cells(base);
    let mut unique: Vec<&TrainConfig> = Vec::new();
    let slot: Vec<usize> = cells
        .iter()
        .map(|c| match unique.iter().position(|u| **u == c.config) {
            Some(i) => i,
            None => {
                unique.push(&c.config);
                unique.len() - 1
            }
        })
        .collect();

    let threads = threads.max(1);
    let mut trained: Vec<Option<Result<TrainedModel, TrainError>>> =
        (0..unique.len()).map(|_| None).collect();
    for (chunk_index, chunk) in unique.chunks(threads).enumerate() {
        let outputs: Vec<Result<TrainedModel, TrainError>> = thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|cfg| s.spawn(|| train(ds, cfg))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training thread panicked"))
                .collect()
        });
        for (i, out) in outputs.into_iter().enumerate() {
            trained[chunk_index * threads + i] = Some(out);
        }
    }
    let trained: Vec<TrainedModel> = trained
        .into_iter()
        .map(|t| t.expect("every config trained"))
        .collect::<Result<_, _>>()?;

    let init = init_params(base.architecture()?, ds.class_count, ds.feature_dim, base.seed)?;
    let baseline = evaluate(&init, ds, Split::Test)?;
    let runs = cells
        .into_iter()
        .zip(slot)
        .map(|(cell, i)| {
            let model = trained[i].clone();
            let report = evaluate(&model.params, ds, Split::Test)?;
            Ok(AblationRun { cell, model, report })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(AblationResult {
        variant: ds.variant.clone(),
        baseline,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::fairness::erm_weights;

    fn toy() -> Dataset {
        let spec = SyntheticSpec::from_json(
            r#"{
              "name": "toy", "class_count": 3, "feature_dim": 4, "seed": 5, "noise_scale": 0.7,
              "class_means": {"random_scale": 1.5},
              "languages": [
                {"tag": "ENG", "counts": {"train": {"F": 40, "M": 40}, "valid": {"F": 15, "M": 15}, "test": {"F": 10, "M": 10}},
                 "offsets": {"gender_separation": 0.3}},
                {"tag": "DEU", "counts": {"train": {"F": 30, "M": 30}, "valid": {"F": 15, "M": 15}, "test": {"F": 10, "M": 10}},
                 "offsets": {"gender_separation": 2.0}}
              ]
            }"#,
        )
        .unwrap();
        generate_synthetic(&spec).unwrap()
    }

    fn fast() -> TrainConfig {
        TrainConfig {
            epochs_max: 6,
            batch_size: 16,
            lr: 0.1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs_max, c.batch_size, c.patience, c.seed), (20, 64, 5, 42));
        assert_eq!((c.lr, c.weight_decay), (5e-5, 0.01));
        assert_eq!(c.penalty_power.power(), 2);
        assert_eq!(
            c.controller,
            ControllerConfig {
                epsilon: 0.02,
                eta: 0.5,
                lambda_max: 10.0,
                lambda_init: 0.0
            }
        );
        let parsed: TrainConfig =
            serde_json::from_str(r#"{"lr": 0.1, "lambda_mode": {"fixed": 5.0}}"#).unwrap();
        assert_eq!(parsed.lambda_mode, LambdaMode::Fixed(5.0));
        assert_eq!(parsed.batch_size, 64);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"penalty_power": 3}"#).is_err());
        assert_eq!("fixed:2.5".parse::<LambdaMode>().unwrap(), LambdaMode::Fixed(2.5));
    }

    #[test]
    fn deterministic_history() {
        let ds = toy();
        let a = train(&ds, &fast()).unwrap();
        let b = train(&ds, &fast()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.history.records.first().unwrap().epoch, 1);
    }

    #[test]
    fn off_mode_matches_reference_erm_loop() {
        let ds = toy();
        let cfg = TrainConfig {
            lambda_mode: LambdaMode::Off,
            epochs_max: 1,
            ..fast()
        };
        let trained = train(&ds, &cfg).unwrap();

        let mut params = init_params(Architecture::Linear, 3, 4, cfg.seed).unwrap();
        for idx in stratified_batches(&ds, Split::Train, cfg.batch_size, epoch_seed(cfg.seed, 1)).unwrap() {
            let examples: Vec<(&[f64], usize)> = idx
                .iter()
                .map(|&i| (ds.train[i].features.as_slice(), ds.train[i].label))
                .collect();
            let g = backward_weighted(&params, &examples, &erm_weights(idx.len())).unwrap();
            params = sgd_step(&params, &g, cfg.lr, cfg.weight_decay).unwrap();
        }
        assert_eq!(trained.params, params);
        assert!(trained.history.records.iter().all(|r| r.lambda == 0.0));
    }

    #[test]
    fn lambda_modes_and_best_epoch() {
        let ds = toy();
        let fixed = train(
            &ds,
            &TrainConfig {
                lambda_mode: LambdaMode::Fixed(3.0),
                ..fast()
            },
        )
        .unwrap();
        assert!(fixed.history.records.iter().all(|r| r.lambda == 3.0));
        assert!(fixed.history.controller_trace.is_empty());

        let adaptive = train(&ds, &fast()).unwrap();
        let h = &adaptive.history;
        assert_eq!(h.records[0].lambda, 0.0);
        assert!(h
            .records
            .iter()
            .all(|r| (0.0..=10.0).contains(&r.lambda) && r.train_erm_loss.is_finite()));
        assert_eq!(h.controller_trace.len(), h.records.len());
        let best = &h.records[h.best_epoch - 1];
        assert!(h
            .records
            .iter()
            .all(|r| r.dev_weighted_f1 <= best.dev_weighted_f1));
        assert!(h.records[..h.best_epoch - 1]
            .iter()
            .all(|r| r.dev_weighted_f1 < best.dev_weighted_f1));
    }

    #[test]
    fn single_epoch_and_errors() {
        let ds = toy();
        let t = train(
            &ds,
            &TrainConfig {
                epochs_max: 1,
                ..fast()
            },
        )
        .unwrap();
        assert_eq!(t.history.records.len(), 1);

        let mut empty = ds.clone();
        empty.valid.clear();
        assert!(matches!(
            train(&empty, &fast()),
            Err(TrainError::EmptySplit(Split::Valid))
        ));
        assert!(train(
            &ds,
            &TrainConfig {
                batch_size: 1,
                ..fast()
            }
        )
        .is_err());
        assert!(train(
            &ds,
            &TrainConfig {
                lambda_mode: LambdaMode::Fixed(11.0),
                ..fast()
            }
        )
        .is_err());
        let wrong = init_params(Architecture::Linear, 3, 5, 1).unwrap();
        assert!(matches!(
            train_from(&ds, &fast(), wrong),
            Err(TrainError::DimMismatch { .. })
        ));
    }

    #[test]
    fn penalty_only_objective_runs() {
        let ds = toy();
        let cfg = TrainConfig {
            erm: false,
            lambda_mode: LambdaMode::Fixed(1.0),
            epochs_max: 2,
            ..fast()
        };
        let t = train(&ds, &cfg).unwrap();
        assert_eq!(t.history.records.len(), 2);
    }

    #[test]
    fn ablation_structure() {
        let ds = toy();
        let cfg = TrainConfig {
            epochs_max: 2,
            ..fast()
        };
        let cells = ablation_cells(&cfg);
        let labels: Vec<&str> = cells.iter().map(|c| c.label.as_str()).collect();
        assert_eq!(
            labels,
            [
                "λ = 0 (SFT)",
                "λ = 1",
                "λ = 5",
                "λ = 10",
                "λ = adaptive",
                "p = 1",
                "p = 2"
            ]
        );
        assert!(cells.iter().all(|c| c.config.seed == cfg.seed));

        let one = ablation_matrix(&ds, &cfg, 1).unwrap();
        let many = ablation_matrix(&ds, &cfg, 4).unwrap();
        assert_eq!(one.runs.len(), 7);
        for (a, b) in one.runs.iter().zip(&many.runs) {
            assert_eq!(a.model, b.model);
            assert_eq!(a.report, b.report);
        }
        assert_eq!(
            one.run("p-2").unwrap().model,
            one.run("lambda-adaptive").unwrap().model
        );
    }
}
