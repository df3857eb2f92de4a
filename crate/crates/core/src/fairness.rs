//! Worst-language gender loss gap and its penalty weight.
//!
//! For every language the mean loss of female and male examples is compared;
//! the largest absolute difference over languages where both genders are
//! present is the gap `max_gap`, and the penalty is `max_gap^p`. The gradient
//! of `mean loss + lambda * max_gap^p` is expressed as per-example loss
//! weights so a single weighted backward pass yields it. `lambda` itself
//! follows projected ascent on the development-set gap.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Gender, Utterance};
use crate::model::{forward, per_example_loss, ModelError, ModelParams};

#[derive(Debug, Error)]
pub enum FairnessError {
    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),
    #[error("penalty power must be 1 or 2, got {0}")]
    InvalidPower(u32),
    #[error("invalid controller configuration: {0}")]
    InvalidController(String),
    #[error("development gap must be finite and >= 0, got {0}")]
    InvalidGap(f64),
    #[error("development split is empty")]
    EmptyDevSplit,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Mean loss and example count of one (language, gender) cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupCell {
    pub mean_loss: f64,
    pub count: usize,
}

/// Conditional mean losses per (language, gender). Only cells with at least
/// one example are stored.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroupLossTable {
    pub cells: BTreeMap<(String, Gender), GroupCell>,
}

impl GroupLossTable {
    pub fn get(&self, language: &str, gender: Gender) -> Option<GroupCell> {
        self.cells.get(&(language.to_string(), gender)).copied()
    }

    pub fn count(&self, language: &str, gender: Gender) -> usize {
        self.get(language, gender).map_or(0, |c| c.count)
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Per-cell arithmetic mean. Losses in a cell are summed in ascending order,
/// so the table does not depend on example order.
pub fn group_mean_losses(losses: &[f64], keys: &[(&str, Gender)]) -> Result<GroupLossTable, FairnessError> {
    if losses.len() != keys.len() {
        return Err(FairnessError::LengthMismatch {
            what: "group keys",
            expected: losses.len(),
            got: keys.len(),
        });
    }
    let mut buckets: BTreeMap<(String, Gender), Vec<f64>> = BTreeMap::new();
    for (&loss, &(lang, g)) in losses.iter().zip(keys) {
        buckets.entry((lang.to_string(), g)).or_default().push(loss);
    }
    let cells = buckets
        .into_iter()
        .map(|(key, mut v)| {
            v.sort_by(f64::total_cmp);
            let count = v.len();
            let mean_loss = v.iter().sum::<f64>() / count as f64;
            (key, GroupCell { mean_loss, count })
        })
        .collect();
    Ok(GroupLossTable { cells })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LanguageGap {
    pub language: String,
    /// `mean_F - mean_M`.
    pub signed_diff: f64,
    /// `|mean_F - mean_M|`.
    pub gap: f64,
}

/// Gaps of the valid languages in canonical order, and the worst one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    pub gaps: Vec<LanguageGap>,
    pub max_gap: f64,
    pub argmax_language: Option<String>,
}

impl GapReport {
    pub fn valid_languages(&self) -> Vec<&str> {
        self.gaps.iter().map(|g| g.language.as_str()).collect()
    }

    pub fn gap(&self, language: &str) -> Option<f64> {
        self.gaps.iter().find(|g| g.language == language).map(|g| g.gap)
    }

    fn argmax_entry(&self) -> Option<&LanguageGap> {
        let lang = self.argmax_language.as_deref()?;
        self.gaps.iter().find(|g| g.language == lang)
    }
}

/// A language is valid when both of its gender cells are non-empty.
/// Languages absent from `languages` but present in the table are appended
/// after the canonical ones in lexical order. Ties on the maximum go to the
/// first language in that order.
pub fn language_gaps(table: &GroupLossTable, languages: &[String]) -> GapReport {
    let mut order: Vec<&str> = languages.iter().map(String::as_str).collect();
    for (lang, _) in table.cells.keys() {
        if !order.contains(&lang.as_str()) {
            order.push(lang);
        }
    }
    order[languages.len()..].sort_unstable();

    let mut gaps = Vec::new();
    for lang in order {
        if let (Some(f), Some(m)) = (table.get(lang, Gender::Female), table.get(lang, Gender::Male)) {
            let signed_diff = f.mean_loss - m.mean_loss;
            gaps.push(LanguageGap {
                language: lang.to_string(),
                signed_diff,
                gap: signed_diff.abs(),
            });
        }
    }
    let mut best: Option<&LanguageGap> = None;
    for g in &gaps {
        if best.is_none_or(|b| g.gap > b.gap) {
            best = Some(g);
        }
    }
    let (max_gap, argmax_language) = match best {
        Some(b) => (b.gap, Some(b.language.clone())),
        None => (0.0, None),
    };
    GapReport {
        gaps,
        max_gap,
        argmax_language,
    }
}

/// Exponent of the gap penalty; 1 or 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct PenaltyConfig {
    power: u32,
}

impl PenaltyConfig {
    pub fn new(power: u32) -> Result<Self, FairnessError> {
        match power {
            1 | 2 => Ok(PenaltyConfig { power }),
            p => Err(FairnessError::InvalidPower(p)),
        }
    }

    pub fn power(&self) -> u32 {
        self.power
    }
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig { power: 2 }
    }
}

impl TryFrom<u32> for PenaltyConfig {
    type Error = FairnessError;

    fn try_from(p: u32) -> Result<Self, Self::Error> {
        PenaltyConfig::new(p)
    }
}

impl From<PenaltyConfig> for u32 {
    fn from(p: PenaltyConfig) -> u32 {
        p.power
    }
}

/// `max_gap^p`, zero when no language is valid.
pub fn regularizer_value(report: &GapReport, cfg: PenaltyConfig) -> f64 {
    if report.argmax_language.is_none() {
        return 0.0;
    }
    report.max_gap.powi(cfg.power as i32)
}

/// `1/N` for every example: the weights of the mean-loss term.
pub fn erm_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Per-example weights whose weighted loss gradient equals the gradient of
/// `lambda * max_gap^p`.
///
/// With `l*` the argmax language and `s = sign(mean_F - mean_M)` there, the
/// weight is `lambda * p * max_gap^(p-1) * s / n_F` for `(l*, F)` examples,
/// the negated `/ n_M` value for `(l*, M)` examples and zero elsewhere. At
/// `max_gap == 0` the sign is taken as 0, so the weights vanish.
pub fn regularizer_weights(
    report: &GapReport,
    table: &GroupLossTable,
    cfg: PenaltyConfig,
    lambda: f64,
    keys: &[(&str, Gender)],
) -> Result<Vec<f64>, FairnessError> {
    let mut weights = vec![0.0; keys.len()];
    let Some(worst) = report.argmax_entry() else {
        if report.argmax_language.is_some() {
            return Err(FairnessError::Inconsistent(
                "argmax language missing from the gap list".into(),
            ));
        }
        return Ok(weights);
    };
    let lang = worst.language.as_str();
    let n_f = keys
        .iter()
        .filter(|&&(l, g)| l == lang && g == Gender::Female)
        .count();
    let n_m = keys
        .iter()
        .filter(|&&(l, g)| l == lang && g == Gender::Male)
        .count();
    if n_f != table.count(lang, Gender::Female) || n_m != table.count(lang, Gender::Male) {
        return Err(FairnessError::Inconsistent(format!(
            "group counts for `{lang}` differ between table ({}, {}) and keys ({n_f}, {n_m})",
            table.count(lang, Gender::Female),
            table.count(lang, Gender::Male)
        )));
    }
    let sign = if worst.signed_diff > 0.0 {
        1.0
    } else if worst.signed_diff < 0.0 {
        -1.0
    } else {
        0.0
    };
    if lambda == 0.0 || sign == 0.0 {
        return Ok(weights);
    }
    let p = cfg.power();
    let coef = lambda * p as f64 * report.max_gap.powi(p as i32 - 1) * sign;
    if coef == 0.0 {
        return Ok(weights);
    }
    let w_f = coef / n_f as f64;
    let w_m = -coef / n_m as f64;
    for (w, &(l, g)) in weights.iter_mut().zip(keys) {
        if l == lang {
            *w = match g {
                Gender::Female => w_f,
                Gender::Male => w_m,
            };
        }
    }
    Ok(weights)
}

/// Weights for the full batch objective `mean loss + lambda * max_gap^p`:
/// [`erm_weights`] plus [`regularizer_weights`].
pub fn fairness_example_weights(
    report: &GapReport,
    table: &GroupLossTable,
    cfg: PenaltyConfig,
    lambda: f64,
    keys: &[(&str, Gender)],
    batch_size: usize,
) -> Result<Vec<f64>, FairnessError> {
    if keys.len() != batch_size {
        return Err(FairnessError::LengthMismatch {
            what: "group keys",
            expected: batch_size,
            got: keys.len(),
        });
    }
    let reg = regularizer_weights(report, table, cfg, lambda, keys)?;
    Ok(erm_weights(batch_size)
        .into_iter()
        .zip(reg)
        .map(|(e, r)| e + r)
        .collect())
}

/// Step size, tolerance and bounds of the fairness weight update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub epsilon: f64,
    pub eta: f64,
    pub lambda_max: f64,
    pub lambda_init: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            epsilon: 0.02,
            eta: 0.5,
            lambda_max: 10.0,
            lambda_init: 0.0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), FairnessError> {
        let bad = |m: &str| Err(FairnessError::InvalidController(m.to_string()));
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return bad("epsilon must be finite and >= 0");
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return bad("eta must be finite and > 0");
        }
        if !(self.lambda_max.is_finite() && self.lambda_max > 0.0) {
            return bad("lambda_max must be finite and > 0");
        }
        if !(0.0..=self.lambda_max).contains(&self.lambda_init) {
            return bad("lambda_init must lie in [0, lambda_max]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerStep {
    /// Number of updates applied so far, starting at 1.
    pub k: usize,
    pub dev_gap: f64,
    /// Weight after this update.
    pub lambda: f64,
}

/// Fairness weight driven by `lambda <- clip(lambda + eta * (gap - epsilon), 0, lambda_max)`.
///
/// The running value is kept as an unevaluated sum `lambda + residual`
/// (double-double), so a run of unclipped updates rounds once, exactly like
/// the closed form `lambda_init + k * eta * (gap - epsilon)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub config: ControllerConfig,
    pub lambda: f64,
    residual: f64,
    pub step: usize,
    pub history: Vec<ControllerStep>,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

impl ControllerState {
    pub fn new(config: ControllerConfig) -> Result<Self, FairnessError> {
        config.validate()?;
        Ok(ControllerState {
            config,
            lambda: config.lambda_init,
            residual: 0.0,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn update_lambda(&self, dev_gap: f64) -> Result<ControllerState, FairnessError> {
        if !(dev_gap.is_finite() && dev_gap >= 0.0) {
            return Err(FairnessError::InvalidGap(dev_gap));
        }
        let cfg = self.config;
        let increment = cfg.eta * (dev_gap - cfg.epsilon);
        let (s, e) = two_sum(self.lambda, increment);
        let lo = e + self.residual;
        let mut hi = s + lo;
        let mut residual = lo - (hi - s);
        if hi < 0.0 || (hi == 0.0 && residual < 0.0) {
            hi = 0.0;
            residual = 0.0;
        } else if hi > cfg.lambda_max || (hi == cfg.lambda_max && residual > 0.0) {
            hi = cfg.lambda_max;
            residual = 0.0;
        }
        let mut next = self.clone();
        next.lambda = hi;
        next.residual = residual;
        next.step += 1;
        next.history.push(ControllerStep {
            k: next.step,
            dev_gap,
            lambda: hi,
        });
        Ok(next)
    }
}

/// Per-example losses, the group table and the gap report of `utts` under `params`.
pub fn loss_gap_report(
    params: &ModelParams,
    utts: &[Utterance],
    languages: &[String],
) -> Result<(Vec<f64>, GroupLossTable, GapReport), FairnessError> {
    let mut losses = Vec::with_capacity(utts.len());
    for u in utts {
        losses.push(per_example_loss(&forward(params, &u.features)?, u.label)?);
    }
    let keys: Vec<(&str, Gender)> = utts.iter().map(|u| (u.language.as_str(), u.gender)).collect();
    let table = group_mean_losses(&losses, &keys)?;
    let report = language_gaps(&table, languages);
    Ok((losses, table, report))
}

/// Loss-based worst-language gap over a whole development split.
pub fn dev_gap(params: &ModelParams, dev: &[Utterance], languages: &[String]) -> Result<f64, FairnessError> {
    if dev.is_empty() {
        return Err(FairnessError::EmptyDevSplit);
    }
    Ok(loss_gap_report(params, dev, languages)?.2.max_gap)
}
