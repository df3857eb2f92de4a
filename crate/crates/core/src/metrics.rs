//! Classification metrics and gender gap reports.
//!
//! Percentages throughout: accuracy and weighted F1 in [0, 100], gaps in
//! percentage points. TPR/FPR gaps are one-vs-rest per class and averaged
//! over the classes that have support in both genders.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Gender;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no records to evaluate")]
    Empty,
    #[error("scope {scope} has no {gender} records")]
    MissingGender { scope: String, gender: Gender },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub true_label: usize,
    pub predicted_label: usize,
    pub language: String,
    pub gender: Gender,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Scope {
    Overall,
    Language(String),
}

impl Scope {
    fn contains(&self, r: &EvalRecord) -> bool {
        match self {
            Scope::Overall => true,
            Scope::Language(l) => r.language == *l,
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Overall => f.write_str("Multilingual"),
            Scope::Language(l) => f.write_str(l),
        }
    }
}

pub fn accuracy(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let correct = records
        .iter()
        .filter(|r| r.true_label == r.predicted_label)
        .count();
    Ok(100.0 * correct as f64 / records.len() as f64)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Support-weighted mean of per-class F1 over classes present in the true
/// labels. Zero denominators give zero precision / recall / F1.
pub fn weighted_f1(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let classes: BTreeSet<usize> = records.iter().map(|r| r.true_label).collect();
    let mut total = 0.0;
    for c in classes {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for r in records {
            match (r.true_label == c, r.predicted_label == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => {}
            }
        }
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        total += f1 * (tp + fn_) as f64;
    }
    Ok(100.0 * total / records.len() as f64)
}

/// One-vs-rest rates for class `c`; `None` marks a rate without support.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OvrRates {
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
}

pub fn one_vs_rest_rates(records: &[EvalRecord], class: usize) -> OvrRates {
    let (mut tp, mut pos, mut fp, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for r in records {
        let predicted = r.predicted_label == class;
        if r.true_label == class {
            pos += 1;
            tp += predicted as usize;
        } else {
            neg += 1;
            fp += predicted as usize;
        }
    }
    OvrRates {
        tpr: (pos > 0).then(|| tp as f64 / pos as f64),
        fpr: (neg > 0).then(|| fp as f64 / neg as f64),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GenderSupport {
    pub female: usize,
    pub male: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub scope: Scope,
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub tpr_gap: f64,
    pub fpr_gap: f64,
    pub wf1_gap: f64,
    pub acc_gap: f64,
    /// Mean of the four gaps.
    pub avg: f64,
    pub support: GenderSupport,
    /// Classes left out of the TPR / FPR averages for lacking support in a gender.
    pub tpr_excluded_classes: usize,
    pub fpr_excluded_classes: usize,
}

/// Mean over classes (where both genders have the rate) of the absolute rate
/// difference, in percentage points, plus the number of excluded classes.
fn rate_gap(
    classes: &BTreeSet<usize>,
    female: &[EvalRecord],
    male: &[EvalRecord],
    pick: impl Fn(OvrRates) -> Option<f64>,
) -> (f64, usize) {
    let mut sum = 0.0;
    let mut used = 0usize;
    for &c in classes {
        if let (Some(a), Some(b)) = (
            pick(one_vs_rest_rates(female, c)),
            pick(one_vs_rest_rates(male, c)),
        ) {
            sum += (a - b).abs();
            used += 1;
        }
    }
    let gap = if used == 0 { 0.0 } else { 100.0 * sum / used as f64 };
    (gap, classes.len() - used)
}

/// SER metrics and gender gaps for the records inside `scope`.
///
/// The class set is every label that occurs in the scope, as a true or a
/// predicted label.
pub fn gender_gap_report(records: &[EvalRecord], scope: Scope) -> Result<MetricsReport, MetricsError> {
    let scoped: Vec<EvalRecord> = records.iter().filter(|r| scope.contains(r)).cloned().collect();
    if scoped.is_empty() {
        return Err(MetricsError::Empty);
    }
    let (female, male): (Vec<EvalRecord>, Vec<EvalRecord>) =
        scoped.iter().cloned().partition(|r| r.gender == Gender::Female);
    for (group, gender) in [(&female, Gender::Female), (&male, Gender::Male)] {
        if group.is_empty() {
            return Err(MetricsError::MissingGender {
                scope: scope.to_string(),
                gender,
            });
        }
    }
    let classes: BTreeSet<usize> = scoped
        .iter()
        .flat_map(|r| [r.true_label, r.predicted_label])
        .collect();

    let (tpr_gap, tpr_excluded_classes) = rate_gap(&classes, &female, &male, |r| r.tpr);
    let (fpr_gap, fpr_excluded_classes) = rate_gap(&classes, &female, &male, |r| r.fpr);
    let wf1_gap = (weighted_f1(&female)? - weighted_f1(&male)?).abs();
    let acc_gap = (accuracy(&female)? - accuracy(&male)?).abs();
    Ok(MetricsReport {
        weighted_f1: weighted_f1(&scoped)?,
        accuracy: accuracy(&scoped)?,
        tpr_gap,
        fpr_gap,
        wf1_gap,
        acc_gap,
        avg: (tpr_gap + fpr_gap + wf1_gap + acc_gap) / 4.0,
        support: GenderSupport {
            female: female.len(),
            male: male.len(),
        },
        tpr_excluded_classes,
        fpr_excluded_classes,
        scope,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LanguageReport {
    pub language: String,
    /// `Err` carries the reason the language is reported as n/a.
    pub report: Result<MetricsReport, String>,
}

/// Macro-average of the per-language gaps (auxiliary to the pooled overall gaps).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MacroGaps {
    pub tpr_gap: f64,
    pub fpr_gap: f64,
    pub wf1_gap: f64,
    pub acc_gap: f64,
    pub avg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FullReport {
    pub overall: MetricsReport,
    pub languages: Vec<LanguageReport>,
    pub macro_gaps: Option<MacroGaps>,
}

/// Pooled report over all records plus one report per language, in
/// `languages` order (languages found only in the records follow, sorted).
pub fn full_report(records: &[EvalRecord], languages: &[String]) -> Result<FullReport, MetricsError> {
    let overall = gender_gap_report(records, Scope::Overall)?;
    let mut order: Vec<String> = languages.to_vec();
    let extra: BTreeSet<&str> = records
        .iter()
        .map(|r| r.language.as_str())
        .filter(|l| !languages.iter().any(|k| k == l))
        .collect();
    order.extend(extra.into_iter().map(String::from));

    let per_language: Vec<LanguageReport> = order
        .into_iter()
        .map(|language| {
            let report =
                gender_gap_report(records, Scope::Language(language.clone())).map_err(|e| e.to_string());
            LanguageReport { language, report }
        })
        .collect();
    let ok: Vec<&MetricsReport> = per_language
        .iter()
        .filter_map(|l| l.report.as_ref().ok())
        .collect();
    let macro_gaps = (!ok.is_empty()).then(|| {
        let n = ok.len() as f64;
        let mean = |f: fn(&MetricsReport) -> f64| ok.iter().map(|r| f(r)).sum::<f64>() / n;
        let (tpr_gap, fpr_gap, wf1_gap, acc_gap) = (
            mean(|r| r.tpr_gap),
            mean(|r| r.fpr_gap),
            mean(|r| r.wf1_gap),
            mean(|r| r.acc_gap),
        );
        MacroGaps {
            tpr_gap,
            fpr_gap,
            wf1_gap,
            acc_gap,
            avg: (tpr_gap + fpr_gap + wf1_gap + acc_gap) / 4.0,
        }
    });
    Ok(FullReport {
        overall,
        languages: per_language,
        macro_gaps,
    })
}
