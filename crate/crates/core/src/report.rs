//! Plain-text outputs: metric tables, training histories, controller traces
//! and the consolidated ablation table. Markdown rounds to two decimals; CSV
//! keeps full precision.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use crate::fairness::ControllerStep;
use crate::metrics::{FullReport, MetricsReport};
use crate::train::{AblationResult, TrainHistory};

/// Writes `bytes` to a sibling temp file and renames it over `path`, so a
/// failure never leaves a truncated file behind. Creates parent directories.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

pub const METRIC_COLUMNS: [&str; 7] = ["W-F1", "ACC", "TPR", "FPR", "W-F1 gap", "ACC gap", "AVG"];

fn metric_values(r: &MetricsReport) -> [f64; 7] {
    [
        r.weighted_f1,
        r.accuracy,
        r.tpr_gap,
        r.fpr_gap,
        r.wf1_gap,
        r.acc_gap,
        r.avg,
    ]
}

fn md_row(cells: &[String]) -> String {
    format!("| {} |\n", cells.join(" | "))
}

fn md_separator(n: usize) -> String {
    let mut cols = vec![":---".to_string()];
    cols.extend((1..n).map(|_| "---:".to_string()));
    md_row(&cols)
}

/// Markdown table with one row per scope: the pooled multilingual scope,
/// then each language (n/a when a gender is missing), then the macro
/// average of the language gaps.
pub fn full_report_markdown(report: &FullReport) -> String {
    let mut header = vec!["Scope".to_string()];
    header.extend(METRIC_COLUMNS.iter().map(|s| s.to_string()));
    let mut out = md_row(&header);
    out.push_str(&md_separator(header.len()));
    let row = |name: String, r: &MetricsReport| {
        let mut cells = vec![name];
        cells.extend(metric_values(r).iter().map(|v| format!("{v:.2}")));
        md_row(&cells)
    };
    out.push_str(&row(report.overall.scope.to_string(), &report.overall));
    for l in &report.languages {
        match &l.report {
            Ok(r) => out.push_str(&row(l.language.clone(), r)),
            Err(_) => {
                let mut cells = vec![l.language.clone()];
                cells.extend((0..METRIC_COLUMNS.len()).map(|_| "n/a".to_string()));
                out.push_str(&md_row(&cells));
            }
        }
    }
    if let Some(m) = &report.macro_gaps {
        let mut cells = vec!["Macro (languages)".to_string(), String::new(), String::new()];
        cells.extend(
            [m.tpr_gap, m.fpr_gap, m.wf1_gap, m.acc_gap, m.avg]
                .iter()
                .map(|v| format!("{v:.2}")),
        );
        out.push_str(&md_row(&cells));
    }
    out
}

const REPORT_CSV_HEADER: &str =
    "scope,w_f1,acc,tpr_gap,fpr_gap,wf1_gap,acc_gap,avg,support_f,support_m,tpr_excluded_classes,fpr_excluded_classes\n";

fn report_csv_row(scope: &str, r: &MetricsReport) -> String {
    let v = metric_values(r);
    format!(
        "{scope},{},{},{},{},{},{},{},{},{},{},{}\n",
        v[0],
        v[1],
        v[2],
        v[3],
        v[4],
        v[5],
        v[6],
        r.support.female,
        r.support.male,
        r.tpr_excluded_classes,
        r.fpr_excluded_classes
    )
}

pub fn full_report_csv(report: &FullReport) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push_str(&report_csv_row(
        &report.overall.scope.to_string(),
        &report.overall,
    ));
    for l in &report.languages {
        match &l.report {
            Ok(r) => out.push_str(&report_csv_row(&l.language, r)),
            Err(_) => out.push_str(&format!("{},n/a,n/a,n/a,n/a,n/a,n/a,n/a,,,,\n", l.language)),
        }
    }
    if let Some(m) = &report.macro_gaps {
        out.push_str(&format!(
            "macro,,,{},{},{},{},{},,,,\n",
            m.tpr_gap, m.fpr_gap, m.wf1_gap, m.acc_gap, m.avg
        ));
    }
    out
}

pub fn history_csv(history: &TrainHistory) -> String {
    let mut out =
        String::from("epoch,train_erm_loss,train_reg_value,dev_gap,lambda,dev_weighted_f1,dev_acc\n");
    for r in &history.records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.train_erm_loss, r.train_reg_value, r.dev_gap, r.lambda, r.dev_weighted_f1, r.dev_acc
        ));
    }
    out
}

pub fn history_json(history: &TrainHistory) -> String {
    let mut s = serde_json::to_string_pretty(history).expect("history serializes");
    s.push('\n');
    s
}

pub fn controller_csv(trace: &[ControllerStep]) -> String {
    let mut out = String::from("k,dev_gap,lambda\n");
    for s in trace {
        out.push_str(&format!("{},{},{}\n", s.k, s.dev_gap, s.lambda));
    }
    out
}

/// Row `label` of the ablation table drawn from a run key, or the untrained baseline.
enum RowSource {
    Baseline,
    Run(&'static str),
}

const ABLATION_BLOCKS: [(&str, &[(&str, RowSource)]); 3] = [
    (
        "Main Components",
        &[
            ("Baseline (untrained)", RowSource::Baseline),
            ("+ ERM (SFT)", RowSource::Run("lambda-0")),
            ("ERM-MinMaxGAP", RowSource::Run("lambda-adaptive")),
        ],
    ),
    (
        "Lambda Effect",
        &[
            ("λ = 0 (SFT)", RowSource::Run("lambda-0")),
            ("λ = 1", RowSource::Run("lambda-1")),
            ("λ = 5", RowSource::Run("lambda-5")),
            ("λ = 10", RowSource::Run("lambda-10")),
            ("λ = adaptive", RowSource::Run("lambda-adaptive")),
        ],
    ),
    (
        "Penalty Power Effect",
        &[("p = 1", RowSource::Run("p-1")), ("p = 2", RowSource::Run("p-2"))],
    ),
];

fn ablation_row_report<'a>(result: &'a AblationResult, source: &RowSource) -> Option<&'a MetricsReport> {
    match source {
        RowSource::Baseline => Some(&result.baseline.overall),
        RowSource::Run(key) => result.run(key).map(|r| &r.report.overall),
    }
}

/// Consolidated ablation table over the pooled multilingual test scope.
///
/// Seven metric columns per variant; every variant after the first adds a
/// signed `Δ AVG` column (that variant's AVG minus the first variant's).
pub fn ablation_markdown(results: &[AblationResult]) -> String {
    let mut header = vec!["Model".to_string()];
    for (i, r) in results.iter().enumerate() {
        header.extend(METRIC_COLUMNS.iter().map(|c| format!("{} {c}", r.variant)));
        if i > 0 {
            header.push(format!("Δ AVG ({} − {})", r.variant, results[0].variant));
        }
    }
    let mut out = md_row(&header);
    out.push_str(&md_separator(header.len()));
    for (block, rows) in ABLATION_BLOCKS.iter() {
        let mut cells = vec![format!("**{block}**")];
        cells.extend((1..header.len()).map(|_| String::new()));
        out.push_str(&md_row(&cells));
        for (label, source) in rows.iter() {
            let mut cells = vec![label.to_string()];
            let first = ablation_row_report(&results[0], source).map(|r| r.avg);
            for (i, result) in results.iter().enumerate() {
                let report = ablation_row_report(result, source);
                match report {
                    Some(r) => cells.extend(metric_values(r).iter().map(|v| format!("{v:.2}"))),
                    None => cells.extend((0..METRIC_COLUMNS.len()).map(|_| "n/a".to_string())),
                }
                if i > 0 {
                    cells.push(match (report, first) {
                        (Some(r), Some(f)) => format!("{:+.2}", r.avg - f),
                        _ => "n/a".to_string(),
                    });
                }
            }
            out.push_str(&md_row(&cells));
        }
    }
    out
}

/// Same content as [`ablation_markdown`] at full precision, one row per
/// (block, row, variant).
pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut out =
        String::from("block,model,variant,w_f1,acc,tpr_gap,fpr_gap,wf1_gap,acc_gap,avg,delta_avg\n");
    for (block, rows) in ABLATION_BLOCKS.iter() {
        for (label, source) in rows.iter() {
            let first = ablation_row_report(&results[0], source).map(|r| r.avg);
            for (i, result) in results.iter().enumerate() {
                let Some(r) = ablation_row_report(result, source) else {
                    continue;
                };
                let v = metric_values(r);
                let delta = match (i, first) {
                    (0, _) | (_, None) => String::new(),
                    (_, Some(f)) => format!("{}", r.avg - f),
                };
                out.push_str(&format!(
                    "{block},{label},{},{},{},{},{},{},{},{},{delta}\n",
                    result.variant, v[0], v[1], v[2], v[3], v[4], v[5], v[6]
                ));
            }
        }
    }
    out
}
