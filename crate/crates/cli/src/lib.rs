//! Commands behind the `minmaxgap` binary.
//!
//! Each command reads an experiment or dataset description, runs the
//! corresponding library routine and writes plain CSV / markdown / JSON
//! outputs atomically. Outputs depend only on the inputs, so reruns are
//! byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use minmaxgap_core::data::{
    dataset_stats, generate_synthetic, load_dataset, manifest_string, Dataset, Split, SyntheticSpec,
};
use minmaxgap_core::model::ModelParams;
use minmaxgap_core::report::{
    ablation_csv, ablation_markdown, controller_csv, full_report_csv, full_report_markdown, history_csv,
    history_json, write_atomic,
};
use minmaxgap_core::train::{ablation_matrix, evaluate, train, AblationResult, TrainConfig};

/// Environment variable capping the number of ablation worker threads.
pub const THREADS_ENV: &str = "MINMAXGAP_THREADS";

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Synthetic spec; each variant is generated in memory.
    Synthetic(PathBuf),
    /// One manifest per variant name.
    Manifests(BTreeMap<String, PathBuf>),
}

/// An experiment file. Relative paths are resolved against the directory of
/// the file itself.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Variants to run, in order. Empty means every variant the data offers.
    #[serde(default)]
    pub variants: Vec<String>,
    /// Overrides on top of the default training configuration.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        match &mut cfg.data {
            DataSource::Synthetic(p) => *p = base.join(&*p),
            DataSource::Manifests(m) => m.values_mut().for_each(|p| *p = base.join(&*p)),
        }
        cfg.out_dir = base.join(&cfg.out_dir);
        Ok(cfg)
    }

    fn available_variants(&self) -> Result<Vec<String>> {
        Ok(match &self.data {
            DataSource::Synthetic(p) => SyntheticSpec::load(p)?.variant_names(),
            DataSource::Manifests(m) => m.keys().cloned().collect(),
        })
    }

    /// The variants to run: `only` if given, else the configured list, else
    /// everything available. Unknown names are an error.
    pub fn resolve_variants(&self, only: Option<&str>) -> Result<Vec<String>> {
        let available = self.available_variants()?;
        let wanted = match only {
            Some(v) => vec![v.to_string()],
            None if self.variants.is_empty() => available.clone(),
            None => self.variants.clone(),
        };
        for v in &wanted {
            if !available.contains(v) {
                bail!("unknown variant `{v}` (available: {})", available.join(", "));
            }
        }
        Ok(wanted)
    }

    pub fn dataset(&self, variant: &str) -> Result<Dataset> {
        match &self.data {
            DataSource::Synthetic(p) => {
                let spec = SyntheticSpec::load(p)?.with_variant(variant)?;
                Ok(generate_synthetic(&spec)?)
            }
            DataSource::Manifests(m) => {
                let path = m
                    .get(variant)
                    .with_context(|| format!("no manifest for variant `{variant}`"))?;
                Ok(load_dataset(path, None)?)
            }
        }
    }
}

/// Options shared by `train` and `ablate`.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub variant: Option<String>,
}

struct Prepared {
    cfg: ExperimentConfig,
    train: TrainConfig,
    variants: Vec<String>,
    out_dir: PathBuf,
}

fn prepare(config: &Path, opts: &RunOptions) -> Result<Prepared> {
    let cfg = ExperimentConfig::load(config)?;
    let mut train = cfg.train.clone();
    if let Some(seed) = opts.seed {
        train.seed = seed;
    }
    train.validate()?;
    let variants = cfg.resolve_variants(opts.variant.as_deref())?;
    let out_dir = opts.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    Ok(Prepared {
        cfg,
        train,
        variants,
        out_dir,
    })
}

fn write(path: PathBuf, text: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    write_atomic(&path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
    written.push(path);
    Ok(())
}

/// Generates a manifest from a synthetic spec. Returns the `dataset_stats`
/// summary table.
pub fn cmd_gen_data(spec: &Path, out: &Path, seed: Option<u64>, variant: Option<&str>) -> Result<String> {
    let mut spec = SyntheticSpec::load(spec)?;
    if let Some(v) = variant {
        spec = spec.with_variant(v)?;
    }
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let ds = generate_synthetic(&spec)?;
    write_atomic(out, manifest_string(&ds).as_bytes())
        .with_context(|| format!("writing {}", out.display()))?;
    Ok(dataset_stats(&ds).summary_table())
}

/// Trains every selected variant. Per variant writes the best-epoch
/// checkpoint, the epoch history (CSV and JSON), the controller trace and the
/// test-split report. Returns the written paths.
pub fn cmd_train(config: &Path, opts: &RunOptions) -> Result<Vec<PathBuf>> {
    let p = prepare(config, opts)?;
    let mut written = Vec::new();
    for variant in &p.variants {
        let ds = p.cfg.dataset(variant)?;
        let model = train(&ds, &p.train).with_context(|| format!("training variant `{variant}`"))?;
        let report = evaluate(&model.params, &ds, Split::Test)?;
        let ckpt = model.params.to_checkpoint_json()?;
        let dir = &p.out_dir;
        write(dir.join(format!("{variant}-best.json")), &ckpt, &mut written)?;
        write(
            dir.join(format!("{variant}-history.csv")),
            &history_csv(&model.history),
            &mut written,
        )?;
        write(
            dir.join(format!("{variant}-history.json")),
            &history_json(&model.history),
            &mut written,
        )?;
        write(
            dir.join(format!("{variant}-controller.csv")),
            &controller_csv(&model.history.controller_trace),
            &mut written,
        )?;
        write(
            dir.join(format!("{variant}-report.md")),
            &full_report_markdown(&report),
            &mut written,
        )?;
        write(
            dir.join(format!("{variant}-report.csv")),
            &full_report_csv(&report),
            &mut written,
        )?;
    }
    Ok(written)
}

/// Evaluates a checkpoint on one split of a manifest. Returns the markdown
/// and CSV tables; when `out` is given they are also written there.
pub fn cmd_eval(
    checkpoint: &Path,
    dataset: &Path,
    split: Split,
    out: Option<&Path>,
) -> Result<(String, String)> {
    let params = ModelParams::load(checkpoint)?;
    let ds = load_dataset(dataset, None)?;
    if ds.split(split).is_empty() {
        bail!("{} has no {split} examples", dataset.display());
    }
    let report = evaluate(&params, &ds, split)?;
    let md = full_report_markdown(&report);
    let csv = full_report_csv(&report);
    if let Some(dir) = out {
        let mut written = Vec::new();
        write(dir.join(format!("{split}-report.md")), &md, &mut written)?;
        write(dir.join(format!("{split}-report.csv")), &csv, &mut written)?;
    }
    Ok((md, csv))
}

/// Worker count from [`THREADS_ENV`]; 1 when unset.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => bail!("{THREADS_ENV} must be a positive integer, got `{v}`"),
        },
    }
}

/// Runs the ablation sweep for every selected variant and writes the
/// consolidated `ablation.md` / `ablation.csv` plus one history CSV per run.
/// Returns the markdown table.
pub fn cmd_ablate(config: &Path, opts: &RunOptions, threads: usize) -> Result<String> {
    let p = prepare(config, opts)?;
    let mut results: Vec<AblationResult> = Vec::new();
    let mut written = Vec::new();
    for variant in &p.variants {
        let ds = p.cfg.dataset(variant)?;
        let mut result = ablation_matrix(&ds, &p.train, threads)
            .with_context(|| format!("ablation on variant `{variant}`"))?;
        result.variant = variant.clone();
        for run in &result.runs {
            write(
                p.out_dir
                    .join("ablation")
                    .join(format!("{variant}-{}-history.csv", run.cell.key)),
                &history_csv(&run.model.history),
                &mut written,
            )?;
        }
        results.push(result);
    }
    let md = ablation_markdown(&results);
    write(p.out_dir.join("ablation.md"), &md, &mut written)?;
    write(
        p.out_dir.join("ablation.csv"),
        &ablation_csv(&results),
        &mut written,
    )?;
    Ok(md)
}
