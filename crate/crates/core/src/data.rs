//! Utterance datasets: JSONL manifests, group statistics, seeded synthetic
//! benchmarks with injected per-group bias, and gender-stratified batching.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numfmt::{push_f64_array, push_json_str, push_key};
use crate::report::write_atomic;

/// Schema tag carried by the manifest header line.
pub const MANIFEST_SCHEMA: &str = "minmaxgap-v1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("unknown split `{0}` (expected train, valid or test)")]
    UnknownSplit(String),
    #[error("unknown gender `{0}` (expected F or M)")]
    UnknownGender(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn line_err(line: usize, message: impl Into<String>) -> DataError {
    DataError::Line {
        line,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gender {
    #[serde(rename = "F")]
    Female,
    #[serde(rename = "M")]
    Male,
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::Female, Gender::Male];

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Female => "F",
            Gender::Male => "M",
        }
    }

    pub fn flipped(self) -> Gender {
        match self {
            Gender::Female => Gender::Male,
            Gender::Male => Gender::Female,
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Gender {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "F" => Ok(Gender::Female),
            "M" => Ok(Gender::Male),
            other => Err(DataError::UnknownGender(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(DataError::UnknownSplit(other.to_string())),
        }
    }
}

/// One labelled example with its group attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: Vec<f64>,
    pub label: usize,
    pub language: String,
    pub gender: Gender,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub variant: String,
    pub class_count: usize,
    pub feature_dim: usize,
    /// Canonical language order, used for every downstream tie-break.
    pub languages: Vec<String>,
    pub train: Vec<Utterance>,
    pub valid: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<Utterance> {
        match split {
            Split::Train => &mut self.train,
            Split::Valid => &mut self.valid,
            Split::Test => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks every type invariant.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.class_count < 2 {
            return Err(DataError::Invalid(format!(
                "class_count must be >= 2, got {}",
                self.class_count
            )));
        }
        if self.feature_dim == 0 {
            return Err(DataError::Invalid("feature_dim must be >= 1".into()));
        }
        let mut seen = HashSet::new();
        for lang in &self.languages {
            if !seen.insert(lang.as_str()) {
                return Err(DataError::Invalid(format!("duplicate language `{lang}`")));
            }
        }
        for split in Split::ALL {
            for u in self.split(split) {
                check_utterance(u, self.class_count, self.feature_dim, &seen)
                    .map_err(|m| DataError::Invalid(format!("{split} utterance `{}`: {m}", u.id)))?;
            }
        }
        Ok(())
    }
}

fn check_utterance(
    u: &Utterance,
    class_count: usize,
    feature_dim: usize,
    languages: &HashSet<&str>,
) -> Result<(), String> {
    if u.label >= class_count {
        return Err(format!(
            "label {} out of range for {class_count} classes",
            u.label
        ));
    }
    if u.features.len() != feature_dim {
        return Err(format!(
            "feature length {} does not match feature_dim {feature_dim}",
            u.features.len()
        ));
    }
    if let Some(x) = u.features.iter().find(|x| !x.is_finite()) {
        return Err(format!("non-finite feature value {x}"));
    }
    if !languages.contains(u.language.as_str()) {
        return Err(format!("undeclared language `{}`", u.language));
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    schema: String,
    #[serde(default)]
    name: Option<String>,
    class_count: usize,
    feature_dim: usize,
    languages: Vec<String>,
    variant: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct UtteranceLine {
    id: String,
    features: Vec<f64>,
    label: usize,
    language: String,
    gender: String,
    split: String,
}

/// Reads a JSONL manifest from disk.
///
/// `expected_schema`, when given, is the `(class_count, feature_dim)` pair the
/// header must declare. The dataset name defaults to the file stem when the
/// header omits it.
pub fn load_dataset(
    path: impl AsRef<Path>,
    expected_schema: Option<(usize, usize)>,
) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let default_name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_manifest(&text, expected_schema, &default_name)
}

/// Parses manifest text. Line numbers in errors are 1-based.
pub fn parse_manifest(
    text: &str,
    expected_schema: Option<(usize, usize)>,
    default_name: &str,
) -> Result<Dataset, DataError> {
    let mut lines = text
        .split('\n')
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());

    let (hline, htext) = lines
        .next()
        .ok_or_else(|| line_err(1, "empty manifest: missing header line"))?;
    let header: HeaderLine =
        serde_json::from_str(htext).map_err(|e| line_err(hline, format!("malformed header: {e}")))?;
    if header.schema != MANIFEST_SCHEMA {
        return Err(line_err(
            hline,
            format!(
                "unsupported schema `{}`, expected `{MANIFEST_SCHEMA}`",
                header.schema
            ),
        ));
    }
    if let Some((c, d)) = expected_schema {
        if (header.class_count, header.feature_dim) != (c, d) {
            return Err(line_err(
                hline,
                format!(
                    "header declares class_count={} feature_dim={}, expected {c} and {d}",
                    header.class_count, header.feature_dim
                ),
            ));
        }
    }
    if header.class_count < 2 || header.feature_dim == 0 {
        return Err(line_err(hline, "class_count must be >= 2 and feature_dim >= 1"));
    }
    let mut declared = HashSet::new();
    for lang in &header.languages {
        if !declared.insert(lang.as_str()) {
            return Err(line_err(hline, format!("duplicate language `{lang}`")));
        }
    }

    let mut ds = Dataset {
        name: header.name.clone().unwrap_or_else(|| default_name.to_string()),
        variant: header.variant.clone(),
        class_count: header.class_count,
        feature_dim: header.feature_dim,
        languages: header.languages.clone(),
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for (lineno, raw) in lines {
        let rec: UtteranceLine =
            serde_json::from_str(raw).map_err(|e| line_err(lineno, format!("malformed utterance: {e}")))?;
        let split: Split = rec
            .split
            .parse()
            .map_err(|e: DataError| line_err(lineno, e.to_string()))?;
        let gender: Gender = rec
            .gender
            .parse()
            .map_err(|e: DataError| line_err(lineno, e.to_string()))?;
        let utt = Utterance {
            id: rec.id,
            features: rec.features,
            label: rec.label,
            language: rec.language,
            gender,
        };
        check_utterance(&utt, ds.class_count, ds.feature_dim, &declared).map_err(|m| line_err(lineno, m))?;
        ds.split_mut(split).push(utt);
    }
    Ok(ds)
}

/// Renders a dataset in manifest format: header, then train, valid and test
/// utterances in stored order. Floats use 17 significant digits.
pub fn manifest_string(ds: &Dataset) -> String {
    let mut out = String::new();
    out.push('{');
    push_key(&mut out, "schema");
    push_json_str(&mut out, MANIFEST_SCHEMA);
    out.push(',');
    push_key(&mut out, "name");
    push_json_str(&mut out, &ds.name);
    out.push_str(&format!(
        ",\"class_count\":{},\"feature_dim\":{},",
        ds.class_count, ds.feature_dim
    ));
    push_key(&mut out, "languages");
    out.push('[');
    for (i, l) in ds.languages.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_json_str(&mut out, l);
    }
    out.push_str("],");
    push_key(&mut out, "variant");
    push_json_str(&mut out, &ds.variant);
    out.push_str("}\n");

    for split in Split::ALL {
        for u in ds.split(split) {
            out.push('{');
            push_key(&mut out, "id");
            push_json_str(&mut out, &u.id);
            out.push(',');
            push_key(&mut out, "features");
            push_f64_array(&mut out, &u.features);
            out.push_str(&format!(",\"label\":{},", u.label));
            push_key(&mut out, "language");
            push_json_str(&mut out, &u.language);
            out.push_str(&format!(
                ",\"gender\":\"{}\",\"split\":\"{}\"}}\n",
                u.gender, split
            ));
        }
    }
    out
}

/// Writes a manifest atomically (temp file, then rename).
pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    ds.validate()?;
    write_atomic(path, manifest_string(ds).as_bytes()).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Exact counts per (language, gender, split) cell with marginal totals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupCounts {
    pub languages: Vec<String>,
    cells: BTreeMap<(String, Gender, Split), usize>,
}

impl GroupCounts {
    pub fn cell(&self, language: &str, gender: Gender, split: Split) -> usize {
        self.cells
            .get(&(language.to_string(), gender, split))
            .copied()
            .unwrap_or(0)
    }

    fn sum_where(&self, pred: impl Fn(&str, Gender, Split) -> bool) -> usize {
        self.cells
            .iter()
            .filter(|((l, g, s), _)| pred(l, *g, *s))
            .map(|(_, n)| *n)
            .sum()
    }

    pub fn language_split_total(&self, language: &str, split: Split) -> usize {
        self.sum_where(|l, _, s| l == language && s == split)
    }

    pub fn language_gender_total(&self, language: &str, gender: Gender) -> usize {
        self.sum_where(|l, g, _| l == language && g == gender)
    }

    pub fn language_total(&self, language: &str) -> usize {
        self.sum_where(|l, _, _| l == language)
    }

    pub fn gender_split_total(&self, gender: Gender, split: Split) -> usize {
        self.sum_where(|_, g, s| g == gender && s == split)
    }

    pub fn gender_total(&self, gender: Gender) -> usize {
        self.sum_where(|_, g, _| g == gender)
    }

    pub fn split_total(&self, split: Split) -> usize {
        self.sum_where(|_, _, s| s == split)
    }

    pub fn total(&self) -> usize {
        self.cells.values().sum()
    }

    /// Plain-text table laid out like a corpus statistics table: one block per
    /// language plus an overall block, rows F / M / Total, columns per split.
    pub fn summary_table(&self) -> String {
        let mut out = format!(
            "{:<10} {:<7} {:>8} {:>8} {:>8} {:>8}\n",
            "Language", "Gender", "Train", "Valid", "Test", "Total"
        );
        let mut block = |label: &str, cell: &dyn Fn(Option<Gender>, Option<Split>) -> usize| {
            for (i, g) in [Some(Gender::Female), Some(Gender::Male), None]
                .into_iter()
                .enumerate()
            {
                let name = if i == 0 { label } else { "" };
                let gname = g.map_or("Total", |g| g.as_str());
                out.push_str(&format!(
                    "{:<10} {:<7} {:>8} {:>8} {:>8} {:>8}\n",
                    name,
                    gname,
                    cell(g, Some(Split::Train)),
                    cell(g, Some(Split::Valid)),
                    cell(g, Some(Split::Test)),
                    cell(g, None)
                ));
            }
        };
        for lang in &self.languages {
            block(lang, &|g, s| {
                self.sum_where(|l, gg, ss| {
                    l == lang && g.is_none_or(|g| g == gg) && s.is_none_or(|s| s == ss)
                })
            });
        }
        block("Overall", &|g, s| {
            self.sum_where(|_, gg, ss| g.is_none_or(|g| g == gg) && s.is_none_or(|s| s == ss))
        });
        out
    }
}

pub fn dataset_stats(ds: &Dataset) -> GroupCounts {
    let mut cells = BTreeMap::new();
    for lang in &ds.languages {
        for g in Gender::ALL {
            for s in Split::ALL {
                cells.insert((lang.clone(), g, s), 0);
            }
        }
    }
    for split in Split::ALL {
        for u in ds.split(split) {
            *cells.entry((u.language.clone(), u.gender, split)).or_insert(0) += 1;
        }
    }
    GroupCounts {
        languages: ds.languages.clone(),
        cells,
    }
}

/// Per-split female / male counts for one language.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenderCounts {
    #[serde(rename = "F")]
    pub female: usize,
    #[serde(rename = "M")]
    pub male: usize,
}

impl GenderCounts {
    pub fn get(&self, g: Gender) -> usize {
        match g {
            Gender::Female => self.female,
            Gender::Male => self.male,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: GenderCounts,
    pub valid: GenderCounts,
    pub test: GenderCounts,
}

impl SplitCounts {
    pub fn get(&self, s: Split) -> GenderCounts {
        match s {
            Split::Train => self.train,
            Split::Valid => self.valid,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassMeans {
    /// One mean vector per class.
    Explicit(Vec<Vec<f64>>),
    /// Entries drawn i.i.d. N(0, random_scale^2) from the spec seed.
    Random { random_scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroupOffsets {
    /// Explicit additive offset per gender.
    Explicit {
        #[serde(rename = "F")]
        female: Vec<f64>,
        #[serde(rename = "M")]
        male: Vec<f64>,
    },
    /// Female examples are shifted by `gender_separation` along a seeded unit
    /// direction; male examples are not shifted.
    Separation { gender_separation: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub tag: String,
    pub counts: SplitCounts,
    pub offsets: GroupOffsets,
}

/// Feature-set variant: scales the class signal and the injected group bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub name: String,
    #[serde(default = "one")]
    pub signal_scale: f64,
    #[serde(default = "one")]
    pub bias_scale: f64,
}

fn one() -> f64 {
    1.0
}

fn default_variant() -> String {
    "unimodal".to_string()
}

/// Recipe for a synthetic grouped classification dataset.
///
/// Features of an utterance with label `y`, language `l` and gender `g` are
/// `signal_scale * mean[y] + bias_scale * offset[l][g] + noise_scale * z`
/// with `z ~ N(0, I)`. Labels are drawn from `class_weights` (uniform when
/// absent). All variants share labels and noise draws, so they differ only in
/// the deterministic part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub name: String,
    #[serde(default = "default_variant")]
    pub variant: String,
    pub class_count: usize,
    pub feature_dim: usize,
    pub seed: u64,
    pub noise_scale: f64,
    #[serde(default)]
    pub class_weights: Option<Vec<f64>>,
    pub class_means: ClassMeans,
    pub languages: Vec<LanguageSpec>,
    #[serde(default)]
    pub variants: Vec<VariantSpec>,
}

impl SyntheticSpec {
    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let spec: SyntheticSpec =
            serde_json::from_str(text).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Variant names this spec can generate, in declaration order.
    pub fn variant_names(&self) -> Vec<String> {
        if self.variants.is_empty() {
            vec![self.variant.clone()]
        } else {
            self.variants.iter().map(|v| v.name.clone()).collect()
        }
    }

    pub fn with_variant(&self, name: &str) -> Result<SyntheticSpec, DataError> {
        if !self.variant_names().iter().any(|v| v == name) {
            return Err(DataError::InvalidSpec(format!(
                "unknown variant `{name}` (available: {})",
                self.variant_names().join(", ")
            )));
        }
        let mut spec = self.clone();
        spec.variant = name.to_string();
        Ok(spec)
    }

    fn scales(&self) -> (f64, f64) {
        self.variants
            .iter()
            .find(|v| v.name == self.variant)
            .map_or((1.0, 1.0), |v| (v.signal_scale, v.bias_scale))
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.class_count < 2 {
            return bad(format!("class_count must be >= 2, got {}", self.class_count));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be >= 1".into());
        }
        if !(self.noise_scale.is_finite() && self.noise_scale > 0.0) {
            return bad(format!("noise_scale must be > 0, got {}", self.noise_scale));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != self.class_count {
                return bad(format!(
                    "class_weights has {} entries, expected {}",
                    w.len(),
                    self.class_count
                ));
            }
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
                return bad("class_weights must be non-negative with a positive sum".into());
            }
        }
        match &self.class_means {
            ClassMeans::Explicit(m) => {
                if m.len() != self.class_count || m.iter().any(|row| row.len() != self.feature_dim) {
                    return bad(format!(
                        "class_means must be {} x {}",
                        self.class_count, self.feature_dim
                    ));
                }
                if m.iter().flatten().any(|x| !x.is_finite()) {
                    return bad("class_means must be finite".into());
                }
            }
            ClassMeans::Random { random_scale } => {
                if !random_scale.is_finite() || *random_scale < 0.0 {
                    return bad("random_scale must be finite and >= 0".into());
                }
            }
        }
        if self.languages.is_empty() {
            return bad("at least one language is required".into());
        }
        let mut tags = HashSet::new();
        for lang in &self.languages {
            if !tags.insert(lang.tag.as_str()) {
                return bad(format!("duplicate language `{}`", lang.tag));
            }
            match &lang.offsets {
                GroupOffsets::Explicit { female, male } => {
                    if female.len() != self.feature_dim || male.len() != self.feature_dim {
                        return bad(format!(
                            "offsets for `{}` must have length {}",
                            lang.tag, self.feature_dim
                        ));
                    }
                    if female.iter().chain(male).any(|x| !x.is_finite()) {
                        return bad(format!("offsets for `{}` must be finite", lang.tag));
                    }
                }
                GroupOffsets::Separation { gender_separation } => {
                    if !gender_separation.is_finite() {
                        return bad(format!("gender_separation for `{}` must be finite", lang.tag));
                    }
                }
            }
        }
        let mut names = HashSet::new();
        for v in &self.variants {
            if !names.insert(v.name.as_str()) {
                return bad(format!("duplicate variant `{}`", v.name));
            }
            if !v.signal_scale.is_finite() || !v.bias_scale.is_finite() {
                return bad(format!("variant `{}` scales must be finite", v.name));
            }
        }
        if !self.variants.is_empty() && !names.contains(self.variant.as_str()) {
            return bad(format!(
                "variant `{}` is not among the declared variants",
                self.variant
            ));
        }
        Ok(())
    }
}

fn unit_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn draw_label(rng: &mut ChaCha8Rng, cumulative: &[f64]) -> usize {
    let total = *cumulative.last().expect("non-empty weights");
    let u: f64 = rng.random::<f64>() * total;
    cumulative
        .iter()
        .position(|&c| u < c)
        .unwrap_or(cumulative.len() - 1)
}

/// Generates the dataset described by `spec` for `spec.variant`.
///
/// Pure in `spec`: the same spec (seed included) always yields the same
/// dataset. Utterances are emitted split by split, language by language,
/// female before male.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let (signal, bias) = spec.scales();
    let c = spec.class_count;
    let d = spec.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let means: Vec<Vec<f64>> = match &spec.class_means {
        ClassMeans::Explicit(m) => m.clone(),
        ClassMeans::Random { random_scale } => (0..c)
            .map(|_| {
                (0..d)
                    .map(|_| random_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect(),
    };
    let offsets: Vec<[Vec<f64>; 2]> = spec
        .languages
        .iter()
        .map(|lang| match &lang.offsets {
            GroupOffsets::Explicit { female, male } => [female.clone(), male.clone()],
            GroupOffsets::Separation { gender_separation } => {
                let dir = unit_direction(&mut rng, d);
                [dir.iter().map(|x| gender_separation * x).collect(), vec![0.0; d]]
            }
        })
        .collect();
    let weights = spec.class_weights.clone().unwrap_or_else(|| vec![1.0; c]);
    let cumulative: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();

    let mut ds = Dataset {
        name: spec.name.clone(),
        variant: spec.variant.clone(),
        class_count: c,
        feature_dim: d,
        languages: spec.languages.iter().map(|l| l.tag.clone()).collect(),
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for split in Split::ALL {
        for (li, lang) in spec.languages.iter().enumerate() {
            for (gi, g) in Gender::ALL.into_iter().enumerate() {
                let n = lang.counts.get(split).get(g);
                for i in 0..n {
                    let label = draw_label(&mut rng, &cumulative);
                    let offset = &offsets[li][gi];
                    let features = (0..d)
                        .map(|j| {
                            let z: f64 = rng.sample(StandardNormal);
                            signal * means[label][j] + bias * offset[j] + spec.noise_scale * z
                        })
                        .collect();
                    ds.split_mut(split).push(Utterance {
                        id: format!("{}-{}-{}-{:05}", lang.tag, split, g, i),
                        features,
                        label,
                        language: lang.tag.clone(),
                        gender: g,
                    });
                }
            }
        }
    }
    Ok(ds)
}

struct Pool {
    language: usize,
    items: Vec<usize>,
    next: usize,
}

impl Pool {
    fn remaining(&self) -> usize {
        self.items.len() - self.next
    }
}

/// Largest-remainder allocation of `b` slots proportional to `remaining`.
fn proportional_quota(remaining: &[usize], b: usize) -> Vec<usize> {
    let total: usize = remaining.iter().sum();
    let mut quota: Vec<usize> = remaining.iter().map(|&r| b * r / total).collect();
    let assigned: usize = quota.iter().sum();
    let mut order: Vec<usize> = (0..remaining.len()).collect();
    order.sort_by(|&a, &c| {
        let ra = b * remaining[a] % total;
        let rc = b * remaining[c] % total;
        rc.cmp(&ra).then(a.cmp(&c))
    });
    for &i in order.iter().take(b - assigned) {
        quota[i] += 1;
    }
    quota
}

/// Gives every language with both genders still available at least one
/// example of each gender in the batch, when a donor slot exists.
/// Pools come in (language, F), (language, M) pairs.
fn repair_gender_pairs(quota: &mut [usize], pools: &[Pool]) {
    let n_lang = pools.len() / 2;
    for lang in 0..n_lang {
        let (f, m) = (2 * lang, 2 * lang + 1);
        if pools[f].remaining() == 0 || pools[m].remaining() == 0 {
            continue;
        }
        let missing = match (quota[f], quota[m]) {
            (0, q) if q > 0 => f,
            (q, 0) if q > 0 => m,
            _ => continue,
        };
        let partner = |j: usize| j ^ 1;
        let donor = (0..pools.len())
            .filter(|&j| j != missing && quota[j] >= 2)
            .max_by(|&a, &b| quota[a].cmp(&quota[b]).then(b.cmp(&a)))
            .or_else(|| {
                (0..pools.len())
                    .find(|&j| pools[j].language != lang && quota[j] == 1 && quota[partner(j)] == 0)
            });
        if let Some(j) = donor {
            quota[j] -= 1;
            quota[missing] += 1;
        }
    }
}

/// Partitions a split into mini-batches of `batch_size` (the last one may be
/// shorter), stratified by (language, gender).
///
/// Each batch takes a share of every (language, gender) pool proportional to
/// what the pool has left, then moves slots so that a language with both
/// genders remaining never appears with only one of them unless the batch is
/// too small to allow it. Pool order and within-batch order are shuffled from
/// `seed`. Returned indices refer to `ds.split(split)`.
pub fn stratified_batches(
    ds: &Dataset,
    split: Split,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, DataError> {
    if batch_size < 2 {
        return Err(DataError::InvalidArgument(format!(
            "batch_size must be >= 2, got {batch_size}"
        )));
    }
    let utts = ds.split(split);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lang_index = |tag: &str| ds.languages.iter().position(|l| l == tag);
    let mut pools: Vec<Pool> = (0..ds.languages.len() * 2)
        .map(|i| Pool {
            language: i / 2,
            items: Vec::new(),
            next: 0,
        })
        .collect();
    for (i, u) in utts.iter().enumerate() {
        let li = lang_index(&u.language)
            .ok_or_else(|| DataError::Invalid(format!("utterance `{}` has undeclared language", u.id)))?;
        let gi = match u.gender {
            Gender::Female => 0,
            Gender::Male => 1,
        };
        pools[2 * li + gi].items.push(i);
    }
    for pool in &mut pools {
        pool.items.shuffle(&mut rng);
    }

    let mut remaining_total = utts.len();
    let mut batches = Vec::with_capacity(remaining_total.div_ceil(batch_size));
    while remaining_total > 0 {
        let b = batch_size.min(remaining_total);
        let remaining: Vec<usize> = pools.iter().map(Pool::remaining).collect();
        let mut quota = proportional_quota(&remaining, b);
        repair_gender_pairs(&mut quota, &pools);
        let mut batch = Vec::with_capacity(b);
        for (pool, q) in pools.iter_mut().zip(&quota) {
            batch.extend_from_slice(&pool.items[pool.next..pool.next + q]);
            pool.next += q;
        }
        batch.shuffle(&mut rng);
        remaining_total -= b;
        batches.push(batch);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn utt(id: &str, lang: &str, g: Gender, label: usize) -> Utterance {
        Utterance {
            id: id.into(),
            features: vec![0.0, 0.0],
            label,
            language: lang.into(),
            gender: g,
        }
    }

    fn empty(languages: &[&str]) -> Dataset {
        Dataset {
            name: "t".into(),
            variant: "unimodal".into(),
            class_count: 7,
            feature_dim: 2,
            languages: languages.iter().map(|s| s.to_string()).collect(),
            train: vec![],
            valid: vec![],
            test: vec![],
        }
    }

    const HEADER: &str = r#"{"schema":"minmaxgap-v1","class_count":7,"feature_dim":2,"languages":["ENG"],"variant":"unimodal"}"#;

    #[test]
    fn single_record_manifest() {
        let text = format!(
            "{HEADER}\n{}\n",
            r#"{"id":"u1","features":[0,0],"label":0,"language":"ENG","gender":"F","split":"train"}"#
        );
        let ds = parse_manifest(&text, Some((7, 2)), "m").unwrap();
        assert_eq!(ds.train.len(), 1);
        assert!(ds.valid.is_empty() && ds.test.is_empty());
        assert_eq!(ds.train[0].gender, Gender::Female);
        assert_eq!(ds.name, "m");
    }

    #[test]
    fn bad_gender_names_line() {
        let text = format!(
            "{HEADER}\n{}\n{}\n",
            r#"{"id":"u1","features":[0,0],"label":0,"language":"ENG","gender":"F","split":"train"}"#,
            r#"{"id":"u2","features":[0,0],"label":0,"language":"ENG","gender":"X","split":"train"}"#
        );
        let err = parse_manifest(&text, None, "m").unwrap_err();
        match err {
            DataError::Line { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("X"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn manifest_errors() {
        let cases = [
            (
                r#"{"id":"u","features":[0,0],"label":7,"language":"ENG","gender":"F","split":"train"}"#,
                "out of range",
            ),
            (
                r#"{"id":"u","features":[0],"label":0,"language":"ENG","gender":"F","split":"train"}"#,
                "feature length",
            ),
            (
                r#"{"id":"u","features":[0,0],"label":0,"language":"ENG","gender":"F","split":"dev"}"#,
                "unknown split",
            ),
            (
                r#"{"id":"u","features":[0,0],"label":0,"language":"FRA","gender":"F","split":"train"}"#,
                "undeclared language",
            ),
            (r#"{"id":"u","features":[0,0],"label":0"#, "malformed"),
        ];
        for (line, needle) in cases {
            let err = parse_manifest(&format!("{HEADER}\n{line}\n"), None, "m").unwrap_err();
            let msg = err.to_string();
            assert!(msg.starts_with("line 2:") && msg.contains(needle), "{msg}");
        }
        let err = parse_manifest(HEADER, Some((3, 2)), "m").unwrap_err();
        assert!(err.to_string().contains("expected 3"));
    }

    #[test]
    fn stats_counts_cells() {
        let ds = empty(&["ENG", "JPN"]);
        let st = dataset_stats(&ds);
        assert_eq!(st.total(), 0);
        assert_eq!(st.cell("ENG", Gender::Female, Split::Train), 0);

        let mut ds = empty(&["ENG"]);
        ds.train = vec![
            utt("a", "ENG", Gender::Female, 0),
            utt("b", "ENG", Gender::Female, 1),
            utt("c", "ENG", Gender::Male, 2),
        ];
        let st = dataset_stats(&ds);
        assert_eq!(st.cell("ENG", Gender::Female, Split::Train), 2);
        assert_eq!(st.cell("ENG", Gender::Male, Split::Train), 1);
        assert_eq!(st.language_total("ENG"), 3);
        assert_eq!(st.gender_total(Gender::Female), 2);
        assert!(st.summary_table().contains("Overall"));
    }

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec::from_json(
            r#"{
              "name": "s", "class_count": 3, "feature_dim": 4, "seed": 7, "noise_scale": 0.5,
              "class_means": {"random_scale": 1.0},
              "languages": [
                {"tag": "ENG", "counts": {"train": {"F": 5, "M": 4}, "valid": {"F": 2, "M": 2}, "test": {"F": 1, "M": 3}},
                 "offsets": {"gender_separation": 1.0}},
                {"tag": "DEU", "counts": {"train": {"F": 3, "M": 0}, "valid": {"F": 1, "M": 1}, "test": {"F": 0, "M": 0}},
                 "offsets": {"F": [0, 0, 0, 1], "M": [0, 0, 0, 0]}}
              ],
              "variants": [{"name": "unimodal"}, {"name": "multimodal", "signal_scale": 1.5}]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let spec = small_spec();
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(manifest_string(&a), manifest_string(&b));
        let st = dataset_stats(&a);
        assert_eq!(st.cell("ENG", Gender::Female, Split::Train), 5);
        assert_eq!(st.cell("ENG", Gender::Male, Split::Test), 3);
        assert_eq!(st.cell("DEU", Gender::Male, Split::Train), 0);
        assert_eq!(st.total(), 22);
        a.validate().unwrap();

        let mm = generate_synthetic(&spec.with_variant("multimodal").unwrap()).unwrap();
        assert_eq!(mm.variant, "multimodal");
        let labels = |d: &Dataset| d.train.iter().map(|u| u.label).collect::<Vec<_>>();
        assert_eq!(labels(&a), labels(&mm));
        assert_ne!(a.train[0].features, mm.train[0].features);
        assert!(spec.with_variant("trimodal").is_err());
    }

    #[test]
    fn synthetic_rejects_zero_noise() {
        let mut spec = small_spec();
        spec.noise_scale = 0.0;
        assert!(matches!(
            generate_synthetic(&spec),
            Err(DataError::InvalidSpec(_))
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path, Some((3, 4))).unwrap();
        assert_eq!(back, ds);
        save_dataset(&back, dir.path().join("n.jsonl")).unwrap();
        assert_eq!(
            fs::read(&path).unwrap(),
            fs::read(dir.path().join("n.jsonl")).unwrap()
        );
    }

    #[test]
    fn batches_partition_small_split() {
        let mut ds = empty(&["ENG"]);
        ds.train = (0..10)
            .map(|i| {
                let g = if i % 2 == 0 { Gender::Female } else { Gender::Male };
                utt(&format!("u{i}"), "ENG", g, 0)
            })
            .collect();
        let batches = stratified_batches(&ds, Split::Train, 4, 1).unwrap();
        let sizes: Vec<usize> = batches.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(batches, stratified_batches(&ds, Split::Train, 4, 1).unwrap());
        assert!(stratified_batches(&ds, Split::Train, 1, 1).is_err());
    }

    #[test]
    fn batches_with_single_gender_language() {
        let mut ds = empty(&["ENG", "JPN"]);
        ds.train = (0..6)
            .map(|i| utt(&format!("e{i}"), "ENG", Gender::Female, 0))
            .collect();
        ds.train.push(utt("j0", "JPN", Gender::Male, 0));
        ds.train.push(utt("j1", "JPN", Gender::Female, 0));
        let batches = stratified_batches(&ds, Split::Train, 3, 9).unwrap();
        assert_eq!(batches.concat().len(), 8);
    }

    proptest! {
        #[test]
        fn stats_invariant_under_permutation(seed in 0u64..1000) {
            let ds = generate_synthetic(&small_spec()).unwrap();
            let mut shuffled = ds.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            shuffled.train.shuffle(&mut rng);
            shuffled.valid.shuffle(&mut rng);
            prop_assert_eq!(dataset_stats(&ds), dataset_stats(&shuffled));
        }

        #[test]
        fn batches_partition_and_pair_genders(
            cells in proptest::collection::vec(0usize..12, 6),
            batch_size in 2usize..9,
            seed in 0u64..500,
        ) {
            let mut ds = empty(&["A", "B", "C"]);
            let mut k = 0;
            for (ci, &n) in cells.iter().enumerate() {
                let lang = ["A", "B", "C"][ci / 2];
                let g = Gender::ALL[ci % 2];
                for _ in 0..n {
                    ds.train.push(utt(&format!("u{k}"), lang, g, 0));
                    k += 1;
                }
            }
            let batches = stratified_batches(&ds, Split::Train, batch_size, seed).unwrap();
            let mut all: Vec<usize> = batches.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..ds.train.len()).collect::<Vec<_>>());

            // remaining (language, gender) counts before each batch
            let mut left = [[0usize; 2]; 3];
            for u in &ds.train {
                let li = ds.languages.iter().position(|l| *l == u.language).unwrap();
                left[li][(u.gender == Gender::Male) as usize] += 1;
            }
            for batch in &batches {
                let both_left = left.iter().filter(|c| c[0] > 0 && c[1] > 0).count();
                let mut present = [[0usize; 2]; 3];
                for &i in batch {
                    let u = &ds.train[i];
                    let li = ds.languages.iter().position(|l| *l == u.language).unwrap();
                    present[li][(u.gender == Gender::Male) as usize] += 1;
                }
                if batch.len() >= 2 * both_left {
                    for li in 0..3 {
                        if left[li][0] > 0 && left[li][1] > 0 {
                            let one_sided = (present[li][0] > 0) != (present[li][1] > 0);
                            prop_assert!(!one_sided, "language {} one-sided in {:?}", li, present);
                        }
                    }
                }
                for li in 0..3 {
                    for g in 0..2 {
                        left[li][g] -= present[li][g];
                    }
                }
            }
        }
    }
}
