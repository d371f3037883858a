//! Tabular ingestion, splitting and normalisation.
//!
//! A dataset is described by a JSON schema listing every column of the CSV
//! that should be used:
//!
//! ```json
//! {"name": "toy", "task": "classification",
//!  "columns": [{"name": "a", "kind": "numeric"},
//!              {"name": "colour", "kind": "categorical"},
//!              {"name": "label", "kind": "target"}]}
//! ```
//!
//! Feature columns appear in schema order. A categorical column expands in
//! place into one indicator column per level; levels are taken from the
//! schema's `levels` list when present, otherwise they are the distinct
//! values sorted lexicographically. Classification targets map to class
//! indices in the same way (numeric labels sort numerically). Columns not
//! named in the schema are ignored. Empty cells are rejected.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Task;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const TEST_FRACTION: f64 = 0.2;
pub const VAL_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<String>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    #[serde(default)]
    pub name: String,
    pub task: TaskKind,
    pub columns: Vec<ColumnSpec>,
    /// Path of the CSV relative to the schema file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl Schema {
    pub fn from_json_file(path: &Path) -> Result<Schema> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("column `{}` listed twice", c.name)));
            }
        }
        let targets = self.columns.iter().filter(|c| c.kind == ColumnKind::Target).count();
        if targets == 0 {
            return Err(Error::Schema("schema names no target column".into()));
        }
        if self.task == TaskKind::Classification && targets != 1 {
            return Err(Error::Schema("classification takes exactly one target column".into()));
        }
        if !self.columns.iter().any(|c| c.kind != ColumnKind::Target) {
            return Err(Error::Schema("schema names no feature column".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Labels { labels: Vec<usize>, classes: usize },
    Values(Tensor),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels { labels, .. } => labels.len(),
            Targets::Values(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Result<Targets> {
        Ok(match self {
            Targets::Labels { labels, classes } => Targets::Labels {
                labels: idx
                    .iter()
                    .map(|&i| {
                        labels
                            .get(i)
                            .copied()
                            .ok_or_else(|| Error::Dimension(format!("row {i} out of range")))
                    })
                    .collect::<Result<_>>()?,
                classes: *classes,
            },
            Targets::Values(t) => Targets::Values(t.select_rows(idx)?),
        })
    }

    /// One-hot rows for labels, the values themselves for regression.
    pub fn dense(&self) -> Tensor {
        match self {
            Targets::Labels { labels, classes } => {
                let mut t = Tensor::zeros(labels.len(), *classes);
                for (r, &c) in labels.iter().enumerate() {
                    t.set(r, c, 1.0);
                }
                t
            }
            Targets::Values(t) => t.clone(),
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match self {
            Targets::Labels { labels, .. } => Some(labels),
            Targets::Values(_) => None,
        }
    }

    pub fn values(&self) -> Option<&Tensor> {
        match self {
            Targets::Values(t) => Some(t),
            Targets::Labels { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub task: Task,
    pub features: Tensor,
    pub targets: Targets,
    pub feature_names: Vec<String>,
    /// Original label of each class index.
    #[serde(default)]
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(name: &str, features: Tensor, targets: Targets) -> Result<Dataset> {
        if features.rows() != targets.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows, {} targets",
                features.rows(),
                targets.len()
            )));
        }
        let task = match &targets {
            Targets::Labels { labels, classes } => {
                if let Some(&bad) = labels.iter().find(|&&l| l >= *classes) {
                    return Err(Error::Validation(format!(
                        "label {bad} out of range for {classes} classes"
                    )));
                }
                Task::Classification { classes: *classes }
            }
            Targets::Values(t) => Task::Regression { targets: t.cols() },
        };
        let feature_names = (0..features.cols()).map(|i| format!("x{i}")).collect();
        Ok(Dataset {
            name: name.to_string(),
            task,
            features,
            targets,
            feature_names,
            class_names: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn sorted_levels(values: &BTreeSet<String>) -> Vec<String> {
    let mut levels: Vec<String> = values.iter().cloned().collect();
    let numeric: Option<Vec<f64>> = levels.iter().map(|v| v.parse::<f64>().ok()).collect();
    if let Some(nums) = numeric {
        let mut pairs: Vec<(f64, String)> = nums.into_iter().zip(levels).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        levels = pairs.into_iter().map(|(_, s)| s).collect();
    }
    levels
}

/// Reads a CSV with a header row and applies `schema`.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &Schema) -> Result<Dataset> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut position = HashMap::new();
    for (i, h) in header.iter().enumerate() {
        if position.insert(h.as_str(), i).is_some() {
            return Err(Error::Schema(format!("duplicate header `{h}`")));
        }
    }
    let mut cols = Vec::with_capacity(schema.columns.len());
    for c in &schema.columns {
        let idx = *position
            .get(c.name.as_str())
            .ok_or_else(|| Error::Schema(format!("column `{}` not found in header", c.name)))?;
        cols.push(idx);
    }
    let records: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;
    if records.is_empty() {
        return Err(Error::Validation("CSV has no data rows".into()));
    }
    // Line numbers in messages count the header as line 1.
    let cell = |row: usize, col: usize| -> Result<&str> {
        let v = records[row].get(cols[col]).unwrap_or("");
        if v.is_empty() {
            Err(Error::Validation(format!(
                "line {}: empty value in column `{}`",
                row + 2,
                schema.columns[col].name
            )))
        } else {
            Ok(v)
        }
    };
    let numeric = |row: usize, col: usize| -> Result<f64> {
        let v = cell(row, col)?;
        match v.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(x),
            _ => Err(Error::Validation(format!(
                "line {}: column `{}` holds non-numeric value `{v}`",
                row + 2,
                schema.columns[col].name
            ))),
        }
    };

    let n = records.len();
    let mut levels: Vec<Option<Vec<String>>> = vec![None; schema.columns.len()];
    for (ci, c) in schema.columns.iter().enumerate() {
        let needs_levels = c.kind == ColumnKind::Categorical
            || (c.kind == ColumnKind::Target && schema.task == TaskKind::Classification);
        if !needs_levels {
            continue;
        }
        let l = match &c.levels {
            Some(l) => l.clone(),
            None => {
                let mut seen = BTreeSet::new();
                for r in 0..n {
                    seen.insert(cell(r, ci)?.to_string());
                }
                sorted_levels(&seen)
            }
        };
        levels[ci] = Some(l);
    }

    let mut feature_names = Vec::new();
    for (ci, c) in schema.columns.iter().enumerate() {
        match c.kind {
            ColumnKind::Numeric => feature_names.push(c.name.clone()),
            ColumnKind::Categorical => {
                for l in levels[ci].as_ref().expect("levels computed") {
                    feature_names.push(format!("{}={l}", c.name));
                }
            }
            ColumnKind::Target => {}
        }
    }
    let n_targets = schema.columns.iter().filter(|c| c.kind == ColumnKind::Target).count();

    let mut features = Tensor::zeros(n, feature_names.len());
    let mut labels = Vec::new();
    let mut values = Tensor::zeros(n, n_targets);
    for r in 0..n {
        let mut f = 0;
        let mut t = 0;
        for (ci, c) in schema.columns.iter().enumerate() {
            match c.kind {
                ColumnKind::Numeric => {
                    features.set(r, f, numeric(r, ci)?);
                    f += 1;
                }
                ColumnKind::Categorical => {
                    let lv = levels[ci].as_ref().expect("levels computed");
                    let v = cell(r, ci)?;
                    let k = lv.iter().position(|l| l == v).ok_or_else(|| {
                        Error::Validation(format!("line {}: `{v}` is not a level of `{}`", r + 2, c.name))
                    })?;
                    features.set(r, f + k, 1.0);
                    f += lv.len();
                }
                ColumnKind::Target => {
                    if schema.task == TaskKind::Classification {
                        let lv = levels[ci].as_ref().expect("levels computed");
                        let v = cell(r, ci)?;
                        let k = lv.iter().position(|l| l == v).ok_or_else(|| {
                            Error::Validation(format!("line {}: `{v}` is not a class of `{}`", r + 2, c.name))
                        })?;
                        labels.push(k);
                    } else {
                        values.set(r, t, numeric(r, ci)?);
                        t += 1;
                    }
                }
            }
        }
    }

    let (targets, class_names) = match schema.task {
        TaskKind::Classification => {
            let names = schema
                .columns
                .iter()
                .zip(&levels)
                .find(|(c, _)| c.kind == ColumnKind::Target)
                .and_then(|(_, l)| l.clone())
                .expect("one target");
            (
                Targets::Labels {
                    labels,
                    classes: names.len(),
                },
                names,
            )
        }
        TaskKind::Regression => (Targets::Values(values), Vec::new()),
    };
    let mut ds = Dataset::new(&schema.name, features, targets)?;
    ds.feature_names = feature_names;
    ds.class_names = class_names;
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Shuffles `0..n` with the seed, then takes `round(0.2n)` rows for test
/// and `round(0.1·rest)` for validation; the remainder trains.
pub fn split(n: usize, seed: u64) -> Result<Split> {
    let n_test = (TEST_FRACTION * n as f64).round() as usize;
    let n_val = (VAL_FRACTION * (n - n_test) as f64).round() as usize;
    if n < 3 || n_test == 0 || n_val == 0 || n_test + n_val >= n {
        return Err(Error::InsufficientData(format!("{n} rows are too few to split")));
    }
    let perm = Rng::new(seed).child("split").permutation(n);
    Ok(Split {
        test: perm[..n_test].to_vec(),
        val: perm[n_test..n_test + n_val].to_vec(),
        train: perm[n_test + n_val..].to_vec(),
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    /// Present for regression targets only.
    #[serde(default)]
    pub target_mean: Vec<f64>,
    #[serde(default)]
    pub target_std: Vec<f64>,
}

fn column_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let n = t.rows() as f64;
    let mut mean = vec![0.0; t.cols()];
    for r in 0..t.rows() {
        for (m, v) in mean.iter_mut().zip(t.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; t.cols()];
    for r in 0..t.rows() {
        for ((s, v), m) in var.iter_mut().zip(t.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    // Population std; columns without spread keep a unit divisor.
    let std = var
        .iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

fn standardise(t: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    let mut out = t.clone();
    for r in 0..out.rows() {
        for ((v, m), s) in out.row_mut(r).iter_mut().zip(mean).zip(std) {
            *v = (*v - m) / s;
        }
    }
    out
}

fn unstandardise(t: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    let mut out = t.clone();
    for r in 0..out.rows() {
        for ((v, m), s) in out.row_mut(r).iter_mut().zip(mean).zip(std) {
            *v = *v * s + m;
        }
    }
    out
}

impl NormStats {
    /// Statistics of the given training rows only.
    pub fn fit(dataset: &Dataset, train: &[usize]) -> Result<NormStats> {
        let (feature_mean, feature_std) = column_stats(&dataset.features.select_rows(train)?);
        let (target_mean, target_std) = match &dataset.targets {
            Targets::Values(v) => column_stats(&v.select_rows(train)?),
            Targets::Labels { .. } => (Vec::new(), Vec::new()),
        };
        Ok(NormStats {
            feature_mean,
            feature_std,
            target_mean,
            target_std,
        })
    }

    pub fn normalize_features(&self, x: &Tensor) -> Tensor {
        standardise(x, &self.feature_mean, &self.feature_std)
    }

    pub fn denormalize_features(&self, x: &Tensor) -> Tensor {
        unstandardise(x, &self.feature_mean, &self.feature_std)
    }

    pub fn normalize_targets(&self, t: &Targets) -> Targets {
        match t {
            Targets::Values(v) => Targets::Values(standardise(v, &self.target_mean, &self.target_std)),
            labels => labels.clone(),
        }
    }

    pub fn denormalize_targets(&self, v: &Tensor) -> Tensor {
        unstandardise(v, &self.target_mean, &self.target_std)
    }
}

/// Normalised rows of one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub features: Tensor,
    pub targets: Targets,
}

impl Partition {
    pub fn new(features: Tensor, targets: Targets) -> Result<Partition> {
        if features.rows() != targets.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows, {} targets",
                features.rows(),
                targets.len()
            )));
        }
        Ok(Partition { features, targets })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Result<Partition> {
        Ok(Partition {
            features: self.features.select_rows(idx)?,
            targets: self.targets.select(idx)?,
        })
    }

    /// First `n` rows (all rows when `n` exceeds the length).
    pub fn head(&self, n: usize) -> Result<Partition> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedData {
    pub name: String,
    pub task: Task,
    pub split: Split,
    pub stats: NormStats,
    pub train: Partition,
    pub val: Partition,
    pub test: Partition,
}

/// Standardises features (and regression targets) with training-split
/// statistics and slices the three partitions.
pub fn normalize(dataset: &Dataset, split: &Split) -> Result<PreparedData> {
    let stats = NormStats::fit(dataset, &split.train)?;
    let features = stats.normalize_features(&dataset.features);
    let targets = stats.normalize_targets(&dataset.targets);
    let part = |idx: &[usize]| -> Result<Partition> {
        Ok(Partition {
            features: features.select_rows(idx)?,
            targets: targets.select(idx)?,
        })
    };
    Ok(PreparedData {
        name: dataset.name.clone(),
        task: dataset.task,
        train: part(&split.train)?,
        val: part(&split.val)?,
        test: part(&split.test)?,
        stats,
        split: split.clone(),
    })
}

/// Loads, splits and normalises in one go.
pub fn prepare(dataset: &Dataset, seed: u64) -> Result<PreparedData> {
    normalize(dataset, &split(dataset.len(), seed)?)
}
