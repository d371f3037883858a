//! Corrupted copies of a test split and the 1-NN search for their scale.
//!
//! Five families are applied at five severities. With `m = grid[level]·s`:
//! additive families produce `x + n⊙|x|`, multiplicative ones `x⊙(1 + n)`,
//! where `n ~ N(0, m²)` or `U(−m, m)` elementwise; Bernoulli zeroing sets
//! each entry to 0 with probability `m`. Corruption acts on normalised
//! features.
//!
//! The scaling factor `s` is calibrated against a 1-nearest-neighbour model
//! whose corpus is the clean training split: a corrupted test row passes
//! when its neighbour prediction equals that of its clean counterpart
//! (classification, at least 99% agreement per cell), or the mean squared
//! difference between the two predictions stays below 0.01 (regression).
//! The search scans `s = 2^(k/4)` from `k = 8` (s = 4) downwards and keeps
//! the first, i.e. largest, value whose 25 cells all pass.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Partition, Targets};
use crate::error::{Error, Result};
use crate::rng::{sample_gaussian, sample_uniform, Rng};
use crate::tensor::Tensor;

pub const ADDITIVE_GRID: [f64; 5] = [0.02, 0.04, 0.06, 0.08, 0.1];
pub const MULTIPLICATIVE_GRID: [f64; 5] = [0.04, 0.08, 0.12, 0.16, 0.2];
pub const AGREEMENT_THRESHOLD: f64 = 99.0;
pub const MSE_THRESHOLD: f64 = 0.01;
pub const SCALE_GRID_TOP: i32 = 8;
pub const SCALE_GRID_BOTTOM: i32 = -80;
pub const CALIBRATION_SEED: u64 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    AdditiveGaussian,
    AdditiveUniform,
    MultiplicativeGaussian,
    MultiplicativeUniform,
    BernoulliZero,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::AdditiveGaussian,
        Family::AdditiveUniform,
        Family::MultiplicativeGaussian,
        Family::MultiplicativeUniform,
        Family::BernoulliZero,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::AdditiveGaussian => "additive-gaussian",
            Family::AdditiveUniform => "additive-uniform",
            Family::MultiplicativeGaussian => "multiplicative-gaussian",
            Family::MultiplicativeUniform => "multiplicative-uniform",
            Family::BernoulliZero => "bernoulli-zero",
        }
    }

    pub fn parse(name: &str) -> Result<Family> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == name)
            .ok_or_else(|| Error::Parameter(format!("unknown corruption family `{name}`")))
    }

    pub fn grid(self) -> [f64; 5] {
        match self {
            Family::AdditiveGaussian | Family::AdditiveUniform => ADDITIVE_GRID,
            _ => MULTIPLICATIVE_GRID,
        }
    }
}

/// `grid[level − 1]·s` for `level ∈ 1..=5`.
pub fn magnitude(family: Family, level: usize, scale: f64) -> Result<f64> {
    if !(1..=5).contains(&level) {
        return Err(Error::Parameter(format!("severity level must be 1..=5, got {level}")));
    }
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(Error::Parameter(format!("scaling factor must be >= 0, got {scale}")));
    }
    Ok(family.grid()[level - 1] * scale)
}

/// One corrupted copy of `x`.
pub fn corrupt(x: &Tensor, family: Family, level: usize, scale: f64, rng: &mut Rng) -> Result<Tensor> {
    let m = magnitude(family, level, scale)?;
    if m == 0.0 {
        return Ok(x.clone());
    }
    let (r, c) = x.shape();
    match family {
        Family::AdditiveGaussian | Family::AdditiveUniform => {
            let n = if family == Family::AdditiveGaussian {
                sample_gaussian(rng, r, c, 0.0, m)?
            } else {
                sample_uniform(rng, r, c, -m, m)?
            };
            x.zip_map(&n, "additive corruption", |v, e| v + e * v.abs())
        }
        Family::MultiplicativeGaussian | Family::MultiplicativeUniform => {
            let n = if family == Family::MultiplicativeGaussian {
                sample_gaussian(rng, r, c, 0.0, m)?
            } else {
                sample_uniform(rng, r, c, -m, m)?
            };
            x.zip_map(&n, "multiplicative corruption", |v, e| v * (1.0 + e))
        }
        Family::BernoulliZero => {
            if m >= 1.0 {
                return Err(Error::Parameter(format!("zeroing probability {m} must be below 1")));
            }
            let mut out = x.clone();
            for v in out.data_mut() {
                if rng.uniform() < m {
                    *v = 0.0;
                }
            }
            Ok(out)
        }
    }
}

/// Index of the Euclidean nearest row of `corpus` for every row of `query`;
/// ties go to the lowest index.
pub fn nearest_indices(corpus: &Tensor, query: &Tensor) -> Result<Vec<usize>> {
    if corpus.cols() != query.cols() {
        return Err(Error::Dimension(format!(
            "corpus has {} features, query {}",
            corpus.cols(),
            query.cols()
        )));
    }
    if corpus.rows() == 0 {
        return Err(Error::InsufficientData("empty 1-NN corpus".into()));
    }
    Ok((0..query.rows())
        .into_par_iter()
        .map(|q| {
            let qr = query.row(q);
            let mut best = (0, f64::INFINITY);
            for i in 0..corpus.rows() {
                let d: f64 = corpus.row(i).iter().zip(qr).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (i, d);
                }
            }
            best.0
        })
        .collect())
}

/// 1-NN prediction: the label or target row of the nearest training row.
pub fn knn_predict(train_features: &Tensor, train_targets: &Targets, query: &Tensor) -> Result<Targets> {
    if train_features.rows() != train_targets.len() {
        return Err(Error::Dimension("1-NN corpus rows and targets differ".into()));
    }
    train_targets.select(&nearest_indices(train_features, query)?)
}

/// Agreement in percent (classification) or mean squared difference
/// (regression) between two prediction sets.
pub fn prediction_score(clean: &Targets, corrupted: &Targets) -> Result<f64> {
    match (clean, corrupted) {
        (Targets::Labels { labels: a, .. }, Targets::Labels { labels: b, .. }) => {
            if a.is_empty() || a.len() != b.len() {
                return Err(Error::Dimension("prediction sets differ in length".into()));
            }
            let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
            Ok(100.0 * same as f64 / a.len() as f64)
        }
        (Targets::Values(a), Targets::Values(b)) => crate::metrics::mse(b, a),
        _ => Err(Error::Validation("mixed prediction kinds".into())),
    }
}

pub fn passes(classification: bool, score: f64) -> bool {
    if classification {
        score >= AGREEMENT_THRESHOLD
    } else {
        score < MSE_THRESHOLD
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptedCell {
    pub family: Family,
    pub severity: usize,
    pub magnitude: f64,
    pub features: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSet {
    pub dataset: String,
    pub scaling_factor: f64,
    pub seed: u64,
    pub cells: Vec<CorruptedCell>,
}

fn cell_rng(seed: u64, family: Family, level: usize) -> Rng {
    Rng::new(seed).child(&format!("ood/{}/{level}", family.name()))
}

/// All 25 cells. Each cell has its own stream, so cells are independent of
/// generation order.
pub fn generate(dataset: &str, x: &Tensor, scale: f64, seed: u64) -> Result<CorruptionSet> {
    let jobs: Vec<(Family, usize)> = Family::ALL.iter().flat_map(|&f| (1..=5).map(move |l| (f, l))).collect();
    let cells = jobs
        .par_iter()
        .map(|&(family, severity)| {
            Ok(CorruptedCell {
                family,
                severity,
                magnitude: magnitude(family, severity, scale)?,
                features: corrupt(x, family, severity, scale, &mut cell_rng(seed, family, severity))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CorruptionSet {
        dataset: dataset.to_string(),
        scaling_factor: scale,
        seed,
        cells,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    pub family: Family,
    pub severity: usize,
    pub score: f64,
    pub passed: bool,
}

/// 1-NN gate scores of every cell of `set`.
pub fn score_set(train: &Partition, test: &Partition, set: &CorruptionSet) -> Result<Vec<CellScore>> {
    let classification = train.targets.labels().is_some();
    let clean = knn_predict(&train.features, &train.targets, &test.features)?;
    set.cells
        .iter()
        .map(|cell| {
            let pred = knn_predict(&train.features, &train.targets, &cell.features)?;
            let score = prediction_score(&clean, &pred)?;
            Ok(CellScore {
                family: cell.family,
                severity: cell.severity,
                score,
                passed: passes(classification, score),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub scaling_factor: f64,
    pub seed: u64,
    pub cells: Vec<CellScore>,
    /// Every scanned factor with whether it passed.
    pub scanned: Vec<(f64, bool)>,
}

/// `2^(k/4)` for `k` from the top of the grid down.
pub fn scale_grid() -> Vec<f64> {
    (SCALE_GRID_BOTTOM..=SCALE_GRID_TOP)
        .rev()
        .map(|k| 2f64.powf(k as f64 / 4.0))
        .collect()
}

fn worst(classification: bool, cells: &[CellScore]) -> &CellScore {
    cells
        .iter()
        .max_by(|a, b| {
            let (x, y) = if classification {
                (b.score, a.score)
            } else {
                (a.score, b.score)
            };
            x.total_cmp(&y)
        })
        .expect("25 cells")
}

/// Largest factor on [`scale_grid`] whose corrupted test split passes the
/// 1-NN gate in every cell.
pub fn calibrate_scaling(train: &Partition, test: &Partition, seed: u64) -> Result<Calibration> {
    let classification = train.targets.labels().is_some();
    let mut scanned = Vec::new();
    let mut last_cells = Vec::new();
    for s in scale_grid() {
        let set = generate("", &test.features, s, seed)?;
        let cells = score_set(train, test, &set)?;
        let ok = cells.iter().all(|c| c.passed);
        scanned.push((s, ok));
        if ok {
            return Ok(Calibration {
                scaling_factor: s,
                seed,
                cells,
                scanned,
            });
        }
        last_cells = cells;
    }
    let w = worst(classification, &last_cells);
    Err(Error::Calibration {
        family: w.family.name().to_string(),
        severity: w.severity,
        score: w.score,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestCell {
    pub family: Family,
    pub severity: usize,
    pub magnitude: f64,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionManifest {
    pub dataset: String,
    pub scaling_factor: f64,
    pub seed: u64,
    pub feature_names: Vec<String>,
    pub cells: Vec<ManifestCell>,
}

pub fn cell_file_name(family: Family, severity: usize) -> String {
    format!("{}_{severity}.csv", family.name())
}

impl CorruptionSet {
    pub fn cell(&self, family: Family, severity: usize) -> Option<&CorruptedCell> {
        self.cells.iter().find(|c| c.family == family && c.severity == severity)
    }

    /// Writes one CSV per cell plus `manifest.json`.
    pub fn write_dir(&self, dir: &Path, feature_names: &[String]) -> Result<CorruptionManifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let mut cells = Vec::new();
        for c in &self.cells {
            let file = cell_file_name(c.family, c.severity);
            let mut w = csv::Writer::from_path(dir.join(&file))?;
            w.write_record(feature_names)?;
            for r in 0..c.features.rows() {
                w.write_record(c.features.row(r).iter().map(|v| format!("{v}")))?;
            }
            w.flush().map_err(|e| Error::io("writing corruption CSV", e))?;
            cells.push(ManifestCell {
                family: c.family,
                severity: c.severity,
                magnitude: c.magnitude,
                file,
            });
        }
        let manifest = CorruptionManifest {
            dataset: self.dataset.clone(),
            scaling_factor: self.scaling_factor,
            seed: self.seed,
            feature_names: feature_names.to_vec(),
            cells,
        };
        let path = dir.join("corruptions.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_scale_is_identity() {
        let mut rng = Rng::new(0);
        let x = rng.gaussian_tensor(5, 3, 0.0, 1.0).unwrap();
        for f in Family::ALL {
            for l in 1..=5 {
                assert_eq!(corrupt(&x, f, l, 0.0, &mut rng).unwrap(), x);
            }
        }
    }

    #[test]
    fn bad_inputs() {
        let x = Tensor::zeros(1, 1);
        let mut rng = Rng::new(0);
        assert!(corrupt(&x, Family::AdditiveGaussian, 0, 1.0, &mut rng).is_err());
        assert!(corrupt(&x, Family::BernoulliZero, 5, 5.0, &mut rng).is_err());
    }

    #[test]
    fn knn_hand_instance() {
        let corpus = Tensor::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.0, 3.0]]).unwrap();
        let labels = Targets::Labels {
            labels: vec![0, 1, 2],
            classes: 3,
        };
        let q = Tensor::from_rows(&[[0.9, 0.1], [0.1, 2.0], [0.5, 0.0], [0.0, 0.0]]).unwrap();
        let p = knn_predict(&corpus, &labels, &q).unwrap();
        // The third query is equidistant to rows 0 and 1; the lower index wins.
        assert_eq!(p.labels().unwrap(), &[1, 2, 0, 0]);
    }

    #[test]
    fn grid_starts_at_four() {
        let g = scale_grid();
        assert_eq!(g[0], 4.0);
        assert!(g.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(g.len(), 89);
    }
}
