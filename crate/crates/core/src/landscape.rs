//! Metric landscapes around a trained network.
//!
//! * 1-D: `θ(α) = (1 − α)·θ_final + α·θ_init` on evenly spaced `α ∈ [0, 1]`.
//! * 2-D: principal directions of the per-epoch trajectory centred at the
//!   final parameters. Each direction is rescaled block by block (one block
//!   per weight or bias tensor) so the block norm matches that block of
//!   `θ_final`. A trajectory point `θ_e` projects to
//!   `α_e = (θ_e − θ_final)·u₁ / (u₁·d₁)` and likewise for `β_e`, where `uₖ`
//!   is the unit principal direction and `dₖ` its rescaled version. The grid
//!   spans the projections' bounding box widened by a margin.
//!
//! Principal directions come from the eigen-decomposition of the small Gram
//! matrix `M·Mᵀ` (one row per trajectory point), solved with cyclic Jacobi
//! rotations.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Trajectory;
use crate::data::Partition;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Metrics};
use crate::nn::{MlpModel, ParamShape, Task};

pub const POINTS_1D: usize = 20;
pub const GRID_SIDE: usize = 10;
pub const GRID_MARGIN: f64 = 0.2;

/// Evaluates parameter vectors on the in-distribution split and a list of
/// named corrupted copies.
pub struct Evaluator<'a> {
    pub task: Task,
    pub manifest: &'a [ParamShape],
    pub id: &'a Partition,
    pub ood: Vec<(String, Partition)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub id: Metrics,
    /// Mean over the corrupted copies, if any were given.
    pub ood_mean: Option<Metrics>,
}

impl Evaluator<'_> {
    pub fn model(&self, params: &[f64]) -> Result<MlpModel> {
        MlpModel::from_manifest(self.manifest, params, self.task)
    }

    pub fn evaluate(&self, params: &[f64]) -> Result<PointMetrics> {
        let m = self.model(params)?;
        let ood = self
            .ood
            .iter()
            .map(|(_, p)| evaluate(&m, &p.features, &p.targets))
            .collect::<Result<Vec<_>>>()?;
        Ok(PointMetrics {
            id: evaluate(&m, &self.id.features, &self.id.targets)?,
            ood_mean: if ood.is_empty() {
                None
            } else {
                Some(Metrics::mean(&ood)?)
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapePoint {
    pub alpha: f64,
    pub beta: f64,
    pub metrics: PointMetrics,
}

/// `n` evenly spaced values on `[0, 1]` with exact endpoints.
pub fn unit_alphas(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// Point on the segment; `α = 0` and `α = 1` return the endpoints exactly,
/// and coordinates shared by both endpoints are kept bitwise.
pub fn interpolate(final_params: &[f64], init: &[f64], alpha: f64) -> Vec<f64> {
    if alpha == 0.0 {
        return final_params.to_vec();
    }
    if alpha == 1.0 {
        return init.to_vec();
    }
    final_params
        .iter()
        .zip(init)
        .map(|(&f, &i)| if f == i { f } else { (1.0 - alpha) * f + alpha * i })
        .collect()
}

pub fn interpolate_1d(
    final_params: &[f64],
    init: &[f64],
    evaluator: &Evaluator,
    n_points: usize,
) -> Result<Vec<LandscapePoint>> {
    if final_params.len() != init.len() {
        return Err(Error::Dimension("endpoints differ in length".into()));
    }
    unit_alphas(n_points)
        .into_iter()
        .map(|alpha| {
            Ok(LandscapePoint {
                alpha,
                beta: 0.0,
                metrics: evaluator.evaluate(&interpolate(final_params, init, alpha))?,
            })
        })
        .collect()
}

/// Eigenvalues (descending) and eigenvectors (as columns, row-major `n×n`)
/// of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigen(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != n * n {
        return Err(Error::Dimension(format!("{} values for a {n}x{n} matrix", a.len())));
    }
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| m[b * n + b].total_cmp(&m[a * n + a]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors[r * n + col] = v[r * n + src];
        }
    }
    Ok((values, vectors))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Rescales each manifest block of `d` to the norm of the same block of
/// `reference`. Blocks of `d` with zero norm stay zero.
pub fn normalize_blockwise(d: &[f64], reference: &[f64], manifest: &[ParamShape]) -> Result<Vec<f64>> {
    if d.len() != reference.len() || manifest.iter().map(ParamShape::len).sum::<usize>() != d.len() {
        return Err(Error::Dimension("direction, reference and manifest disagree".into()));
    }
    let mut out = d.to_vec();
    let mut off = 0;
    for shape in manifest {
        let range = off..off + shape.len();
        let dn = norm(&d[range.clone()]);
        if dn > 0.0 {
            let s = norm(&reference[range.clone()]) / dn;
            out[range].iter_mut().for_each(|v| *v *= s);
        }
        off += shape.len();
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    /// Unit principal directions.
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    /// Block-normalised directions used for the grid.
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    /// Singular values of the centred trajectory, descending.
    pub singular_values: Vec<f64>,
    /// `(α_e, β_e)` for the initial point followed by every epoch.
    pub projections: Vec<(f64, f64)>,
}

/// Unit vector orthogonal to `u` along the coordinate where `u` is smallest.
fn orthogonal_unit(u: &[f64]) -> Vec<f64> {
    let k = (0..u.len())
        .min_by(|&a, &b| u[a].abs().total_cmp(&u[b].abs()))
        .unwrap_or(0);
    let mut e = vec![0.0; u.len()];
    e[k] = 1.0;
    let c = dot(&e, u);
    e.iter_mut().zip(u).for_each(|(x, y)| *x -= c * y);
    let n = norm(&e);
    e.iter_mut().for_each(|x| *x /= n);
    e
}

pub fn pca_directions(trajectory: &Trajectory) -> Result<PcaResult> {
    let points = trajectory.all();
    if points.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "PCA needs at least 3 trajectory points, got {}",
            points.len()
        )));
    }
    let center = trajectory.final_params();
    let p = center.len();
    if p < 2 {
        return Err(Error::InsufficientData("PCA needs at least two parameters".into()));
    }
    let rows: Vec<Vec<f64>> = points
        .iter()
        .map(|t| t.iter().zip(center).map(|(a, b)| a - b).collect())
        .collect();
    let n = rows.len();
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let g = dot(&rows[i], &rows[j]);
            gram[i * n + j] = g;
            gram[j * n + i] = g;
        }
    }
    let (values, vectors) = symmetric_eigen(&gram, n)?;
    let singular_values: Vec<f64> = values.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let tol = singular_values[0] * 1e-10;
    let direction = |k: usize| -> Option<Vec<f64>> {
        let s = singular_values[k];
        if s <= tol || s == 0.0 {
            return None;
        }
        let mut u = vec![0.0; p];
        for (i, row) in rows.iter().enumerate() {
            let w = vectors[i * n + k] / s;
            u.iter_mut().zip(row).for_each(|(a, b)| *a += w * b);
        }
        let un = norm(&u);
        u.iter_mut().for_each(|a| *a /= un);
        Some(u)
    };
    let u1 = direction(0).ok_or_else(|| Error::InsufficientData("trajectory never leaves its final point".into()))?;
    let u2 = match direction(1) {
        Some(mut u) => {
            // Re-orthogonalise against rounding.
            let c = dot(&u, &u1);
            u.iter_mut().zip(&u1).for_each(|(a, b)| *a -= c * b);
            let un = norm(&u);
            u.iter_mut().for_each(|a| *a /= un);
            u
        }
        None => orthogonal_unit(&u1),
    };
    let d1 = normalize_blockwise(&u1, center, &trajectory.manifest)?;
    let d2 = normalize_blockwise(&u2, center, &trajectory.manifest)?;
    let (s1, s2) = (dot(&u1, &d1), dot(&u2, &d2));
    let coord = |row: &[f64], u: &[f64], s: f64| if s == 0.0 { 0.0 } else { dot(row, u) / s };
    let projections = rows.iter().map(|r| (coord(r, &u1, s1), coord(r, &u2, s2))).collect();
    Ok(PcaResult {
        u1,
        u2,
        d1,
        d2,
        singular_values,
        projections,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub side: usize,
    pub margin: f64,
    /// Shift the grid so that `(0, 0)` is one of its nodes.
    pub anchor_origin: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            side: GRID_SIDE,
            margin: GRID_MARGIN,
            anchor_origin: true,
        }
    }
}

/// Axis nodes covering `[lo, hi]` widened by `margin` on each side.
pub fn axis(lo: f64, hi: f64, spec: &GridSpec) -> Vec<f64> {
    let side = spec.side.max(1);
    let mut width = hi - lo;
    let (mut lo, mut hi) = (lo, hi);
    if width <= 0.0 {
        let half = lo.abs().max(1.0) * spec.margin.max(0.05);
        lo -= half;
        hi += half;
        width = hi - lo;
    } else {
        lo -= spec.margin * width;
        hi += spec.margin * width;
        width = hi - lo;
    }
    if side == 1 {
        return vec![if spec.anchor_origin { 0.0 } else { lo }];
    }
    let step = width / (side - 1) as f64;
    if spec.anchor_origin {
        let k0 = (lo / step).round() as i64;
        (0..side as i64).map(|i| (k0 + i) as f64 * step).collect()
    } else {
        (0..side)
            .map(|i| if i + 1 == side { hi } else { lo + i as f64 * step })
            .collect()
    }
}

pub fn grid_point(center: &[f64], d1: &[f64], d2: &[f64], alpha: f64, beta: f64) -> Vec<f64> {
    if alpha == 0.0 && beta == 0.0 {
        return center.to_vec();
    }
    center
        .iter()
        .zip(d1)
        .zip(d2)
        .map(|((c, a), b)| c + alpha * a + beta * b)
        .collect()
}

pub fn grid_2d(center: &[f64], pca: &PcaResult, evaluator: &Evaluator, spec: &GridSpec) -> Result<Vec<LandscapePoint>> {
    let bounds = |f: fn(&(f64, f64)) -> f64| {
        pca.projections
            .iter()
            .map(f)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (alo, ahi) = bounds(|p| p.0);
    let (blo, bhi) = bounds(|p| p.1);
    let alphas = axis(alo, ahi, spec);
    let betas = axis(blo, bhi, spec);
    let mut out = Vec::with_capacity(alphas.len() * betas.len());
    for &beta in &betas {
        for &alpha in &alphas {
            out.push(LandscapePoint {
                alpha,
                beta,
                metrics: evaluator.evaluate(&grid_point(center, &pca.d1, &pca.d2, alpha, beta))?,
            });
        }
    }
    Ok(out)
}

const METRIC_COLUMNS: [&str; 4] = ["error", "ece", "nll", "mse"];

/// One row per point: coordinates, in-distribution metrics, then the mean
/// over corrupted copies. Metrics that do not apply to the task are empty.
pub fn write_points_csv<W: std::io::Write>(points: &[LandscapePoint], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["alpha".to_string(), "beta".to_string()];
    for prefix in ["id", "ood"] {
        header.extend(METRIC_COLUMNS.iter().map(|m| format!("{prefix}_{m}")));
    }
    wtr.write_record(&header)?;
    let cells = |m: Option<&Metrics>| -> Vec<String> {
        METRIC_COLUMNS
            .iter()
            .map(|name| m.and_then(|m| m.get(name)).map(|v| format!("{v}")).unwrap_or_default())
            .collect()
    };
    for p in points {
        let mut row = vec![format!("{}", p.alpha), format!("{}", p.beta)];
        row.extend(cells(Some(&p.metrics.id)));
        row.extend(cells(p.metrics.ood_mean.as_ref()));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io("writing landscape CSV", e))?;
    Ok(())
}
