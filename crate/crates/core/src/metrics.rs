//! Evaluation metrics, rank tables and Kendall's tau.
//!
//! Classification reports error (%), ECE (%, 10 equal-width bins) and
//! categorical NLL. Regression reports MSE and Gaussian NLL in normalised
//! target space. Every metric is lower-is-better.
//!
//! CSV layouts:
//! * metrics: `dataset,method,seed,split,family,severity,error,ece,nll,mse`,
//!   where `split` is `val`, `test`, `ood` (one row per corruption cell) or
//!   `ood_mean`; cells that do not apply are empty.
//! * ranks: `dataset,metric,method,value,rank,delta`.
//! * rank averages: `metric,method,mean_rank,mean_delta,datasets`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{regression_loss, softmax, split_regression_output, MlpModel, Task, PROB_EPS};
use crate::tensor::Tensor;

pub const ECE_BINS: usize = 10;

/// Compensated (Neumaier) summation.
fn stable_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn check_probs(probs: &Tensor, labels: &[usize]) -> Result<()> {
    if probs.rows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} probability rows, {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    if probs.rows() == 0 {
        return Err(Error::InsufficientData("no samples to evaluate".into()));
    }
    for r in 0..probs.rows() {
        let s: f64 = probs.row(r).iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!("probability row {r} sums to {s}")));
        }
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= probs.cols()) {
        return Err(Error::Validation(format!(
            "label {bad} out of range for {} classes",
            probs.cols()
        )));
    }
    Ok(())
}

/// Index and value of the largest entry; ties go to the lowest index.
fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// `100 · (1 − accuracy)` of the argmax prediction.
pub fn error_rate(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    check_probs(probs, labels)?;
    let wrong = labels
        .iter()
        .enumerate()
        .filter(|&(r, &l)| argmax(probs.row(r)).0 != l)
        .count();
    Ok(100.0 * wrong as f64 / labels.len() as f64)
}

/// Bin of a confidence on the edges `(0, 1/b], (1/b, 2/b], …`; zero joins
/// the first bin.
pub fn ece_bin(confidence: f64, bins: usize) -> usize {
    let b = (confidence * bins as f64).ceil() as isize - 1;
    b.clamp(0, bins as isize - 1) as usize
}

/// Expected calibration error in percent.
pub fn ece(probs: &Tensor, labels: &[usize], bins: usize) -> Result<f64> {
    check_probs(probs, labels)?;
    if bins == 0 {
        return Err(Error::Parameter("ECE needs at least one bin".into()));
    }
    let mut conf: Vec<Vec<f64>> = vec![Vec::new(); bins];
    let mut correct = vec![0usize; bins];
    for (r, &l) in labels.iter().enumerate() {
        let (pred, c) = argmax(probs.row(r));
        let b = ece_bin(c, bins);
        conf[b].push(c);
        if pred == l {
            correct[b] += 1;
        }
    }
    let n = labels.len() as f64;
    let gaps = conf
        .iter()
        .zip(&correct)
        .map(|(c, &k)| (k as f64 - stable_sum(c.iter().copied())).abs());
    Ok(100.0 * stable_sum(gaps) / n)
}

/// Mean `−ln(p_true + 1e−8)`.
pub fn nll_categorical(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    check_probs(probs, labels)?;
    let total = stable_sum(
        labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -(probs.get(r, l) + PROB_EPS).ln()),
    );
    Ok(total / labels.len() as f64)
}

/// Mean over all entries of `(pred − target)²`.
pub fn mse(pred: &Tensor, targets: &Tensor) -> Result<f64> {
    if pred.shape() != targets.shape() {
        return Err(Error::Dimension(format!(
            "predictions {:?} vs targets {:?}",
            pred.shape(),
            targets.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InsufficientData("no samples to evaluate".into()));
    }
    let sq = pred.data().iter().zip(targets.data()).map(|(a, b)| (a - b) * (a - b));
    Ok(stable_sum(sq) / pred.len() as f64)
}

/// Gaussian NLL per sample with the training clamps.
pub fn gaussian_nll(mean: &Tensor, logvar: &Tensor, targets: &Tensor) -> Result<f64> {
    regression_loss(mean, logvar, targets)
}

/// One evaluation of a model on one set of rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ece: Option<f64>,
    pub nll: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
}

impl Metrics {
    pub fn names(task: Task) -> &'static [&'static str] {
        if task.is_classification() {
            &["error", "ece", "nll"]
        } else {
            &["mse", "nll"]
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "error" => self.error,
            "ece" => self.ece,
            "nll" => Some(self.nll),
            "mse" => self.mse,
            _ => None,
        }
    }

    /// Field-wise mean of several evaluations.
    pub fn mean(all: &[Metrics]) -> Result<Metrics> {
        if all.is_empty() {
            return Err(Error::InsufficientData("nothing to average".into()));
        }
        let n = all.len() as f64;
        let avg = |f: fn(&Metrics) -> Option<f64>| -> Option<f64> {
            all.iter()
                .map(f)
                .collect::<Option<Vec<f64>>>()
                .map(|v| stable_sum(v) / n)
        };
        Ok(Metrics {
            error: avg(|m| m.error),
            ece: avg(|m| m.ece),
            nll: stable_sum(all.iter().map(|m| m.nll)) / n,
            mse: avg(|m| m.mse),
        })
    }
}

/// Clean evaluation of `model` on `features` against dense targets: class
/// indices for classification or target values for regression.
pub fn evaluate(model: &MlpModel, features: &Tensor, targets: &crate::data::Targets) -> Result<Metrics> {
    let out = model.predict(features)?;
    evaluate_output(model.task(), &out, targets)
}

pub fn evaluate_output(task: Task, out: &Tensor, targets: &crate::data::Targets) -> Result<Metrics> {
    use crate::data::Targets;
    match (task, targets) {
        (Task::Classification { .. }, Targets::Labels { labels, .. }) => {
            let probs = softmax(out);
            Ok(Metrics {
                error: Some(error_rate(&probs, labels)?),
                ece: Some(ece(&probs, labels, ECE_BINS)?),
                nll: nll_categorical(&probs, labels)?,
                mse: None,
            })
        }
        (Task::Regression { .. }, Targets::Values(y)) => {
            let (mean, logvar) = split_regression_output(out)?;
            Ok(Metrics {
                error: None,
                ece: None,
                nll: gaussian_nll(&mean, &logvar, y)?,
                mse: Some(mse(&mean, y)?),
            })
        }
        _ => Err(Error::Validation(format!(
            "targets do not match a {} task",
            task.name()
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub family: String,
    pub severity: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub method: String,
    pub seed: u64,
    pub task: Task,
    pub val: Metrics,
    pub test: Metrics,
    #[serde(default)]
    pub ood: Vec<CellMetrics>,
    #[serde(default)]
    pub ood_mean: Option<Metrics>,
}

pub const METRICS_CSV_HEADER: [&str; 10] = [
    "dataset", "method", "seed", "split", "family", "severity", "error", "ece", "nll", "mse",
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl MetricsReport {
    pub fn with_ood(mut self, ood: Vec<CellMetrics>) -> Result<Self> {
        self.ood_mean = if ood.is_empty() {
            None
        } else {
            Some(Metrics::mean(&ood.iter().map(|c| c.metrics).collect::<Vec<_>>())?)
        };
        self.ood = ood;
        Ok(self)
    }

    fn rows(&self) -> Vec<[String; 10]> {
        let row = |split: &str, family: &str, severity: String, m: &Metrics| {
            [
                self.dataset.clone(),
                self.method.clone(),
                self.seed.to_string(),
                split.to_string(),
                family.to_string(),
                severity,
                fmt_opt(m.error),
                fmt_opt(m.ece),
                format!("{}", m.nll),
                fmt_opt(m.mse),
            ]
        };
        let mut out = vec![
            row("val", "", String::new(), &self.val),
            row("test", "", String::new(), &self.test),
        ];
        for c in &self.ood {
            out.push(row("ood", &c.family, c.severity.to_string(), &c.metrics));
        }
        if let Some(m) = &self.ood_mean {
            out.push(row("ood_mean", "", String::new(), m));
        }
        out
    }

    pub fn write_csv<W: Write>(reports: &[MetricsReport], w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(METRICS_CSV_HEADER)?;
        for r in reports {
            for row in r.rows() {
                wtr.write_record(&row)?;
            }
        }
        wtr.flush().map_err(|e| Error::io("writing metrics CSV", e))?;
        Ok(())
    }
}

/// Average ranks (1 = best) with ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64], lower_is_better: bool) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let c = values[a].total_cmp(&values[b]);
        if lower_is_better {
            c
        } else {
            c.reverse()
        }
    });
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// One method's value for one dataset and metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultEntry {
    pub dataset: String,
    pub metric: String,
    pub method: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub dataset: String,
    pub metric: String,
    pub method: String,
    pub value: f64,
    pub rank: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankAverage {
    pub metric: String,
    pub method: String,
    pub mean_rank: f64,
    pub mean_delta: f64,
    pub datasets: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub baseline: String,
    pub rows: Vec<RankRow>,
    pub averages: Vec<RankAverage>,
}

/// Ranks every method within each (dataset, metric) column and reports
/// `rank(method) − rank(baseline)`, then averages over datasets per metric.
/// Every column must contain the baseline and no method twice.
pub fn rank_vs_baseline(results: &[ResultEntry], baseline: &str, lower_is_better: bool) -> Result<RankTable> {
    let mut columns: BTreeMap<(String, String), Vec<&ResultEntry>> = BTreeMap::new();
    for r in results {
        if !r.value.is_finite() {
            return Err(Error::Validation(format!(
                "{} on {}/{} is not finite",
                r.method, r.dataset, r.metric
            )));
        }
        columns
            .entry((r.dataset.clone(), r.metric.clone()))
            .or_default()
            .push(r);
    }
    if columns.is_empty() {
        return Err(Error::InsufficientData("no results to rank".into()));
    }
    let mut rows = Vec::new();
    for ((dataset, metric), entries) in &columns {
        let mut seen = BTreeSet::new();
        for e in entries {
            if !seen.insert(e.method.as_str()) {
                return Err(Error::Validation(format!(
                    "{} appears twice in {dataset}/{metric}",
                    e.method
                )));
            }
        }
        let values: Vec<f64> = entries.iter().map(|e| e.value).collect();
        let ranks = average_ranks(&values, lower_is_better);
        let base = entries
            .iter()
            .position(|e| e.method == baseline)
            .ok_or_else(|| Error::Validation(format!("baseline `{baseline}` missing from {dataset}/{metric}")))?;
        for (e, &rank) in entries.iter().zip(&ranks) {
            rows.push(RankRow {
                dataset: dataset.clone(),
                metric: metric.clone(),
                method: e.method.clone(),
                value: e.value,
                rank,
                delta: rank - ranks[base],
            });
        }
    }
    let mut acc: BTreeMap<(String, String), (f64, f64, usize)> = BTreeMap::new();
    for r in &rows {
        let a = acc.entry((r.metric.clone(), r.method.clone())).or_insert((0.0, 0.0, 0));
        a.0 += r.rank;
        a.1 += r.delta;
        a.2 += 1;
    }
    let averages = acc
        .into_iter()
        .map(|((metric, method), (rank, delta, n))| RankAverage {
            metric,
            method,
            mean_rank: rank / n as f64,
            mean_delta: delta / n as f64,
            datasets: n,
        })
        .collect();
    Ok(RankTable {
        baseline: baseline.to_string(),
        rows,
        averages,
    })
}

impl RankTable {
    pub fn write_rows_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wtr.serialize(r)?;
        }
        wtr.flush().map_err(|e| Error::io("writing rank CSV", e))?;
        Ok(())
    }

    pub fn write_averages_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for r in &self.averages {
            wtr.serialize(r)?;
        }
        wtr.flush().map_err(|e| Error::io("writing rank CSV", e))?;
        Ok(())
    }
}

/// Kendall's tau-b between two scorings of the same items.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("{} vs {} ranked items", a.len(), b.len())));
    }
    let n = a.len();
    let (mut concordant, mut discordant, mut ties_a, mut ties_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let da = a[i].total_cmp(&a[j]) as i64;
            let db = b[i].total_cmp(&b[j]) as i64;
            if da == 0 {
                ties_a += 1;
            }
            if db == 0 {
                ties_b += 1;
            }
            match da * db {
                1 => concordant += 1,
                -1 => discordant += 1,
                _ => {}
            }
        }
    }
    let pairs = (n * n.saturating_sub(1) / 2) as i64;
    let denom = (((pairs - ties_a) * (pairs - ties_b)) as f64).sqrt();
    if denom == 0.0 {
        return Err(Error::InsufficientData(
            "Kendall tau is undefined when either ranking is constant".into(),
        ));
    }
    Ok((concordant - discordant) as f64 / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_follow_right_closed_edges() {
        assert_eq!(ece_bin(0.0, 10), 0);
        assert_eq!(ece_bin(0.1, 10), 0);
        assert_eq!(ece_bin(0.1000001, 10), 1);
        assert_eq!(ece_bin(0.55, 10), 5);
        assert_eq!(ece_bin(1.0, 10), 9);
    }

    #[test]
    fn error_counts() {
        let p = Tensor::from_rows(&[[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]]).unwrap();
        assert_eq!(error_rate(&p, &[0, 1, 0, 1]).unwrap(), 0.0);
        assert_eq!(error_rate(&p, &[1, 0, 1, 0]).unwrap(), 100.0);
        assert_eq!(error_rate(&p, &[0, 1, 1, 1]).unwrap(), 25.0);
        let tie = Tensor::from_rows(&[[0.5, 0.5]]).unwrap();
        assert_eq!(error_rate(&tie, &[0]).unwrap(), 0.0);
    }

    #[test]
    fn nll_uniform_ten() {
        let p = Tensor::full(3, 10, 0.1);
        assert!((nll_categorical(&p, &[0, 4, 9]).unwrap() - 10f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn mse_offset() {
        let a = Tensor::from_rows(&[[1.0], [2.0]]).unwrap();
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &a.map(|v| v + 2.0)).unwrap(), 4.0);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 2.0], true), vec![3.0, 1.0, 2.0]);
        assert_eq!(average_ranks(&[1.0, 1.0, 2.0], true), vec![1.5, 1.5, 3.0]);
        assert_eq!(average_ranks(&[3.0, 1.0, 2.0], false), vec![1.0, 3.0, 2.0]);
    }

    #[test]
    fn tau_endpoints() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let r = [4.0, 3.0, 2.0, 1.0];
        assert_eq!(kendall_tau(&a, &a).unwrap(), 1.0);
        assert_eq!(kendall_tau(&a, &r).unwrap(), -1.0);
        assert!(kendall_tau(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }
}
