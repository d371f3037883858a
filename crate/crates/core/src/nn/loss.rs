//! Cross-entropy on soft labels and the heteroscedastic Gaussian NLL.
//!
//! Both losses are means over the batch. The Gaussian NLL includes the
//! `½·ln 2π` constant so reported values are proper densities.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Task;

/// Added to softmax probabilities before the logarithm.
pub const PROB_EPS: f64 = 1e-8;
pub const VARIANCE_MIN: f64 = 1e-4;
pub const VARIANCE_MAX: f64 = 1e4;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub fn softmax(logits: &Tensor) -> Tensor {
    softmax_with_temperature(logits, 1.0)
}

/// Row-wise `softmax(logits / temperature)`.
pub fn softmax_with_temperature(logits: &Tensor, temperature: f64) -> Tensor {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / temperature).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn check_soft_targets(logits: &Tensor, targets: &Tensor) -> Result<()> {
    if logits.shape() != targets.shape() {
        return Err(Error::Dimension(format!(
            "logits {:?} vs targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    for r in 0..targets.rows() {
        let s: f64 = targets.row(r).iter().sum();
        if (s - 1.0).abs() > 1e-6 || targets.row(r).iter().any(|&v| v < -1e-12) {
            return Err(Error::Validation(format!(
                "target row {r} is not a probability vector (sums to {s})"
            )));
        }
    }
    Ok(())
}

/// `mean_b −Σ_k t_bk · ln(softmax(logits_b)_k + 1e−8)`.
pub fn classification_loss(logits: &Tensor, targets: &Tensor) -> Result<f64> {
    classification_loss_grad(logits, targets).map(|(l, _)| l)
}

/// Loss and its exact gradient with respect to the logits (the `1e−8`
/// shift included).
pub fn classification_loss_grad(logits: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    check_soft_targets(logits, targets)?;
    let batch = logits.rows() as f64;
    let probs = softmax(logits);
    let mut grad = Tensor::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for r in 0..logits.rows() {
        let p = probs.row(r);
        let t = targets.row(r);
        // With q_k = t_k p_k / (p_k + eps): ∂L/∂z_j = −(q_j − p_j Σ_k q_k) / B
        let mut q_sum = 0.0;
        for (&pk, &tk) in p.iter().zip(t) {
            loss -= tk * (pk + PROB_EPS).ln();
            q_sum += tk * pk / (pk + PROB_EPS);
        }
        let g = grad.row_mut(r);
        for j in 0..p.len() {
            let qj = t[j] * p[j] / (p[j] + PROB_EPS);
            g[j] = -(qj - p[j] * q_sum) / batch;
        }
    }
    Ok((loss / batch, grad))
}

/// Splits a regression output `[mean | logvar]` into its halves.
pub fn split_regression_output(output: &Tensor) -> Result<(Tensor, Tensor)> {
    if !output.cols().is_multiple_of(2) {
        return Err(Error::Dimension(format!(
            "regression output needs an even width, got {}",
            output.cols()
        )));
    }
    let t = output.cols() / 2;
    Ok((output.slice_cols(0, t), output.slice_cols(t, 2 * t)))
}

#[inline]
fn clamped_variance(logvar: f64) -> (f64, bool) {
    let v = logvar.exp();
    if v < VARIANCE_MIN {
        (VARIANCE_MIN, true)
    } else if v > VARIANCE_MAX {
        (VARIANCE_MAX, true)
    } else {
        (v, false)
    }
}

/// `mean_b Σ_t ½(ln v + (y − μ)²/v + ln 2π)` with `v = clamp(exp(logvar), 1e−4, 1e4)`.
pub fn regression_loss(mean: &Tensor, logvar: &Tensor, targets: &Tensor) -> Result<f64> {
    if mean.shape() != targets.shape() || logvar.shape() != targets.shape() {
        return Err(Error::Dimension(format!(
            "mean {:?}, logvar {:?}, targets {:?}",
            mean.shape(),
            logvar.shape(),
            targets.shape()
        )));
    }
    let mut total = 0.0;
    for ((&mu, &lv), &y) in mean.data().iter().zip(logvar.data()).zip(targets.data()) {
        let (v, _) = clamped_variance(lv);
        total += 0.5 * (v.ln() + (y - mu) * (y - mu) / v) + HALF_LN_2PI;
    }
    Ok(total / targets.rows() as f64)
}

/// Loss and gradient with respect to the full `[mean | logvar]` output.
/// The log-variance gradient is zero where the variance is clamped.
pub fn regression_loss_grad(output: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    let (mean, logvar) = split_regression_output(output)?;
    let loss = regression_loss(&mean, &logvar, targets)?;
    let batch = targets.rows() as f64;
    let t = targets.cols();
    let mut grad = Tensor::zeros(output.rows(), output.cols());
    for r in 0..targets.rows() {
        for c in 0..t {
            let mu = mean.get(r, c);
            let y = targets.get(r, c);
            let (v, clamped) = clamped_variance(logvar.get(r, c));
            grad.set(r, c, (mu - y) / v / batch);
            let g_lv = if clamped {
                0.0
            } else {
                0.5 * (1.0 - (y - mu) * (y - mu) / v) / batch
            };
            grad.set(r, t + c, g_lv);
        }
    }
    Ok((loss, grad))
}

/// Task-appropriate loss. Classification targets are soft labels
/// (`batch x K`), regression targets are values (`batch x T`).
pub fn loss_and_grad(task: Task, output: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    match task {
        Task::Classification { .. } => classification_loss_grad(output, targets),
        Task::Regression { .. } => regression_loss_grad(output, targets),
    }
}
