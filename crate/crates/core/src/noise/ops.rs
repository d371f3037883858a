//! The individual noise operators. Each one returns its payload untouched,
//! without drawing from its generator, when its hyperparameters are at the
//! identity setting.

use crate::error::{Error, Result};
use crate::nn::{backward, forward, softmax_with_temperature, Gradients, MlpModel, NoHooks, Perturbed};
use crate::rng::{sample_beta, sample_gaussian, sample_uniform, Rng};
use crate::tensor::Tensor;

use super::{
    DeltaActivationGaussian, DeltaCMixUp, DeltaDropConnect, DeltaDropout, DeltaGradientGaussian, DeltaInputGaussian,
    DeltaLabelSmoothing, DeltaMixUp, DeltaModelSP, DeltaOds, DeltaWeightGaussian,
};

fn additive(x: &Tensor, std: f64, rng: &mut Rng) -> Result<Tensor> {
    if std == 0.0 {
        return Ok(x.clone());
    }
    let noise = sample_gaussian(rng, x.rows(), x.cols(), 0.0, std)?;
    x.add(&noise)
}

/// `x + ε`, `ε ~ N(0, std²)` elementwise.
pub fn input_gaussian(x: &Tensor, d: &DeltaInputGaussian, rng: &mut Rng) -> Result<Tensor> {
    additive(x, d.std, rng)
}

/// Output-diversified sampling: one normalised gradient step of length
/// `epsilon` along `∇_x w·softmax(f(x)/T)` with `w ~ U(−1, 1)^K` per sample.
pub fn input_ods(x: &Tensor, model: &MlpModel, d: &DeltaOds, rng: &mut Rng) -> Result<Tensor> {
    if !model.task().is_classification() {
        return Err(Error::Unsupported("input_ods requires a classification task".into()));
    }
    if d.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let w = sample_uniform(rng, x.rows(), model.output_dim(), -1.0, 1.0)?;
    let g = ods_direction(x, model, &w, d.temperature)?;
    let mut out = x.clone();
    for r in 0..x.rows() {
        let grow = g.row(r);
        let norm = grow.iter().map(|v| v * v).sum::<f64>().sqrt();
        let step = d.epsilon / (norm + 1e-12);
        for (o, gv) in out.row_mut(r).iter_mut().zip(grow) {
            *o += step * gv;
        }
    }
    Ok(out)
}

/// `∇_x Σ_b w_b·softmax(f(x_b)/T)`, one row per sample.
pub fn ods_direction(x: &Tensor, model: &MlpModel, w: &Tensor, temperature: f64) -> Result<Tensor> {
    let (logits, trace) = forward(model, x, &mut NoHooks)?;
    if w.shape() != logits.shape() {
        return Err(Error::Dimension(format!(
            "ODS weights {:?} vs logits {:?}",
            w.shape(),
            logits.shape()
        )));
    }
    let s = softmax_with_temperature(&logits, temperature);
    let mut up = Tensor::zeros(s.rows(), s.cols());
    for r in 0..s.rows() {
        let (sr, wr) = (s.row(r), w.row(r));
        let ws: f64 = sr.iter().zip(wr).map(|(a, b)| a * b).sum();
        for (k, u) in up.row_mut(r).iter_mut().enumerate() {
            *u = sr[k] * (wr[k] - ws) / temperature;
        }
    }
    Ok(backward(model, &trace, &up)?.input)
}

/// Mixes every row with the row `partners[i]` using weight `lambda`.
pub fn mix_pairs(x: &Tensor, y: &Tensor, lambda: f64, partners: &[usize]) -> Result<(Tensor, Tensor)> {
    if x.rows() != y.rows() || partners.len() != x.rows() {
        return Err(Error::Dimension(format!(
            "mixing {} inputs, {} targets, {} partners",
            x.rows(),
            y.rows(),
            partners.len()
        )));
    }
    if lambda == 1.0 {
        return Ok((x.clone(), y.clone()));
    }
    let mix = |t: &Tensor| -> Result<Tensor> {
        let other = t.select_rows(partners)?;
        t.zip_map(&other, "mixing", |a, b| lambda * a + (1.0 - lambda) * b)
    };
    Ok((mix(x)?, mix(y)?))
}

fn mixing_weight(alpha: f64, rng: &mut Rng) -> Result<f64> {
    sample_beta(rng, alpha, alpha)
}

/// MixUp with `λ ~ Beta(α, α)` and partners from a random permutation.
pub fn mixup(x: &Tensor, y: &Tensor, d: &DeltaMixUp, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    if d.alpha == 0.0 || x.rows() < 2 {
        return Ok((x.clone(), y.clone()));
    }
    let lambda = mixing_weight(d.alpha, rng)?;
    let partners = rng.permutation(x.rows());
    mix_pairs(x, y, lambda, &partners)
}

/// Row `i` holds the probabilities of choosing each `j` as the partner of
/// anchor `i`: `∝ exp(−‖y_i − y_j‖² / 2σ²)` over `j ≠ i`. Weights are
/// computed relative to the largest kernel value; when every relative weight
/// is within `1e−12` of 1 the row is exactly uniform.
pub fn cmixup_partner_probs(y: &Tensor, sigma: f64) -> Result<Vec<Vec<f64>>> {
    let n = y.rows();
    if n < 2 {
        return Err(Error::Parameter("cmixup needs at least two rows".into()));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let logk: Vec<f64> = (0..n)
            .map(|j| {
                if j == i {
                    f64::NEG_INFINITY
                } else {
                    let d2: f64 = y.row(i).iter().zip(y.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                    -d2 / (2.0 * sigma * sigma)
                }
            })
            .collect();
        let max = logk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let rel: Vec<f64> = logk.iter().map(|&l| (l - max).exp()).collect();
        let flat = rel.iter().enumerate().all(|(j, &w)| j == i || (1.0 - w) <= 1e-12);
        let row = if flat {
            (0..n)
                .map(|j| if j == i { 0.0 } else { 1.0 / (n - 1) as f64 })
                .collect()
        } else {
            let total: f64 = rel.iter().sum();
            rel.iter().map(|w| w / total).collect()
        };
        out.push(row);
    }
    Ok(out)
}

fn draw_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    let mut last = 0;
    for (j, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = j;
            if u < acc {
                return j;
            }
        }
    }
    last
}

/// CMixUp: as MixUp, but each anchor's partner is drawn from a Gaussian
/// kernel on target distance within the batch.
pub fn cmixup(x: &Tensor, y: &Tensor, d: &DeltaCMixUp, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    if d.alpha == 0.0 || x.rows() < 2 {
        return Ok((x.clone(), y.clone()));
    }
    let lambda = mixing_weight(d.alpha, rng)?;
    let probs = cmixup_partner_probs(y, d.sigma)?;
    let partners: Vec<usize> = probs.iter().map(|p| draw_categorical(p, rng)).collect();
    mix_pairs(x, y, lambda, &partners)
}

/// `(1 − s)·y + s/K`.
pub fn label_smoothing(y: &Tensor, d: &DeltaLabelSmoothing) -> Tensor {
    if d.smoothing == 0.0 {
        return y.clone();
    }
    let k = y.cols() as f64;
    y.map(|v| (1.0 - d.smoothing) * v + d.smoothing / k)
}

pub fn activation_gaussian(z: Tensor, d: &DeltaActivationGaussian, rng: &mut Rng) -> Result<Perturbed> {
    let value = if d.std == 0.0 { z } else { additive(&z, d.std, rng)? };
    Ok(Perturbed {
        value,
        grad_scale: None,
    })
}

fn inverted_mask(t: Tensor, rate: f64, what: &str, rng: &mut Rng) -> Result<Perturbed> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!("{what} rate must lie in [0, 1), got {rate}")));
    }
    if rate == 0.0 {
        return Ok(Perturbed {
            value: t,
            grad_scale: None,
        });
    }
    let keep = 1.0 / (1.0 - rate);
    let mut scale = Tensor::zeros(t.rows(), t.cols());
    for s in scale.data_mut() {
        *s = if rng.uniform() < rate { 0.0 } else { keep };
    }
    let value = t.hadamard(&scale)?;
    Ok(Perturbed {
        value,
        grad_scale: Some(scale),
    })
}

/// Inverted dropout; the scaled mask is returned for the backward pass.
pub fn dropout(z: Tensor, d: &DeltaDropout, rng: &mut Rng) -> Result<Perturbed> {
    inverted_mask(z, d.rate, "dropout", rng)
}

pub fn weight_gaussian(w: &Tensor, d: &DeltaWeightGaussian, rng: &mut Rng) -> Result<Perturbed> {
    Ok(Perturbed {
        value: additive(w, d.std, rng)?,
        grad_scale: None,
    })
}

pub fn dropconnect(w: &Tensor, d: &DeltaDropConnect, rng: &mut Rng) -> Result<Perturbed> {
    inverted_mask(w.clone(), d.rate, "drop_connect", rng)
}

/// `η / (1 + t)^γ`.
pub fn gradient_noise_variance(d: &DeltaGradientGaussian, step: u64) -> f64 {
    d.eta / (1.0 + step as f64).powf(d.gamma)
}

/// Adds `N(0, σ_t²)` to every parameter gradient.
pub fn gradient_gaussian(grads: &mut Gradients, d: &DeltaGradientGaussian, step: u64, rng: &mut Rng) -> Result<()> {
    if d.eta == 0.0 {
        return Ok(());
    }
    let std = gradient_noise_variance(d, step).sqrt();
    for g in grads.params_mut() {
        let noise = sample_gaussian(rng, g.rows(), g.cols(), 0.0, std)?;
        g.add_assign(&noise)?;
    }
    Ok(())
}

/// Whether shrink-and-perturb is scheduled after 1-based epoch `epoch`.
pub fn model_noise_due(d: &DeltaModelSP, epoch: usize, total_epochs: usize) -> bool {
    d.frequency > 0 && epoch.is_multiple_of(d.frequency as usize) && 4 * epoch <= 3 * total_epochs
}

/// `θ ← shrink·θ + N(0, std²)` over every weight and bias when scheduled.
/// Returns whether the model was touched.
pub fn shrink_perturb(
    model: &mut MlpModel,
    d: &DeltaModelSP,
    epoch: usize,
    total_epochs: usize,
    rng: &mut Rng,
) -> Result<bool> {
    if !model_noise_due(d, epoch, total_epochs) || (d.shrink == 1.0 && d.std == 0.0) {
        return Ok(false);
    }
    for layer in model.layers_mut() {
        for t in [&mut layer.weight, &mut layer.bias] {
            if d.shrink != 1.0 {
                t.scale_assign(d.shrink);
            }
            if d.std != 0.0 {
                let noise = sample_gaussian(rng, t.rows(), t.cols(), 0.0, d.std)?;
                t.add_assign(&noise)?;
            }
        }
    }
    Ok(true)
}
