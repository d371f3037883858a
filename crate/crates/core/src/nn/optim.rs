use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Gradients, MlpModel};

pub const MOMENTUM: f64 = 0.9;

/// SGD with heavy-ball momentum, global-norm clipping and L2 decay.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    buffers: Vec<Tensor>,
    pub momentum: f64,
    pub l2_weight: f64,
    pub clip_norm: f64,
    /// Whether the L2 term also applies to biases.
    pub l2_on_bias: bool,
}

impl OptimizerState {
    pub fn new(model: &MlpModel, l2_weight: f64, clip_norm: f64) -> Result<Self> {
        if clip_norm.is_nan() || clip_norm <= 0.0 {
            return Err(Error::Parameter(format!("clip_norm must be positive, got {clip_norm}")));
        }
        if l2_weight.is_nan() || l2_weight < 0.0 {
            return Err(Error::Parameter(format!(
                "l2_weight must be non-negative, got {l2_weight}"
            )));
        }
        let buffers = model
            .layers()
            .iter()
            .flat_map(|l| {
                [
                    Tensor::zeros(l.weight.rows(), l.weight.cols()),
                    Tensor::zeros(1, l.bias.cols()),
                ]
            })
            .collect();
        Ok(OptimizerState {
            buffers,
            momentum: MOMENTUM,
            l2_weight,
            clip_norm,
            l2_on_bias: false,
        })
    }

    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }
}

/// Clips `grads` to global norm `clip_norm`, adds `l2_weight · W`, updates the
/// momentum buffers `m ← 0.9·m + g`, then `W ← W − lr·m`.
pub fn sgd_step(model: &mut MlpModel, grads: &Gradients, opt: &mut OptimizerState, lr: f64) -> Result<()> {
    if grads.weights.len() != model.depth() || grads.biases.len() != model.depth() {
        return Err(Error::Dimension("gradient set does not match model depth".into()));
    }
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    let clip = if norm > opt.clip_norm {
        opt.clip_norm / norm
    } else {
        1.0
    };
    let (momentum, l2, l2_on_bias) = (opt.momentum, opt.l2_weight, opt.l2_on_bias);
    let params = model
        .layers_mut()
        .iter_mut()
        .flat_map(|l| [(&mut l.weight, true), (&mut l.bias, false)]);
    for (((param, is_weight), grad), buf) in params.zip(grads.params()).zip(opt.buffers.iter_mut()) {
        if param.shape() != grad.shape() {
            return Err(Error::Dimension(format!(
                "gradient {:?} for parameter {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        let decay = if is_weight || l2_on_bias { l2 } else { 0.0 };
        for ((w, &g), m) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(buf.data_mut().iter_mut())
        {
            let g = if clip == 1.0 { g } else { g * clip };
            let g = g + decay * *w;
            *m = momentum * *m + g;
            *w -= lr * *m;
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their global norm is at most `clip_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, clip_norm: f64) -> Result<f64> {
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    if norm > clip_norm {
        let s = clip_norm / norm;
        for g in grads.params_mut() {
            g.scale_assign(s);
        }
    }
    Ok(norm)
}

/// Cosine annealing without restarts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
}

/// `base_lr · ½(1 + cos(π·step/total_steps))`.
pub fn cosine_lr(schedule: &LrSchedule, step: usize) -> Result<f64> {
    if step > schedule.total_steps || schedule.total_steps == 0 {
        return Err(Error::Parameter(format!(
            "step {step} outside schedule of {} steps",
            schedule.total_steps
        )));
    }
    let frac = step as f64 / schedule.total_steps as f64;
    Ok(schedule.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Layer, Task};
    use crate::rng::Rng;

    fn tiny_model() -> MlpModel {
        MlpModel::init(3, &[4], Task::Regression { targets: 1 }, &mut Rng::new(0)).unwrap()
    }

    fn grads_filled(model: &MlpModel, v: f64) -> Gradients {
        let mut g = Gradients::zeros_like(model, 1);
        for t in g.params_mut() {
            *t = Tensor::full(t.rows(), t.cols(), v);
        }
        g
    }

    #[test]
    fn zero_lr_leaves_model_unchanged() {
        let mut m = tiny_model();
        let before = m.clone();
        let mut opt = OptimizerState::new(&m, 0.01, 20.0).unwrap();
        let g = grads_filled(&m, 0.3);
        sgd_step(&mut m, &g, &mut opt, 0.0).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn clipping_halves_gradient_of_norm_40() {
        let m = tiny_model();
        let n = m.param_count() as f64;
        let g = grads_filled(&m, 40.0 / n.sqrt());
        assert!((g.global_norm() - 40.0).abs() < 1e-9);

        let mut clipped = m.clone();
        let mut opt = OptimizerState::new(&m, 0.0, 20.0).unwrap();
        sgd_step(&mut clipped, &g, &mut opt, 1.0).unwrap();
        let step: Vec<f64> = m
            .params_flat()
            .iter()
            .zip(clipped.params_flat())
            .map(|(a, b)| a - b)
            .collect();
        for s in step {
            assert!((s - 20.0 / n.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_below_threshold_is_identity() {
        let m = tiny_model();
        let g = grads_filled(&m, 1e-3);
        let mut a = m.clone();
        let mut b = m.clone();
        let mut opt_a = OptimizerState::new(&m, 0.0, 20.0).unwrap();
        let mut opt_b = OptimizerState::new(&m, 0.0, 1e9).unwrap();
        sgd_step(&mut a, &g, &mut opt_a, 0.1).unwrap();
        sgd_step(&mut b, &g, &mut opt_b, 0.1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn quadratic_bowl_descends() {
        // One linear unit, loss ½w²: gradient is w.
        let mut m = MlpModel::from_layers(
            vec![Layer {
                weight: Tensor::full(1, 2, 3.0),
                bias: Tensor::zeros(1, 2),
                activation: Activation::Identity,
            }],
            Task::Regression { targets: 1 },
        )
        .unwrap();
        let loss = |m: &MlpModel| 0.5 * m.layers()[0].weight.sum_squares();
        let mut opt = OptimizerState::new(&m, 0.0, 1e6).unwrap();
        let mut last = loss(&m);
        for _ in 0..2 {
            let mut g = Gradients::zeros_like(&m, 1);
            g.weights[0] = m.layers()[0].weight.clone();
            sgd_step(&mut m, &g, &mut opt, 0.1).unwrap();
            let now = loss(&m);
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn l2_skips_biases_by_default() {
        let mut m = tiny_model();
        let before = m.clone();
        let mut opt = OptimizerState::new(&m, 0.5, 20.0).unwrap();
        let g = grads_filled(&m, 0.0);
        sgd_step(&mut m, &g, &mut opt, 0.1).unwrap();
        assert_eq!(m.layers()[0].bias, before.layers()[0].bias);
        assert_ne!(m.layers()[0].weight, before.layers()[0].weight);
    }

    #[test]
    fn cosine_endpoints() {
        let s = LrSchedule {
            base_lr: 0.1,
            total_steps: 100,
        };
        assert_eq!(cosine_lr(&s, 0).unwrap(), 0.1);
        assert!(cosine_lr(&s, 100).unwrap().abs() < 1e-12);
        assert!((cosine_lr(&s, 50).unwrap() - 0.05).abs() < 1e-15);
        assert!(cosine_lr(&s, 101).is_err());
        let mut prev = f64::INFINITY;
        for step in 0..=100 {
            let lr = cosine_lr(&s, step).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn bad_clip_rejected() {
        assert!(OptimizerState::new(&tiny_model(), 0.0, 0.0).is_err());
    }
}
