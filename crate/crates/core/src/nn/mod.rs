//! Fully connected network with a hand-derived backward pass.
//!
//! [`forward`] takes a [`ForwardHooks`] implementation so the noise framework
//! can perturb the weight of layer `d` right before its matmul and the
//! pre-activation of every hidden layer right before the nonlinearity.
//! Whatever the hooks did is recorded in the [`Trace`], and [`backward`]
//! differentiates exactly that perturbed computation (multiplicative masks
//! included).

mod loss;
mod model;
mod optim;

pub use loss::{
    classification_loss, classification_loss_grad, loss_and_grad, regression_loss, regression_loss_grad, softmax,
    softmax_with_temperature, split_regression_output, PROB_EPS, VARIANCE_MAX, VARIANCE_MIN,
};
pub use model::{Activation, Layer, MlpModel, ParamShape, Task};
pub use optim::{clip_global_norm, cosine_lr, sgd_step, LrSchedule, OptimizerState, MOMENTUM};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of a hook that replaced a tensor.
#[derive(Clone, Debug)]
pub struct Perturbed {
    pub value: Tensor,
    /// Elementwise derivative of the perturbed tensor with respect to the
    /// clean one when the perturbation is multiplicative (Dropout,
    /// DropConnect). `None` means the derivative is the identity.
    pub grad_scale: Option<Tensor>,
}

pub trait ForwardHooks {
    /// Called before layer `layer` (0-based, of `depth`) multiplies by its
    /// weight. Returning `None` keeps the clean weight.
    fn weight(&mut self, layer: usize, depth: usize, weight: &Tensor) -> Result<Option<Perturbed>>;

    /// Called with the pre-activation of every layer except the last.
    fn activation(&mut self, layer: usize, pre: Tensor) -> Result<Perturbed>;
}

/// Hooks that leave everything untouched.
pub struct NoHooks;

impl ForwardHooks for NoHooks {
    fn weight(&mut self, _: usize, _: usize, _: &Tensor) -> Result<Option<Perturbed>> {
        Ok(None)
    }

    fn activation(&mut self, _: usize, pre: Tensor) -> Result<Perturbed> {
        Ok(Perturbed {
            value: pre,
            grad_scale: None,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// Input to the layer (`z^{d-1}` after its activation).
    pub input: Tensor,
    /// Weight actually used, when a hook replaced it.
    pub weight: Option<Tensor>,
    pub weight_scale: Option<Tensor>,
    /// Pre-activation after activation noise.
    pub pre: Tensor,
    pub pre_scale: Option<Tensor>,
}

#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub layers: Vec<LayerTrace>,
}

/// Parameter gradients in layer order, plus the gradient with respect to the
/// network input.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub input: Tensor,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel, batch: usize) -> Self {
        Gradients {
            weights: model
                .layers()
                .iter()
                .map(|l| Tensor::zeros(l.weight.rows(), l.weight.cols()))
                .collect(),
            biases: model.layers().iter().map(|l| Tensor::zeros(1, l.bias.cols())).collect(),
            input: Tensor::zeros(batch, model.input_dim()),
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.params().map(Tensor::sum_squares).sum::<f64>().sqrt()
    }

    /// Parameter tensors in manifest order (weight, bias, weight, bias, ...).
    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
    }

    pub fn flat(&self) -> Vec<f64> {
        self.params().flat_map(|t| t.data().iter().copied()).collect()
    }
}

/// Runs the network on `x`, invoking `hooks` at each weight use and on each
/// hidden pre-activation.
pub fn forward(model: &MlpModel, x: &Tensor, hooks: &mut dyn ForwardHooks) -> Result<(Tensor, Trace)> {
    if x.cols() != model.input_dim() {
        return Err(Error::Dimension(format!(
            "input has {} features, network expects {}",
            x.cols(),
            model.input_dim()
        )));
    }
    let depth = model.depth();
    let mut trace = Trace {
        layers: Vec::with_capacity(depth),
    };
    let mut z = x.clone();
    for (d, layer) in model.layers().iter().enumerate() {
        let perturbed_w = hooks.weight(d, depth, &layer.weight)?;
        if let Some(p) = &perturbed_w {
            if p.value.shape() != layer.weight.shape() {
                return Err(Error::Dimension(format!("weight hook changed layer {d} shape")));
            }
        }
        let w = perturbed_w.as_ref().map_or(&layer.weight, |p| &p.value);
        let mut pre = z.matmul(w)?;
        pre.add_row_broadcast(&layer.bias)?;
        let (pre, pre_scale) = if d + 1 < depth {
            let p = hooks.activation(d, pre)?;
            (p.value, p.grad_scale)
        } else {
            (pre, None)
        };
        let out = pre.map(|v| layer.activation.apply(v));
        let (weight, weight_scale) = match perturbed_w {
            Some(p) => (Some(p.value), p.grad_scale),
            None => (None, None),
        };
        trace.layers.push(LayerTrace {
            input: std::mem::replace(&mut z, out),
            weight,
            weight_scale,
            pre,
            pre_scale,
        });
    }
    z.ensure_finite("forward pass")?;
    Ok((z, trace))
}

/// Gradient of a scalar loss through the traced computation, given
/// `grad_out = ∂L/∂output`.
pub fn backward(model: &MlpModel, trace: &Trace, grad_out: &Tensor) -> Result<Gradients> {
    let depth = model.depth();
    if trace.layers.len() != depth {
        return Err(Error::Usage(format!(
            "trace has {} layers, model has {depth}; run forward first",
            trace.layers.len()
        )));
    }
    let last = &trace.layers[depth - 1];
    if grad_out.shape() != last.pre.shape() {
        return Err(Error::Dimension(format!(
            "output gradient {:?} does not match output {:?}",
            grad_out.shape(),
            last.pre.shape()
        )));
    }
    let mut weights = vec![Tensor::zeros(0, 0); depth];
    let mut biases = vec![Tensor::zeros(0, 0); depth];
    let mut delta = grad_out.clone();
    for d in (0..depth).rev() {
        let layer = &model.layers()[d];
        let lt = &trace.layers[d];
        let act = layer.activation;
        let mut g = delta.zip_map(&lt.pre, "activation grad", |g, p| g * act.grad(p))?;
        if let Some(s) = &lt.pre_scale {
            g.hadamard_assign(s)?;
        }
        let w = lt.weight.as_ref().unwrap_or(&layer.weight);
        let mut gw = lt.input.t_matmul(&g)?;
        if let Some(s) = &lt.weight_scale {
            gw.hadamard_assign(s)?;
        }
        weights[d] = gw;
        biases[d] = g.sum_rows();
        delta = g.matmul_t(w)?;
    }
    Ok(Gradients {
        weights,
        biases,
        input: delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn relu_identity_net() -> MlpModel {
        MlpModel::from_layers(
            vec![Layer {
                weight: Tensor::identity(2),
                bias: Tensor::zeros(1, 2),
                activation: Activation::Relu,
            }],
            Task::Classification { classes: 2 },
        )
        .unwrap()
    }

    #[test]
    fn relu_identity_forward() {
        let x = Tensor::from_rows(&[[-1.0, 2.0]]).unwrap();
        let (out, trace) = forward(&relu_identity_net(), &x, &mut NoHooks).unwrap();
        assert_eq!(out.data(), &[0.0, 2.0]);
        assert_eq!(trace.layers[0].pre.data(), &[-1.0, 2.0]);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut rng = Rng::new(3);
        let mut m = MlpModel::init(4, &[5], Task::Classification { classes: 3 }, &mut rng).unwrap();
        for l in m.layers_mut() {
            l.weight = Tensor::zeros(l.weight.rows(), l.weight.cols());
        }
        let x = rng.gaussian_tensor(6, 4, 0.0, 1.0).unwrap();
        let out = m.predict(&x).unwrap();
        let bias = m.layers()[1].bias.data();
        for r in 0..6 {
            assert_eq!(out.row(r), bias);
        }
    }

    /// Straight-line reimplementation with explicit loops.
    fn oracle_forward(m: &MlpModel, x: &Tensor) -> Vec<Vec<f64>> {
        let mut rows: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row(r).to_vec()).collect();
        for l in m.layers() {
            rows = rows
                .iter()
                .map(|inp| {
                    (0..l.fan_out())
                        .map(|j| {
                            let mut s = l.bias.get(0, j);
                            for (i, v) in inp.iter().enumerate() {
                                s += v * l.weight.get(i, j);
                            }
                            match l.activation {
                                Activation::Relu => s.max(0.0),
                                Activation::Identity => s,
                            }
                        })
                        .collect()
                })
                .collect();
        }
        rows
    }

    #[test]
    fn forward_matches_loop_oracle() {
        let mut rng = Rng::new(17);
        let m = MlpModel::init(5, &[7], Task::Regression { targets: 2 }, &mut rng).unwrap();
        let x = rng.gaussian_tensor(9, 5, 0.0, 1.0).unwrap();
        let out = m.predict(&x).unwrap();
        for (r, expected) in oracle_forward(&m, &x).iter().enumerate() {
            for (a, b) in out.row(r).iter().zip(expected) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let x = Tensor::zeros(1, 3);
        assert!(matches!(
            forward(&relu_identity_net(), &x, &mut NoHooks),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn backward_without_trace_is_usage_error() {
        let m = relu_identity_net();
        let g = Tensor::zeros(1, 2);
        assert!(matches!(backward(&m, &Trace::default(), &g), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(5);
        let m = MlpModel::init(3, &[4, 4], Task::Classification { classes: 3 }, &mut rng).unwrap();
        let x = rng.gaussian_tensor(8, 3, 0.0, 1.0).unwrap();
        let (out, trace) = forward(&m, &x, &mut NoHooks).unwrap();
        let g = backward(&m, &trace, &Tensor::zeros(out.rows(), out.cols())).unwrap();
        assert!(g.flat().iter().all(|&v| v == 0.0));
        assert!(g.input.data().iter().all(|&v| v == 0.0));
    }

    struct DropUnit(usize);

    impl ForwardHooks for DropUnit {
        fn weight(&mut self, _: usize, _: usize, _: &Tensor) -> Result<Option<Perturbed>> {
            Ok(None)
        }

        fn activation(&mut self, _: usize, pre: Tensor) -> Result<Perturbed> {
            let mut scale = Tensor::full(pre.rows(), pre.cols(), 1.0);
            for r in 0..pre.rows() {
                scale.set(r, self.0, 0.0);
            }
            let value = pre.hadamard(&scale)?;
            Ok(Perturbed {
                value,
                grad_scale: Some(scale),
            })
        }
    }

    #[test]
    fn dropped_unit_has_no_incoming_gradient() {
        let mut rng = Rng::new(8);
        let m = MlpModel::init(3, &[5], Task::Classification { classes: 2 }, &mut rng).unwrap();
        let x = rng.gaussian_tensor(4, 3, 0.0, 1.0).unwrap();
        let (out, trace) = forward(&m, &x, &mut DropUnit(2)).unwrap();
        let up = Tensor::full(out.rows(), out.cols(), 1.0);
        let g = backward(&m, &trace, &up).unwrap();
        for i in 0..3 {
            assert_eq!(g.weights[0].get(i, 2), 0.0);
        }
        assert_eq!(g.biases[0].get(0, 2), 0.0);
    }
}
