use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{sample_uniform, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
            Activation::Identity => v,
        }
    }

    /// Derivative evaluated at the pre-activation value.
    #[inline]
    pub fn grad(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Classification {
        classes: usize,
    },
    /// Each target dimension gets a mean output and a log-variance output.
    Regression {
        targets: usize,
    },
}

impl Task {
    pub fn output_width(self) -> usize {
        match self {
            Task::Classification { classes } => classes,
            Task::Regression { targets } => 2 * targets,
        }
    }

    pub fn is_classification(self) -> bool {
        matches!(self, Task::Classification { .. })
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Classification { .. } => "classification",
            Task::Regression { .. } => "regression",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `fan_in x fan_out`
    pub weight: Tensor,
    /// `1 x fan_out`
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

/// Name and shape of one parameter tensor in flattening order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamShape {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fully connected network: ReLU on every hidden layer, identity on the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layers: Vec<Layer>,
    task: Task,
}

impl MlpModel {
    /// Builds a network with PyTorch-default initialisation: every weight and
    /// bias of a layer with fan-in `n` is drawn from `U(-1/√n, 1/√n)`
    /// (Kaiming-uniform with `a = √5`). Draw order: layer by layer, weight
    /// row-major then bias.
    pub fn init(input_dim: usize, hidden: &[usize], task: Task, rng: &mut Rng) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Parameter("network needs at least one input feature".into()));
        }
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(task.output_width());
        if widths.contains(&0) {
            return Err(Error::Parameter(format!("zero-width layer in {widths:?}")));
        }
        let depth = widths.len() - 1;
        let mut layers = Vec::with_capacity(depth);
        for d in 0..depth {
            let (fan_in, fan_out) = (widths[d], widths[d + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weight = sample_uniform(rng, fan_in, fan_out, -bound, bound)?;
            let bias = sample_uniform(rng, 1, fan_out, -bound, bound)?;
            let activation = if d + 1 == depth {
                Activation::Identity
            } else {
                Activation::Relu
            };
            layers.push(Layer {
                weight,
                bias,
                activation,
            });
        }
        Ok(MlpModel { layers, task })
    }

    pub fn from_layers(layers: Vec<Layer>, task: Task) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Parameter("network needs at least one layer".into()));
        }
        for (d, l) in layers.iter().enumerate() {
            if l.bias.shape() != (1, l.fan_out()) {
                return Err(Error::Dimension(format!(
                    "layer {d}: bias {:?} does not match weight {:?}",
                    l.bias.shape(),
                    l.weight.shape()
                )));
            }
            if let Some(next) = layers.get(d + 1) {
                if next.fan_in() != l.fan_out() {
                    return Err(Error::Dimension(format!(
                        "layer {d} emits {} units but layer {} expects {}",
                        l.fan_out(),
                        d + 1,
                        next.fan_in()
                    )));
                }
            }
        }
        let last = layers.last().expect("non-empty");
        if last.fan_out() != task.output_width() {
            return Err(Error::Dimension(format!(
                "{} task needs {} outputs, network has {}",
                task.name(),
                task.output_width(),
                last.fan_out()
            )));
        }
        Ok(MlpModel { layers, task })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::fan_out)
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(Layer::fan_out)
            .collect()
    }

    pub fn manifest(&self) -> Vec<ParamShape> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (d, l) in self.layers.iter().enumerate() {
            out.push(ParamShape {
                name: format!("layers.{d}.weight"),
                layer: d,
                rows: l.weight.rows(),
                cols: l.weight.cols(),
            });
            out.push(ParamShape {
                name: format!("layers.{d}.bias"),
                layer: d,
                rows: 1,
                cols: l.bias.cols(),
            });
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// All parameters concatenated in manifest order.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "flat vector has {} values, model has {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weight.len();
            l.weight.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
            let n = l.bias.len();
            l.bias.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Rebuilds a model from a manifest and a flat vector.
    pub fn from_manifest(manifest: &[ParamShape], flat: &[f64], task: Task) -> Result<Self> {
        if !manifest.len().is_multiple_of(2) || manifest.is_empty() {
            return Err(Error::Validation("manifest must list weight/bias pairs".into()));
        }
        let total: usize = manifest.iter().map(ParamShape::len).sum();
        if total != flat.len() {
            return Err(Error::Dimension(format!(
                "manifest describes {total} values, vector has {}",
                flat.len()
            )));
        }
        let depth = manifest.len() / 2;
        let mut layers = Vec::with_capacity(depth);
        let mut off = 0;
        for (d, pair) in manifest.chunks(2).enumerate() {
            let (w, b) = (&pair[0], &pair[1]);
            let weight = Tensor::from_vec(w.rows, w.cols, flat[off..off + w.len()].to_vec())?;
            off += w.len();
            let bias = Tensor::from_vec(b.rows, b.cols, flat[off..off + b.len()].to_vec())?;
            off += b.len();
            let activation = if d + 1 == depth {
                Activation::Identity
            } else {
                Activation::Relu
            };
            layers.push(Layer {
                weight,
                bias,
                activation,
            });
        }
        MlpModel::from_layers(layers, task)
    }

    /// Clean forward pass (no noise).
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        super::forward(self, x, &mut super::NoHooks).map(|(out, _)| out)
    }
}
