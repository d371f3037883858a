//! Noise operators, their hyperparameters, and the probability-gated
//! training loop that dispatches them.
//!
//! A training configuration carries an ordered list of [`NoiseSpec`]s. For
//! every batch each spec is switched on with probability `p_noise`; enabled
//! specs then run at their placement in a fixed order: input, target,
//! input-target, weights (before each layer's matmul), activations (before
//! each hidden nonlinearity), gradients (before the update), and finally the
//! model at the end of the epoch. Specs sharing a placement run in list
//! order.

mod framework;
pub mod ops;

pub use framework::{
    apply_place, init_model, sample_toggles, train, BatchHooks, BatchToggles, EpochRecord, GradientNoiseOrder,
    NoiseContext, Payload, TrainConfig, TrainRun, Trainer, DEFAULT_BATCH_SIZE,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hpo::{ParamRange, Scale};
use crate::nn::Task;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Input,
    Target,
    InputTarget,
    Weight,
    Activation,
    Gradient,
    Model,
}

impl Placement {
    /// Position in the per-batch application order.
    pub fn order(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaInputGaussian {
    pub std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaOds {
    pub epsilon: f64,
    pub temperature: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaMixUp {
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaCMixUp {
    pub alpha: f64,
    pub sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaLabelSmoothing {
    pub smoothing: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaActivationGaussian {
    pub std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaDropout {
    pub rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaWeightGaussian {
    pub std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaDropConnect {
    pub rate: f64,
}

/// Annealed gradient noise: variance `eta / (1 + t)^gamma` at step `t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaGradientGaussian {
    pub eta: f64,
    pub gamma: f64,
}

/// Shrink-and-perturb: every `frequency` epochs, `W ← shrink·W + N(0, std²)`.
/// `frequency == 0` disables it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaModelSP {
    pub shrink: f64,
    pub std: f64,
    pub frequency: u32,
}

/// One noise operator with its hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Noise {
    InputGaussian(DeltaInputGaussian),
    InputOds(DeltaOds),
    Mixup(DeltaMixUp),
    Cmixup(DeltaCMixUp),
    LabelSmoothing(DeltaLabelSmoothing),
    ActivationGaussian(DeltaActivationGaussian),
    Dropout(DeltaDropout),
    WeightGaussian(DeltaWeightGaussian),
    DropConnect(DeltaDropConnect),
    GradientGaussian(DeltaGradientGaussian),
    ShrinkPerturb(DeltaModelSP),
}

fn range(name: &str, lo: f64, hi: f64, scale: Scale) -> ParamRange {
    ParamRange {
        name: name.to_string(),
        lo,
        hi,
        scale,
        integer: false,
    }
}

fn check(cond: bool, what: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Parameter(what.to_string()))
    }
}

impl Noise {
    /// Every operator, at its identity setting.
    pub fn all_identities() -> Vec<Noise> {
        vec![
            Noise::InputGaussian(DeltaInputGaussian { std: 0.0 }),
            Noise::InputOds(DeltaOds {
                epsilon: 0.0,
                temperature: 1.0,
            }),
            Noise::Mixup(DeltaMixUp { alpha: 0.0 }),
            Noise::Cmixup(DeltaCMixUp { alpha: 0.0, sigma: 1.0 }),
            Noise::LabelSmoothing(DeltaLabelSmoothing { smoothing: 0.0 }),
            Noise::ActivationGaussian(DeltaActivationGaussian { std: 0.0 }),
            Noise::Dropout(DeltaDropout { rate: 0.0 }),
            Noise::WeightGaussian(DeltaWeightGaussian { std: 0.0 }),
            Noise::DropConnect(DeltaDropConnect { rate: 0.0 }),
            Noise::GradientGaussian(DeltaGradientGaussian { eta: 0.0, gamma: 0.0 }),
            Noise::ShrinkPerturb(DeltaModelSP {
                shrink: 1.0,
                std: 0.0,
                frequency: 1,
            }),
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Noise::InputGaussian(_) => "input_gaussian",
            Noise::InputOds(_) => "input_ods",
            Noise::Mixup(_) => "mixup",
            Noise::Cmixup(_) => "cmixup",
            Noise::LabelSmoothing(_) => "label_smoothing",
            Noise::ActivationGaussian(_) => "activation_gaussian",
            Noise::Dropout(_) => "dropout",
            Noise::WeightGaussian(_) => "weight_gaussian",
            Noise::DropConnect(_) => "drop_connect",
            Noise::GradientGaussian(_) => "gradient_gaussian",
            Noise::ShrinkPerturb(_) => "shrink_perturb",
        }
    }

    pub fn placement(&self) -> Placement {
        match self {
            Noise::InputGaussian(_) | Noise::InputOds(_) => Placement::Input,
            Noise::LabelSmoothing(_) => Placement::Target,
            Noise::Mixup(_) | Noise::Cmixup(_) => Placement::InputTarget,
            Noise::ActivationGaussian(_) | Noise::Dropout(_) => Placement::Activation,
            Noise::WeightGaussian(_) | Noise::DropConnect(_) => Placement::Weight,
            Noise::GradientGaussian(_) => Placement::Gradient,
            Noise::ShrinkPerturb(_) => Placement::Model,
        }
    }

    pub fn supports(&self, task: Task) -> bool {
        match self {
            Noise::InputOds(_) | Noise::Mixup(_) | Noise::LabelSmoothing(_) => task.is_classification(),
            Noise::Cmixup(_) => !task.is_classification(),
            _ => true,
        }
    }

    /// True when the operator cannot change its payload.
    pub fn is_identity(&self) -> bool {
        match *self {
            Noise::InputGaussian(d) => d.std == 0.0,
            Noise::InputOds(d) => d.epsilon == 0.0,
            Noise::Mixup(d) => d.alpha == 0.0,
            Noise::Cmixup(d) => d.alpha == 0.0,
            Noise::LabelSmoothing(d) => d.smoothing == 0.0,
            Noise::ActivationGaussian(d) => d.std == 0.0,
            Noise::Dropout(d) => d.rate == 0.0,
            Noise::WeightGaussian(d) => d.std == 0.0,
            Noise::DropConnect(d) => d.rate == 0.0,
            Noise::GradientGaussian(d) => d.eta == 0.0,
            Noise::ShrinkPerturb(d) => d.frequency == 0 || (d.shrink == 1.0 && d.std == 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        match *self {
            Noise::InputGaussian(d) => check(finite_nonneg(d.std), "input_gaussian std must be >= 0"),
            Noise::InputOds(d) => {
                check(finite_nonneg(d.epsilon), "input_ods epsilon must be >= 0")?;
                check(
                    d.temperature > 0.0 && d.temperature.is_finite(),
                    "input_ods temperature must be > 0",
                )
            }
            Noise::Mixup(d) => check(finite_nonneg(d.alpha), "mixup alpha must be >= 0"),
            Noise::Cmixup(d) => {
                check(finite_nonneg(d.alpha), "cmixup alpha must be >= 0")?;
                check(d.sigma > 0.0, "cmixup sigma must be > 0")
            }
            Noise::LabelSmoothing(d) => check(
                (0.0..=1.0).contains(&d.smoothing),
                "label_smoothing smoothing must lie in [0, 1]",
            ),
            Noise::ActivationGaussian(d) => check(finite_nonneg(d.std), "activation_gaussian std must be >= 0"),
            Noise::Dropout(d) => check((0.0..1.0).contains(&d.rate), "dropout rate must lie in [0, 1)"),
            Noise::WeightGaussian(d) => check(finite_nonneg(d.std), "weight_gaussian std must be >= 0"),
            Noise::DropConnect(d) => check((0.0..1.0).contains(&d.rate), "drop_connect rate must lie in [0, 1)"),
            Noise::GradientGaussian(d) => {
                check(finite_nonneg(d.eta), "gradient_gaussian eta must be >= 0")?;
                check(finite_nonneg(d.gamma), "gradient_gaussian gamma must be >= 0")
            }
            Noise::ShrinkPerturb(d) => {
                check(d.shrink.is_finite(), "shrink_perturb shrink must be finite")?;
                check(finite_nonneg(d.std), "shrink_perturb std must be >= 0")
            }
        }
    }

    /// Hyperparameter ranges searched for this operator.
    pub fn search_ranges(&self) -> Vec<ParamRange> {
        use Scale::{Linear, Log};
        match self {
            Noise::InputGaussian(_) => vec![range("std", 1e-4, 1e-1, Log)],
            Noise::InputOds(_) => vec![range("epsilon", 1e-4, 1e-1, Log), range("temperature", 0.5, 5.0, Log)],
            Noise::Mixup(_) => vec![range("alpha", 0.0, 1.0, Linear)],
            Noise::Cmixup(_) => vec![range("alpha", 0.0, 1.0, Linear), range("sigma", 1e-4, 1e2, Log)],
            Noise::LabelSmoothing(_) => vec![range("smoothing", 0.0, 0.25, Linear)],
            Noise::ActivationGaussian(_) => vec![range("std", 1e-4, 1e-1, Log)],
            // Rates are sampled on [0, 1]; 1 itself is clamped just below by `set_param`.
            Noise::Dropout(_) => vec![range("rate", 0.0, 1.0, Linear)],
            Noise::WeightGaussian(_) => vec![range("std", 1e-4, 1e-1, Log)],
            Noise::DropConnect(_) => vec![range("rate", 0.0, 1.0, Linear)],
            Noise::GradientGaussian(_) => vec![range("eta", 0.0, 1.0, Linear), range("gamma", 0.0, 1.0, Linear)],
            Noise::ShrinkPerturb(_) => vec![
                range("shrink", 0.0, 1.0, Linear),
                range("std", 1e-7, 1e-3, Log),
                ParamRange {
                    integer: true,
                    ..range("frequency", 0.0, 20.0, Linear)
                },
            ],
        }
    }

    pub fn set_param(&mut self, name: &str, value: f64) -> Result<()> {
        let kind = self.name();
        let unknown = || Error::Parameter(format!("{kind} has no hyperparameter `{name}`"));
        let rate = |v: f64| v.min(1.0 - 1e-6);
        match (self, name) {
            (Noise::InputGaussian(d), "std") => d.std = value,
            (Noise::InputOds(d), "epsilon") => d.epsilon = value,
            (Noise::InputOds(d), "temperature") => d.temperature = value,
            (Noise::Mixup(d), "alpha") => d.alpha = value,
            (Noise::Cmixup(d), "alpha") => d.alpha = value,
            (Noise::Cmixup(d), "sigma") => d.sigma = value,
            (Noise::LabelSmoothing(d), "smoothing") => d.smoothing = value,
            (Noise::ActivationGaussian(d), "std") => d.std = value,
            (Noise::Dropout(d), "rate") => d.rate = rate(value),
            (Noise::WeightGaussian(d), "std") => d.std = value,
            (Noise::DropConnect(d), "rate") => d.rate = rate(value),
            (Noise::GradientGaussian(d), "eta") => d.eta = value,
            (Noise::GradientGaussian(d), "gamma") => d.gamma = value,
            (Noise::ShrinkPerturb(d), "shrink") => d.shrink = value,
            (Noise::ShrinkPerturb(d), "std") => d.std = value,
            (Noise::ShrinkPerturb(d), "frequency") => d.frequency = value.round().max(0.0) as u32,
            _ => return Err(unknown()),
        }
        Ok(())
    }
}

/// A noise operator together with the probability of enabling it on a batch.
/// Its position in the configured list fixes its order within a placement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(flatten)]
    pub noise: Noise,
    #[serde(default = "default_p_noise")]
    pub p_noise: f64,
}

fn default_p_noise() -> f64 {
    1.0
}

impl NoiseSpec {
    pub fn new(noise: Noise, p_noise: f64) -> Self {
        NoiseSpec { noise, p_noise }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_noise) {
            return Err(Error::Parameter(format!(
                "{}: p_noise must lie in [0, 1], got {}",
                self.noise.name(),
                self.p_noise
            )));
        }
        self.noise.validate()
    }
}
