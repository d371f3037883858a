use serde::{Deserialize, Serialize};

use crate::data::{Partition, PreparedData};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Metrics};
use crate::nn::{
    backward, clip_global_norm, cosine_lr, forward, loss_and_grad, sgd_step, ForwardHooks, Gradients, LrSchedule,
    MlpModel, OptimizerState, Perturbed, Task,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{ops, Noise, NoiseSpec, Placement};

/// Per-batch on/off decision for every configured noise.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchToggles(pub Vec<bool>);

impl BatchToggles {
    pub fn is_on(&self, i: usize) -> bool {
        self.0.get(i).copied().unwrap_or(false)
    }

    pub fn none(n: usize) -> Self {
        BatchToggles(vec![false; n])
    }
}

/// One `U(0, 1)` draw per spec; spec `i` is on when its draw is below `p_noise`.
pub fn sample_toggles(rng: &mut Rng, specs: &[NoiseSpec]) -> BatchToggles {
    BatchToggles(specs.iter().map(|s| rng.uniform() < s.p_noise).collect())
}

/// Noise specs bound to their private random streams.
#[derive(Clone, Debug)]
pub struct NoiseContext {
    specs: Vec<NoiseSpec>,
    rngs: Vec<Rng>,
}

/// What a placement operates on.
pub enum Payload<'a> {
    Input(Tensor, &'a MlpModel),
    Target(Tensor),
    InputTarget(Tensor, Tensor),
    Weight {
        layer: usize,
        depth: usize,
        value: Perturbed,
    },
    Activation {
        layer: usize,
        value: Perturbed,
    },
    Gradient(&'a mut Gradients, u64),
    /// Model, 1-based epoch just finished, total epochs.
    Model(&'a mut MlpModel, usize, usize),
}

impl Payload<'_> {
    pub fn placement(&self) -> Placement {
        match self {
            Payload::Input(..) => Placement::Input,
            Payload::Target(_) => Placement::Target,
            Payload::InputTarget(..) => Placement::InputTarget,
            Payload::Weight { .. } => Placement::Weight,
            Payload::Activation { .. } => Placement::Activation,
            Payload::Gradient(..) => Placement::Gradient,
            Payload::Model(..) => Placement::Model,
        }
    }
}

fn compose(prev: Perturbed, next: Perturbed) -> Result<Perturbed> {
    let grad_scale = match (prev.grad_scale, next.grad_scale) {
        (None, s) | (s, None) => s,
        (Some(a), Some(b)) => Some(a.hadamard(&b)?),
    };
    Ok(Perturbed {
        value: next.value,
        grad_scale,
    })
}

impl NoiseContext {
    /// Validates the specs against the task and derives stream `noise/{i}`
    /// for spec `i` from the run's root stream.
    pub fn new(specs: &[NoiseSpec], root: &Rng, task: Task) -> Result<Self> {
        for s in specs {
            s.validate()?;
            if !s.noise.supports(task) {
                return Err(Error::Unsupported(format!(
                    "{} cannot be used for a {} task",
                    s.noise.name(),
                    task.name()
                )));
            }
        }
        Ok(NoiseContext {
            specs: specs.to_vec(),
            rngs: (0..specs.len()).map(|i| root.child(&format!("noise/{i}"))).collect(),
        })
    }

    pub fn specs(&self) -> &[NoiseSpec] {
        &self.specs
    }

    fn active(&self, toggles: &BatchToggles, place: Placement) -> Vec<usize> {
        (0..self.specs.len())
            .filter(|&i| toggles.is_on(i) && self.specs[i].noise.placement() == place)
            .collect()
    }

    pub fn active_names(&self, toggles: &BatchToggles) -> Vec<String> {
        (0..self.specs.len())
            .filter(|&i| toggles.is_on(i))
            .map(|i| format!("{}#{i}", self.specs[i].noise.name()))
            .collect()
    }

    pub fn apply_input(&mut self, mut x: Tensor, toggles: &BatchToggles, model: &MlpModel) -> Result<Tensor> {
        for i in self.active(toggles, Placement::Input) {
            let rng = &mut self.rngs[i];
            x = match &self.specs[i].noise {
                Noise::InputGaussian(d) => ops::input_gaussian(&x, d, rng)?,
                Noise::InputOds(d) => ops::input_ods(&x, model, d, rng)?,
                _ => x,
            };
        }
        Ok(x)
    }

    pub fn apply_target(&mut self, mut y: Tensor, toggles: &BatchToggles) -> Result<Tensor> {
        for i in self.active(toggles, Placement::Target) {
            if let Noise::LabelSmoothing(d) = &self.specs[i].noise {
                y = ops::label_smoothing(&y, d);
            }
        }
        Ok(y)
    }

    pub fn apply_input_target(
        &mut self,
        mut x: Tensor,
        mut y: Tensor,
        toggles: &BatchToggles,
    ) -> Result<(Tensor, Tensor)> {
        for i in self.active(toggles, Placement::InputTarget) {
            let rng = &mut self.rngs[i];
            (x, y) = match &self.specs[i].noise {
                Noise::Mixup(d) => ops::mixup(&x, &y, d, rng)?,
                Noise::Cmixup(d) => ops::cmixup(&x, &y, d, rng)?,
                _ => (x, y),
            };
        }
        Ok((x, y))
    }

    /// Weight noise for layer `layer` of `depth`; the output layer is never
    /// perturbed. `None` means the clean weight is used.
    pub fn apply_weight(
        &mut self,
        layer: usize,
        depth: usize,
        weight: &Tensor,
        toggles: &BatchToggles,
    ) -> Result<Option<Perturbed>> {
        if layer + 1 >= depth {
            return Ok(None);
        }
        let active = self.active(toggles, Placement::Weight);
        if active.is_empty() {
            return Ok(None);
        }
        let mut cur = Perturbed {
            value: weight.clone(),
            grad_scale: None,
        };
        for i in active {
            let rng = &mut self.rngs[i];
            let next = match &self.specs[i].noise {
                Noise::WeightGaussian(d) => ops::weight_gaussian(&cur.value, d, rng)?,
                Noise::DropConnect(d) => ops::dropconnect(&cur.value, d, rng)?,
                _ => continue,
            };
            cur = compose(cur, next)?;
        }
        Ok(Some(cur))
    }

    pub fn apply_activation(&mut self, pre: Tensor, toggles: &BatchToggles) -> Result<Perturbed> {
        let mut cur = Perturbed {
            value: pre,
            grad_scale: None,
        };
        for i in self.active(toggles, Placement::Activation) {
            let rng = &mut self.rngs[i];
            let value = std::mem::replace(&mut cur.value, Tensor::zeros(0, 0));
            let next = match &self.specs[i].noise {
                Noise::ActivationGaussian(d) => ops::activation_gaussian(value, d, rng)?,
                Noise::Dropout(d) => ops::dropout(value, d, rng)?,
                _ => Perturbed {
                    value,
                    grad_scale: None,
                },
            };
            cur = compose(cur, next)?;
        }
        Ok(cur)
    }

    pub fn apply_gradient(&mut self, grads: &mut Gradients, toggles: &BatchToggles, step: u64) -> Result<()> {
        for i in self.active(toggles, Placement::Gradient) {
            if let Noise::GradientGaussian(d) = &self.specs[i].noise {
                ops::gradient_gaussian(grads, d, step, &mut self.rngs[i])?;
            }
        }
        Ok(())
    }

    /// Returns whether any model noise modified the weights.
    pub fn apply_model(
        &mut self,
        model: &mut MlpModel,
        toggles: &BatchToggles,
        epoch: usize,
        total_epochs: usize,
    ) -> Result<bool> {
        let mut touched = false;
        for i in self.active(toggles, Placement::Model) {
            if let Noise::ShrinkPerturb(d) = &self.specs[i].noise {
                touched |= ops::shrink_perturb(model, d, epoch, total_epochs, &mut self.rngs[i])?;
            }
        }
        Ok(touched)
    }

    pub fn hooks<'a>(&'a mut self, toggles: &'a BatchToggles) -> BatchHooks<'a> {
        BatchHooks { ctx: self, toggles }
    }
}

/// Applies the enabled noises of `place` to `payload` in list order. Specs
/// without an operator for `place` are skipped; a payload of the wrong kind
/// is a usage error.
pub fn apply_place<'a>(
    place: Placement,
    payload: Payload<'a>,
    toggles: &BatchToggles,
    ctx: &mut NoiseContext,
) -> Result<Payload<'a>> {
    if payload.placement() != place {
        return Err(Error::Usage(format!(
            "{:?} payload passed to the {place:?} placement",
            payload.placement()
        )));
    }
    Ok(match payload {
        Payload::Input(x, model) => Payload::Input(ctx.apply_input(x, toggles, model)?, model),
        Payload::Target(y) => Payload::Target(ctx.apply_target(y, toggles)?),
        Payload::InputTarget(x, y) => {
            let (x, y) = ctx.apply_input_target(x, y, toggles)?;
            Payload::InputTarget(x, y)
        }
        Payload::Weight { layer, depth, value } => {
            let value = match ctx.apply_weight(layer, depth, &value.value, toggles)? {
                Some(next) => compose(value, next)?,
                None => value,
            };
            Payload::Weight { layer, depth, value }
        }
        Payload::Activation { layer, value } => {
            let Perturbed { value: v, grad_scale } = value;
            let next = ctx.apply_activation(v, toggles)?;
            Payload::Activation {
                layer,
                value: compose(
                    Perturbed {
                        value: Tensor::zeros(0, 0),
                        grad_scale,
                    },
                    next,
                )?,
            }
        }
        Payload::Gradient(grads, step) => {
            ctx.apply_gradient(grads, toggles, step)?;
            Payload::Gradient(grads, step)
        }
        Payload::Model(model, epoch, total) => {
            ctx.apply_model(model, toggles, epoch, total)?;
            Payload::Model(model, epoch, total)
        }
    })
}

/// Forward hooks for one batch.
pub struct BatchHooks<'a> {
    ctx: &'a mut NoiseContext,
    toggles: &'a BatchToggles,
}

impl ForwardHooks for BatchHooks<'_> {
    fn weight(&mut self, layer: usize, depth: usize, weight: &Tensor) -> Result<Option<Perturbed>> {
        self.ctx.apply_weight(layer, depth, weight, self.toggles)
    }

    fn activation(&mut self, _layer: usize, pre: Tensor) -> Result<Perturbed> {
        self.ctx.apply_activation(pre, self.toggles)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientNoiseOrder {
    /// Noise is added to the raw gradient, which is then clipped.
    #[default]
    BeforeClip,
    /// The gradient is clipped first and the noisy result is used unclipped.
    AfterClip,
}

pub const DEFAULT_BATCH_SIZE: usize = 256;

fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub base_lr: f64,
    #[serde(default)]
    pub l2_weight: f64,
    pub clip_norm: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub noises: Vec<NoiseSpec>,
    #[serde(default)]
    pub snapshot_every_epoch: bool,
    #[serde(default)]
    pub l2_on_bias: bool,
    #[serde(default)]
    pub gradient_noise_order: GradientNoiseOrder,
}

impl TrainConfig {
    /// Defaults: batch 256, no L2, no noise, no snapshots.
    pub fn new(epochs: usize, base_lr: f64, clip_norm: f64, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size: DEFAULT_BATCH_SIZE,
            base_lr,
            l2_weight: 0.0,
            clip_norm,
            seed,
            noises: Vec::new(),
            snapshot_every_epoch: false,
            l2_on_bias: false,
            gradient_noise_order: GradientNoiseOrder::BeforeClip,
        }
    }

    /// Clip norm used for a task: 20 for classification, 10 for regression.
    pub fn default_clip_norm(task: Task) -> f64 {
        if task.is_classification() {
            20.0
        } else {
            10.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Parameter("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be positive".into()));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::Parameter(format!("base_lr must be >= 0, got {}", self.base_lr)));
        }
        for n in &self.noises {
            n.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Option<Metrics>,
    pub model_noise: bool,
}

/// Outcome of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub model: MlpModel,
    /// Parameters before the first update.
    pub initial: Vec<f64>,
    /// Parameters after each epoch, when snapshotting is on.
    pub snapshots: Vec<Vec<f64>>,
    pub history: Vec<EpochRecord>,
    pub steps: u64,
}

/// Epoch-by-epoch executor of the noisy training loop.
pub struct Trainer<'d> {
    train: &'d Partition,
    val: Option<&'d Partition>,
    targets: Tensor,
    config: TrainConfig,
    model: MlpModel,
    opt: OptimizerState,
    ctx: NoiseContext,
    shuffle: Rng,
    toggles: Rng,
    schedule: LrSchedule,
    epoch: usize,
    step: u64,
    initial: Vec<f64>,
    snapshots: Vec<Vec<f64>>,
    history: Vec<EpochRecord>,
}

/// Network initialised from the `init` stream of `seed`.
pub fn init_model(input_dim: usize, hidden: &[usize], task: Task, seed: u64) -> Result<MlpModel> {
    MlpModel::init(input_dim, hidden, task, &mut Rng::new(seed).child("init"))
}

impl<'d> Trainer<'d> {
    pub fn new(model: MlpModel, train: &'d Partition, val: Option<&'d Partition>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::InsufficientData("empty training split".into()));
        }
        if train.features.cols() != model.input_dim() {
            return Err(Error::Dimension(format!(
                "data has {} features, model expects {}",
                train.features.cols(),
                model.input_dim()
            )));
        }
        let targets = train.targets.dense();
        let expected = match model.task() {
            Task::Classification { classes } => classes,
            Task::Regression { targets } => targets,
        };
        if targets.cols() != expected || train.targets.labels().is_some() != model.task().is_classification() {
            return Err(Error::Dimension(format!(
                "targets of width {} do not fit a {} model",
                targets.cols(),
                model.task().name()
            )));
        }
        let root = Rng::new(config.seed);
        let ctx = NoiseContext::new(&config.noises, &root, model.task())?;
        let mut opt = OptimizerState::new(&model, config.l2_weight, config.clip_norm)?;
        opt.l2_on_bias = config.l2_on_bias;
        Ok(Trainer {
            train,
            val,
            targets,
            initial: model.params_flat(),
            schedule: LrSchedule {
                base_lr: config.base_lr,
                total_steps: config.epochs,
            },
            opt,
            ctx,
            shuffle: root.child("shuffle"),
            toggles: root.child("toggles"),
            model,
            config,
            epoch: 0,
            step: 0,
            snapshots: Vec::new(),
            history: Vec::new(),
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    fn diverged(&self, batch: usize, loss: f64, toggles: &BatchToggles) -> Error {
        Error::Diverged {
            epoch: self.epoch + 1,
            batch,
            loss,
            active: self.ctx.active_names(toggles),
        }
    }

    fn run_batch(&mut self, idx: &[usize], toggles: &BatchToggles) -> Result<f64> {
        let x = self.train.features.select_rows(idx)?;
        let y = self.targets.select_rows(idx)?;
        let x = self.ctx.apply_input(x, toggles, &self.model)?;
        let y = self.ctx.apply_target(y, toggles)?;
        let (x, y) = self.ctx.apply_input_target(x, y, toggles)?;
        let (out, trace) = forward(&self.model, &x, &mut self.ctx.hooks(toggles))?;
        let (loss, grad_out) = loss_and_grad(self.model.task(), &out, &y)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads = backward(&self.model, &trace, &grad_out)?;
        let lr = cosine_lr(&self.schedule, self.epoch)?;
        match self.config.gradient_noise_order {
            GradientNoiseOrder::BeforeClip => {
                self.ctx.apply_gradient(&mut grads, toggles, self.step)?;
                sgd_step(&mut self.model, &grads, &mut self.opt, lr)?;
            }
            GradientNoiseOrder::AfterClip => {
                clip_global_norm(&mut grads, self.opt.clip_norm)?;
                self.ctx.apply_gradient(&mut grads, toggles, self.step)?;
                let clip = std::mem::replace(&mut self.opt.clip_norm, f64::INFINITY);
                let res = sgd_step(&mut self.model, &grads, &mut self.opt, lr);
                self.opt.clip_norm = clip;
                res?;
            }
        }
        self.step += 1;
        Ok(loss)
    }

    /// Runs one epoch and returns its record.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        if self.is_done() {
            return Err(Error::Usage(format!("all {} epochs already ran", self.config.epochs)));
        }
        let lr = cosine_lr(&self.schedule, self.epoch)?;
        let order = self.shuffle.permutation(self.train.len());
        let mut last = BatchToggles::none(self.ctx.specs().len());
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(self.config.batch_size).enumerate() {
            let toggles = sample_toggles(&mut self.toggles, &self.config.noises);
            match self.run_batch(idx, &toggles) {
                Ok(loss) => loss_sum += loss * idx.len() as f64,
                Err(Error::NonFinite(_)) => return Err(self.diverged(b, f64::NAN, &toggles)),
                Err(e) => return Err(e),
            }
            last = toggles;
        }
        let done = self.epoch + 1;
        let model_noise = self.ctx.apply_model(&mut self.model, &last, done, self.config.epochs)?;
        self.model
            .params_flat()
            .iter()
            .all(|v| v.is_finite())
            .then_some(())
            .ok_or_else(|| self.diverged(order.len().div_ceil(self.config.batch_size), f64::NAN, &last))?;
        self.epoch = done;
        let val = match self.val {
            Some(v) if !v.is_empty() => Some(evaluate(&self.model, &v.features, &v.targets)?),
            _ => None,
        };
        if self.config.snapshot_every_epoch {
            self.snapshots.push(self.model.params_flat());
        }
        self.history.push(EpochRecord {
            epoch: done,
            lr,
            train_loss: loss_sum / self.train.len() as f64,
            val,
            model_noise,
        });
        Ok(self.history.last().expect("just pushed"))
    }

    /// Runs epochs until `epoch` have completed (or the budget is exhausted).
    pub fn run_until(&mut self, epoch: usize) -> Result<()> {
        while self.epoch < epoch.min(self.config.epochs) {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<TrainRun> {
        self.run_until(self.config.epochs)?;
        Ok(TrainRun {
            config: self.config,
            model: self.model,
            initial: self.initial,
            snapshots: self.snapshots,
            history: self.history,
            steps: self.step,
        })
    }
}

/// Trains `model` on the training split, reporting validation metrics per
/// epoch.
pub fn train(model: MlpModel, data: &PreparedData, config: &TrainConfig) -> Result<TrainRun> {
    Trainer::new(model, &data.train, Some(&data.val), config.clone())?.finish()
}
