//! Hyperparameter search with successive-halving pruning.
//!
//! Trials are sampled up front as a pure function of `(study seed, trial
//! index)`. All trials advance in lockstep to the rungs `E/8`, `E/4` and
//! `E/2`; at each rung the better half (by validation NLL, ties to the lower
//! id) survives and the rest are pruned. Survivors finish all `E` epochs and
//! the best final validation NLL wins. Its parameters are then retrained
//! with fresh seeds.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PreparedData;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Metrics};
use crate::noise::{init_model, TrainConfig, Trainer};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Linear,
    Log,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRange {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub scale: Scale,
    #[serde(default)]
    pub integer: bool,
}

impl ParamRange {
    pub fn validate(&self) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi) {
            return Err(Error::Parameter(format!(
                "range `{}` needs finite lo <= hi, got [{}, {}]",
                self.name, self.lo, self.hi
            )));
        }
        if self.scale == Scale::Log && self.lo <= 0.0 {
            return Err(Error::Parameter(format!(
                "log-scale range `{}` needs lo > 0",
                self.name
            )));
        }
        Ok(())
    }

    /// Maps `u ∈ [0, 1)` into the range, uniformly in the range's scale.
    pub fn from_unit(&self, u: f64) -> f64 {
        let v = match self.scale {
            Scale::Linear => self.lo + u * (self.hi - self.lo),
            Scale::Log => (self.lo.ln() + u * (self.hi.ln() - self.lo.ln())).exp(),
        };
        let v = if self.integer { v.round() } else { v };
        v.clamp(self.lo, self.hi)
    }
}

pub type Params = BTreeMap<String, f64>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub params: Vec<ParamRange>,
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let mut names = std::collections::BTreeSet::new();
        for p in &self.params {
            p.validate()?;
            if !names.insert(p.name.as_str()) {
                return Err(Error::Parameter(format!(
                    "`{}` appears twice in the search space",
                    p.name
                )));
            }
        }
        Ok(())
    }

    /// Learning rate and L2 weight when there is no noise, otherwise the
    /// hyperparameters of every configured noise as `noise.{i}.{name}`.
    pub fn default_for(config: &TrainConfig) -> SearchSpace {
        if config.noises.is_empty() {
            return SearchSpace {
                params: vec![
                    ParamRange {
                        name: "lr".into(),
                        lo: 1e-4,
                        hi: 1e-1,
                        scale: Scale::Log,
                        integer: false,
                    },
                    ParamRange {
                        name: "l2".into(),
                        lo: 1e-7,
                        hi: 1e-1,
                        scale: Scale::Log,
                        integer: false,
                    },
                ],
            };
        }
        let mut params = Vec::new();
        for (i, spec) in config.noises.iter().enumerate() {
            for r in spec.noise.search_ranges() {
                params.push(ParamRange {
                    name: format!("noise.{i}.{}", r.name),
                    ..r
                });
            }
        }
        SearchSpace { params }
    }
}

/// Draws one value per parameter from `rng`, in space order.
pub fn sample_params(space: &SearchSpace, rng: &mut Rng) -> Params {
    space
        .params
        .iter()
        .map(|p| (p.name.clone(), p.from_unit(rng.uniform())))
        .collect()
}

/// Proposes trial configurations. Implementations must be deterministic in
/// their arguments.
pub trait Sampler: Sync {
    fn name(&self) -> &'static str;

    /// Parameters of trial `index`. `finished` lists trials completed so
    /// far, for samplers that adapt to history.
    fn propose(&self, space: &SearchSpace, study_seed: u64, index: usize, finished: &[Trial]) -> Result<Params>;
}

/// Independent draws, uniform in each parameter's scale.
#[derive(Clone, Copy, Debug, Default)]
pub struct RandomSampler;

impl Sampler for RandomSampler {
    fn name(&self) -> &'static str {
        "random"
    }

    fn propose(&self, space: &SearchSpace, study_seed: u64, index: usize, _: &[Trial]) -> Result<Params> {
        let mut rng = Rng::new(study_seed).child(&format!("trial/{index}"));
        Ok(sample_params(space, &mut rng))
    }
}

/// Applies named parameters to a training configuration: `lr`, `l2`, and
/// `noise.{i}.{field}`.
pub fn apply_params(config: &TrainConfig, params: &Params) -> Result<TrainConfig> {
    let mut out = config.clone();
    for (name, &v) in params {
        match name.as_str() {
            "lr" => out.base_lr = v,
            "l2" => out.l2_weight = v,
            "p_noise" => out.noises.iter_mut().for_each(|n| n.p_noise = v),
            other => {
                let rest = other
                    .strip_prefix("noise.")
                    .ok_or_else(|| Error::Parameter(format!("unknown hyperparameter `{other}`")))?;
                let (idx, field) = rest
                    .split_once('.')
                    .ok_or_else(|| Error::Parameter(format!("malformed hyperparameter `{other}`")))?;
                let i: usize = idx
                    .parse()
                    .map_err(|_| Error::Parameter(format!("malformed hyperparameter `{other}`")))?;
                let spec = out
                    .noises
                    .get_mut(i)
                    .ok_or_else(|| Error::Parameter(format!("`{other}` refers to a missing noise")))?;
                if field == "p_noise" {
                    spec.p_noise = v;
                } else {
                    spec.noise.set_param(field, v)?;
                }
            }
        }
    }
    out.validate()?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Running,
    Pruned,
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub id: usize,
    pub params: Params,
    /// Validation NLL after each executed epoch.
    pub curve: Vec<f64>,
    pub status: TrialStatus,
    pub objective: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl Trial {
    /// Validation NLL after `epoch` epochs; missing or non-finite values rank last.
    fn at(&self, epoch: usize) -> f64 {
        epoch
            .checked_sub(1)
            .and_then(|e| self.curve.get(e))
            .copied()
            .filter(|v| v.is_finite())
            .unwrap_or(f64::INFINITY)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainRecord {
    pub seed: u64,
    pub val: Metrics,
    pub test: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub n_trials: usize,
    pub epochs: usize,
    pub pruning: bool,
    pub seed: u64,
    pub retrain_seeds: Vec<u64>,
}

impl StudyConfig {
    pub fn new(n_trials: usize, epochs: usize, seed: u64) -> Self {
        StudyConfig {
            n_trials,
            epochs,
            pruning: true,
            seed,
            retrain_seeds: vec![1, 2, 3],
        }
    }

    /// Distinct rungs `E/8, E/4, E/2` (floored, at least 1, below `E`).
    pub fn rungs(&self) -> Vec<usize> {
        if !self.pruning {
            return Vec::new();
        }
        let mut r: Vec<usize> = [8, 4, 2]
            .iter()
            .map(|d| (self.epochs / d).max(1))
            .filter(|&e| e < self.epochs)
            .collect();
        r.dedup();
        r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub config: StudyConfig,
    pub sampler: String,
    pub space: SearchSpace,
    pub trials: Vec<Trial>,
    pub best: Option<usize>,
    pub best_params: Option<Params>,
    #[serde(default)]
    pub retrain: Vec<RetrainRecord>,
}

impl StudyResult {
    pub fn total_epochs(&self) -> usize {
        self.trials.iter().map(|t| t.curve.len()).sum()
    }
}

/// Runs one trial in resumable steps.
pub trait TrialRunner: Sync {
    type State: Send;

    fn start(&self, params: &Params) -> Result<Self::State>;

    /// Continues training to `epoch` completed epochs and returns the
    /// validation NLL of each newly completed epoch.
    fn advance(&self, state: &mut Self::State, epoch: usize) -> Result<Vec<f64>>;

    fn retrain(&self, _params: &Params, _seed: u64) -> Result<Option<RetrainRecord>> {
        Ok(None)
    }
}

struct Live<S> {
    state: Option<S>,
    done: usize,
}

fn advance_trial<R: TrialRunner>(runner: &R, trial: &mut Trial, live: &mut Live<R::State>, to: usize) {
    if trial.status == TrialStatus::Failed || trial.curve.len() >= to {
        return;
    }
    let mut step = || -> Result<()> {
        if live.state.is_none() || live.done > trial.curve.len() {
            live.state = Some(runner.start(&trial.params)?);
            live.done = 0;
        }
        let state = live.state.as_mut().expect("state started");
        // Epochs already recorded (from a resumed study) are replayed.
        let values = runner.advance(state, to)?;
        let start = live.done;
        live.done = to;
        for (k, v) in values.into_iter().enumerate() {
            let e = start + k;
            if e >= trial.curve.len() {
                trial.curve.push(v);
            }
        }
        Ok(())
    };
    if let Err(e) = step() {
        trial.status = TrialStatus::Failed;
        trial.objective = None;
        trial.message = Some(e.to_string());
        live.state = None;
        return;
    }
    if trial.curve.last().is_some_and(|v| !v.is_finite()) {
        trial.status = TrialStatus::Failed;
        trial.message = Some("non-finite validation NLL".into());
        live.state = None;
    }
}

/// Executes a study. Trials from `previous` whose status is final and whose
/// parameters match are reused; running trials are executed again.
/// `checkpoint` is called after every rung and at the end.
pub fn run_study<R: TrialRunner>(
    runner: &R,
    space: &SearchSpace,
    config: &StudyConfig,
    sampler: &dyn Sampler,
    previous: Option<&StudyResult>,
    checkpoint: &mut dyn FnMut(&StudyResult) -> Result<()>,
) -> Result<StudyResult> {
    space.validate()?;
    if config.n_trials == 0 || config.epochs == 0 {
        return Err(Error::Parameter(
            "a study needs at least one trial and one epoch".into(),
        ));
    }
    let mut trials = Vec::with_capacity(config.n_trials);
    for id in 0..config.n_trials {
        let params = sampler.propose(space, config.seed, id, &[])?;
        let reused = previous
            .and_then(|p| p.trials.iter().find(|t| t.id == id))
            .filter(|t| t.params == params && t.status != TrialStatus::Running)
            .cloned();
        trials.push(reused.unwrap_or(Trial {
            id,
            params,
            curve: Vec::new(),
            status: TrialStatus::Running,
            objective: None,
            message: None,
        }));
    }
    let mut live: Vec<Live<R::State>> = (0..trials.len()).map(|_| Live { state: None, done: 0 }).collect();
    let mut result = StudyResult {
        config: config.clone(),
        sampler: sampler.name().to_string(),
        space: space.clone(),
        trials: Vec::new(),
        best: None,
        best_params: None,
        retrain: Vec::new(),
    };

    let mut alive: Vec<usize> = (0..trials.len()).collect();
    for &rung in &config.rungs() {
        let mut slots: Vec<(&mut Trial, &mut Live<R::State>)> = trials.iter_mut().zip(live.iter_mut()).collect();
        slots
            .par_iter_mut()
            .filter(|(t, _)| alive.contains(&t.id))
            .for_each(|(t, l)| advance_trial(runner, t, l, rung));
        alive.retain(|&i| trials[i].status != TrialStatus::Failed);
        alive.sort_by(|&a, &b| trials[a].at(rung).total_cmp(&trials[b].at(rung)).then(a.cmp(&b)));
        let keep = alive.len().div_ceil(2);
        for &i in &alive[keep..] {
            trials[i].status = TrialStatus::Pruned;
            trials[i].objective = Some(trials[i].at(rung));
            live[i].state = None;
        }
        alive.truncate(keep);
        alive.sort_unstable();
        result.trials = trials.clone();
        checkpoint(&result)?;
    }
    {
        let mut slots: Vec<(&mut Trial, &mut Live<R::State>)> = trials.iter_mut().zip(live.iter_mut()).collect();
        slots
            .par_iter_mut()
            .filter(|(t, _)| alive.contains(&t.id))
            .for_each(|(t, l)| advance_trial(runner, t, l, config.epochs));
    }
    drop(live);
    for &i in &alive {
        let t = &mut trials[i];
        if t.status != TrialStatus::Failed {
            t.status = TrialStatus::Complete;
            t.objective = Some(t.at(config.epochs));
        }
    }
    let best = trials
        .iter()
        .filter(|t| t.status == TrialStatus::Complete && t.at(config.epochs).is_finite())
        .min_by(|a, b| {
            a.at(config.epochs)
                .total_cmp(&b.at(config.epochs))
                .then(a.id.cmp(&b.id))
        })
        .map(|t| t.id);
    result.trials = trials;
    let Some(best) = best else {
        let reasons: Vec<String> = result
            .trials
            .iter()
            .filter_map(|t| t.message.as_ref().map(|m| format!("trial {}: {m}", t.id)))
            .take(5)
            .collect();
        checkpoint(&result)?;
        return Err(Error::Study(format!(
            "no trial finished with a finite objective; {}",
            reasons.join("; ")
        )));
    };
    result.best = Some(best);
    let params = result.trials[best].params.clone();
    result.retrain = config
        .retrain_seeds
        .par_iter()
        .map(|&s| runner.retrain(&params, s))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    result.best_params = Some(params);
    checkpoint(&result)?;
    Ok(result)
}

/// Trains real models on a prepared dataset.
pub struct ModelRunner<'d> {
    pub data: &'d PreparedData,
    pub hidden: Vec<usize>,
    pub base: TrainConfig,
}

pub struct ModelTrial<'d> {
    trainer: Trainer<'d>,
}

impl<'d> ModelRunner<'d> {
    fn trainer(&self, params: &Params, seed: u64) -> Result<Trainer<'d>> {
        let mut cfg = apply_params(&self.base, params)?;
        cfg.seed = seed;
        cfg.snapshot_every_epoch = false;
        let model = init_model(self.data.train.features.cols(), &self.hidden, self.data.task, seed)?;
        Trainer::new(model, &self.data.train, Some(&self.data.val), cfg)
    }
}

impl<'d> TrialRunner for ModelRunner<'d> {
    type State = ModelTrial<'d>;

    fn start(&self, params: &Params) -> Result<Self::State> {
        Ok(ModelTrial {
            trainer: self.trainer(params, self.base.seed)?,
        })
    }

    fn advance(&self, state: &mut Self::State, epoch: usize) -> Result<Vec<f64>> {
        let from = state.trainer.epoch();
        state.trainer.run_until(epoch)?;
        Ok(state.trainer.history()[from..]
            .iter()
            .map(|r| r.val.map_or(f64::NAN, |m| m.nll))
            .collect())
    }

    fn retrain(&self, params: &Params, seed: u64) -> Result<Option<RetrainRecord>> {
        let run = self.trainer(params, seed)?.finish()?;
        let d = self.data;
        Ok(Some(RetrainRecord {
            seed,
            val: evaluate(&run.model, &d.val.features, &d.val.targets)?,
            test: evaluate(&run.model, &d.test.features, &d.test.targets)?,
        }))
    }
}
