//! Supervised fine-tuning, DPO, implicit reward modeling and MODPO.

mod loss;
mod objective;

use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{DemoPair, PreferencePair, RewardSpec};
use crate::error::{Error, FailurePoint, Result};
use crate::math::WeightVector;
use crate::policy::PolicyParams;
use crate::space::Sequence;

pub use loss::{
    dpo_loss, implicit_reward, modpo_loss, modpo_margin, sft_loss, ImplicitRewardModel, RewardModel, TrueRewardModel,
};
pub use objective::{Evaluation, Objective, PreferencePopulation, PreferenceRecords, SftObjective};

#[cfg(test)]
mod tests;

/// Whether the loss is the exact population expectation or a sampled minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Minibatch,
    Population,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Gd,
    Adam,
}

/// Learning rate; `Auto` means the inverse smoothness bound for gradient
/// descent and [`DEFAULT_ADAM_STEP`] for Adam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StepSizeRepr", into = "StepSizeRepr")]
pub enum StepSize {
    Auto,
    Fixed(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum StepSizeRepr {
    Number(f64),
    Name(String),
}

impl TryFrom<StepSizeRepr> for StepSize {
    type Error = String;

    fn try_from(r: StepSizeRepr) -> std::result::Result<Self, String> {
        match r {
            StepSizeRepr::Number(v) if v > 0.0 && v.is_finite() => Ok(StepSize::Fixed(v)),
            StepSizeRepr::Number(v) => Err(format!("step size must be positive, got {v}")),
            StepSizeRepr::Name(s) if s == "auto" => Ok(StepSize::Auto),
            StepSizeRepr::Name(s) => Err(format!("unknown step size {s:?}")),
        }
    }
}

impl From<StepSize> for StepSizeRepr {
    fn from(s: StepSize) -> Self {
        match s {
            StepSize::Auto => StepSizeRepr::Name("auto".into()),
            StepSize::Fixed(v) => StepSizeRepr::Number(v),
        }
    }
}

pub const DEFAULT_ADAM_STEP: f64 = 1e-2;
pub const DEFAULT_BETA: f64 = 0.1;
/// Steps between convergence checks.
pub const CONVERGENCE_WINDOW: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub beta: f64,
    pub mode: TrainMode,
    /// Defaults to gradient descent in population mode, Adam otherwise.
    pub optimizer: Option<OptimizerKind>,
    pub step_size: StepSize,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub w: Option<WeightVector>,
    pub freeze_adapter_base: bool,
    pub log_every: usize,
    pub early_stop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: DEFAULT_BETA,
            mode: TrainMode::Population,
            optimizer: None,
            step_size: StepSize::Auto,
            steps: 1000,
            batch_size: 64,
            seed: 0,
            w: None,
            freeze_adapter_base: true,
            log_every: 10,
            early_stop: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::invalid(format!("beta must be positive, got {}", self.beta)));
        }
        if self.mode == TrainMode::Minibatch && self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.log_every == 0 {
            return Err(Error::invalid("log_every must be at least 1"));
        }
        if let StepSize::Fixed(s) = self.step_size {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::invalid(format!("step size must be positive, got {s}")));
            }
        }
        Ok(())
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        self.optimizer.unwrap_or(match self.mode {
            TrainMode::Population => OptimizerKind::Gd,
            TrainMode::Minibatch => OptimizerKind::Adam,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub loss_curve: Vec<(usize, f64)>,
    pub grad_norm_curve: Vec<(usize, f64)>,
    pub steps_run: usize,
    pub step_size: f64,
    pub final_loss: f64,
    pub stopped_early: bool,
    pub wall_time_secs: f64,
    #[serde(skip)]
    pub final_params: PolicyParams,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, mask: &[bool]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            if !mask[i] {
                continue;
            }
            let g = grad[i];
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g;
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g * g;
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Runs gradient steps on `objective` starting from `init`.
pub fn optimize(init: PolicyParams, objective: &dyn Objective, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut policy = init;
    if policy.lora().is_some() {
        policy.set_base_frozen(cfg.freeze_adapter_base)?;
    }
    let kind = cfg.optimizer_kind();
    let lr = match (cfg.step_size, kind) {
        (StepSize::Fixed(s), _) => s,
        (StepSize::Auto, OptimizerKind::Adam) => DEFAULT_ADAM_STEP,
        (StepSize::Auto, OptimizerKind::Gd) => match objective.smoothness(&policy) {
            Some(l) if l > 0.0 => 1.0 / l,
            _ => {
                return Err(Error::invalid(
                    "no smoothness bound for this policy; set an explicit step_size",
                ))
            }
        },
    };
    let minibatch = match cfg.mode {
        TrainMode::Population => false,
        TrainMode::Minibatch => {
            if objective.num_records() == 0 {
                return Err(Error::invalid("minibatch mode needs a record-based objective"));
            }
            true
        }
    };
    let mask = policy.trainable_mask();
    let mut adam = (kind == OptimizerKind::Adam).then(|| Adam::new(policy.num_params()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut loss_curve = Vec::new();
    let mut grad_norm_curve = Vec::new();
    let mut window_start: Option<f64> = None;
    let mut stopped_early = false;
    let mut steps_run = 0;

    for step in 0..cfg.steps {
        let log_now = step % cfg.log_every == 0;
        let window_now = step % CONVERGENCE_WINDOW == 0;
        let batch = minibatch.then(|| draw_batch(&mut rng, objective.num_records(), cfg.batch_size));
        let eval = objective
            .evaluate(&policy, batch.as_deref(), !minibatch && (log_now || window_now))
            .map_err(|e| relabel(e, step))?;
        let grad = policy
            .loss_gradient(&eval.seeds)
            .map_err(|e| relabel(e, step))?;
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::numeric("gradient", FailurePoint::Step(step)));
        }
        let value = match (minibatch, eval.value) {
            (false, v) => v,
            (true, _) if log_now => Some(objective.value(&policy)?),
            _ => None,
        };
        if let Some(v) = value {
            if !v.is_finite() {
                return Err(Error::numeric("loss", FailurePoint::Step(step)));
            }
        }
        if log_now {
            loss_curve.push((step, value.unwrap_or(f64::NAN)));
            grad_norm_curve.push((step, norm));
        }
        if cfg.early_stop && !minibatch {
            if norm < 1e-8 {
                stopped_early = true;
                break;
            }
            if window_now {
                let v = value.unwrap_or(f64::NAN);
                if let Some(prev) = window_start {
                    if (prev - v).abs() < 1e-12 {
                        stopped_early = true;
                        break;
                    }
                }
                window_start = Some(v);
            }
        }
        match adam.as_mut() {
            Some(a) => a.step(policy.params_mut(), &grad, lr, &mask),
            None => {
                for (p, g) in policy.params_mut().iter_mut().zip(&grad) {
                    *p -= lr * g;
                }
            }
        }
        steps_run = step + 1;
    }

    let final_eval = objective.evaluate(&policy, None, true)?;
    let final_loss = final_eval.value.unwrap_or(f64::NAN);
    if !final_loss.is_finite() {
        return Err(Error::numeric("loss", FailurePoint::Step(steps_run)));
    }
    let final_norm = policy.loss_gradient(&final_eval.seeds)?.iter().map(|g| g * g).sum::<f64>().sqrt();
    if loss_curve.last().map(|(s, _)| *s) != Some(steps_run) {
        loss_curve.push((steps_run, final_loss));
        grad_norm_curve.push((steps_run, final_norm));
    }
    Ok(TrainReport {
        loss_curve,
        grad_norm_curve,
        steps_run,
        step_size: lr,
        final_loss,
        stopped_early,
        wall_time_secs: start.elapsed().as_secs_f64(),
        final_params: policy,
    })
}

fn relabel(e: Error, step: usize) -> Error {
    match e {
        Error::NumericFailure { what, .. } => Error::numeric(what, FailurePoint::Step(step)),
        other => other,
    }
}

fn draw_batch<R: Rng>(rng: &mut R, n: usize, batch: usize) -> Vec<usize> {
    if batch >= n {
        return (0..n).collect();
    }
    let mut ix = index::sample(rng, n, batch).into_vec();
    ix.sort_unstable();
    ix
}

/// Prompts of the records in first-appearance order.
pub fn distinct_prompts(records: &[PreferencePair]) -> Vec<Sequence> {
    let mut seen = std::collections::HashSet::new();
    records
        .iter()
        .filter(|p| seen.insert(&p.x))
        .map(|p| p.x.clone())
        .collect()
}

/// Phase 1: maximum likelihood on demonstrations.
pub fn sft_train(init: PolicyParams, demos: &[DemoPair], cfg: &TrainConfig) -> Result<TrainReport> {
    let objective = SftObjective::new(demos)?;
    optimize(init, &objective, cfg)
}

fn preference_objective(
    reference: &PolicyParams,
    comparisons: &[PreferencePair],
    cfg: &TrainConfig,
    env: Option<&RewardSpec>,
    modpo: Option<(&WeightVector, &[&dyn RewardModel])>,
) -> Result<Box<dyn Objective>> {
    let k = loss::common_objective(comparisons)?;
    Ok(match cfg.mode {
        TrainMode::Minibatch => Box::new(PreferenceRecords::new(reference, comparisons, cfg.beta, modpo)?),
        TrainMode::Population => {
            let env = env.ok_or_else(|| {
                Error::MissingDependency("population mode needs the reward environment".into())
            })?;
            Box::new(PreferencePopulation::new(
                reference,
                env,
                &distinct_prompts(comparisons),
                k,
                cfg.beta,
                modpo,
            )?)
        }
    })
}

/// Single-objective DPO. Population mode replaces sampled labels by exact
/// Bradley-Terry probabilities from `env` on the records' prompts.
pub fn dpo_train(
    init: PolicyParams,
    reference: &PolicyParams,
    comparisons: &[PreferencePair],
    cfg: &TrainConfig,
    env: Option<&RewardSpec>,
) -> Result<TrainReport> {
    let objective = preference_objective(reference, comparisons, cfg, env, None)?;
    optimize(init, objective.as_ref(), cfg)
}

/// MODPO on one objective's comparisons, with the other objectives entering
/// through `models` as a margin. Weights come from `cfg.w`.
pub fn modpo_train(
    init: PolicyParams,
    reference: &PolicyParams,
    comparisons: &[PreferencePair],
    models: &[&dyn RewardModel],
    cfg: &TrainConfig,
    env: Option<&RewardSpec>,
) -> Result<TrainReport> {
    let w = cfg
        .w
        .as_ref()
        .ok_or_else(|| Error::invalid("MODPO needs a weight vector (w)"))?;
    let objective = preference_objective(reference, comparisons, cfg, env, Some((w, models)))?;
    optimize(init, objective.as_ref(), cfg)
}

/// Coordinates compared by [`grad_check`] when the count exceeds this.
pub const GRAD_CHECK_FULL_LIMIT: usize = 2000;
pub const GRAD_CHECK_SAMPLE: usize = 200;
pub const GRAD_CHECK_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

/// Largest relative error between `analytic` and central differences of `f`
/// over `coords`; the denominator is `max(|g|, |g_fd|, 1e-8)`. The rounding
/// noise of the two loss evaluations is subtracted from each gap first.
pub fn grad_check_fn<F>(theta: &[f64], analytic: &[f64], coords: &[usize], step: f64, mut f: F) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut work = theta.to_vec();
    let mut worst: f64 = 0.0;
    for &i in coords {
        work[i] = theta[i] + step;
        let plus = f(&work);
        work[i] = theta[i] - step;
        let minus = f(&work);
        work[i] = theta[i];
        let fd = (plus - minus) / (2.0 * step);
        // differences within the rounding error of the two evaluations agree
        let noise = 8.0 * f64::EPSILON * (plus.abs() + minus.abs()) / (2.0 * step);
        let gap = (analytic[i] - fd).abs();
        let denom = analytic[i].abs().max(fd.abs()).max(1e-8);
        let err = (gap - noise).max(0.0) / denom;
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
    }
    worst
}

/// Finite-difference check of an objective's gradient at `policy`, over all
/// trainable coordinates or a seeded sample of them.
pub fn grad_check(policy: &PolicyParams, objective: &dyn Objective, step: f64, seed: u64) -> Result<GradCheck> {
    let analytic = objective.gradient(policy)?;
    let mask = policy.trainable_mask();
    let trainable: Vec<usize> = (0..mask.len()).filter(|i| mask[*i]).collect();
    let coords = if trainable.len() <= GRAD_CHECK_FULL_LIMIT {
        trainable
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<usize> = index::sample(&mut rng, trainable.len(), GRAD_CHECK_SAMPLE)
            .into_iter()
            .map(|j| trainable[j])
            .collect();
        picked.sort_unstable();
        picked
    };
    let mut probe = policy.clone();
    let mut failure = None;
    let worst = grad_check_fn(policy.params(), &analytic, &coords, step, |theta| {
        probe.params_mut().copy_from_slice(theta);
        match objective.value(&probe) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(GradCheck {
        max_rel_error: worst,
        coords_checked: coords.len(),
    })
}
