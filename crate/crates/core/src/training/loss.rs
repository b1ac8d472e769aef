use std::collections::HashSet;

use crate::env::{PreferencePair, RewardSpec};
use crate::error::{Error, FailurePoint, Result};
use crate::math::{log_sigmoid, WeightVector};
use crate::policy::PolicyParams;
use crate::space::{ResponseSpace, Sequence};

/// A scalar reward for one objective, queried per response.
pub trait RewardModel {
    fn objective(&self) -> usize;

    fn reward(&self, x: &Sequence, y: &Sequence) -> Result<f64>;

    /// Rewards of every enumerated response of `x`.
    fn reward_table(&self, space: &ResponseSpace, x: &Sequence) -> Result<Vec<f64>> {
        space.iter().map(|y| self.reward(x, &y)).collect()
    }
}

/// `beta * (log pi_phi(y|x) - log pi_ref(y|x))`.
#[derive(Debug, Clone)]
pub struct ImplicitRewardModel {
    pub objective: usize,
    pub policy: PolicyParams,
    pub reference: PolicyParams,
    pub beta: f64,
}

impl RewardModel for ImplicitRewardModel {
    fn objective(&self) -> usize {
        self.objective
    }

    fn reward(&self, x: &Sequence, y: &Sequence) -> Result<f64> {
        implicit_reward(&self.policy, &self.reference, self.beta, x, y)
    }

    fn reward_table(&self, space: &ResponseSpace, x: &Sequence) -> Result<Vec<f64>> {
        let lp = self.policy.response_log_probs(space, x)?;
        let lr = self.reference.response_log_probs(space, x)?;
        Ok(lp.iter().zip(&lr).map(|(a, b)| self.beta * (a - b)).collect())
    }
}

/// Ground-truth utility of one objective, usable as an exact reward model.
#[derive(Debug, Clone, Copy)]
pub struct TrueRewardModel<'a> {
    pub env: &'a RewardSpec,
    pub objective: usize,
}

impl RewardModel for TrueRewardModel<'_> {
    fn objective(&self) -> usize {
        self.objective
    }

    fn reward(&self, x: &Sequence, y: &Sequence) -> Result<f64> {
        self.env.utility(x, y, self.objective)
    }

    fn reward_table(&self, _space: &ResponseSpace, x: &Sequence) -> Result<Vec<f64>> {
        self.env.utility_table(self.env.prompt_index(x)?, self.objective)
    }
}

pub fn implicit_reward(policy: &PolicyParams, reference: &PolicyParams, beta: f64, x: &Sequence, y: &Sequence) -> Result<f64> {
    let r = reference.log_prob(x, y)?;
    if !r.is_finite() {
        return Err(Error::invalid("reference assigns zero probability to the response"));
    }
    Ok(beta * (policy.log_prob(x, y)? - r))
}

/// Checks that `models` cover exactly the objectives other than `k`.
pub(crate) fn check_margin_models(models: &[&dyn RewardModel], w: &WeightVector, k: usize) -> Result<()> {
    if k >= w.len() {
        return Err(Error::invalid(format!("objective {k} out of range for {} weights", w.len())));
    }
    if models.len() + 1 != w.len() {
        return Err(Error::invalid(format!(
            "{} weights need {} reward models, got {}",
            w.len(),
            w.len() - 1,
            models.len()
        )));
    }
    let mut seen = HashSet::new();
    for m in models {
        let j = m.objective();
        if j == k || j >= w.len() || !seen.insert(j) {
            return Err(Error::invalid(format!(
                "reward model for objective {j} does not fit target objective {k}"
            )));
        }
    }
    Ok(())
}

/// `sum_{j != k} w_j (r_j(x, y_w) - r_j(x, y_l))`.
pub fn modpo_margin(
    models: &[&dyn RewardModel],
    w: &WeightVector,
    k: usize,
    x: &Sequence,
    y_w: &Sequence,
    y_l: &Sequence,
) -> Result<f64> {
    check_margin_models(models, w, k)?;
    let mut m = 0.0;
    for model in models {
        m += w.get(model.objective()) * (model.reward(x, y_w)? - model.reward(x, y_l)?);
    }
    Ok(m)
}

pub(crate) fn common_objective(batch: &[PreferencePair]) -> Result<usize> {
    let first = batch
        .first()
        .ok_or_else(|| Error::invalid("preference batch is empty"))?
        .objective_index;
    if batch.iter().any(|p| p.objective_index != first) {
        return Err(Error::invalid("preference records mix several objectives"));
    }
    Ok(first)
}

/// Log-probabilities of `(y_w, y_l)` for every record.
pub(crate) fn pair_log_probs(policy: &PolicyParams, batch: &[PreferencePair]) -> Result<Vec<(f64, f64)>> {
    let mut queries = Vec::with_capacity(2 * batch.len());
    for p in batch {
        queries.push((&p.x, &p.y_w));
        queries.push((&p.x, &p.y_l));
    }
    let lp = policy.log_prob_batch(&queries)?;
    Ok(lp.chunks(2).map(|c| (c[0], c[1])).collect())
}

/// Logistic argument `(beta * (log-ratio_w - log-ratio_l) - margin) / w_k`.
#[inline]
pub(crate) fn pair_logit(beta: f64, w_k: f64, margin: f64, lw: f64, rw: f64, ll: f64, rl: f64) -> f64 {
    (beta * ((lw - rw) - (ll - rl)) - margin) / w_k
}

fn preference_loss(
    policy: &PolicyParams,
    reference: &PolicyParams,
    batch: &[PreferencePair],
    beta: f64,
    w_k: f64,
    margins: &[f64],
) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    let lp = pair_log_probs(policy, batch)?;
    let lr = pair_log_probs(reference, batch)?;
    let mut acc = 0.0;
    for (i, ((lw, ll), (rw, rl))) in lp.iter().zip(&lr).enumerate() {
        let z = pair_logit(beta, w_k, margins[i], *lw, *rw, *ll, *rl);
        if !z.is_finite() {
            return Err(Error::numeric("preference log-ratio", FailurePoint::Record(i)));
        }
        acc -= log_sigmoid(z);
    }
    Ok(acc / batch.len() as f64)
}

/// Mean `-log sigma(beta * (log-ratio_w - log-ratio_l))` over the batch.
pub fn dpo_loss(policy: &PolicyParams, reference: &PolicyParams, batch: &[PreferencePair], beta: f64) -> Result<f64> {
    common_objective(batch)?;
    preference_loss(policy, reference, batch, beta, 1.0, &vec![0.0; batch.len()])
}

/// Margin of every record, `w_{-k}` applied to the other objectives' rewards.
pub(crate) fn record_margins(
    batch: &[PreferencePair],
    w: &WeightVector,
    k: usize,
    models: &[&dyn RewardModel],
) -> Result<Vec<f64>> {
    check_margin_models(models, w, k)?;
    batch
        .iter()
        .map(|p| modpo_margin(models, w, k, &p.x, &p.y_w, &p.y_l))
        .collect()
}

pub(crate) fn target_weight(w: &WeightVector, k: usize) -> Result<f64> {
    if k >= w.len() {
        return Err(Error::invalid(format!("objective {k} out of range for {} weights", w.len())));
    }
    let w_k = w.get(k);
    if !(w_k > 0.0) {
        return Err(Error::invalid(format!("weight of the trained objective {k} must be positive")));
    }
    Ok(w_k)
}

/// Mean `-log sigma((beta * (log-ratio_w - log-ratio_l) - margin) / w_k)`,
/// with `k` taken from the batch.
pub fn modpo_loss(
    policy: &PolicyParams,
    reference: &PolicyParams,
    batch: &[PreferencePair],
    w: &WeightVector,
    beta: f64,
    models: &[&dyn RewardModel],
) -> Result<f64> {
    let k = common_objective(batch)?;
    let w_k = target_weight(w, k)?;
    let margins = record_margins(batch, w, k, models)?;
    preference_loss(policy, reference, batch, beta, w_k, &margins)
}

/// Mean negative log-likelihood of the demonstrations.
pub fn sft_loss(policy: &PolicyParams, demos: &[crate::env::DemoPair]) -> Result<f64> {
    if demos.is_empty() {
        return Err(Error::invalid("demonstration set is empty"));
    }
    let queries: Vec<_> = demos.iter().map(|d| (&d.x, &d.y)).collect();
    let lp = policy.log_prob_batch(&queries)?;
    Ok(-lp.iter().sum::<f64>() / demos.len() as f64)
}
