//! Exact ground truth by enumeration of the response space.

use serde::{Deserialize, Serialize};

use crate::env::RewardSpec;
use crate::error::{Error, Result};
use crate::eval::ParetoPoint;
use crate::math::{log_sum_exp, scalarize_slice, sigmoid, RewardVector, WeightVector};
use crate::policy::PolicyParams;
use crate::space::{ResponseSpace, Sequence};

/// Anything that yields a full log-probability row per prompt.
pub trait PolicyTable {
    fn log_prob_table(&self, space: &ResponseSpace, x: &Sequence) -> Result<Vec<f64>>;
}

impl PolicyTable for PolicyParams {
    fn log_prob_table(&self, space: &ResponseSpace, x: &Sequence) -> Result<Vec<f64>> {
        self.response_log_probs(space, x)
    }
}

/// Which reward an exact policy tilts its reference by.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum RewardDescription {
    Single { k: usize },
    Scalarized { w: WeightVector },
    Custom { label: String },
}

/// `pi*(y|x) = pi_ref(y|x) exp(r(x, y) / beta) / Z(x)`, stored as log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactPolicy {
    pub beta: f64,
    pub reward: RewardDescription,
    pub prompts: Vec<Sequence>,
    pub log_probs: Vec<Vec<f64>>,
    pub log_partition: Vec<f64>,
}

impl ExactPolicy {
    pub fn prompt_index(&self, x: &Sequence) -> Result<usize> {
        self.prompts
            .iter()
            .position(|p| p == x)
            .ok_or_else(|| Error::invalid(format!("prompt {:?} is not covered by the exact policy", x.0)))
    }

    pub fn probs(&self, xi: usize) -> Vec<f64> {
        self.log_probs[xi].iter().map(|l| l.exp()).collect()
    }
}

impl PolicyTable for ExactPolicy {
    fn log_prob_table(&self, space: &ResponseSpace, x: &Sequence) -> Result<Vec<f64>> {
        let row = &self.log_probs[self.prompt_index(x)?];
        if row.len() != space.len() {
            return Err(Error::invalid("exact policy was built for a different response space"));
        }
        Ok(row.clone())
    }
}

/// Reward of `(x, y)`; used as the tilt of the closed-form optimum.
pub type RewardFn<'a> = dyn Fn(&Sequence, &Sequence) -> Result<f64> + 'a;

fn reward_row(space: &ResponseSpace, x: &Sequence, reward: &RewardFn<'_>) -> Result<Vec<f64>> {
    space.iter().map(|y| reward(x, &y)).collect()
}

/// `log Z(x) = log sum_y pi_ref(y|x) exp(r(x, y) / beta)`.
pub fn log_partition(ref_log_probs: &[f64], rewards: &[f64], beta: f64) -> f64 {
    let terms: Vec<f64> = ref_log_probs.iter().zip(rewards).map(|(l, r)| l + r / beta).collect();
    log_sum_exp(&terms)
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::invalid(format!("beta must be positive and finite, got {beta}")));
    }
    Ok(())
}

pub fn partition_fn(
    reference: &dyn PolicyTable,
    space: &ResponseSpace,
    reward: &RewardFn<'_>,
    beta: f64,
    x: &Sequence,
) -> Result<f64> {
    check_beta(beta)?;
    let lr = reference.log_prob_table(space, x)?;
    Ok(log_partition(&lr, &reward_row(space, x, reward)?, beta).exp())
}

fn tilt(ref_lp: &[f64], rewards: &[f64], beta: f64) -> (Vec<f64>, f64) {
    let logits: Vec<f64> = ref_lp.iter().zip(rewards).map(|(l, r)| l + r / beta).collect();
    let lz = log_sum_exp(&logits);
    (logits.iter().map(|l| l - lz).collect(), lz)
}

fn build_exact(
    reference: &dyn PolicyTable,
    space: &ResponseSpace,
    prompts: &[Sequence],
    beta: f64,
    description: RewardDescription,
    mut row: impl FnMut(usize, &Sequence) -> Result<Vec<f64>>,
) -> Result<ExactPolicy> {
    check_beta(beta)?;
    if prompts.is_empty() {
        return Err(Error::invalid("exact policy needs at least one prompt"));
    }
    let mut log_probs = Vec::with_capacity(prompts.len());
    let mut log_z = Vec::with_capacity(prompts.len());
    for (xi, x) in prompts.iter().enumerate() {
        let lr = reference.log_prob_table(space, x)?;
        let (lp, lz) = tilt(&lr, &row(xi, x)?, beta);
        if !lz.is_finite() {
            return Err(Error::numeric("log partition", crate::error::FailurePoint::Record(xi)));
        }
        log_probs.push(lp);
        log_z.push(lz);
    }
    Ok(ExactPolicy {
        beta,
        reward: description,
        prompts: prompts.to_vec(),
        log_probs,
        log_partition: log_z,
    })
}

/// Closed-form KL-regularized optimum for an arbitrary reward.
pub fn optimal_policy_exact(
    reference: &dyn PolicyTable,
    space: &ResponseSpace,
    prompts: &[Sequence],
    reward: &RewardFn<'_>,
    beta: f64,
    label: &str,
) -> Result<ExactPolicy> {
    build_exact(
        reference,
        space,
        prompts,
        beta,
        RewardDescription::Custom { label: label.into() },
        |_, x| reward_row(space, x, reward),
    )
}

/// Optimum for the utility of objective `k` over the environment's prompts.
pub fn optimal_policy_single(reference: &dyn PolicyTable, env: &RewardSpec, k: usize, beta: f64) -> Result<ExactPolicy> {
    let space = env.space()?;
    build_exact(reference, &space, &env.prompts, beta, RewardDescription::Single { k }, |xi, _| {
        env.utility_table(xi, k)
    })
}

/// Optimum for the scalarized utility `w^T u`.
pub fn optimal_policy_multi(
    reference: &dyn PolicyTable,
    env: &RewardSpec,
    w: &WeightVector,
    beta: f64,
) -> Result<ExactPolicy> {
    if w.len() != env.num_objectives {
        return Err(Error::invalid(format!(
            "weight vector has {} entries for {} objectives",
            w.len(),
            env.num_objectives
        )));
    }
    let space = env.space()?;
    build_exact(
        reference,
        &space,
        &env.prompts,
        beta,
        RewardDescription::Scalarized { w: w.clone() },
        |xi, _| scalarized_table(env, xi, w),
    )
}

/// `w^T u(x, .)` over the enumerated responses of prompt `xi`.
pub fn scalarized_table(env: &RewardSpec, xi: usize, w: &WeightVector) -> Result<Vec<f64>> {
    let tables: Vec<Vec<f64>> = (0..env.num_objectives)
        .map(|k| env.utility_table(xi, k))
        .collect::<Result<_>>()?;
    let mut buf = vec![0.0; env.num_objectives];
    (0..tables[0].len())
        .map(|i| {
            for (k, t) in tables.iter().enumerate() {
                buf[k] = t[i];
            }
            scalarize_slice(w.as_slice(), &buf)
        })
        .collect()
}

/// Residual of an identity check against its tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl IdentityCheck {
    fn new(residual: f64, tolerance: f64) -> Self {
        IdentityCheck {
            residual,
            tolerance,
            passed: residual < tolerance,
        }
    }
}

/// `max |beta log(pi*/pi_ref) + beta log Z - r|` for a given exact policy.
pub fn reparam_residual(
    exact: &ExactPolicy,
    reference: &dyn PolicyTable,
    space: &ResponseSpace,
    reward: &RewardFn<'_>,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (xi, x) in exact.prompts.iter().enumerate() {
        let lr = reference.log_prob_table(space, x)?;
        let r = reward_row(space, x, reward)?;
        for i in 0..space.len() {
            let rhat = exact.beta * (exact.log_probs[xi][i] - lr[i]) + exact.beta * exact.log_partition[xi];
            worst = worst.max((rhat - r[i]).abs());
        }
    }
    Ok(worst)
}

/// Rebuilds the reward from its closed-form optimum and reports the worst mismatch.
pub fn reparam_identity_check(
    reference: &dyn PolicyTable,
    space: &ResponseSpace,
    prompts: &[Sequence],
    reward: &RewardFn<'_>,
    beta: f64,
    tolerance: f64,
) -> Result<IdentityCheck> {
    let exact = optimal_policy_exact(reference, space, prompts, reward, beta, "reparam")?;
    Ok(IdentityCheck::new(reparam_residual(&exact, reference, space, reward)?, tolerance))
}

/// Compares `sigma(u_a - u_b)` with the policy-ratio form
/// `sigma(beta log(pi*_a/ref_a) - beta log(pi*_b/ref_b))` over all pairs.
pub fn preference_identity_check(
    reference: &dyn PolicyTable,
    env: &RewardSpec,
    k: usize,
    beta: f64,
    tolerance: f64,
) -> Result<IdentityCheck> {
    let exact = optimal_policy_single(reference, env, k, beta)?;
    let space = env.space()?;
    let mut worst: f64 = 0.0;
    for (xi, x) in env.prompts.iter().enumerate() {
        let u = env.utility_table(xi, k)?;
        let lr = reference.log_prob_table(&space, x)?;
        let implied: Vec<f64> = exact.log_probs[xi].iter().zip(&lr).map(|(p, r)| beta * (p - r)).collect();
        for a in 0..u.len() {
            for b in a + 1..u.len() {
                let direct = sigmoid(u[a] - u[b]);
                let ratio = sigmoid(implied[a] - implied[b]);
                worst = worst.max((direct - ratio).abs());
            }
        }
    }
    Ok(IdentityCheck::new(worst, tolerance))
}

fn expectation(policy: &dyn PolicyTable, env: &RewardSpec, mut table: impl FnMut(usize) -> Result<Vec<f64>>) -> Result<f64> {
    let space = env.space()?;
    let mut acc = 0.0;
    for (xi, x) in env.prompts.iter().enumerate() {
        let lp = policy.log_prob_table(&space, x)?;
        let r = table(xi)?;
        acc += lp.iter().zip(&r).map(|(l, v)| l.exp() * v).sum::<f64>();
    }
    Ok(acc / env.num_prompts() as f64)
}

/// `E_x E_{y ~ pi}[r_k(x, y)]` of the raw reward, prompts weighted uniformly.
pub fn exact_expected_reward(policy: &dyn PolicyTable, env: &RewardSpec, k: usize) -> Result<f64> {
    expectation(policy, env, |xi| env.reward_table(xi, k))
}

pub fn exact_expected_rewards(policy: &dyn PolicyTable, env: &RewardSpec) -> Result<RewardVector> {
    Ok(RewardVector(
        (0..env.num_objectives)
            .map(|k| exact_expected_reward(policy, env, k))
            .collect::<Result<_>>()?,
    ))
}

/// Orientation-signed expected rewards.
pub fn exact_expected_utilities(policy: &dyn PolicyTable, env: &RewardSpec) -> Result<RewardVector> {
    let raw = exact_expected_rewards(policy, env)?;
    Ok(RewardVector(
        raw.0.iter().zip(&env.orientation).map(|(r, o)| o.sign() * r).collect(),
    ))
}

/// `E_x [E_{y~pi}[w^T u] - beta KL(pi(.|x) || pi_ref(.|x))]`.
pub fn kl_regularized_objective(
    policy: &dyn PolicyTable,
    reference: &dyn PolicyTable,
    env: &RewardSpec,
    w: &WeightVector,
    beta: f64,
) -> Result<f64> {
    let space = env.space()?;
    let mut acc = 0.0;
    for (xi, x) in env.prompts.iter().enumerate() {
        let lp = policy.log_prob_table(&space, x)?;
        let lr = reference.log_prob_table(&space, x)?;
        let s = scalarized_table(env, xi, w)?;
        for i in 0..space.len() {
            let p = lp[i].exp();
            if p > 0.0 {
                acc += p * (s[i] - beta * (lp[i] - lr[i]));
            }
        }
    }
    Ok(acc / env.num_prompts() as f64)
}

/// Slack used when testing Pareto dominance.
pub const DOMINANCE_SLACK: f64 = 1e-9;

/// Whether `a` dominates `b` on utilities by more than `slack`.
pub fn dominates(a: &[f64], b: &[f64], slack: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| *x >= *y - slack) && a.iter().zip(b).any(|(x, y)| *x > *y + slack)
}

/// One exact optimum per weight vector, evaluated exactly.
pub fn exact_pareto_front(
    reference: &dyn PolicyTable,
    env: &RewardSpec,
    beta: f64,
    grid: &[WeightVector],
) -> Result<Vec<ParetoPoint>> {
    if grid.is_empty() {
        return Err(Error::invalid("weight grid is empty"));
    }
    grid.iter()
        .enumerate()
        .map(|(i, w)| {
            let pi = optimal_policy_multi(reference, env, w, beta)?;
            let exact = exact_expected_rewards(&pi, env)?;
            Ok(ParetoPoint {
                w: w.clone(),
                mc_expected: exact.clone(),
                exact_expected: exact,
                kl_to_oracle: 0.0,
                run_id: format!("oracle-{i}"),
                oracle: true,
                failure: None,
            })
        })
        .collect()
}
