//! Evaluation of trained policies against the exact oracle, and trend fits.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::RewardSpec;
use crate::error::{Error, Result};
use crate::math::{RewardVector, WeightVector};
use crate::oracle::{exact_expected_rewards, PolicyTable};

/// One evaluated policy on the weight grid. Rewards are raw (not
/// orientation-signed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub w: WeightVector,
    pub exact_expected: RewardVector,
    pub mc_expected: RewardVector,
    /// Mean over prompts of `KL(pi*_w || pi)`.
    pub kl_to_oracle: f64,
    pub run_id: String,
    pub oracle: bool,
    /// Set when the run behind this point failed; values are then NaN.
    pub failure: Option<String>,
}

impl ParetoPoint {
    pub fn failed(w: WeightVector, k: usize, run_id: String, reason: String) -> Self {
        let nan = RewardVector(vec![f64::NAN; k]);
        ParetoPoint {
            w,
            exact_expected: nan.clone(),
            mc_expected: nan,
            kl_to_oracle: f64::NAN,
            run_id,
            oracle: false,
            failure: Some(reason),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvaluation {
    pub exact: Option<RewardVector>,
    pub mc: Option<RewardVector>,
    pub mc_stderr: Option<RewardVector>,
    /// `KL(target || pi)` per prompt, when a target was given.
    pub kl_per_prompt: Option<Vec<f64>>,
}

impl PolicyEvaluation {
    pub fn mean_kl(&self) -> Option<f64> {
        self.kl_per_prompt
            .as_ref()
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// `KL(target(.|x) || policy(.|x))` for every prompt of the environment.
pub fn kl_per_prompt(target: &dyn PolicyTable, policy: &dyn PolicyTable, env: &RewardSpec) -> Result<Vec<f64>> {
    let space = env.space()?;
    env.prompts
        .iter()
        .map(|x| {
            let lp = target.log_prob_table(&space, x)?;
            let lq = policy.log_prob_table(&space, x)?;
            crate::math::kl_from_log_probs(&lp, &lq)
        })
        .collect()
}

/// Monte-Carlo estimate of raw expected rewards from `n_mc` draws per prompt,
/// with standard errors.
pub fn monte_carlo_rewards<R: Rng + ?Sized>(
    policy: &dyn PolicyTable,
    env: &RewardSpec,
    n_mc: usize,
    rng: &mut R,
) -> Result<(RewardVector, RewardVector)> {
    if n_mc == 0 {
        return Err(Error::invalid("n_mc must be positive for Monte-Carlo estimates"));
    }
    let space = env.space()?;
    let k = env.num_objectives;
    let p = env.num_prompts() as f64;
    let mut mean = vec![0.0; k];
    let mut var = vec![0.0; k];
    for (xi, x) in env.prompts.iter().enumerate() {
        let probs: Vec<f64> = policy.log_prob_table(&space, x)?.iter().map(|l| l.exp()).collect();
        let dist = WeightedIndex::new(&probs).map_err(|e| Error::invalid(format!("cannot sample policy: {e}")))?;
        let tables: Vec<Vec<f64>> = (0..k).map(|j| env.reward_table(xi, j)).collect::<Result<_>>()?;
        let mut s = vec![0.0; k];
        let mut s2 = vec![0.0; k];
        for _ in 0..n_mc {
            let i = dist.sample(rng);
            for j in 0..k {
                let r = tables[j][i];
                s[j] += r;
                s2[j] += r * r;
            }
        }
        let n = n_mc as f64;
        for j in 0..k {
            let m = s[j] / n;
            let v = if n_mc > 1 { ((s2[j] - n * m * m) / (n - 1.0)).max(0.0) } else { 0.0 };
            mean[j] += m / p;
            var[j] += v / n / (p * p);
        }
    }
    Ok((RewardVector(mean), RewardVector(var.into_iter().map(f64::sqrt).collect())))
}

/// Exact and Monte-Carlo expected rewards, plus per-prompt KL to `target`.
pub fn eval_policy<R: Rng + ?Sized>(
    policy: &dyn PolicyTable,
    env: &RewardSpec,
    target: Option<&dyn PolicyTable>,
    exact: bool,
    n_mc: usize,
    rng: &mut R,
) -> Result<PolicyEvaluation> {
    if !exact && n_mc == 0 {
        return Err(Error::invalid("nothing to evaluate: exact branch disabled and n_mc = 0"));
    }
    let exact_r = if exact { Some(exact_expected_rewards(policy, env)?) } else { None };
    let (mc, stderr) = if n_mc > 0 {
        let (m, s) = monte_carlo_rewards(policy, env, n_mc, rng)?;
        (Some(m), Some(s))
    } else {
        (None, None)
    };
    let kl = target.map(|t| kl_per_prompt(t, policy, env)).transpose()?;
    Ok(PolicyEvaluation {
        exact: exact_r,
        mc,
        mc_stderr: stderr,
        kl_per_prompt: kl,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
}

/// Ordinary least squares of `ys` on `xs` with an intercept.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> Result<OlsFit> {
    if xs.len() != ys.len() {
        return Err(Error::invalid("xs and ys differ in length"));
    }
    let n = xs.len();
    if n < 3 {
        return Err(Error::invalid("OLS needs at least 3 points"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::invalid("OLS inputs must be finite"));
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= 1e-300 {
        return Err(Error::invalid("OLS xs are all equal"));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - intercept - slope * x;
            r * r
        })
        .sum();
    Ok(OlsFit {
        slope,
        intercept,
        stderr: (ssr / (nf - 2.0) / sxx).sqrt(),
    })
}

/// Points of a weight sweep and the OLS trend of each objective's exact
/// expected reward on the swept weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub swept_objective: usize,
    pub points: Vec<ParetoPoint>,
    /// `None` when fewer than three usable points or a single weight.
    pub slope_per_objective: Vec<Option<OlsFit>>,
    pub config_hash: String,
    pub config: serde_json::Value,
}

impl SweepReport {
    pub fn new(swept_objective: usize, points: Vec<ParetoPoint>, config_hash: String, config: serde_json::Value) -> Self {
        let k = points.first().map(|p| p.exact_expected.len()).unwrap_or(0);
        let usable: Vec<&ParetoPoint> = points.iter().filter(|p| p.failure.is_none()).collect();
        let xs: Vec<f64> = usable.iter().map(|p| p.w.get(swept_objective)).collect();
        let slope_per_objective = (0..k)
            .map(|j| {
                let ys: Vec<f64> = usable.iter().map(|p| p.exact_expected.0[j]).collect();
                ols_slope(&xs, &ys).ok()
            })
            .collect();
        SweepReport {
            swept_objective,
            points,
            slope_per_objective,
            config_hash,
            config,
        }
    }
}
