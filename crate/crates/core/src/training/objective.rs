use std::collections::HashMap;

use crate::env::{DemoPair, PreferencePair, RewardSpec};
use crate::error::{Error, FailurePoint, Result};
use crate::math::{log_sigmoid, sigmoid, WeightVector};
use crate::policy::{LogProbSeeds, PolicyMode, PolicyParams};
use crate::space::{ResponseSpace, Sequence};

use super::loss::{check_margin_models, pair_log_probs, pair_logit, target_weight, RewardModel};

/// Loss value (when requested) and its linearization in log-probabilities.
#[derive(Debug, Clone, Default)]
pub struct Evaluation {
    pub value: Option<f64>,
    pub seeds: LogProbSeeds,
}

/// A differentiable training loss over a policy.
pub trait Objective {
    /// Evaluates on the full data (`batch = None`) or on the given record indices.
    fn evaluate(&self, policy: &PolicyParams, batch: Option<&[usize]>, want_value: bool) -> Result<Evaluation>;

    /// Number of records available for minibatching; 0 when not record-based.
    fn num_records(&self) -> usize;

    /// Upper bound on the Hessian norm of the full loss, when one is known.
    fn smoothness(&self, policy: &PolicyParams) -> Option<f64>;

    fn value(&self, policy: &PolicyParams) -> Result<f64> {
        Ok(self.evaluate(policy, None, true)?.value.unwrap_or(f64::NAN))
    }

    fn gradient(&self, policy: &PolicyParams) -> Result<Vec<f64>> {
        policy.loss_gradient(&self.evaluate(policy, None, false)?.seeds)
    }
}

fn check_finite(v: f64, what: &str, i: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(what, FailurePoint::Record(i)))
    }
}

/// Mean negative log-likelihood of demonstrations. The full-data form works
/// on distinct (x, y) pairs weighted by their empirical frequency.
pub struct SftObjective {
    records: Vec<DemoPair>,
    unique: Vec<(DemoPair, f64)>,
}

impl SftObjective {
    pub fn new(demos: &[DemoPair]) -> Result<Self> {
        if demos.is_empty() {
            return Err(Error::invalid("demonstration set is empty"));
        }
        let mut index: HashMap<&DemoPair, usize> = HashMap::new();
        let mut unique: Vec<(DemoPair, f64)> = Vec::new();
        let w = 1.0 / demos.len() as f64;
        for d in demos {
            match index.get(d) {
                Some(&i) => unique[i].1 += w,
                None => {
                    index.insert(d, unique.len());
                    unique.push((d.clone(), w));
                }
            }
        }
        Ok(SftObjective {
            records: demos.to_vec(),
            unique,
        })
    }
}

impl Objective for SftObjective {
    fn evaluate(&self, policy: &PolicyParams, batch: Option<&[usize]>, want_value: bool) -> Result<Evaluation> {
        let items: Vec<(&DemoPair, f64)> = match batch {
            None => self.unique.iter().map(|(d, w)| (d, *w)).collect(),
            Some(ix) => {
                let w = 1.0 / ix.len() as f64;
                ix.iter().map(|i| (&self.records[*i], w)).collect()
            }
        };
        let queries: Vec<_> = items.iter().map(|(d, _)| (&d.x, &d.y)).collect();
        let lp = policy.log_prob_batch(&queries)?;
        let mut seeds = LogProbSeeds::new();
        let mut value = 0.0;
        for (i, ((d, w), l)) in items.iter().zip(&lp).enumerate() {
            check_finite(*l, "demonstration log-probability", i)?;
            value -= w * l;
            seeds.push(&d.x, &d.y, -w);
        }
        Ok(Evaluation {
            value: want_value.then_some(value),
            seeds,
        })
    }

    fn num_records(&self) -> usize {
        self.records.len()
    }

    fn smoothness(&self, policy: &PolicyParams) -> Option<f64> {
        if policy.mode() != PolicyMode::Tabular {
            return None;
        }
        // per row: w_x (diag(pi) - pi pi^T), whose norm is at most w_x / 2
        let mut per_prompt: HashMap<&Sequence, f64> = HashMap::new();
        for (d, w) in &self.unique {
            *per_prompt.entry(&d.x).or_default() += w;
        }
        per_prompt.values().copied().reduce(f64::max).map(|m| 0.5 * m)
    }
}

/// DPO / MODPO loss over sampled comparison records.
pub struct PreferenceRecords {
    records: Vec<PreferencePair>,
    ref_lp: Vec<(f64, f64)>,
    margins: Vec<f64>,
    beta: f64,
    w_k: f64,
}

impl PreferenceRecords {
    /// Plain DPO when `modpo` is `None`.
    pub fn new(
        reference: &PolicyParams,
        records: &[PreferencePair],
        beta: f64,
        modpo: Option<(&WeightVector, &[&dyn RewardModel])>,
    ) -> Result<Self> {
        let k = super::loss::common_objective(records)?;
        if !(beta > 0.0) {
            return Err(Error::invalid(format!("beta must be positive, got {beta}")));
        }
        let (w_k, margins) = match modpo {
            None => (1.0, vec![0.0; records.len()]),
            Some((w, models)) => (
                target_weight(w, k)?,
                super::loss::record_margins(records, w, k, models)?,
            ),
        };
        let ref_lp = pair_log_probs(reference, records)?;
        for (i, (a, b)) in ref_lp.iter().enumerate() {
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::numeric("reference log-probability", FailurePoint::Record(i)));
            }
        }
        Ok(PreferenceRecords {
            records: records.to_vec(),
            ref_lp,
            margins,
            beta,
            w_k,
        })
    }
}

impl Objective for PreferenceRecords {
    fn evaluate(&self, policy: &PolicyParams, batch: Option<&[usize]>, want_value: bool) -> Result<Evaluation> {
        let all: Vec<usize>;
        let ix = match batch {
            Some(ix) => ix,
            None => {
                all = (0..self.records.len()).collect();
                &all
            }
        };
        let chosen: Vec<PreferencePair> = ix.iter().map(|i| self.records[*i].clone()).collect();
        let lp = pair_log_probs(policy, &chosen)?;
        let scale = self.beta / self.w_k / ix.len() as f64;
        let mut value = 0.0;
        let mut seeds = LogProbSeeds::new();
        for (j, &i) in ix.iter().enumerate() {
            let (lw, ll) = lp[j];
            let (rw, rl) = self.ref_lp[i];
            let z = pair_logit(self.beta, self.w_k, self.margins[i], lw, rw, ll, rl);
            check_finite(z, "preference log-ratio", i)?;
            value -= log_sigmoid(z);
            // d(-log sigma(z))/dz = -(1 - sigma(z)) = -sigma(-z)
            let g = -sigmoid(-z) * scale;
            let p = &self.records[i];
            seeds.push(&p.x, &p.y_w, g);
            seeds.push(&p.x, &p.y_l, -g);
        }
        Ok(Evaluation {
            value: want_value.then_some(value / ix.len() as f64),
            seeds,
        })
    }

    fn num_records(&self) -> usize {
        self.records.len()
    }

    fn smoothness(&self, policy: &PolicyParams) -> Option<f64> {
        if policy.mode() != PolicyMode::Tabular {
            return None;
        }
        // each record adds (beta/w_k)^2 sigma' (e_w - e_l)(e_w - e_l)^T / N with
        // sigma' <= 1/4; the Laplacian norm is at most twice the largest degree
        let mut degree: HashMap<(&Sequence, &Sequence), usize> = HashMap::new();
        for p in &self.records {
            *degree.entry((&p.x, &p.y_w)).or_default() += 1;
            *degree.entry((&p.x, &p.y_l)).or_default() += 1;
        }
        let max_deg = degree.values().copied().max()? as f64;
        let s = self.beta / self.w_k;
        Some(s * s * 0.25 * 2.0 * max_deg / self.records.len() as f64)
    }
}

struct PromptTable {
    x: Sequence,
    ref_lp: Vec<f64>,
    margin: Vec<f64>,
    /// Bradley-Terry targets `t = u_k(x, .)`.
    target: Vec<f64>,
    /// `sum_{b != a} sigma(t_a - t_b)`.
    target_row: Vec<f64>,
}

/// Exact expected DPO / MODPO loss: every unordered response pair of every
/// prompt, each labeled by its exact Bradley-Terry probability. Prompts are
/// weighted uniformly, pairs uniformly within a prompt.
pub struct PreferencePopulation {
    space: ResponseSpace,
    prompts: Vec<PromptTable>,
    beta: f64,
    w_k: f64,
}

/// Widest score range for which the ratio form of the pair kernel is used.
const RATIO_RANGE: f64 = 600.0;

impl PreferencePopulation {
    pub fn new(
        reference: &PolicyParams,
        env: &RewardSpec,
        prompts: &[Sequence],
        k: usize,
        beta: f64,
        modpo: Option<(&WeightVector, &[&dyn RewardModel])>,
    ) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::invalid(format!("beta must be positive, got {beta}")));
        }
        if prompts.is_empty() {
            return Err(Error::invalid("population objective needs at least one prompt"));
        }
        if k >= env.num_objectives {
            return Err(Error::invalid(format!("objective {k} out of range")));
        }
        let space = env.space()?;
        if space.len() < 2 {
            return Err(Error::invalid("population objective needs at least two responses"));
        }
        let w_k = match modpo {
            None => 1.0,
            Some((w, models)) => {
                check_margin_models(models, w, k)?;
                target_weight(w, k)?
            }
        };
        let mut tables = Vec::with_capacity(prompts.len());
        for x in prompts {
            let ref_lp = reference.response_log_probs(&space, x)?;
            if ref_lp.iter().any(|l| !l.is_finite()) {
                return Err(Error::invalid("reference must be strictly positive on every response"));
            }
            let mut margin = vec![0.0; space.len()];
            if let Some((w, models)) = modpo {
                for m in models {
                    let wj = w.get(m.objective());
                    for (acc, r) in margin.iter_mut().zip(m.reward_table(&space, x)?) {
                        *acc += wj * r;
                    }
                }
            }
            let target = env.utility_table(env.prompt_index(x)?, k)?;
            let target_row = target_row_sums(&target);
            tables.push(PromptTable {
                x: x.clone(),
                ref_lp,
                margin,
                target,
                target_row,
            });
        }
        Ok(PreferencePopulation {
            space,
            prompts: tables,
            beta,
            w_k,
        })
    }

    fn prompt_weight(&self) -> f64 {
        1.0 / self.prompts.len() as f64
    }
}

fn target_row_sums(t: &[f64]) -> Vec<f64> {
    let n = t.len();
    let mut row = vec![0.0; n];
    for a in 0..n {
        for b in a + 1..n {
            let s = sigmoid(t[a] - t[b]);
            row[a] += s;
            row[b] += 1.0 - s;
        }
    }
    row
}

/// Gradient of `c * sum_{a<b} CE(u_a - u_b)` with respect to `u`, plus the
/// value when requested; `c = 2 / (n (n - 1))`.
pub(crate) fn pair_kernel(u: &[f64], target: &[f64], target_row: &[f64], want_value: bool) -> (Vec<f64>, Option<f64>) {
    let n = u.len();
    let c = 2.0 / (n as f64 * (n as f64 - 1.0));
    let (umin, umax) = u.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let mut g = vec![0.0; n];
    let ratio = umax - umin <= RATIO_RANGE;
    if ratio {
        let e: Vec<f64> = u.iter().map(|v| (v - umax).exp()).collect();
        for a in 0..n {
            let ea = e[a];
            let mut ga = 0.0;
            for (gb, eb) in g[a + 1..].iter_mut().zip(&e[a + 1..]) {
                let s = ea / (ea + eb);
                ga += s;
                *gb += 1.0 - s;
            }
            g[a] += ga;
        }
    } else {
        for a in 0..n {
            for b in a + 1..n {
                let s = sigmoid(u[a] - u[b]);
                g[a] += s;
                g[b] += 1.0 - s;
            }
        }
    }
    for (ga, ta) in g.iter_mut().zip(target_row) {
        *ga = c * (*ga - ta);
    }
    let value = want_value.then(|| {
        let (tmin, tmax) = target.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        let t_ratio = tmax - tmin <= RATIO_RANGE;
        let te: Vec<f64> = target.iter().map(|v| (v - tmax).exp()).collect();
        let uh: Vec<f64> = u.iter().map(|v| v - umax).collect();
        let eu: Vec<f64> = uh.iter().map(|v| v.exp()).collect();
        let mut acc = 0.0;
        for a in 0..n {
            let mut row = 0.0;
            for b in a + 1..n {
                let p = if t_ratio { te[a] / (te[a] + te[b]) } else { sigmoid(target[a] - target[b]) };
                row += if ratio {
                    // -p log sigma(d) - (1-p) log sigma(-d), d = u_a - u_b
                    (eu[a] + eu[b]).ln() - p * uh[a] - (1.0 - p) * uh[b]
                } else {
                    let d = u[a] - u[b];
                    -p * log_sigmoid(d) - (1.0 - p) * log_sigmoid(-d)
                };
            }
            acc += row;
        }
        c * acc
    });
    (g, value)
}

impl Objective for PreferencePopulation {
    fn evaluate(&self, policy: &PolicyParams, batch: Option<&[usize]>, want_value: bool) -> Result<Evaluation> {
        if batch.is_some() {
            return Err(Error::invalid("population objectives do not take minibatches"));
        }
        let px = self.prompt_weight();
        let scale = self.beta / self.w_k;
        let mut seeds = LogProbSeeds::new();
        let mut value = 0.0;
        for (xi, t) in self.prompts.iter().enumerate() {
            let lp = policy.response_log_probs(&self.space, &t.x)?;
            let mut u = Vec::with_capacity(lp.len());
            for ((l, r), m) in lp.iter().zip(&t.ref_lp).zip(&t.margin) {
                let v = (self.beta * (l - r) - m) / self.w_k;
                if !v.is_finite() {
                    return Err(Error::numeric("population log-ratio", FailurePoint::Record(xi)));
                }
                u.push(v);
            }
            let (g, v) = pair_kernel(&u, &t.target, &t.target_row, want_value);
            if let Some(v) = v {
                value += px * v;
            }
            seeds.push_dense(&t.x, g.into_iter().map(|gi| px * scale * gi).collect());
        }
        Ok(Evaluation {
            value: want_value.then_some(value),
            seeds,
        })
    }

    fn num_records(&self) -> usize {
        0
    }

    fn smoothness(&self, policy: &PolicyParams) -> Option<f64> {
        if policy.mode() != PolicyMode::Tabular {
            return None;
        }
        // pair differences of u are (beta / w_k) times logit differences; the
        // pair Hessian in u is at most c * n / 4 = 1 / (2 (n - 1))
        let n = self.space.len() as f64;
        let s = self.beta / self.w_k;
        Some(s * s * self.prompt_weight() / (2.0 * (n - 1.0)))
    }
}
