use std::collections::HashMap;

use rand::Rng;

use super::{sample_index, LogProbSeeds};
use crate::error::{Error, Result};
use crate::math::log_sum_exp;
use crate::space::{ResponseSpace, Sequence};

/// One logit per (prompt, response), row-major `[num_prompts x |Y|]`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct TabularPolicy {
    pub(crate) space: ResponseSpace,
    pub(crate) prompts: Vec<Sequence>,
    index: HashMap<Sequence, usize>,
    pub(crate) logits: Vec<f64>,
}

impl TabularPolicy {
    pub(crate) fn new(space: ResponseSpace, prompts: Vec<Sequence>, logits: Vec<f64>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::invalid("tabular policies need a non-empty prompt set"));
        }
        let vocab = space.vocab();
        let mut index = HashMap::with_capacity(prompts.len());
        for (i, p) in prompts.iter().enumerate() {
            vocab.check_prompt(p)?;
            if index.insert(p.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate prompt {:?}", p.0)));
            }
        }
        if logits.len() != prompts.len() * space.len() {
            return Err(Error::invalid(format!(
                "logit table has {} entries, expected {} x {}",
                logits.len(),
                prompts.len(),
                space.len()
            )));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::invalid("tabular logits must be finite"));
        }
        Ok(TabularPolicy {
            space,
            prompts,
            index,
            logits,
        })
    }

    pub(crate) fn row(&self, x: &Sequence) -> Result<usize> {
        self.index
            .get(x)
            .copied()
            .ok_or_else(|| Error::invalid(format!("prompt {:?} is not in the tabular prompt set", x.0)))
    }

    fn row_logits(&self, r: usize) -> &[f64] {
        let n = self.space.len();
        &self.logits[r * n..(r + 1) * n]
    }

    pub(crate) fn row_log_probs(&self, r: usize) -> Result<Vec<f64>> {
        let logits = self.row_logits(r);
        let lse = log_sum_exp(logits);
        Ok(logits.iter().map(|l| l - lse).collect())
    }

    fn row_probs(&self, r: usize) -> Vec<f64> {
        let logits = self.row_logits(r);
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        p
    }

    pub(crate) fn log_prob(&self, x: &Sequence, y: &Sequence) -> Result<f64> {
        let r = self.row(x)?;
        let logits = self.row_logits(r);
        Ok(logits[self.space.encode_unchecked(y.tokens())] - log_sum_exp(logits))
    }

    pub(crate) fn log_prob_batch(&self, queries: &[(&Sequence, &Sequence)]) -> Result<Vec<f64>> {
        let mut lse: HashMap<usize, f64> = HashMap::new();
        queries
            .iter()
            .map(|(x, y)| {
                let r = self.row(x)?;
                let norm = *lse
                    .entry(r)
                    .or_insert_with(|| log_sum_exp(self.row_logits(r)));
                Ok(self.row_logits(r)[self.space.encode_unchecked(y.tokens())] - norm)
            })
            .collect()
    }

    pub(crate) fn sample<R: Rng + ?Sized>(&self, x: &Sequence, rng: &mut R) -> Result<Sequence> {
        let p = self.row_probs(self.row(x)?);
        let u: f64 = rng.random();
        Ok(self.space.decode(sample_index(&p, u)))
    }

    /// d log pi(y|x) / d logits[x, :] = onehot(y) - pi(.|x).
    pub(crate) fn accumulate(&self, seeds: &LogProbSeeds, grad: &mut [f64]) -> Result<()> {
        let n = self.space.len();
        // total seed mass per row, to subtract pi(.|x) once per row
        let mut row_mass: HashMap<usize, f64> = HashMap::new();
        for s in &seeds.single {
            let r = self.row(&s.x)?;
            let y = self.space.encode(&s.y)?;
            grad[r * n + y] += s.coeff;
            *row_mass.entry(r).or_insert(0.0) += s.coeff;
        }
        for d in &seeds.dense {
            if d.coeffs.len() != n {
                return Err(Error::invalid(format!(
                    "dense seed has {} entries, response space has {n}",
                    d.coeffs.len()
                )));
            }
            let r = self.row(&d.x)?;
            let dst = &mut grad[r * n..(r + 1) * n];
            let mut mass = 0.0;
            for (g, c) in dst.iter_mut().zip(&d.coeffs) {
                *g += c;
                mass += c;
            }
            *row_mass.entry(r).or_insert(0.0) += mass;
        }
        let mut rows: Vec<_> = row_mass.into_iter().collect();
        rows.sort_by_key(|(r, _)| *r);
        for (r, mass) in rows {
            if mass == 0.0 {
                continue;
            }
            let p = self.row_probs(r);
            for (g, pi) in grad[r * n..(r + 1) * n].iter_mut().zip(&p) {
                *g -= mass * pi;
            }
        }
        Ok(())
    }
}
