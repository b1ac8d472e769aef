//! Parameterized response policies `pi_theta(y | x)`.
//!
//! Two capacity modes share one interface:
//!
//! * **tabular** keeps one logit per (prompt, full response). Any distribution
//!   over the enumerated response space is representable, so optimization can
//!   be checked against closed-form optima without approximation error.
//! * **neural** is a token-level autoregressive model: the prompt and the
//!   response prefix are embedded, concatenated (right-padded with a reserved
//!   pad id whose embedding is zero), passed through one `tanh` hidden layer
//!   and projected onto the vocabulary. An optional low-rank adapter adds
//!   `A * B` to the output projection.
//!
//! Losses are expressed as linear seeds on log-probabilities
//! ([`LogProbSeeds`]); [`PolicyParams::loss_gradient`] back-propagates them
//! into a flat parameter gradient.

mod neural;
mod seeds;
mod tabular;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FailurePoint, Result};
use crate::space::{ResponseSpace, Sequence, VocabSpec};

pub use neural::NeuralDims;
pub use seeds::{DenseSeed, LogProbSeeds, SingleSeed};

pub(crate) use neural::NeuralPolicy;
pub(crate) use tabular::TabularPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyMode {
    Tabular,
    Neural,
}

impl std::fmt::Display for PolicyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PolicyMode::Tabular => f.write_str("tabular"),
            PolicyMode::Neural => f.write_str("neural"),
        }
    }
}

/// Low-rank update `A * B` on the neural output projection.
///
/// `A` is `hidden_dim x rank`, `B` is `rank x vocab_size`. When `base_frozen`
/// is set only the adapter factors receive gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub rank: usize,
    pub base_frozen: bool,
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::invalid("matmul shape mismatch"));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Body {
    Tabular(TabularPolicy),
    Neural(NeuralPolicy),
}

/// Parameters of a context-conditioned softmax policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab: VocabSpec,
    seed: u64,
    pub(crate) body: Body,
}

impl PolicyParams {
    /// Uniform tabular policy over the enumerated response space of each prompt.
    pub fn tabular(vocab: VocabSpec, prompts: Vec<Sequence>, cap: u64) -> Result<Self> {
        let space = ResponseSpace::new(vocab, cap)?;
        let logits = vec![0.0; prompts.len() * space.len()];
        Self::tabular_with_logits(vocab, prompts, cap, logits)
    }

    /// Tabular policy with an explicit `[num_prompts x |Y|]` logit table.
    pub fn tabular_with_logits(
        vocab: VocabSpec,
        prompts: Vec<Sequence>,
        cap: u64,
        logits: Vec<f64>,
    ) -> Result<Self> {
        let space = ResponseSpace::new(vocab, cap)?;
        let body = TabularPolicy::new(space, prompts, logits)?;
        Ok(PolicyParams {
            vocab,
            seed: 0,
            body: Body::Tabular(body),
        })
    }

    /// Neural policy initialized so that the initial distribution is exactly
    /// uniform: embeddings and hidden weights uniform in `(-0.1, 0.1)`, output
    /// weights and all biases zero.
    pub fn neural(vocab: VocabSpec, dims: NeuralDims, seed: u64) -> Result<Self> {
        vocab.validate()?;
        let body = NeuralPolicy::new(vocab, dims, seed)?;
        Ok(PolicyParams {
            vocab,
            seed,
            body: Body::Neural(body),
        })
    }

    /// Attach a fresh adapter to the output projection: `A = 0`, `B` uniform
    /// in `(-0.1, 0.1)`, so the effective weights are unchanged.
    pub fn with_lora(mut self, rank: usize, base_frozen: bool, seed: u64) -> Result<Self> {
        match &mut self.body {
            Body::Neural(n) => n.attach_lora(rank, base_frozen, seed)?,
            Body::Tabular(_) => {
                return Err(Error::Unsupported(
                    "low-rank adapters attach to the neural output projection".into(),
                ))
            }
        }
        Ok(self)
    }

    pub fn mode(&self) -> PolicyMode {
        match self.body {
            Body::Tabular(_) => PolicyMode::Tabular,
            Body::Neural(_) => PolicyMode::Neural,
        }
    }

    pub fn vocab(&self) -> VocabSpec {
        self.vocab
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn lora(&self) -> Option<LoraAdapter> {
        match &self.body {
            Body::Neural(n) => n.lora,
            Body::Tabular(_) => None,
        }
    }

    /// Freeze or unfreeze the base weights; only meaningful with an adapter.
    pub fn set_base_frozen(&mut self, frozen: bool) -> Result<()> {
        match &mut self.body {
            Body::Neural(n) => match &mut n.lora {
                Some(l) => {
                    l.base_frozen = frozen;
                    Ok(())
                }
                None if !frozen => Ok(()),
                None => Err(Error::invalid("cannot freeze the base without an adapter")),
            },
            Body::Tabular(_) if !frozen => Ok(()),
            Body::Tabular(_) => Err(Error::Unsupported("tabular policies have no adapter".into())),
        }
    }

    pub fn neural_dims(&self) -> Option<NeuralDims> {
        match &self.body {
            Body::Neural(n) => Some(n.dims),
            Body::Tabular(_) => None,
        }
    }

    /// Prompt set of a tabular policy.
    pub fn prompts(&self) -> Option<&[Sequence]> {
        match &self.body {
            Body::Tabular(t) => Some(&t.prompts),
            Body::Neural(_) => None,
        }
    }

    /// All parameters as one flat row-major vector.
    pub fn params(&self) -> &[f64] {
        match &self.body {
            Body::Tabular(t) => &t.logits,
            Body::Neural(n) => &n.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match &mut self.body {
            Body::Tabular(t) => &mut t.logits,
            Body::Neural(n) => &mut n.params,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().len()
    }

    /// `true` for every coordinate that receives gradient.
    pub fn trainable_mask(&self) -> Vec<bool> {
        match &self.body {
            Body::Tabular(t) => vec![true; t.logits.len()],
            Body::Neural(n) => n.trainable_mask(),
        }
    }

    /// Number of trainable parameters. With a frozen base this is
    /// `rank * (hidden_dim + vocab_size)`.
    pub fn trainable_param_count(&self) -> usize {
        self.trainable_mask().iter().filter(|m| **m).count()
    }

    /// Exact autoregressive log-probability `log pi(y | x)`.
    pub fn log_prob(&self, x: &Sequence, y: &Sequence) -> Result<f64> {
        self.vocab.check_prompt(x)?;
        self.vocab.check_response(y)?;
        match &self.body {
            Body::Tabular(t) => t.log_prob(x, y),
            Body::Neural(n) => Ok(n.log_prob(x, y)),
        }
    }

    /// Log-probabilities for a batch of queries; shares per-prompt work.
    pub fn log_prob_batch(&self, queries: &[(&Sequence, &Sequence)]) -> Result<Vec<f64>> {
        for (x, y) in queries {
            self.vocab.check_prompt(x)?;
            self.vocab.check_response(y)?;
        }
        match &self.body {
            Body::Tabular(t) => t.log_prob_batch(queries),
            Body::Neural(n) => {
                let weff = n.effective_wo();
                Ok(queries
                    .iter()
                    .map(|(x, y)| n.log_prob_with(&weff, x, y))
                    .collect())
            }
        }
    }

    /// `log pi(y | x)` for every `y` of the enumerated response space, in
    /// [`ResponseSpace`] index order.
    pub fn response_log_probs(&self, space: &ResponseSpace, x: &Sequence) -> Result<Vec<f64>> {
        self.vocab.check_prompt(x)?;
        if space.vocab() != self.vocab {
            return Err(Error::invalid("response space vocabulary differs from policy"));
        }
        match &self.body {
            Body::Tabular(t) => t.row_log_probs(t.row(x)?),
            Body::Neural(n) => Ok(n.enumerate_log_probs(x)),
        }
    }

    /// Ancestral sample `y ~ pi(. | x)`.
    pub fn sample_response<R: Rng + ?Sized>(&self, x: &Sequence, rng: &mut R) -> Result<Sequence> {
        self.vocab.check_prompt(x)?;
        match &self.body {
            Body::Tabular(t) => t.sample(x, rng),
            Body::Neural(n) => Ok(n.sample(x, rng)),
        }
    }

    /// `W_o + A * B` when an adapter is attached, else `W_o`.
    pub fn effective_output_weights(&self) -> Result<Matrix> {
        match &self.body {
            Body::Neural(n) => Matrix::from_vec(n.dims.hidden_dim, self.vocab.vocab_size, n.effective_wo()),
            Body::Tabular(_) => Err(Error::Unsupported(
                "tabular policies have no output projection".into(),
            )),
        }
    }

    /// Base output projection `W_o` (`hidden_dim x vocab_size`).
    pub fn output_weights(&self) -> Result<Matrix> {
        match &self.body {
            Body::Neural(n) => Matrix::from_vec(
                n.dims.hidden_dim,
                self.vocab.vocab_size,
                n.block(n.layout.wo()).to_vec(),
            ),
            Body::Tabular(_) => Err(Error::Unsupported(
                "tabular policies have no output projection".into(),
            )),
        }
    }

    pub fn set_output_weights(&mut self, w: &Matrix) -> Result<()> {
        match &mut self.body {
            Body::Neural(n) => n.set_block(n.layout.wo(), w),
            Body::Tabular(_) => Err(Error::Unsupported("tabular policies have no output projection".into())),
        }
    }

    /// Adapter factors `(A, B)`.
    pub fn lora_factors(&self) -> Option<(Matrix, Matrix)> {
        match &self.body {
            Body::Neural(n) => n.lora_factors(),
            Body::Tabular(_) => None,
        }
    }

    pub fn set_lora_factors(&mut self, a: &Matrix, b: &Matrix) -> Result<()> {
        match &mut self.body {
            Body::Neural(n) => n.set_lora_factors(a, b),
            Body::Tabular(_) => Err(Error::Unsupported("tabular policies have no adapter".into())),
        }
    }

    /// Back-propagate log-probability seeds into a gradient over
    /// [`params`](Self::params). Frozen coordinates are zero.
    pub fn loss_gradient(&self, seeds: &LogProbSeeds) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.num_params()];
        match &self.body {
            Body::Tabular(t) => t.accumulate(seeds, &mut grad)?,
            Body::Neural(n) => n.accumulate(seeds, &mut grad)?,
        }
        for (g, trainable) in grad.iter_mut().zip(self.trainable_mask()) {
            if !trainable {
                *g = 0.0;
            }
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::numeric("gradient", FailurePoint::Coordinate(i)));
        }
        Ok(grad)
    }

    /// Names and shapes of the parameter blocks in flat order.
    pub fn blocks(&self) -> Vec<(&'static str, Vec<usize>)> {
        match &self.body {
            Body::Tabular(t) => vec![("logits", vec![t.prompts.len(), t.space.len()])],
            Body::Neural(n) => n.blocks(),
        }
    }

    /// Everything needed to rebuild this policy exactly.
    pub fn to_state(&self) -> PolicyState {
        PolicyState {
            mode: self.mode(),
            vocab_spec: self.vocab,
            seed: self.seed,
            prompts: self.prompts().map(<[Sequence]>::to_vec),
            dims: self.neural_dims(),
            adapter: self.lora(),
            shapes: self.blocks().into_iter().map(|(n, s)| (n.to_string(), s)).collect(),
            params: self.params().to_vec(),
        }
    }

    pub fn from_state(state: PolicyState) -> Result<Self> {
        state.vocab_spec.validate()?;
        let body = match state.mode {
            PolicyMode::Tabular => {
                let prompts = state
                    .prompts
                    .ok_or_else(|| Error::Format("tabular policy state without prompts".into()))?;
                let space = ResponseSpace::new(state.vocab_spec, u64::MAX)?;
                Body::Tabular(TabularPolicy::new(space, prompts, state.params)?)
            }
            PolicyMode::Neural => {
                let dims = state
                    .dims
                    .ok_or_else(|| Error::Format("neural policy state without dimensions".into()))?;
                Body::Neural(NeuralPolicy::from_params(state.vocab_spec, dims, state.adapter, state.params)?)
            }
        };
        let policy = PolicyParams {
            vocab: state.vocab_spec,
            seed: state.seed,
            body,
        };
        let shapes: Vec<(String, Vec<usize>)> =
            policy.blocks().into_iter().map(|(n, s)| (n.to_string(), s)).collect();
        if shapes != state.shapes {
            return Err(Error::Format(format!(
                "declared block shapes {:?} do not match {:?}",
                state.shapes, shapes
            )));
        }
        Ok(policy)
    }
}

/// Plain-data form of [`PolicyParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyState {
    pub mode: PolicyMode,
    pub vocab_spec: VocabSpec,
    pub seed: u64,
    pub prompts: Option<Vec<Sequence>>,
    pub dims: Option<NeuralDims>,
    pub adapter: Option<LoraAdapter>,
    pub shapes: Vec<(String, Vec<usize>)>,
    pub params: Vec<f64>,
}

/// Inverse-CDF draw from an unnormalized-safe probability vector.
pub(crate) fn sample_index(probs: &[f64], u: f64) -> usize {
    let total: f64 = probs.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if target < acc {
            return i;
        }
    }
    // u * total can land on the last boundary through rounding
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}
