use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sample_index, LoraAdapter, LogProbSeeds, Matrix};
use crate::error::{Error, Result};
use crate::space::{Sequence, VocabSpec};

const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuralDims {
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

/// Offsets of each block inside the flat parameter vector:
/// `E [V x d] | W_h [slots*d x h] | b_h [h] | W_o [h x V] | b_o [V] | A [h x r] | B [r x V]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Layout {
    v: usize,
    d: usize,
    h: usize,
    input: usize,
    rank: usize,
}

impl Layout {
    fn new(vocab: VocabSpec, dims: NeuralDims, rank: usize) -> Self {
        Layout {
            v: vocab.vocab_size,
            d: dims.embed_dim,
            h: dims.hidden_dim,
            input: vocab.context_slots() * dims.embed_dim,
            rank,
        }
    }

    pub(crate) fn embed(&self) -> Range<usize> {
        0..self.v * self.d
    }
    pub(crate) fn wh(&self) -> Range<usize> {
        let s = self.embed().end;
        s..s + self.input * self.h
    }
    pub(crate) fn bh(&self) -> Range<usize> {
        let s = self.wh().end;
        s..s + self.h
    }
    pub(crate) fn wo(&self) -> Range<usize> {
        let s = self.bh().end;
        s..s + self.h * self.v
    }
    pub(crate) fn bo(&self) -> Range<usize> {
        let s = self.wo().end;
        s..s + self.v
    }
    pub(crate) fn base_len(&self) -> usize {
        self.bo().end
    }
    pub(crate) fn lora_a(&self) -> Range<usize> {
        let s = self.base_len();
        s..s + self.h * self.rank
    }
    pub(crate) fn lora_b(&self) -> Range<usize> {
        let s = self.lora_a().end;
        s..s + self.rank * self.v
    }
    fn total(&self) -> usize {
        self.lora_b().end
    }
}

/// Embedding -> one tanh hidden layer -> vocabulary softmax, shared across
/// response positions.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct NeuralPolicy {
    vocab: VocabSpec,
    pub(crate) dims: NeuralDims,
    pub(crate) layout: Layout,
    pub(crate) params: Vec<f64>,
    pub(crate) lora: Option<LoraAdapter>,
}

/// Per-context activations kept for the backward pass.
struct Activations {
    input: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

impl NeuralPolicy {
    pub(crate) fn new(vocab: VocabSpec, dims: NeuralDims, seed: u64) -> Result<Self> {
        if dims.embed_dim == 0 || dims.hidden_dim == 0 {
            return Err(Error::invalid("embed_dim and hidden_dim must be >= 1"));
        }
        let layout = Layout::new(vocab, dims, 0);
        let mut params = vec![0.0; layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in layout.embed().chain(layout.wh()) {
            params[i] = rng.random_range(-INIT_SCALE..INIT_SCALE);
        }
        Ok(NeuralPolicy {
            vocab,
            dims,
            layout,
            params,
            lora: None,
        })
    }

    /// Rebuild from stored parameters (checkpoint loading).
    pub(crate) fn from_params(
        vocab: VocabSpec,
        dims: NeuralDims,
        lora: Option<LoraAdapter>,
        params: Vec<f64>,
    ) -> Result<Self> {
        let layout = Layout::new(vocab, dims, lora.map_or(0, |l| l.rank));
        if params.len() != layout.total() {
            return Err(Error::invalid(format!(
                "neural parameter vector has {} entries, expected {}",
                params.len(),
                layout.total()
            )));
        }
        if let Some(l) = lora {
            check_rank(l.rank, dims.hidden_dim, vocab.vocab_size)?;
        }
        Ok(NeuralPolicy {
            vocab,
            dims,
            layout,
            params,
            lora,
        })
    }

    pub(crate) fn attach_lora(&mut self, rank: usize, base_frozen: bool, seed: u64) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::invalid("policy already carries an adapter"));
        }
        check_rank(rank, self.dims.hidden_dim, self.vocab.vocab_size)?;
        let layout = Layout::new(self.vocab, self.dims, rank);
        self.params.resize(layout.total(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in layout.lora_b() {
            self.params[i] = rng.random_range(-INIT_SCALE..INIT_SCALE);
        }
        self.layout = layout;
        self.lora = Some(LoraAdapter { rank, base_frozen });
        Ok(())
    }

    pub(crate) fn block(&self, r: Range<usize>) -> &[f64] {
        &self.params[r]
    }

    pub(crate) fn set_block(&mut self, r: Range<usize>, m: &Matrix) -> Result<()> {
        if m.data.len() != r.len() {
            return Err(Error::invalid("block shape mismatch"));
        }
        self.params[r].copy_from_slice(&m.data);
        Ok(())
    }

    pub(crate) fn lora_factors(&self) -> Option<(Matrix, Matrix)> {
        let l = self.lora?;
        let a = Matrix::from_vec(self.dims.hidden_dim, l.rank, self.block(self.layout.lora_a()).to_vec()).ok()?;
        let b = Matrix::from_vec(l.rank, self.vocab.vocab_size, self.block(self.layout.lora_b()).to_vec()).ok()?;
        Some((a, b))
    }

    pub(crate) fn set_lora_factors(&mut self, a: &Matrix, b: &Matrix) -> Result<()> {
        let l = self.lora.ok_or_else(|| Error::invalid("policy has no adapter"))?;
        if (a.rows, a.cols) != (self.dims.hidden_dim, l.rank) || (b.rows, b.cols) != (l.rank, self.vocab.vocab_size) {
            return Err(Error::invalid("adapter factor shape mismatch"));
        }
        self.set_block(self.layout.lora_a(), a)?;
        self.set_block(self.layout.lora_b(), b)
    }

    pub(crate) fn blocks(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (v, d, h) = (self.layout.v, self.layout.d, self.layout.h);
        let mut out = vec![
            ("embed", vec![v, d]),
            ("hidden_w", vec![self.layout.input, h]),
            ("hidden_b", vec![h]),
            ("output_w", vec![h, v]),
            ("output_b", vec![v]),
        ];
        if let Some(l) = self.lora {
            out.push(("lora_a", vec![h, l.rank]));
            out.push(("lora_b", vec![l.rank, v]));
        }
        out
    }

    pub(crate) fn trainable_mask(&self) -> Vec<bool> {
        let frozen = self.lora.is_some_and(|l| l.base_frozen);
        let base = self.layout.base_len();
        (0..self.params.len()).map(|i| i >= base || !frozen).collect()
    }

    /// `W_o + A * B`, row-major `[h x V]`.
    pub(crate) fn effective_wo(&self) -> Vec<f64> {
        let mut w = self.block(self.layout.wo()).to_vec();
        if let Some(l) = self.lora {
            let (h, v, r) = (self.layout.h, self.layout.v, l.rank);
            let a = self.block(self.layout.lora_a());
            let b = self.block(self.layout.lora_b());
            for j in 0..h {
                for q in 0..r {
                    let ajq = a[j * r + q];
                    if ajq == 0.0 {
                        continue;
                    }
                    for k in 0..v {
                        w[j * v + k] += ajq * b[q * v + k];
                    }
                }
            }
        }
        w
    }

    /// Context tokens for predicting response position `t`.
    fn context(&self, x: &[u32], prefix: &[u32]) -> Vec<u32> {
        let slots = self.vocab.context_slots();
        let mut ctx = Vec::with_capacity(slots);
        ctx.extend_from_slice(x);
        ctx.extend_from_slice(prefix);
        ctx.resize(slots, self.vocab.pad_token());
        ctx
    }

    fn forward(&self, weff: &[f64], ctx: &[u32]) -> Activations {
        let Layout { v, d, h, input, .. } = self.layout;
        let pad = self.vocab.pad_token();
        let embed = self.block(self.layout.embed());
        let mut x = vec![0.0; input];
        for (s, &tok) in ctx.iter().enumerate() {
            if tok != pad {
                let t = tok as usize;
                x[s * d..(s + 1) * d].copy_from_slice(&embed[t * d..(t + 1) * d]);
            }
        }
        let wh = self.block(self.layout.wh());
        let mut hidden = self.block(self.layout.bh()).to_vec();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (hj, w) in hidden.iter_mut().zip(&wh[i * h..(i + 1) * h]) {
                *hj += xi * w;
            }
        }
        hidden.iter_mut().for_each(|a| *a = a.tanh());
        let mut logits = self.block(self.layout.bo()).to_vec();
        for (j, &hj) in hidden.iter().enumerate() {
            for (l, w) in logits.iter_mut().zip(&weff[j * v..(j + 1) * v]) {
                *l += hj * w;
            }
        }
        Activations {
            input: x,
            hidden,
            logits,
        }
    }

    /// Accumulates parameter gradients for one context given `dL/dlogits`.
    /// Output-projection gradients go to `dweff` and are distributed to
    /// `W_o`, `A` and `B` once all contexts are processed.
    fn backward(
        &self,
        weff: &[f64],
        ctx: &[u32],
        act: &Activations,
        dlogits: &[f64],
        grad: &mut [f64],
        dweff: &mut [f64],
    ) {
        let Layout { v, d, h, .. } = self.layout;
        let pad = self.vocab.pad_token();
        let bo = self.layout.bo();
        for (g, dl) in grad[bo].iter_mut().zip(dlogits) {
            *g += dl;
        }
        let mut dpre = vec![0.0; h];
        for j in 0..h {
            let row = &weff[j * v..(j + 1) * v];
            let drow = &mut dweff[j * v..(j + 1) * v];
            let hj = act.hidden[j];
            let mut dh = 0.0;
            for k in 0..v {
                drow[k] += hj * dlogits[k];
                dh += row[k] * dlogits[k];
            }
            dpre[j] = dh * (1.0 - hj * hj);
        }
        let bh = self.layout.bh();
        for (g, dp) in grad[bh].iter_mut().zip(&dpre) {
            *g += dp;
        }
        let wh_range = self.layout.wh();
        let wh_off = wh_range.start;
        let mut dinput = vec![0.0; act.input.len()];
        {
            let wh = &self.params[wh_range];
            for (i, &xi) in act.input.iter().enumerate() {
                let wrow = &wh[i * h..(i + 1) * h];
                let mut acc = 0.0;
                for j in 0..h {
                    acc += wrow[j] * dpre[j];
                }
                dinput[i] = acc;
                if xi != 0.0 {
                    let g = &mut grad[wh_off + i * h..wh_off + (i + 1) * h];
                    for j in 0..h {
                        g[j] += xi * dpre[j];
                    }
                }
            }
        }
        let e_off = self.layout.embed().start;
        for (s, &tok) in ctx.iter().enumerate() {
            if tok != pad {
                let t = tok as usize;
                let g = &mut grad[e_off + t * d..e_off + (t + 1) * d];
                for (gk, di) in g.iter_mut().zip(&dinput[s * d..(s + 1) * d]) {
                    *gk += di;
                }
            }
        }
    }

    fn finish_output_grad(&self, dweff: &[f64], grad: &mut [f64]) {
        let wo = self.layout.wo();
        for (g, dw) in grad[wo].iter_mut().zip(dweff) {
            *g += dw;
        }
        if let Some(l) = self.lora {
            let (h, v, r) = (self.layout.h, self.layout.v, l.rank);
            let a_off = self.layout.lora_a().start;
            let b_off = self.layout.lora_b().start;
            let a = self.block(self.layout.lora_a()).to_vec();
            let b = self.block(self.layout.lora_b()).to_vec();
            // dA = dW B^T, dB = A^T dW
            for j in 0..h {
                for q in 0..r {
                    let mut acc = 0.0;
                    for k in 0..v {
                        acc += dweff[j * v + k] * b[q * v + k];
                    }
                    grad[a_off + j * r + q] += acc;
                }
            }
            for q in 0..r {
                for k in 0..v {
                    let mut acc = 0.0;
                    for j in 0..h {
                        acc += a[j * r + q] * dweff[j * v + k];
                    }
                    grad[b_off + q * v + k] += acc;
                }
            }
        }
    }

    pub(crate) fn log_prob(&self, x: &Sequence, y: &Sequence) -> f64 {
        let weff = self.effective_wo();
        self.log_prob_with(&weff, x, y)
    }

    pub(crate) fn log_prob_with(&self, weff: &[f64], x: &Sequence, y: &Sequence) -> f64 {
        let yt = y.tokens();
        (0..yt.len())
            .map(|t| {
                let act = self.forward(weff, &self.context(x.tokens(), &yt[..t]));
                let lse = crate::math::log_sum_exp(&act.logits);
                act.logits[yt[t] as usize] - lse
            })
            .sum()
    }

    /// Log-probabilities of every response, walking the prefix tree level by
    /// level so each context is evaluated once.
    pub(crate) fn enumerate_log_probs(&self, x: &Sequence) -> Vec<f64> {
        let weff = self.effective_wo();
        let v = self.vocab.vocab_size;
        let mut cum = vec![0.0];
        for t in 0..self.vocab.response_len {
            let mut next = vec![0.0; cum.len() * v];
            for (p, base) in cum.iter().enumerate() {
                let prefix = decode_prefix(p, t, v);
                let act = self.forward(&weff, &self.context(x.tokens(), &prefix));
                let lse = crate::math::log_sum_exp(&act.logits);
                for k in 0..v {
                    next[p * v + k] = base + act.logits[k] - lse;
                }
            }
            cum = next;
        }
        cum
    }

    pub(crate) fn sample<R: Rng + ?Sized>(&self, x: &Sequence, rng: &mut R) -> Sequence {
        let weff = self.effective_wo();
        let mut prefix: Vec<u32> = Vec::with_capacity(self.vocab.response_len);
        for _ in 0..self.vocab.response_len {
            let act = self.forward(&weff, &self.context(x.tokens(), &prefix));
            let probs = softmax_vec(&act.logits);
            let u: f64 = rng.random();
            prefix.push(sample_index(&probs, u) as u32);
        }
        Sequence(prefix)
    }

    pub(crate) fn accumulate(&self, seeds: &LogProbSeeds, grad: &mut [f64]) -> Result<()> {
        let weff = self.effective_wo();
        let mut dweff = vec![0.0; weff.len()];
        let v = self.vocab.vocab_size;
        for s in &seeds.single {
            self.vocab.check_prompt(&s.x)?;
            self.vocab.check_response(&s.y)?;
            let yt = s.y.tokens();
            for t in 0..yt.len() {
                let ctx = self.context(s.x.tokens(), &yt[..t]);
                let act = self.forward(&weff, &ctx);
                let probs = softmax_vec(&act.logits);
                let mut dl: Vec<f64> = probs.iter().map(|p| -s.coeff * p).collect();
                dl[yt[t] as usize] += s.coeff;
                self.backward(&weff, &ctx, &act, &dl, grad, &mut dweff);
            }
        }
        for dseed in &seeds.dense {
            self.vocab.check_prompt(&dseed.x)?;
            let ly = self.vocab.response_len;
            let expected = v.pow(ly as u32);
            if dseed.coeffs.len() != expected {
                return Err(Error::invalid(format!(
                    "dense seed has {} entries, response space has {expected}",
                    dseed.coeffs.len()
                )));
            }
            // mass[t][p]: total seed of responses whose first t tokens are prefix p
            let mut mass = vec![dseed.coeffs.clone()];
            for _ in 0..ly {
                let child = mass.last().unwrap();
                let parent: Vec<f64> = child.chunks(v).map(|c| c.iter().sum()).collect();
                mass.push(parent);
            }
            mass.reverse();
            for t in 0..ly {
                let (here, below) = (&mass[t], &mass[t + 1]);
                for (p, &m) in here.iter().enumerate() {
                    let children = &below[p * v..(p + 1) * v];
                    if m == 0.0 && children.iter().all(|c| *c == 0.0) {
                        continue;
                    }
                    let prefix = decode_prefix(p, t, v);
                    let ctx = self.context(dseed.x.tokens(), &prefix);
                    let act = self.forward(&weff, &ctx);
                    let probs = softmax_vec(&act.logits);
                    let dl: Vec<f64> = children
                        .iter()
                        .zip(&probs)
                        .map(|(c, pr)| c - pr * m)
                        .collect();
                    self.backward(&weff, &ctx, &act, &dl, grad, &mut dweff);
                }
            }
        }
        self.finish_output_grad(&dweff, grad);
        Ok(())
    }
}

fn check_rank(rank: usize, hidden: usize, vocab: usize) -> Result<()> {
    if rank == 0 {
        return Err(Error::invalid("adapter rank must be >= 1"));
    }
    if rank > hidden.min(vocab) {
        return Err(Error::invalid(format!(
            "adapter rank {rank} exceeds min(hidden_dim, vocab_size) = {}",
            hidden.min(vocab)
        )));
    }
    Ok(())
}

fn decode_prefix(mut p: usize, len: usize, v: usize) -> Vec<u32> {
    let mut out = vec![0u32; len];
    for slot in out.iter_mut().rev() {
        *slot = (p % v) as u32;
        p /= v;
    }
    out
}

fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}
