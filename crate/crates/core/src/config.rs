//! Run configuration: one JSON document drives every phase.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::env::{EnvParams, Orientation, DEFAULT_SPLIT};
use crate::error::{Error, Result};
use crate::math::WeightVector;
use crate::policy::{NeuralDims, PolicyMode, PolicyParams};
use crate::space::{Sequence, VocabSpec, DEFAULT_ENUMERATION_CAP};
use crate::training::TrainConfig;

/// Version stamped into every artifact written by this crate.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvBlock {
    pub vocab_size: usize,
    pub prompt_len: usize,
    pub response_len: usize,
    pub num_prompts: usize,
    pub rho: f64,
    pub enumeration_cap: u64,
    /// Defaults to `[maximize, minimize]`.
    pub orientation: Option<Vec<Orientation>>,
}

impl Default for EnvBlock {
    fn default() -> Self {
        EnvBlock {
            vocab_size: 12,
            prompt_len: 2,
            response_len: 3,
            num_prompts: 8,
            rho: 0.6,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
            orientation: None,
        }
    }
}

impl EnvBlock {
    pub fn vocab(&self) -> Result<VocabSpec> {
        VocabSpec::new(self.vocab_size, self.prompt_len, self.response_len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalKind {
    Uniform,
    /// Sample comparison pairs from the SFT policy.
    Sft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataBlock {
    pub demos_per_prompt: usize,
    /// Softmax temperature of the demonstrator.
    pub demo_tau: f64,
    pub comparisons_per_prompt: usize,
    pub proposal: ProposalKind,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
}

impl Default for DataBlock {
    fn default() -> Self {
        DataBlock {
            demos_per_prompt: 64,
            demo_tau: 0.25,
            comparisons_per_prompt: 128,
            proposal: ProposalKind::Uniform,
            split: DEFAULT_SPLIT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyBlock {
    pub mode: PolicyMode,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Attach an adapter of this rank to the neural output projection.
    pub lora_rank: Option<usize>,
}

impl Default for PolicyBlock {
    fn default() -> Self {
        PolicyBlock {
            mode: PolicyMode::Tabular,
            embed_dim: 8,
            hidden_dim: 32,
            lora_rank: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepBlock {
    /// Values of the swept objective's weight; the other objective gets the rest.
    pub grid: Vec<f64>,
    pub swept_objective: usize,
    /// Train Phases 1-2 once and share them across grid points.
    pub reuse_shared: bool,
}

impl Default for SweepBlock {
    fn default() -> Self {
        SweepBlock {
            grid: (1..=9).map(|i| i as f64 / 10.0).collect(),
            swept_objective: 1,
            reuse_shared: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalBlock {
    /// Monte-Carlo draws per prompt; 0 disables the sampled estimate.
    pub n_mc: usize,
}

impl Default for EvalBlock {
    fn default() -> Self {
        EvalBlock { n_mc: 1000 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsBlock {
    pub workdir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub env: EnvBlock,
    pub data: DataBlock,
    pub policy: PolicyBlock,
    pub sft: TrainConfig,
    pub dpo: TrainConfig,
    pub reward: TrainConfig,
    pub modpo: TrainConfig,
    /// Objective whose comparisons drive Phase 3; the others enter as margins.
    pub modpo_objective: usize,
    pub sweep: SweepBlock,
    pub eval: EvalBlock,
    /// Not part of the echo or hash, so relocating a run changes no output.
    #[serde(skip_serializing)]
    pub paths: PathsBlock,
}

impl Default for RunConfig {
    fn default() -> Self {
        let preference = TrainConfig {
            steps: 2000,
            ..TrainConfig::default()
        };
        RunConfig {
            seed: 0,
            env: EnvBlock::default(),
            data: DataBlock::default(),
            policy: PolicyBlock::default(),
            sft: TrainConfig {
                steps: 500,
                ..TrainConfig::default()
            },
            dpo: preference.clone(),
            reward: preference.clone(),
            modpo: TrainConfig {
                w: Some(WeightVector::pair(0.5).expect("valid weights")),
                ..preference
            },
            modpo_objective: 0,
            sweep: SweepBlock::default(),
            eval: EvalBlock::default(),
            paths: PathsBlock::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// Applies `key.path=value` overrides to `base` (or the defaults).
    /// Values parse as JSON and fall back to plain strings.
    pub fn with_overrides(base: Option<&RunConfig>, overrides: &[String]) -> Result<Self> {
        let default = RunConfig::default();
        let base = base.unwrap_or(&default);
        let mut tree = serde_json::to_value(base)?;
        if let Some(dir) = &base.paths.workdir {
            tree["paths"] = serde_json::json!({ "workdir": dir });
        }
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("override `{item}` is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut tree, key, value)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(tree).map_err(|e| Error::invalid(format!("config after overrides: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.vocab()?;
        if !(-1.0..=1.0).contains(&self.env.rho) {
            return Err(Error::invalid(format!("rho must lie in [-1, 1], got {}", self.env.rho)));
        }
        if self.env.num_prompts == 0 {
            return Err(Error::invalid("num_prompts must be positive"));
        }
        if let Some(o) = &self.env.orientation {
            if o.len() != 2 {
                return Err(Error::invalid("orientation needs one entry per objective (2)"));
            }
        }
        if !(self.data.demo_tau > 0.0) {
            return Err(Error::invalid("demo_tau must be positive"));
        }
        if self.data.split.iter().any(|f| !(0.0..=1.0).contains(f))
            || (self.data.split.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::invalid("split fractions must be in [0, 1] and sum to 1"));
        }
        for (name, t) in [("sft", &self.sft), ("dpo", &self.dpo), ("reward", &self.reward), ("modpo", &self.modpo)] {
            t.validate().map_err(|e| Error::invalid(format!("{name}: {e}")))?;
        }
        if self.modpo_objective >= 2 || self.sweep.swept_objective >= 2 {
            return Err(Error::invalid("objective indices must be 0 or 1"));
        }
        if let Some(w) = &self.modpo.w {
            if w.len() != 2 {
                return Err(Error::invalid("modpo.w needs two weights"));
            }
        }
        if self.sweep.grid.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::invalid("sweep grid values must lie in [0, 1]"));
        }
        if self.policy.mode == PolicyMode::Neural && (self.policy.embed_dim == 0 || self.policy.hidden_dim == 0) {
            return Err(Error::invalid("neural dimensions must be positive"));
        }
        if self.policy.lora_rank.is_some() && self.policy.mode == PolicyMode::Tabular {
            return Err(Error::invalid("lora_rank needs policy.mode = neural"));
        }
        Ok(())
    }

    pub fn env_params(&self) -> Result<EnvParams> {
        let mut p = EnvParams::new(
            derive_seed(self.seed, "env"),
            self.env.vocab()?,
            self.env.num_prompts,
            self.env.rho,
        );
        p.enumeration_cap = self.env.enumeration_cap;
        Ok(p)
    }

    /// Fresh policy as configured, before Phase 1.
    pub fn initial_policy(&self, prompts: &[Sequence]) -> Result<PolicyParams> {
        let vocab = self.env.vocab()?;
        match self.policy.mode {
            PolicyMode::Tabular => PolicyParams::tabular(vocab, prompts.to_vec(), self.env.enumeration_cap),
            PolicyMode::Neural => {
                let dims = NeuralDims {
                    embed_dim: self.policy.embed_dim,
                    hidden_dim: self.policy.hidden_dim,
                };
                let p = PolicyParams::neural(vocab, dims, derive_seed(self.seed, "init"))?;
                match self.policy.lora_rank {
                    Some(r) => p.with_lora(r, self.sft.freeze_adapter_base, derive_seed(self.seed, "adapter")),
                    None => Ok(p),
                }
            }
        }
    }

    /// Serialized form echoed into artifacts.
    pub fn echo(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::invalid(format!("override `{key}`: `{part}` is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        node = obj.entry((*part).to_string()).or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    Err(Error::invalid("empty override key"))
}

/// Seeded generator for the stream called `label`.
pub fn stream(master: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label))
}

/// Independent 64-bit seed for the stream called `label`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
