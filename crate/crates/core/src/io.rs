//! On-disk formats: checkpoints, JSON-Lines datasets, environment manifests,
//! sweep tables, and the workdir lock.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::config::FORMAT_VERSION;
use crate::env::RewardSpec;
use crate::error::{Error, Result};
use crate::eval::ParetoPoint;
use crate::math::WeightVector;
use crate::oracle::ExactPolicy;
use crate::policy::{PolicyParams, PolicyState};
use crate::space::VocabSpec;

/// Serde adapter storing floats as decimal strings with 17 significant digits.
pub mod float_strings {
    use super::*;

    pub fn format(v: f64) -> String {
        format!("{v:.16e}")
    }

    pub fn parse(s: &str) -> std::result::Result<f64, String> {
        s.parse::<f64>().map_err(|e| format!("bad float `{s}`: {e}"))
    }

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(values.iter().map(|v| format(*v)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
        let raw: Vec<String> = Vec::deserialize(d)?;
        raw.iter().map(|s| parse(s).map_err(serde::de::Error::custom)).collect()
    }
}

fn check_version(found: u32, path: &Path) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{} has format_version {found}, this build reads {FORMAT_VERSION}",
            path.display()
        )));
    }
    Ok(())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingDependency(format!("{} does not exist", path.display()))
        } else {
            Error::io(path, e)
        }
    })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `sft`, `dpo`, `implicit_reward`, `modpo`, or `oracle`.
    pub role: String,
    pub k: Option<usize>,
    pub w: Option<WeightVector>,
    pub beta: Option<f64>,
    pub oracle: bool,
    pub config_hash: String,
}

impl CheckpointMeta {
    pub fn new(role: &str, config_hash: &str) -> Self {
        CheckpointMeta {
            role: role.to_string(),
            k: None,
            w: None,
            beta: None,
            oracle: false,
            config_hash: config_hash.to_string(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    meta: CheckpointMeta,
    #[serde(flatten)]
    policy: StoredPolicy,
}

#[derive(Serialize, Deserialize)]
struct StoredPolicy {
    mode: crate::policy::PolicyMode,
    vocab_spec: VocabSpec,
    seed: u64,
    prompts: Option<Vec<crate::space::Sequence>>,
    dims: Option<crate::policy::NeuralDims>,
    adapter: Option<crate::policy::LoraAdapter>,
    shapes: Vec<(String, Vec<usize>)>,
    #[serde(with = "float_strings")]
    params: Vec<f64>,
}

pub fn save_checkpoint(path: &Path, policy: &PolicyParams, meta: &CheckpointMeta) -> Result<()> {
    let s = policy.to_state();
    let file = CheckpointFile {
        format_version: FORMAT_VERSION,
        meta: meta.clone(),
        policy: StoredPolicy {
            mode: s.mode,
            vocab_spec: s.vocab_spec,
            seed: s.seed,
            prompts: s.prompts,
            dims: s.dims,
            adapter: s.adapter,
            shapes: s.shapes,
            params: s.params,
        },
    };
    write_json(path, &file)
}

pub fn load_checkpoint(path: &Path) -> Result<(PolicyParams, CheckpointMeta)> {
    let raw: serde_json::Value = read_json(path)?;
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format(format!("{} lacks format_version", path.display())))?;
    check_version(version as u32, path)?;
    let file: CheckpointFile =
        serde_json::from_value(raw).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let p = file.policy;
    let policy = PolicyParams::from_state(PolicyState {
        mode: p.mode,
        vocab_spec: p.vocab_spec,
        seed: p.seed,
        prompts: p.prompts,
        dims: p.dims,
        adapter: p.adapter,
        shapes: p.shapes,
        params: p.params,
    })?;
    Ok((policy, file.meta))
}

/// Tabular policy holding an exact optimum's log-probabilities as logits.
pub fn exact_policy_as_params(policy: &ExactPolicy, vocab: VocabSpec) -> Result<PolicyParams> {
    let logits: Vec<f64> = policy.log_probs.iter().flatten().copied().collect();
    PolicyParams::tabular_with_logits(vocab, policy.prompts.clone(), u64::MAX, logits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    /// `demonstrations` or `comparisons`.
    pub kind: String,
    pub vocab_spec: VocabSpec,
    pub env_seed: u64,
    pub config_hash: String,
    /// Record counts of the train / validation / test blocks, stored in that order.
    pub split: [usize; 3],
}

/// Header line followed by one compact JSON record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, header: &DatasetHeader, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    serde_json::to_writer(&mut out, header)?;
    out.push(b'\n');
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    write_bytes(path, &out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(DatasetHeader, Vec<T>)> {
    let file = File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingDependency(format!("{} does not exist", path.display()))
        } else {
            Error::io(path, e)
        }
    })?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{} is empty", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&first).map_err(|e| Error::Format(format!("{} header: {e}", path.display())))?;
    let version = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0);
    check_version(version as u32, path)?;
    let header: DatasetHeader =
        serde_json::from_value(raw).map_err(|e| Error::Format(format!("{} header: {e}", path.display())))?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 2)))?,
        );
    }
    if header.split.iter().sum::<usize>() != records.len() {
        return Err(Error::Format(format!(
            "{}: header declares {} records, found {}",
            path.display(),
            header.split.iter().sum::<usize>(),
            records.len()
        )));
    }
    Ok((header, records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub env: RewardSpec,
}

pub fn save_env(path: &Path, env: &RewardSpec, config_hash: &str) -> Result<()> {
    write_json(
        path,
        &EnvManifest {
            format_version: FORMAT_VERSION,
            config_hash: config_hash.to_string(),
            env: env.clone(),
        },
    )
}

pub fn load_env(path: &Path) -> Result<EnvManifest> {
    let raw: serde_json::Value = read_json(path)?;
    let version = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0);
    check_version(version as u32, path)?;
    let m: EnvManifest = serde_json::from_value(raw).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    m.env.validate()?;
    Ok(m)
}

pub const SWEEP_COLUMNS: [&str; 8] = ["w_0", "w_1", "exact_r0", "exact_r1", "mc_r0", "mc_r1", "kl_to_oracle", "run_id"];

fn point_row(p: &ParetoPoint) -> Vec<String> {
    let f = |v: f64| format!("{v}");
    vec![
        f(p.w.get(0)),
        f(p.w.get(1)),
        f(p.exact_expected.0[0]),
        f(p.exact_expected.0[1]),
        f(p.mc_expected.0[0]),
        f(p.mc_expected.0[1]),
        f(p.kl_to_oracle),
        p.run_id.clone(),
    ]
}

fn write_points_csv(path: &Path, config_hash: &str, points: &[ParetoPoint], oracle_column: bool) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "# format_version={FORMAT_VERSION} config_hash={config_hash}").map_err(|e| Error::io(path, e))?;
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let mut header: Vec<&str> = SWEEP_COLUMNS.to_vec();
        if oracle_column {
            header.push("oracle");
        }
        w.write_record(&header)?;
        for p in points {
            if p.w.len() != 2 || p.exact_expected.len() != 2 {
                return Err(Error::Unsupported("sweep tables hold two objectives".into()));
            }
            let mut row = point_row(p);
            if oracle_column {
                row.push(p.oracle.to_string());
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    write_bytes(path, &buf)
}

/// `sweep.csv`: a `# format_version=.. config_hash=..` line, then the fixed columns.
pub fn write_sweep_csv(path: &Path, config_hash: &str, points: &[ParetoPoint]) -> Result<()> {
    write_points_csv(path, config_hash, points, false)
}

/// Same columns as the sweep table plus an `oracle` flag.
pub fn write_pareto_csv(path: &Path, config_hash: &str, points: &[ParetoPoint]) -> Result<()> {
    write_points_csv(path, config_hash, points, true)
}

/// Rows of a sweep or Pareto table, as raw strings keyed by the header.
pub fn read_points_csv(path: &Path) -> Result<(String, Vec<csv::StringRecord>, csv::StringRecord)> {
    let text = read_string(path)?;
    let (first, rest) = text
        .split_once('\n')
        .ok_or_else(|| Error::Format(format!("{} is empty", path.display())))?;
    let version = first
        .split_whitespace()
        .find_map(|t| t.strip_prefix("format_version="))
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| Error::Format(format!("{} lacks a format_version line", path.display())))?;
    check_version(version, path)?;
    let mut r = csv::Reader::from_reader(rest.as_bytes());
    let header = r.headers()?.clone();
    let rows = r.records().collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((first.to_string(), rows, header))
}

/// Exclusive claim on a workdir; released on drop.
#[derive(Debug)]
pub struct WorkdirLock {
    path: PathBuf,
}

pub const LOCK_FILE: &str = ".prefalign.lock";

impl WorkdirLock {
    pub fn acquire(workdir: &Path) -> Result<Self> {
        fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
        let path = workdir.join(LOCK_FILE);
        let file = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::io(
                    &path,
                    std::io::Error::new(e.kind(), "workdir is locked by another run (remove the lock file if stale)"),
                )
            } else {
                Error::io(&path, e)
            }
        })?;
        let mut w = BufWriter::new(file);
        writeln!(w, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
        Ok(WorkdirLock { path })
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
