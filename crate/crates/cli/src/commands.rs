use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use prefalign_core::config::{stream, ProposalKind, RunConfig, FORMAT_VERSION};
use prefalign_core::env::{DemoPair, PreferencePair, RewardSpec};
use prefalign_core::eval::{eval_policy, kl_per_prompt};
use prefalign_core::io::{
    exact_policy_as_params, load_checkpoint, load_env, read_jsonl, save_checkpoint, save_env, write_json, write_jsonl,
    write_pareto_csv, write_sweep_csv, CheckpointMeta, DatasetHeader, WorkdirLock,
};
use prefalign_core::oracle::{
    exact_pareto_front, kl_regularized_objective, optimal_policy_multi, optimal_policy_single,
    preference_identity_check, reparam_identity_check, ExactPolicy, IdentityCheck,
};
use prefalign_core::pipeline::{
    self, gradcheck_suite, grid_weight, reward_model, ReferenceSwapReport, Splits, NUM_OBJECTIVES,
};
use prefalign_core::training::{ImplicitRewardModel, TrainReport};
use prefalign_core::{Error, PolicyParams, Result, Sequence, WeightVector};
use serde::Serialize;
use serde_json::{json, Value};

use crate::workdir::Workdir;
use crate::{Cli, Command, Phase};

/// Gradient agreement threshold for `gradcheck`.
const GRADCHECK_TOLERANCE: f64 = 1e-4;
const IDENTITY_TOLERANCE: f64 = 1e-9;
const DEFAULT_WORKDIR: &str = "prefalign-run";

struct Ctx {
    cfg: RunConfig,
    wd: Workdir,
}

pub fn run(cli: Cli) -> Result<u8> {
    let base = cli.config.as_deref().map(RunConfig::load).transpose()?;
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    let cfg = RunConfig::with_overrides(base.as_ref(), &overrides)?;
    let root = cli
        .workdir
        .clone()
        .or_else(|| cfg.paths.workdir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_WORKDIR));
    let ctx = Ctx {
        cfg,
        wd: Workdir::new(root),
    };
    let _lock = WorkdirLock::acquire(&ctx.wd.root)?;
    write_json(&ctx.wd.run_config(), &ctx.cfg.echo())?;
    match cli.command {
        Command::GenEnv => gen_env(&ctx),
        Command::GenData => gen_data(&ctx),
        Command::Train { phase, k } => train(&ctx, phase, k),
        Command::Oracle => oracle(&ctx),
        Command::Eval { checkpoints } => eval(&ctx, checkpoints),
        Command::Sweep { reference_swap } => sweep(&ctx, reference_swap),
        Command::Gradcheck => gradcheck(&ctx),
    }
}

fn stamp<T: Serialize>(ctx: &Ctx, body: T) -> Result<Value> {
    let mut v = json!({
        "format_version": FORMAT_VERSION,
        "config_hash": ctx.cfg.hash(),
    });
    let extra = serde_json::to_value(body)?;
    if let (Some(dst), Value::Object(src)) = (v.as_object_mut(), extra) {
        dst.extend(src);
    }
    Ok(v)
}

fn gen_env(ctx: &Ctx) -> Result<u8> {
    let env = pipeline::build_environment(&ctx.cfg)?;
    save_env(&ctx.wd.env(), &env, &ctx.cfg.hash())?;
    println!("wrote {}", ctx.wd.env().display());
    Ok(0)
}

fn header(ctx: &Ctx, env: &RewardSpec, kind: &str, split: [usize; 3]) -> DatasetHeader {
    DatasetHeader {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        vocab_spec: env.vocab,
        env_seed: env.seed,
        config_hash: ctx.cfg.hash(),
        split,
    }
}

fn counts<T>(s: &Splits<T>) -> [usize; 3] {
    [s.train.len(), s.val.len(), s.test.len()]
}

fn gen_data(ctx: &Ctx) -> Result<u8> {
    let env = pipeline::build_environment(&ctx.cfg)?;
    save_env(&ctx.wd.env(), &env, &ctx.cfg.hash())?;
    let demos = pipeline::gen_demo_data(&ctx.cfg, &env, 0)?;
    let sft = match ctx.cfg.data.proposal {
        ProposalKind::Sft => Some(load_checkpoint(&ctx.wd.checkpoint("sft"))?.0),
        ProposalKind::Uniform => None,
    };
    let comparisons = pipeline::gen_comparison_data(&ctx.cfg, &env, sft.as_ref())?;

    let mut splits = BTreeMap::new();
    write_jsonl(&ctx.wd.demos(), &header(ctx, &env, "demonstrations", counts(&demos)), &demos.all())?;
    splits.insert(ctx.wd.relative(&ctx.wd.demos()), counts(&demos));
    for (k, c) in comparisons.iter().enumerate() {
        let path = ctx.wd.comparisons(k);
        write_jsonl(&path, &header(ctx, &env, "comparisons", counts(c)), &c.all())?;
        splits.insert(ctx.wd.relative(&path), counts(c));
    }
    write_json(
        &ctx.wd.splits(),
        &stamp(ctx, json!({ "order": ["train", "val", "test"], "files": splits }))?,
    )?;
    println!(
        "wrote {} demonstrations and {} comparisons per objective to {}",
        demos.train.len() + demos.val.len() + demos.test.len(),
        comparisons[0].train.len() + comparisons[0].val.len() + comparisons[0].test.len(),
        ctx.wd.root.display()
    );
    Ok(0)
}

fn load_splits<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Splits<T>> {
    let (h, mut records): (DatasetHeader, Vec<T>) = read_jsonl(path)?;
    let test = records.split_off(h.split[0] + h.split[1]);
    let val = records.split_off(h.split[0]);
    Ok(Splits { train: records, val, test })
}

fn load_environment(ctx: &Ctx) -> Result<RewardSpec> {
    Ok(load_env(&ctx.wd.env())?.env)
}

fn checkpoint_meta(ctx: &Ctx, role: &str, k: Option<usize>, w: Option<WeightVector>, beta: f64) -> CheckpointMeta {
    CheckpointMeta {
        k,
        w,
        beta: Some(beta),
        ..CheckpointMeta::new(role, &ctx.cfg.hash())
    }
}

fn finish_training(ctx: &Ctx, name: &str, phase: &str, k: Option<usize>, report: &TrainReport, meta: CheckpointMeta) -> Result<u8> {
    let path = ctx.wd.checkpoint(name);
    save_checkpoint(&path, &report.final_params, &meta)?;
    let body = json!({
        "phase": phase,
        "k": k,
        "checkpoint": ctx.wd.relative(&path),
        "report": report,
        "config": ctx.cfg.echo(),
    });
    write_json(&ctx.wd.report(name), &stamp(ctx, body)?)?;
    println!(
        "{phase}: {} steps, final loss {:.9}, checkpoint {}",
        report.steps_run,
        report.final_loss,
        path.display()
    );
    Ok(0)
}

fn objective_arg(k: Option<usize>, default: usize) -> Result<usize> {
    let k = k.unwrap_or(default);
    if k >= NUM_OBJECTIVES {
        return Err(Error::invalid(format!("objective index {k} out of range")));
    }
    Ok(k)
}

fn train(ctx: &Ctx, phase: Phase, k: Option<usize>) -> Result<u8> {
    let cfg = &ctx.cfg;
    let env = load_environment(ctx)?;
    match phase {
        Phase::Sft => {
            let demos: Splits<DemoPair> = load_splits(&ctx.wd.demos())?;
            let r = pipeline::train_sft(cfg, &env, &demos)?;
            finish_training(ctx, "sft", "sft", None, &r, checkpoint_meta(ctx, "sft", None, None, cfg.sft.beta))
        }
        Phase::Dpo | Phase::Reward => {
            let default = if phase == Phase::Dpo { cfg.modpo_objective } else { 1 - cfg.modpo_objective };
            let k = objective_arg(k, default)?;
            let (reference, _) = load_checkpoint(&ctx.wd.checkpoint("sft"))?;
            let comps: Splits<PreferencePair> = load_splits(&ctx.wd.comparisons(k))?;
            if phase == Phase::Dpo {
                let r = pipeline::train_dpo(cfg, &env, &reference, &comps, k)?;
                let meta = checkpoint_meta(ctx, "dpo", Some(k), None, cfg.dpo.beta);
                finish_training(ctx, &format!("dpo_k{k}"), "dpo", Some(k), &r, meta)
            } else {
                let r = pipeline::train_reward(cfg, &env, &reference, &comps, k)?;
                let meta = checkpoint_meta(ctx, "implicit_reward", Some(k), None, cfg.reward.beta);
                finish_training(ctx, &format!("reward_k{k}"), "reward", Some(k), &r, meta)
            }
        }
        Phase::Modpo => {
            let k = objective_arg(k, cfg.modpo_objective)?;
            if k != cfg.modpo_objective {
                return Err(Error::invalid(format!(
                    "train modpo runs on objective {} (modpo_objective); got --k {k}",
                    cfg.modpo_objective
                )));
            }
            let (reference, _) = load_checkpoint(&ctx.wd.checkpoint("sft"))?;
            let models = (0..NUM_OBJECTIVES)
                .filter(|j| *j != k)
                .map(|j| {
                    let (policy, meta) = load_checkpoint(&ctx.wd.checkpoint(&format!("reward_k{j}")))?;
                    let mut m = reward_model(cfg, j, policy, &reference);
                    if let Some(b) = meta.beta {
                        m.beta = b;
                    }
                    Ok(m)
                })
                .collect::<Result<Vec<ImplicitRewardModel>>>()?;
            let comps: Splits<PreferencePair> = load_splits(&ctx.wd.comparisons(k))?;
            let w = match &cfg.modpo.w {
                Some(w) => w.clone(),
                None => WeightVector::pair(0.5)?,
            };
            let r = pipeline::train_modpo(cfg, &env, &reference, &comps, &models, &w)?;
            let meta = checkpoint_meta(ctx, "modpo", Some(k), Some(w), cfg.modpo.beta);
            finish_training(ctx, "modpo", "modpo", Some(k), &r, meta)
        }
    }
}

/// SFT checkpoint when present, uniform tabular policy otherwise.
fn oracle_reference(ctx: &Ctx, env: &RewardSpec) -> Result<(PolicyParams, &'static str)> {
    let path = ctx.wd.checkpoint("sft");
    if path.exists() {
        Ok((load_checkpoint(&path)?.0, "sft"))
    } else {
        Ok((
            PolicyParams::tabular(env.vocab, env.prompts.clone(), env.enumeration_cap)?,
            "uniform",
        ))
    }
}

fn grid(cfg: &RunConfig) -> Result<Vec<WeightVector>> {
    cfg.sweep.grid.iter().map(|g| grid_weight(cfg.sweep.swept_objective, *g)).collect()
}

fn save_exact(ctx: &Ctx, env: &RewardSpec, name: &str, policy: &ExactPolicy, k: Option<usize>, w: Option<WeightVector>) -> Result<()> {
    let params = exact_policy_as_params(policy, env.vocab)?;
    let meta = CheckpointMeta {
        oracle: true,
        ..checkpoint_meta(ctx, "oracle", k, w, policy.beta)
    };
    save_checkpoint(&ctx.wd.oracle(&format!("{name}.json")), &params, &meta)
}

fn oracle(ctx: &Ctx) -> Result<u8> {
    let cfg = &ctx.cfg;
    let env = load_environment(ctx)?;
    let space = env.space()?;
    let (reference, reference_kind) = oracle_reference(ctx, &env)?;
    let beta = cfg.modpo.beta;

    for k in 0..NUM_OBJECTIVES {
        let p = optimal_policy_single(&reference, &env, k, beta)?;
        save_exact(ctx, &env, &format!("pi_star_k{k}"), &p, Some(k), None)?;
    }
    let w = cfg.modpo.w.clone().unwrap_or(WeightVector::pair(0.5)?);
    let p = optimal_policy_multi(&reference, &env, &w, beta)?;
    save_exact(ctx, &env, "pi_star_w", &p, None, Some(w))?;

    let front = exact_pareto_front(&reference, &env, beta, &grid(cfg)?)?;
    write_pareto_csv(&ctx.wd.oracle("oracle_pareto.csv"), &cfg.hash(), &front)?;

    let mut checks: Vec<(String, IdentityCheck)> = Vec::new();
    for k in 0..NUM_OBJECTIVES {
        let reward = |x: &Sequence, y: &Sequence| env.utility(x, y, k);
        checks.push((
            format!("reparameterization_k{k}"),
            reparam_identity_check(&reference, &space, &env.prompts, &reward, beta, IDENTITY_TOLERANCE)?,
        ));
        checks.push((
            format!("preference_k{k}"),
            preference_identity_check(&reference, &env, k, beta, IDENTITY_TOLERANCE)?,
        ));
    }
    let all_passed = checks.iter().all(|(_, c)| c.passed);
    let identities: BTreeMap<String, IdentityCheck> = checks.into_iter().collect();
    let body = json!({
        "reference": reference_kind,
        "beta": beta,
        "identities": identities,
        "pareto_points": front,
        "config": cfg.echo(),
    });
    write_json(&ctx.wd.oracle("oracle_report.json"), &stamp(ctx, body)?)?;
    for (name, c) in &identities {
        println!("{name}: residual {:.3e} ({})", c.residual, if c.passed { "ok" } else { "FAILED" });
    }
    println!("wrote {} Pareto rows to {}", front.len(), ctx.wd.oracle("oracle_pareto.csv").display());
    Ok(if all_passed { 0 } else { 4 })
}

fn eval(ctx: &Ctx, checkpoints: Vec<PathBuf>) -> Result<u8> {
    let cfg = &ctx.cfg;
    let env = load_environment(ctx)?;
    let (reference, _) = load_checkpoint(&ctx.wd.checkpoint("sft"))?;
    let w = cfg.modpo.w.clone().unwrap_or(WeightVector::pair(0.5)?);
    let beta = cfg.modpo.beta;
    let target = optimal_policy_multi(&reference, &env, &w, beta)?;
    let paths = if checkpoints.is_empty() {
        let dir = ctx.wd.checkpoints();
        let mut found: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|_| Error::MissingDependency(format!("{} does not exist", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        found.sort();
        found
    } else {
        checkpoints
    };
    for path in paths {
        let (policy, meta) = load_checkpoint(&path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "policy".into());
        let mut rng = stream(cfg.seed, &format!("eval:{name}"));
        let e = eval_policy(&policy, &env, Some(&target), true, cfg.eval.n_mc, &mut rng)?;
        let objective = kl_regularized_objective(&policy, &reference, &env, &w, beta)?;
        let kl_ref = kl_per_prompt(&policy, &reference, &env)?;
        let body = json!({
            "checkpoint": ctx.wd.relative(&path),
            "meta": meta,
            "w": w,
            "beta": beta,
            "exact_expected": e.exact,
            "mc_expected": e.mc,
            "mc_stderr": e.mc_stderr,
            "kl_to_oracle_per_prompt": e.kl_per_prompt,
            "kl_to_oracle": e.mean_kl(),
            "kl_to_reference": kl_ref.iter().sum::<f64>() / kl_ref.len() as f64,
            "kl_regularized_objective": objective,
        });
        write_json(&ctx.wd.eval(&name), &stamp(ctx, body)?)?;
        let ex = e.exact.as_ref().expect("exact requested");
        println!(
            "{name}: E[r0] {:.6} E[r1] {:.6} KL to optimum {:.3e} objective {:.9}",
            ex.0[0],
            ex.0[1],
            e.mean_kl().unwrap_or(f64::NAN),
            objective
        );
    }
    Ok(0)
}

fn sweep(ctx: &Ctx, reference_swap: bool) -> Result<u8> {
    let cfg = &ctx.cfg;
    let outcome = pipeline::weight_sweep(cfg, 0)?;
    let report = &outcome.report;
    write_sweep_csv(&ctx.wd.file("sweep.csv"), &cfg.hash(), &report.points)?;
    write_json(&ctx.wd.file("sweep.json"), &stamp(ctx, report)?)?;
    for (j, s) in report.slope_per_objective.iter().enumerate() {
        match s {
            Some(f) => println!("objective {j}: slope {:.6} (stderr {:.3e})", f.slope, f.stderr),
            None => println!("objective {j}: slope undefined"),
        }
    }
    let failures = report.points.iter().filter(|p| p.failure.is_some()).count();
    if reference_swap {
        let other = pipeline::weight_sweep(cfg, 1)?;
        let swap = ReferenceSwapReport {
            objective0_reference: outcome.report.clone(),
            objective1_reference: other.report,
        };
        let gaps = swap.penalty_gaps();
        write_json(&ctx.wd.file("reference_swap.json"), &stamp(ctx, json!({ "penalty_gaps": gaps, "report": swap }))?)?;
        println!("reference swap E[r1] gaps: {gaps:?}");
    }
    if failures > 0 {
        eprintln!("{failures} sweep point(s) failed; see sweep.json");
        return Ok(4);
    }
    Ok(0)
}

fn gradcheck(ctx: &Ctx) -> Result<u8> {
    let entries = gradcheck_suite(&ctx.cfg)?;
    let worst = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    for e in &entries {
        println!("{:>6} {:<26} max rel error {:.3e} over {} coords", e.loss, e.policy, e.max_rel_error, e.coords_checked);
    }
    write_json(
        &ctx.wd.file("gradcheck.json"),
        &stamp(ctx, json!({ "tolerance": GRADCHECK_TOLERANCE, "max_rel_error": worst, "entries": entries }))?,
    )?;
    Ok(if worst < GRADCHECK_TOLERANCE { 0 } else { 4 })
}
