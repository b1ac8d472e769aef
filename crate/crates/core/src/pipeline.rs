//! End-to-end phase wiring: data, SFT, implicit reward models, MODPO, and the
//! sweep / reference-swap experiments built on top.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, stream, ProposalKind, RunConfig};
use crate::env::{build_env, gen_comparisons, gen_demonstrations, split_dataset, DemoPair, PreferencePair, Proposal, RewardSpec};
use crate::error::{Error, Result};
use crate::eval::{eval_policy, ParetoPoint, SweepReport};
use crate::math::WeightVector;
use crate::oracle::{optimal_policy_multi, PolicyTable};
use crate::policy::{NeuralDims, PolicyParams};
use crate::training::{
    dpo_train, grad_check, modpo_train, sft_train, ImplicitRewardModel, Objective, PreferenceRecords, RewardModel, SftObjective,
    TrainConfig, TrainReport, GRAD_CHECK_STEP,
};

pub const NUM_OBJECTIVES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

impl<T: Clone> Splits<T> {
    fn new(records: Vec<T>, fractions: [f64; 3], seed: u64) -> Result<Self> {
        let (train, val, test) = split_dataset(&records, fractions, seed)?;
        Ok(Splits { train, val, test })
    }

    pub fn all(&self) -> Vec<T> {
        self.train.iter().chain(&self.val).chain(&self.test).cloned().collect()
    }
}

pub fn build_environment(cfg: &RunConfig) -> Result<RewardSpec> {
    build_env(&cfg.env_params()?, cfg.env.orientation.clone())
}

/// Demonstrations drawn from the softmax of objective `k`'s utility.
pub fn gen_demo_data(cfg: &RunConfig, env: &RewardSpec, k: usize) -> Result<Splits<DemoPair>> {
    let mut rng = stream(cfg.seed, &format!("demos:{k}"));
    let demos = gen_demonstrations(
        env,
        &env.prompts,
        k,
        cfg.data.demo_tau,
        cfg.data.demos_per_prompt,
        &mut rng,
    )?;
    Splits::new(demos, cfg.data.split, derive_seed(cfg.seed, &format!("split:demos:{k}")))
}

/// One comparison dataset per objective. `sft` is required when the
/// configured proposal samples from the SFT policy.
pub fn gen_comparison_data(
    cfg: &RunConfig,
    env: &RewardSpec,
    sft: Option<&PolicyParams>,
) -> Result<Vec<Splits<PreferencePair>>> {
    let proposal = match cfg.data.proposal {
        ProposalKind::Uniform => Proposal::Uniform,
        ProposalKind::Sft => Proposal::Policy(
            sft.ok_or_else(|| Error::MissingDependency("SFT policy needed as comparison proposal".into()))?,
        ),
    };
    (0..NUM_OBJECTIVES)
        .map(|k| {
            let mut rng = stream(cfg.seed, &format!("comparisons:{k}"));
            let records = gen_comparisons(env, &env.prompts, k, proposal, cfg.data.comparisons_per_prompt, &mut rng)?;
            Splits::new(records, cfg.data.split, derive_seed(cfg.seed, &format!("split:comparisons:{k}")))
        })
        .collect()
}

/// Training config with the run's master seed folded into the phase seed.
pub fn phase_config(cfg: &RunConfig, phase: &str, base: &TrainConfig) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(cfg.seed, &format!("train:{phase}:{}", base.seed)),
        ..base.clone()
    }
}

/// Phase 1 on the training split of `demos`.
pub fn train_sft(cfg: &RunConfig, env: &RewardSpec, demos: &Splits<DemoPair>) -> Result<TrainReport> {
    let init = cfg.initial_policy(&env.prompts)?;
    sft_train(init, &demos.train, &phase_config(cfg, "sft", &cfg.sft))
}

/// Single-objective DPO from `reference` on objective `k`'s comparisons.
pub fn train_dpo(
    cfg: &RunConfig,
    env: &RewardSpec,
    reference: &PolicyParams,
    comparisons: &Splits<PreferencePair>,
    k: usize,
) -> Result<TrainReport> {
    dpo_train(
        reference.clone(),
        reference,
        &comparisons.train,
        &phase_config(cfg, &format!("dpo:{k}"), &cfg.dpo),
        Some(env),
    )
}

/// Phase 2: implicit reward model of objective `k`, trained against the
/// same reference Phase 3 uses.
pub fn train_reward(
    cfg: &RunConfig,
    env: &RewardSpec,
    reference: &PolicyParams,
    comparisons: &Splits<PreferencePair>,
    k: usize,
) -> Result<TrainReport> {
    dpo_train(
        reference.clone(),
        reference,
        &comparisons.train,
        &phase_config(cfg, &format!("reward:{k}"), &cfg.reward),
        Some(env),
    )
}

pub fn reward_model(cfg: &RunConfig, k: usize, policy: PolicyParams, reference: &PolicyParams) -> ImplicitRewardModel {
    ImplicitRewardModel {
        objective: k,
        policy,
        reference: reference.clone(),
        beta: cfg.reward.beta,
    }
}

/// Phase 3 at weights `w` on objective `k`'s comparisons.
pub fn train_modpo(
    cfg: &RunConfig,
    env: &RewardSpec,
    reference: &PolicyParams,
    comparisons: &Splits<PreferencePair>,
    models: &[ImplicitRewardModel],
    w: &WeightVector,
) -> Result<TrainReport> {
    let dyn_models: Vec<&dyn RewardModel> = models.iter().map(|m| m as &dyn RewardModel).collect();
    let base = TrainConfig {
        w: Some(w.clone()),
        ..cfg.modpo.clone()
    };
    let label = format!("modpo:{}", w.as_slice().iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(","));
    modpo_train(
        reference.clone(),
        reference,
        &comparisons.train,
        &dyn_models,
        &phase_config(cfg, &label, &base),
        Some(env),
    )
}

/// Artifacts of Phases 1-2, shared by every Phase-3 run.
#[derive(Debug, Clone)]
pub struct SharedPhases {
    pub env: RewardSpec,
    pub demos: Splits<DemoPair>,
    pub comparisons: Vec<Splits<PreferencePair>>,
    pub sft: TrainReport,
    /// Implicit reward models for every objective other than the MODPO one.
    pub reward_models: Vec<ImplicitRewardModel>,
}

impl SharedPhases {
    pub fn reference(&self) -> &PolicyParams {
        &self.sft.final_params
    }
}

/// Data generation plus Phases 1-2. The SFT demonstrator follows objective
/// `demo_objective`'s utility.
pub fn run_shared(cfg: &RunConfig, demo_objective: usize) -> Result<SharedPhases> {
    let env = build_environment(cfg)?;
    let demos = gen_demo_data(cfg, &env, demo_objective)?;
    let sft = train_sft(cfg, &env, &demos)?;
    let comparisons = gen_comparison_data(cfg, &env, Some(&sft.final_params))?;
    let reference = &sft.final_params;
    let reward_models = (0..NUM_OBJECTIVES)
        .filter(|j| *j != cfg.modpo_objective)
        .map(|j| {
            let r = train_reward(cfg, &env, reference, &comparisons[j], j)?;
            Ok(reward_model(cfg, j, r.final_params, reference))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SharedPhases {
        env,
        demos,
        comparisons,
        sft,
        reward_models,
    })
}

/// Exact and sampled expected rewards of `policy`, with the mean KL from the
/// exact optimum at `w` under `shared`'s reference.
pub fn evaluate_point(
    cfg: &RunConfig,
    shared: &SharedPhases,
    policy: &dyn PolicyTable,
    w: &WeightVector,
    run_id: &str,
) -> Result<ParetoPoint> {
    let target = optimal_policy_multi(shared.reference(), &shared.env, w, cfg.modpo.beta)?;
    let mut rng = stream(cfg.seed, &format!("eval:{run_id}"));
    let e = eval_policy(policy, &shared.env, Some(&target), true, cfg.eval.n_mc, &mut rng)?;
    let exact = e.exact.clone().expect("exact branch requested");
    Ok(ParetoPoint {
        w: w.clone(),
        mc_expected: e.mc.clone().unwrap_or_else(|| exact.clone()),
        exact_expected: exact,
        kl_to_oracle: e.mean_kl().expect("target given"),
        run_id: run_id.to_string(),
        oracle: false,
        failure: None,
    })
}

/// Weight vector whose `swept` entry is `g`.
pub fn grid_weight(swept: usize, g: f64) -> Result<WeightVector> {
    match swept {
        1 => WeightVector::pair(g),
        0 => WeightVector::pair(1.0 - g),
        _ => Err(Error::invalid("swept objective must be 0 or 1")),
    }
}

pub fn run_id_for(w: &WeightVector) -> String {
    format!("modpo-w{:.4}-{:.4}", w.get(0), w.get(1))
}

/// Result of one sweep: the report and the trained policy at each point.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub report: SweepReport,
    pub policies: Vec<Option<PolicyParams>>,
}

/// Phase 3 at every grid weight on top of shared Phases 1-2. Failed points
/// are kept with a failure marker.
pub fn weight_sweep(cfg: &RunConfig, demo_objective: usize) -> Result<SweepOutcome> {
    let grid: Vec<WeightVector> = cfg
        .sweep
        .grid
        .iter()
        .map(|g| grid_weight(cfg.sweep.swept_objective, *g))
        .collect::<Result<_>>()?;
    let shared = if cfg.sweep.reuse_shared {
        Some(run_shared(cfg, demo_objective)?)
    } else {
        None
    };
    let results: Vec<(ParetoPoint, Option<PolicyParams>)> = grid
        .par_iter()
        .map(|w| {
            let run_id = run_id_for(w);
            let attempt = || -> Result<(ParetoPoint, PolicyParams)> {
                let own;
                let shared = match &shared {
                    Some(s) => s,
                    None => {
                        own = run_shared(cfg, demo_objective)?;
                        &own
                    }
                };
                let k = cfg.modpo_objective;
                let r = train_modpo(cfg, &shared.env, shared.reference(), &shared.comparisons[k], &shared.reward_models, w)?;
                let point = evaluate_point(cfg, shared, &r.final_params, w, &run_id)?;
                Ok((point, r.final_params))
            };
            match attempt() {
                Ok((p, policy)) => (p, Some(policy)),
                Err(e) => (ParetoPoint::failed(w.clone(), NUM_OBJECTIVES, run_id, e.to_string()), None),
            }
        })
        .collect();
    let (points, policies): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(SweepOutcome {
        report: SweepReport::new(cfg.sweep.swept_objective, points, cfg.hash(), cfg.echo()),
        policies,
    })
}

/// Two full pipelines that differ only in the SFT demonstrator: one follows
/// objective 0, the other objective 1's utility (low penalty).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSwapReport {
    pub objective0_reference: SweepReport,
    pub objective1_reference: SweepReport,
}

impl ReferenceSwapReport {
    /// Per grid point, `E[r_1]` under the objective-1 reference minus the
    /// same under the objective-0 reference.
    pub fn penalty_gaps(&self) -> Vec<f64> {
        self.objective1_reference
            .points
            .iter()
            .zip(&self.objective0_reference.points)
            .map(|(b, a)| b.exact_expected.0[1] - a.exact_expected.0[1])
            .collect()
    }
}

pub fn reference_swap_experiment(cfg: &RunConfig) -> Result<ReferenceSwapReport> {
    Ok(ReferenceSwapReport {
        objective0_reference: weight_sweep(cfg, 0)?.report,
        objective1_reference: weight_sweep(cfg, 1)?.report,
    })
}

/// Copy of `policy` with i.i.d. `N(0, scale^2)` noise on every parameter.
pub fn perturbed(policy: &PolicyParams, scale: f64, master: u64, label: &str) -> PolicyParams {
    let mut rng = stream(master, label);
    let mut p = policy.clone();
    for v in p.params_mut() {
        *v += scale * rng.sample::<f64, _>(StandardNormal);
    }
    p
}

/// Records per loss used by [`gradcheck_suite`].
pub const GRADCHECK_RECORDS: usize = 48;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub loss: String,
    pub policy: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

/// Analytic vs central-difference gradients of the SFT, DPO and MODPO losses
/// for tabular, neural, and adapter (frozen and unfrozen) policies at random
/// parameter points, on the first [`GRADCHECK_RECORDS`] training records.
pub fn gradcheck_suite(cfg: &RunConfig) -> Result<Vec<GradCheckEntry>> {
    let mut cfg = cfg.clone();
    cfg.data.proposal = ProposalKind::Uniform;
    let env = build_environment(&cfg)?;
    let mut demos = gen_demo_data(&cfg, &env, 0)?.train;
    demos.truncate(GRADCHECK_RECORDS);
    let k = cfg.modpo_objective;
    let mut comparisons = gen_comparison_data(&cfg, &env, None)?.swap_remove(k).train;
    comparisons.truncate(GRADCHECK_RECORDS);
    let j = 1 - k;
    let w = cfg.modpo.w.clone().unwrap_or(WeightVector::pair(0.5)?);
    let beta = cfg.modpo.beta;

    let vocab = cfg.env.vocab()?;
    let dims = NeuralDims {
        embed_dim: cfg.policy.embed_dim,
        hidden_dim: cfg.policy.hidden_dim,
    };
    let rank = cfg.policy.lora_rank.unwrap_or(2);
    let neural = PolicyParams::neural(vocab, dims, derive_seed(cfg.seed, "gradcheck:init"))?;
    let variants = vec![
        ("tabular", PolicyParams::tabular(vocab, env.prompts.clone(), cfg.env.enumeration_cap)?),
        ("neural", neural.clone()),
        ("neural+adapter(frozen)", neural.clone().with_lora(rank, true, derive_seed(cfg.seed, "gradcheck:lora"))?),
        ("neural+adapter(unfrozen)", neural.with_lora(rank, false, derive_seed(cfg.seed, "gradcheck:lora"))?),
    ];
    let mut out = Vec::new();
    for (name, base) in variants {
        let policy = perturbed(&base, 0.3, cfg.seed, &format!("gradcheck:policy:{name}"));
        let reference = perturbed(&base, 0.3, cfg.seed, &format!("gradcheck:reference:{name}"));
        let model = ImplicitRewardModel {
            objective: j,
            policy: perturbed(&base, 0.3, cfg.seed, &format!("gradcheck:reward:{name}")),
            reference: reference.clone(),
            beta,
        };
        let models: [&dyn RewardModel; 1] = [&model];
        let sft = SftObjective::new(&demos)?;
        let dpo = PreferenceRecords::new(&reference, &comparisons, beta, None)?;
        let modpo = PreferenceRecords::new(&reference, &comparisons, beta, Some((&w, &models)))?;
        for (loss, objective) in [("sft", &sft as &dyn Objective), ("dpo", &dpo), ("modpo", &modpo)] {
            let g = grad_check(&policy, objective, GRAD_CHECK_STEP, derive_seed(cfg.seed, &format!("gradcheck:{name}:{loss}")))?;
            out.push(GradCheckEntry {
                loss: loss.to_string(),
                policy: name.to_string(),
                max_rel_error: g.max_rel_error,
                coords_checked: g.coords_checked,
            });
        }
    }
    Ok(out)
}
