use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::env::{build_env, gen_comparisons, gen_demonstrations, EnvParams, Proposal};
use crate::policy::NeuralDims;
use crate::space::{ResponseSpace, VocabSpec, DEFAULT_ENUMERATION_CAP};

fn small_env(seed: u64) -> RewardSpec {
    build_env(&EnvParams::new(seed, VocabSpec::new(4, 1, 3).unwrap(), 3, 0.6), None).unwrap()
}

fn uniform(env: &RewardSpec) -> PolicyParams {
    PolicyParams::tabular(env.vocab, env.prompts.clone(), DEFAULT_ENUMERATION_CAP).unwrap()
}

fn random_tabular(env: &RewardSpec, seed: u64, scale: f64) -> PolicyParams {
    let mut p = uniform(env);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in p.params_mut() {
        *l = rng.random_range(-scale..scale);
    }
    p
}

fn comparisons(env: &RewardSpec, k: usize, n: usize, seed: u64) -> Vec<PreferencePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gen_comparisons(env, &env.prompts, k, Proposal::Uniform, n, &mut rng).unwrap()
}

/// Closed-form optimum `ref * exp(u / beta) / Z`, built from direct utility
/// evaluations, as probabilities per prompt.
fn oracle_policy(env: &RewardSpec, reference: &PolicyParams, weights: &[f64], beta: f64) -> Vec<Vec<f64>> {
    let space = env.space().unwrap();
    env.prompts
        .iter()
        .map(|x| {
            let lr = reference.response_log_probs(&space, x).unwrap();
            let logits: Vec<f64> = space
                .iter()
                .zip(&lr)
                .map(|(y, l)| {
                    let s: f64 = weights
                        .iter()
                        .enumerate()
                        .map(|(k, w)| w * env.utility(x, &y, k).unwrap())
                        .sum();
                    l + s / beta
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            logits.iter().map(|l| (l - m).exp() / z).collect()
        })
        .collect()
}

fn kl_per_prompt(target: &[Vec<f64>], policy: &PolicyParams, env: &RewardSpec) -> Vec<f64> {
    let space = env.space().unwrap();
    env.prompts
        .iter()
        .zip(target)
        .map(|(x, p)| {
            let lq = policy.response_log_probs(&space, x).unwrap();
            p.iter().zip(&lq).filter(|(a, _)| **a > 0.0).map(|(a, l)| a * (a.ln() - l)).sum()
        })
        .collect()
}

fn population_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        ..TrainConfig::default()
    }
}

struct FixedReward {
    k: usize,
    good: Sequence,
}

impl RewardModel for FixedReward {
    fn objective(&self) -> usize {
        self.k
    }
    fn reward(&self, _x: &Sequence, y: &Sequence) -> Result<f64> {
        Ok(if *y == self.good { 2.0 } else { -1.0 })
    }
}

#[test]
fn dpo_loss_examples() {
    let env = small_env(1);
    let batch = comparisons(&env, 0, 5, 2);
    let reference = random_tabular(&env, 3, 1.0);
    let l = dpo_loss(&reference, &reference, &batch, 0.1).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-15);

    // one pair with log-ratio difference 10 at beta = 0.1
    let pair = batch[0].clone();
    let space = env.space().unwrap();
    let mut policy = reference.clone();
    let row = env.prompt_index(&pair.x).unwrap() * space.len();
    policy.params_mut()[row + space.encode(&pair.y_w).unwrap()] += 10.0;
    let one = std::slice::from_ref(&pair);
    let l = dpo_loss(&policy, &reference, one, 0.1).unwrap();
    assert!((l - 0.313262).abs() < 1e-6, "{l}");
    // doubling beta doubles the logistic argument: -log sigma(2)
    let l2 = dpo_loss(&policy, &reference, one, 0.2).unwrap();
    assert!((l2 - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);

    let mut mixed = batch.clone();
    mixed[1].objective_index = 1;
    assert!(matches!(dpo_loss(&policy, &reference, &mixed, 0.1), Err(Error::InvalidArgument(_))));
}

#[test]
fn modpo_reductions() {
    let env = small_env(2);
    let reference = random_tabular(&env, 1, 1.0);
    let policy = random_tabular(&env, 2, 1.0);
    let batch = comparisons(&env, 0, 4, 3);
    let dpo = dpo_loss(&policy, &reference, &batch, 0.1).unwrap();
    let one = WeightVector::new(vec![1.0]).unwrap();
    assert_eq!(modpo_loss(&policy, &reference, &batch, &one, 0.1, &[]).unwrap().to_bits(), dpo.to_bits());

    let m1 = TrueRewardModel { env: &env, objective: 1 };
    let w10 = WeightVector::new(vec![1.0, 0.0]).unwrap();
    let l = modpo_loss(&policy, &reference, &batch, &w10, 0.1, &[&m1]).unwrap();
    assert!((l - dpo).abs() < 1e-12);

    let zero = FixedReward { k: 1, good: Sequence(vec![9]) };
    for wk in [0.2, 0.5, 0.9] {
        let w = WeightVector::pair(1.0 - wk).unwrap();
        let l = modpo_loss(&reference, &reference, &batch, &w, 0.1, &[&zero]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }
    let w01 = WeightVector::new(vec![0.0, 1.0]).unwrap();
    assert!(matches!(
        modpo_loss(&policy, &reference, &batch, &w01, 0.1, &[&m1]),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn margin_examples() {
    let x = Sequence(vec![0]);
    let (yw, yl) = (Sequence(vec![1, 1, 1]), Sequence(vec![2, 2, 2]));
    let m = FixedReward { k: 1, good: yw.clone() };
    let half = WeightVector::pair(0.5).unwrap();
    assert_eq!(modpo_margin(&[&m], &half, 0, &x, &yw, &yl).unwrap(), 1.5);
    assert_eq!(modpo_margin(&[&m], &half, 0, &x, &yw, &yw).unwrap(), 0.0);
    let w10 = WeightVector::pair(0.0).unwrap();
    assert_eq!(modpo_margin(&[&m], &w10, 0, &x, &yw, &yl).unwrap(), 0.0);
    assert!(modpo_margin(&[], &half, 0, &x, &yw, &yl).is_err());
    assert!(modpo_margin(&[&m], &half, 1, &x, &yw, &yl).is_err());
}

#[test]
fn dpo_loss_depends_on_reference_only_through_batch_ratios() {
    let env = small_env(3);
    let space = env.space().unwrap();
    let batch = comparisons(&env, 0, 2, 5);
    let policy = random_tabular(&env, 4, 1.0);
    let reference = random_tabular(&env, 5, 1.0);
    // reverse the logits of responses outside the batch: row normalizers and
    // batch probabilities are unchanged
    let mut other = reference.clone();
    for (xi, x) in env.prompts.iter().enumerate() {
        let used: Vec<usize> = batch
            .iter()
            .filter(|p| p.x == *x)
            .flat_map(|p| [space.encode(&p.y_w).unwrap(), space.encode(&p.y_l).unwrap()])
            .collect();
        let free: Vec<usize> = (0..space.len()).filter(|i| !used.contains(i)).collect();
        let row = xi * space.len();
        let vals: Vec<f64> = free.iter().map(|i| reference.params()[row + i]).collect();
        for (i, v) in free.iter().zip(vals.iter().rev()) {
            other.params_mut()[row + i] = *v;
        }
    }
    assert_ne!(other.params(), reference.params());
    let a = dpo_loss(&policy, &reference, &batch, 0.1).unwrap();
    let b = dpo_loss(&policy, &other, &batch, 0.1).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn modpo_loss_decreases_with_winner_probability() {
    let env = small_env(4);
    let space = env.space().unwrap();
    let reference = random_tabular(&env, 6, 1.0);
    let policy = random_tabular(&env, 7, 1.0);
    let batch = comparisons(&env, 0, 1, 8);
    let m1 = TrueRewardModel { env: &env, objective: 1 };
    let w = WeightVector::pair(0.4).unwrap();
    let p = &batch[0];
    let idx = env.prompt_index(&p.x).unwrap() * space.len() + space.encode(&p.y_w).unwrap();
    let mut last = modpo_loss(&policy, &reference, &batch, &w, 0.1, &[&m1]).unwrap();
    let mut probe = policy.clone();
    for _ in 0..5 {
        probe.params_mut()[idx] += 0.3;
        let l = modpo_loss(&probe, &reference, &batch, &w, 0.1, &[&m1]).unwrap();
        assert!(l < last);
        last = l;
    }
}

#[test]
fn quadratic_probe_gradcheck() {
    let theta = vec![0.3, -1.2, 2.5, 0.0];
    let analytic: Vec<f64> = theta.iter().map(|t| 2.0 * t).collect();
    let err = grad_check_fn(&theta, &analytic, &[0, 1, 2, 3], 1e-5, |t| t.iter().map(|v| v * v).sum());
    assert!(err < 1e-9, "{err}");
}

#[test]
fn gradcheck_flags_small_analytic_errors() {
    let env = small_env(5);
    let c0 = comparisons(&env, 0, 4, 9);
    let reference = random_tabular(&env, 1, 1.0);
    let policy = random_tabular(&env, 2, 1.0);
    let obj = PreferenceRecords::new(&reference, &c0, 0.1, None).unwrap();
    let mut analytic = obj.gradient(&policy).unwrap();
    let all: Vec<usize> = (0..analytic.len()).collect();
    let f = |t: &[f64]| {
        let mut p = policy.clone();
        p.params_mut().copy_from_slice(t);
        obj.value(&p).unwrap()
    };
    assert!(grad_check_fn(policy.params(), &analytic, &all, GRAD_CHECK_STEP, f) < 1e-6);
    let i = (0..analytic.len())
        .max_by(|a, b| analytic[*a].abs().total_cmp(&analytic[*b].abs()))
        .unwrap();
    analytic[i] *= 1.0 + 1e-3;
    let err = grad_check_fn(policy.params(), &analytic, &all, GRAD_CHECK_STEP, f);
    assert!(err > 5e-4, "{err}");
}

#[test]
fn gradients_of_all_losses() {
    let env = small_env(5);
    let demos = gen_demonstrations(&env, &env.prompts, 0, 0.5, 6, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let c0 = comparisons(&env, 0, 4, 9);
    let w = WeightVector::pair(0.35).unwrap();
    let dims = NeuralDims { embed_dim: 3, hidden_dim: 4 };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut randomized = |p: PolicyParams| {
        let mut p = p;
        for v in p.params_mut() {
            *v = rng.random_range(-0.7..0.7);
        }
        p
    };
    let neural_ref = randomized(PolicyParams::neural(env.vocab, dims, 1).unwrap());
    let neural = randomized(PolicyParams::neural(env.vocab, dims, 2).unwrap());
    let phi = ImplicitRewardModel {
        objective: 1,
        policy: randomized(neural_ref.clone()),
        reference: neural_ref.clone(),
        beta: 0.1,
    };
    let tab_ref = random_tabular(&env, 10, 1.0);
    let tab = random_tabular(&env, 11, 1.0);
    let mut lora_frozen = neural.clone().with_lora(2, true, 3).unwrap();
    let mut lora_open = neural.clone().with_lora(2, false, 4).unwrap();
    for p in [&mut lora_frozen, &mut lora_open] {
        let (a, b) = p.lora_factors().unwrap();
        let a2 = crate::policy::Matrix::from_vec(a.rows, a.cols, (0..a.data.len()).map(|i| 0.1 * (i as f64).sin()).collect()).unwrap();
        p.set_lora_factors(&a2, &b).unwrap();
    }

    let cases: Vec<(&PolicyParams, &PolicyParams)> = vec![
        (&tab, &tab_ref),
        (&neural, &neural_ref),
        (&lora_frozen, &neural_ref),
        (&lora_open, &neural_ref),
    ];
    for (policy, reference) in cases {
        let sft = SftObjective::new(&demos).unwrap();
        let dpo = PreferenceRecords::new(reference, &c0, 0.1, None).unwrap();
        let modpo = PreferenceRecords::new(reference, &c0, 0.1, Some((&w, &[&phi]))).unwrap();
        let pop = PreferencePopulation::new(reference, &env, &env.prompts, 0, 0.1, Some((&w, &[&phi]))).unwrap();
        for (name, obj) in [("sft", &sft as &dyn Objective), ("dpo", &dpo), ("modpo", &modpo), ("population", &pop)] {
            let r = grad_check(policy, obj, GRAD_CHECK_STEP, 0).unwrap();
            assert!(r.max_rel_error < 1e-4, "{name} {:?} {}", policy.mode(), r.max_rel_error);
        }
    }
}

#[test]
fn record_objective_matches_loss_functions() {
    let env = small_env(6);
    let reference = random_tabular(&env, 1, 1.0);
    let policy = random_tabular(&env, 2, 1.0);
    let c0 = comparisons(&env, 0, 3, 1);
    let m1 = TrueRewardModel { env: &env, objective: 1 };
    let w = WeightVector::pair(0.3).unwrap();
    let obj = PreferenceRecords::new(&reference, &c0, 0.1, Some((&w, &[&m1]))).unwrap();
    let direct = modpo_loss(&policy, &reference, &c0, &w, 0.1, &[&m1]).unwrap();
    assert!((obj.value(&policy).unwrap() - direct).abs() < 1e-14);
}

#[test]
fn population_kernel_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for spread in [3.0, 900.0] {
        let n = 7;
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-spread..spread)).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let mut row = vec![0.0; n];
        let mut value = 0.0;
        let mut grad = vec![0.0; n];
        let pairs = (n * (n - 1) / 2) as f64;
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    continue;
                }
                let p = sig(t[a] - t[b]);
                row[a] += p;
                grad[a] += (sig(u[a] - u[b]) - p) / pairs;
                if a < b {
                    let d = u[a] - u[b];
                    let ls = |z: f64| if z > 0.0 { -(-z).exp().ln_1p() } else { z - z.exp().ln_1p() };
                    value += (-p * ls(d) - (1.0 - p) * ls(-d)) / pairs;
                }
            }
        }
        let (g, v) = objective::pair_kernel(&u, &t, &row, true);
        assert!((v.unwrap() - value).abs() < 1e-10 * value.abs().max(1.0));
        for (a, b) in g.iter().zip(&grad) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn sft_point_mass_and_zero_steps() {
    let env = small_env(7);
    let x = env.prompts[0].clone();
    let y = Sequence(vec![2, 0, 3]);
    let demos = vec![DemoPair { x: x.clone(), y: y.clone() }; 10];
    let cfg = TrainConfig {
        mode: TrainMode::Minibatch,
        step_size: StepSize::Fixed(0.5),
        steps: 300,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let r = sft_train(uniform(&env), &demos, &cfg).unwrap();
    assert!(r.final_params.log_prob(&x, &y).unwrap().exp() > 0.999);

    let init = random_tabular(&env, 3, 1.0);
    let r = sft_train(init.clone(), &demos, &population_cfg(0)).unwrap();
    assert_eq!(r.final_params, init);
    assert!(sft_train(init, &[], &population_cfg(1)).is_err());
}

#[test]
fn sft_population_reaches_empirical_entropy() {
    // small space with every response observed, so the optimum is finite
    let env = build_env(&EnvParams::new(3, VocabSpec::new(3, 1, 2).unwrap(), 2, 0.2), None).unwrap();
    let space = env.space().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let demos = gen_demonstrations(&env, &env.prompts, 0, 1.0, 400, &mut rng).unwrap();
    let mut counts = vec![vec![0.0; space.len()]; 2];
    for d in &demos {
        counts[env.prompt_index(&d.x).unwrap()][space.encode(&d.y).unwrap()] += 1.0;
    }
    assert!(counts.iter().flatten().all(|c| *c > 0.0));
    let n = demos.len() as f64;
    let entropy: f64 = counts.iter().flatten().map(|c| -(c / n) * (c / 400.0).ln()).sum();
    let r = sft_train(uniform(&env), &demos, &population_cfg(5000)).unwrap();
    assert!((r.final_loss - entropy).abs() < 1e-6, "{} vs {entropy}", r.final_loss);
    for (xi, x) in env.prompts.iter().enumerate() {
        let lq = r.final_params.response_log_probs(&space, x).unwrap();
        let kl: f64 = counts[xi].iter().zip(&lq).map(|(c, l)| (c / 400.0) * ((c / 400.0).ln() - l)).sum();
        assert!(kl < 1e-4, "{kl}");
    }
}

#[test]
fn population_loss_is_monotone_with_small_steps() {
    let env = small_env(8);
    let c0 = comparisons(&env, 0, 2, 1);
    let cfg = TrainConfig {
        step_size: StepSize::Fixed(1e-2),
        steps: 200,
        log_every: 1,
        early_stop: false,
        ..TrainConfig::default()
    };
    let r = dpo_train(uniform(&env), &uniform(&env), &c0, &cfg, Some(&env)).unwrap();
    for w in r.loss_curve.windows(2).skip(10) {
        assert!(w[1].1 <= w[0].1 + 1e-9);
    }
}

#[test]
fn population_dpo_recovers_closed_form() {
    let env = small_env(9);
    let reference = random_tabular(&env, 4, 0.5);
    let c0 = comparisons(&env, 0, 2, 2);
    let r = dpo_train(reference.clone(), &reference, &c0, &population_cfg(3000), Some(&env)).unwrap();
    let target = oracle_policy(&env, &reference, &[1.0, 0.0], 0.1);
    for kl in kl_per_prompt(&target, &r.final_params, &env) {
        assert!(kl < 1e-3, "{kl}");
    }

    // implicit reward differences track the true utility differences
    let space = env.space().unwrap();
    let phi = ImplicitRewardModel {
        objective: 0,
        policy: r.final_params.clone(),
        reference: reference.clone(),
        beta: 0.1,
    };
    for x in &env.prompts {
        let rh = phi.reward_table(&space, x).unwrap();
        let truth: Vec<f64> = space.iter().map(|y| env.utility(x, &y, 0).unwrap()).collect();
        let d: Vec<f64> = rh.iter().zip(&truth).map(|(a, b)| a - b).collect();
        let spread = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - d.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread < 0.02, "{spread}");
    }
    assert_eq!(implicit_reward(&reference, &reference, 0.1, &env.prompts[0], &space.decode(5)).unwrap(), 0.0);
}

#[test]
fn implicit_reward_differences_do_not_depend_on_beta() {
    let env = small_env(10);
    let space = env.space().unwrap();
    let reference = uniform(&env);
    let c1 = comparisons(&env, 1, 2, 3);
    let tables: Vec<Vec<f64>> = [0.1, 0.3]
        .iter()
        .map(|&beta| {
            let cfg = TrainConfig { beta, ..population_cfg(3000) };
            let r = dpo_train(reference.clone(), &reference, &c1, &cfg, Some(&env)).unwrap();
            let phi = ImplicitRewardModel { objective: 1, policy: r.final_params, reference: reference.clone(), beta };
            phi.reward_table(&space, &env.prompts[0]).unwrap()
        })
        .collect();
    let d: Vec<f64> = tables[0].iter().zip(&tables[1]).map(|(a, b)| a - b).collect();
    let spread = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - d.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(spread < 0.02, "{spread}");
}

#[test]
fn reversed_labels_invert_ranking() {
    let env = small_env(11);
    let space = env.space().unwrap();
    let reference = uniform(&env);
    let reversed: Vec<PreferencePair> = comparisons(&env, 0, 400, 4)
        .into_iter()
        .map(|p| PreferencePair { y_w: p.y_l, y_l: p.y_w, ..p })
        .collect();
    let cfg = TrainConfig {
        mode: TrainMode::Minibatch,
        steps: 400,
        batch_size: 64,
        step_size: StepSize::Fixed(0.05),
        ..TrainConfig::default()
    };
    let r = dpo_train(reference.clone(), &reference, &reversed, &cfg, None).unwrap();
    let x = &env.prompts[0];
    let lp = r.final_params.response_log_probs(&space, x).unwrap();
    let truth: Vec<f64> = space.iter().map(|y| env.reward(x, &y, 0).unwrap()).collect();
    assert!(spearman(&lp, &truth) < 0.0);
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut ix: Vec<usize> = (0..v.len()).collect();
        ix.sort_by(|i, j| v[*i].total_cmp(&v[*j]));
        let mut r = vec![0.0; v.len()];
        for (pos, i) in ix.into_iter().enumerate() {
            r[i] = pos as f64;
        }
        r
    };
    crate::math::pearson(&rank(a), &rank(b)).unwrap()
}

#[test]
fn large_beta_stays_near_reference() {
    let env = small_env(12);
    let reference = random_tabular(&env, 5, 0.5);
    let c0 = comparisons(&env, 0, 2, 5);
    let cfg = TrainConfig { beta: 1e3, ..population_cfg(2000) };
    let r = dpo_train(reference.clone(), &reference, &c0, &cfg, Some(&env)).unwrap();
    let space = env.space().unwrap();
    for x in &env.prompts {
        let p: Vec<f64> = reference.response_log_probs(&space, x).unwrap().iter().map(|l| l.exp()).collect();
        let q = r.final_params.response_log_probs(&space, x).unwrap();
        let kl: f64 = p.iter().zip(&q).map(|(a, l)| a * (a.ln() - l)).sum();
        assert!(kl < 0.01);
    }
}

#[test]
fn population_modpo_recovers_scalarized_optimum() {
    let env = small_env(13);
    let reference = random_tabular(&env, 6, 0.5);
    let c0 = comparisons(&env, 0, 2, 6);
    let c1 = comparisons(&env, 1, 2, 7);
    let m0 = TrueRewardModel { env: &env, objective: 0 };
    let m1 = TrueRewardModel { env: &env, objective: 1 };
    let half = WeightVector::pair(0.5).unwrap();
    let cfg = TrainConfig { w: Some(half.clone()), ..population_cfg(3000) };
    let a = modpo_train(reference.clone(), &reference, &c0, &[&m1], &cfg, Some(&env)).unwrap();
    let target = oracle_policy(&env, &reference, &[0.5, 0.5], 0.1);
    for kl in kl_per_prompt(&target, &a.final_params, &env) {
        assert!(kl < 5e-3, "{kl}");
    }
    // the same optimum from the other objective's comparisons
    let b = modpo_train(reference.clone(), &reference, &c1, &[&m0], &cfg, Some(&env)).unwrap();
    let pb = oracle_policy(&env, &reference, &[0.5, 0.5], 0.1);
    let space = env.space().unwrap();
    for (x, _) in env.prompts.iter().zip(&pb) {
        let la = a.final_params.response_log_probs(&space, x).unwrap();
        let lb = b.final_params.response_log_probs(&space, x).unwrap();
        let kl: f64 = la.iter().zip(&lb).map(|(p, q)| p.exp() * (p - q)).sum();
        assert!(kl < 0.05, "{kl}");
    }

    let w10 = WeightVector::pair(0.0).unwrap();
    let cfg = TrainConfig { w: Some(w10), ..population_cfg(3000) };
    let r = modpo_train(reference.clone(), &reference, &c0, &[&m1], &cfg, Some(&env)).unwrap();
    let target = oracle_policy(&env, &reference, &[1.0, 0.0], 0.1);
    for kl in kl_per_prompt(&target, &r.final_params, &env) {
        assert!(kl < 1e-3, "{kl}");
    }
}

#[test]
fn config_errors() {
    let env = small_env(14);
    let c0 = comparisons(&env, 0, 2, 1);
    let reference = uniform(&env);
    assert!(matches!(
        dpo_train(reference.clone(), &reference, &c0, &population_cfg(1), None),
        Err(Error::MissingDependency(_))
    ));
    let neural = PolicyParams::neural(env.vocab, NeuralDims { embed_dim: 2, hidden_dim: 2 }, 0).unwrap();
    assert!(dpo_train(neural.clone(), &neural, &c0, &population_cfg(1), Some(&env)).is_err());
    assert!(modpo_train(reference.clone(), &reference, &c0, &[], &population_cfg(1), Some(&env)).is_err());
    let bad = TrainConfig { beta: 0.0, ..population_cfg(1) };
    assert!(dpo_train(reference.clone(), &reference, &c0, &bad, Some(&env)).is_err());

    let cfg: TrainConfig = serde_json::from_str(r#"{"step_size": "auto", "steps": 5}"#).unwrap();
    assert_eq!(cfg.step_size, StepSize::Auto);
    let cfg: TrainConfig = serde_json::from_str(r#"{"step_size": 0.5}"#).unwrap();
    assert_eq!(cfg.step_size, StepSize::Fixed(0.5));
    assert!(serde_json::from_str::<TrainConfig>(r#"{"step_size": -1}"#).is_err());
    let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(back, cfg);
}

struct NanAfter<'a> {
    inner: &'a dyn Objective,
    calls: std::cell::Cell<usize>,
}

impl Objective for NanAfter<'_> {
    fn evaluate(&self, policy: &PolicyParams, batch: Option<&[usize]>, want_value: bool) -> Result<Evaluation> {
        let n = self.calls.get();
        self.calls.set(n + 1);
        let mut e = self.inner.evaluate(policy, batch, want_value)?;
        if n == 3 {
            for s in &mut e.seeds.single {
                s.coeff = f64::NAN;
            }
        }
        Ok(e)
    }
    fn num_records(&self) -> usize {
        self.inner.num_records()
    }
    fn smoothness(&self, policy: &PolicyParams) -> Option<f64> {
        self.inner.smoothness(policy)
    }
}

#[test]
fn divergence_is_reported_with_step() {
    let env = small_env(15);
    let demos = vec![DemoPair { x: env.prompts[0].clone(), y: Sequence(vec![0, 0, 0]) }];
    let inner = SftObjective::new(&demos).unwrap();
    let obj = NanAfter { inner: &inner, calls: std::cell::Cell::new(0) };
    let err = optimize(uniform(&env), &obj, &population_cfg(10)).unwrap_err();
    assert!(matches!(err, Error::NumericFailure { at: FailurePoint::Step(3), .. }), "{err:?}");
}

#[test]
fn neural_population_space_check() {
    let env = small_env(16);
    let space: ResponseSpace = env.space().unwrap();
    assert_eq!(space.len(), 64);
}
