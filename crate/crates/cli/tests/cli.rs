use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn prefalign(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prefalign"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .env_remove("PREFALIGN_WORKDIR")
        .output()
        .expect("binary runs")
}

fn ok(workdir: &Path, args: &[&str]) -> String {
    let out = prefalign(workdir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const CHAIN: &[&[&str]] = &[
    &["gen-data"],
    &["train", "sft"],
    &["train", "reward", "--k", "1"],
    &["train", "modpo"],
    &["oracle"],
    &["eval"],
    &["sweep"],
];

#[test]
fn default_chain_produces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let wd = dir.path();
    for step in CHAIN {
        ok(wd, step);
    }
    for f in ["demos.jsonl", "comp_k0.jsonl", "comp_k1.jsonl", "env.json", "splits.json", "run_config.json"] {
        assert!(wd.join(f).exists(), "{f}");
    }
    let first = fs::read_to_string(wd.join("comp_k1.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(header["format_version"], 1);
    assert_eq!(header["split"], serde_json::json!([820, 102, 102]));

    let reward = json(&wd.join("checkpoints/reward_k1.json"));
    assert_eq!(reward["meta"]["role"], "implicit_reward");
    assert_eq!(reward["meta"]["k"], 1);

    let csv = fs::read_to_string(wd.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("# format_version=1 config_hash="));
    assert_eq!(lines[1], "w_0,w_1,exact_r0,exact_r1,mc_r0,mc_r1,kl_to_oracle,run_id");
    assert_eq!(lines.len(), 2 + 9);
    let sweep = json(&wd.join("sweep.json"));
    assert!(sweep["slope_per_objective"][1]["slope"].as_f64().unwrap() < 0.0);

    let report = json(&wd.join("oracle/oracle_report.json"));
    for (_, c) in report["identities"].as_object().unwrap() {
        assert!(c["residual"].as_f64().unwrap() < 1e-9);
    }
    assert_eq!(json(&wd.join("oracle/pi_star_w.json"))["meta"]["oracle"], true);

    // MODPO beats its own reference on the KL-regularized scalarized objective
    let obj = |name: &str| json(&wd.join(format!("eval/{name}.json")))["kl_regularized_objective"].as_f64().unwrap();
    assert!(obj("modpo") > obj("sft"));
    assert!(json(&wd.join("eval/modpo.json"))["kl_to_oracle"].as_f64().unwrap() < 5e-3);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for wd in [a.path(), b.path()] {
        for step in CHAIN {
            ok(wd, step);
        }
    }
    for f in [
        "demos.jsonl",
        "comp_k0.jsonl",
        "comp_k1.jsonl",
        "env.json",
        "checkpoints/sft.json",
        "checkpoints/reward_k1.json",
        "checkpoints/modpo.json",
        "oracle/oracle_pareto.csv",
        "sweep.csv",
    ] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    // same workdir again: gen-data rewrites identical bytes
    let before = fs::read(a.path().join("comp_k0.jsonl")).unwrap();
    ok(a.path(), &["gen-data"]);
    assert_eq!(before, fs::read(a.path().join("comp_k0.jsonl")).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let wd = dir.path();
    assert_eq!(prefalign(wd, &["--set", "env.rho=5", "gen-env"]).status.code(), Some(2));
    assert_eq!(prefalign(wd, &["--set", "nonsense.key=1", "gen-env"]).status.code(), Some(2));
    let scale = prefalign(wd, &["--set", "env.vocab_size=100", "--set", "env.response_len=4", "gen-env"]);
    assert_eq!(scale.status.code(), Some(5));

    ok(wd, &["gen-data"]);
    ok(wd, &["train", "sft"]);
    let missing = prefalign(wd, &["train", "modpo"]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("reward_k1.json"));

    let diverge = prefalign(
        wd,
        &[
            "--set", "reward.optimizer=adam",
            "--set", "reward.step_size=1e308",
            "--set", "reward.early_stop=false",
            "--set", "reward.steps=5",
            "train", "reward",
        ],
    );
    assert_eq!(diverge.status.code(), Some(4), "{}", String::from_utf8_lossy(&diverge.stderr));
    assert!(String::from_utf8_lossy(&diverge.stderr).contains("step"));

    fs::write(wd.join(".prefalign.lock"), "1").unwrap();
    assert_eq!(prefalign(wd, &["gen-env"]).status.code(), Some(1));
}

#[test]
fn oracle_grid_and_env_workdir() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_prefalign"))
        .env("PREFALIGN_WORKDIR", dir.path())
        .arg("gen-env")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("env.json").exists());

    ok(dir.path(), &["--set", "sweep.grid=[0,1,0.5]", "oracle"]);
    let csv = fs::read_to_string(dir.path().join("oracle/oracle_pareto.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.ends_with(",true")));
    assert!(rows[0].starts_with("1,0,"));
}

#[test]
fn config_file_and_seed_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"env": {"num_prompts": 4, "rho": 0.2}}"#).unwrap();
    let wd = dir.path().join("run");
    ok(&wd, &["--config", cfg.to_str().unwrap(), "--seed", "11", "gen-env"]);
    let echo = json(&wd.join("run_config.json"));
    assert_eq!(echo["seed"], 11);
    assert_eq!(echo["env"]["rho"], 0.2);
    assert_eq!(json(&wd.join("env.json"))["env"]["prompts"].as_array().unwrap().len(), 4);
}

#[test]
fn gradcheck_reports_small_errors() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["gradcheck"]);
    assert_eq!(stdout.lines().count(), 12);
    let report = json(&dir.path().join("gradcheck.json"));
    assert!(report["max_rel_error"].as_f64().unwrap() < 1e-4);
}
