use std::fs;
use std::path::Path;
use std::process::Command;

use proptest::prelude::*;
use rl_reach::agents::TrainingLog;
use rl_reach::report::parse_sidecar;
use rl_reach_cli::{run, EXIT_INVALID, EXIT_OK};
use serde_json::Value;

/// Runs the command in-process; returns (exit code, stdout, stderr).
fn rl(ws: &Path, args: &[&str]) -> (i32, String, String) {
    let mut argv = vec!["rl-reach", "--workspace", ws.to_str().unwrap()];
    argv.extend_from_slice(args);
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn is_empty_dir(p: &Path) -> bool {
    !p.exists() || fs::read_dir(p).unwrap().next().is_none()
}

const TRAIN: [&str; 11] = [
    "train",
    "--algo",
    "ppo",
    "--env",
    "reach-v1",
    "--n-timesteps",
    "300",
    "--n-seeds",
    "1",
    "--hp",
    "rollout_len=64",
];

#[test]
fn help_lists_every_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&str, &[&str]); 6] = [
        ("train", &["--algo", "--env", "--n-timesteps", "--n-seeds", "--base-seed", "--parallel", "--hp"]),
        ("evaluate", &["--exp-id", "--n-eval-episodes", "--eval-seed", "--log-episode", "--allow-partial"]),
        ("benchmark", &["--exp-ids", "--metric"]),
        ("tune", &["--algo", "--env", "--n-trials", "--timesteps-per-trial", "--checkpoints", "--seed"]),
        ("plot", &["--exp-id", "--window"]),
        ("list-envs", &[]),
    ];
    for (cmd, flags) in cases {
        let (code, out, _) = rl(dir.path(), &[cmd, "--help"]);
        assert_eq!(code, EXIT_OK, "{cmd}");
        for f in flags.iter().chain(&["--workspace"]) {
            assert!(out.contains(f), "{cmd} --help lacks {f}");
        }
    }
    let (code, out, _) = rl(dir.path(), &["--help"]);
    assert_eq!(code, EXIT_OK);
    for cmd in ["train", "evaluate", "benchmark", "tune", "plot", "list-envs"] {
        assert!(out.contains(cmd));
    }
    assert!(is_empty_dir(dir.path()));
}

#[test]
fn missing_env_is_invalid_input() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path().join("ws");
    let (code, _, err) = rl(&ws, &["train", "--algo", "ppo", "--n-timesteps", "100", "--n-seeds", "1"]);
    assert_eq!(code, EXIT_INVALID);
    assert!(err.contains("--env"), "{err}");
    assert!(!ws.exists());
}

#[test]
fn unknown_experiment_and_metric_are_invalid_input() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(rl(dir.path(), &["evaluate", "--exp-id", "999"]).0, EXIT_INVALID);
    assert_eq!(rl(dir.path(), &["plot", "--exp-id", "3"]).0, EXIT_INVALID);
    assert_eq!(rl(dir.path(), &["tune", "--algo", "random", "--env", "reach-v1", "--n-trials", "1", "--timesteps-per-trial", "10"]).0, EXIT_INVALID);
    assert_eq!(rl(dir.path(), &TRAIN).0, EXIT_OK);
    assert_eq!(rl(dir.path(), &["evaluate", "--exp-id", "1", "--n-eval-episodes", "2"]).0, EXIT_OK);
    let (code, _, err) = rl(dir.path(), &["benchmark", "--exp-ids", "1", "--metric", "speed"]);
    assert_eq!(code, EXIT_INVALID);
    assert!(err.contains("mean_return"), "{err}");
    assert_eq!(rl(dir.path(), &["benchmark", "--exp-ids", "1,7"]).0, EXIT_INVALID);
}

#[test]
fn hp_override_lands_in_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = TRAIN.to_vec();
    args.extend(["--hp", "lr=0.001", "--hp", "n_epochs=2"]);
    let (code, out, _) = rl(dir.path(), &args);
    assert_eq!(code, EXIT_OK);
    assert_eq!(out.lines().last(), Some("exp_id=1"));
    let config: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("exp_1/config.json")).unwrap()).unwrap();
    assert_eq!(config["hyperparams"]["lr"], 0.001);
    assert_eq!(config["hyperparams"]["n_epochs"], 2);
    assert_eq!(config["hyperparams"]["rollout_len"], 64);
    assert_eq!(config["status"], "Complete");

    let (code, _, _) = rl(dir.path(), &["train", "--algo", "ppo", "--env", "reach-v1", "--n-timesteps", "10", "--n-seeds", "1", "--hp", "learning_rate=0.1"]);
    assert_eq!(code, EXIT_INVALID);
    assert!(!dir.path().join("exp_2").exists());
}

#[test]
fn single_trial_study_picks_that_trial() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["tune", "--algo", "ppo", "--env", "reach-v1-planar", "--n-trials", "1", "--timesteps-per-trial", "400", "--checkpoints", "2"];
    let (code, out, err) = rl(dir.path(), &args);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("best trial 0"));
    let study = dir.path().join("studies/study_1");
    let best: serde_json::Map<String, Value> =
        serde_json::from_str(&fs::read_to_string(study.join("best_config.json")).unwrap()).unwrap();
    let trials = fs::read_to_string(study.join("trials.csv")).unwrap();
    let mut lines = trials.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert!(lines.next().is_none());
    assert_eq!(row[1], "Complete");
    assert_eq!(best.len(), header.len() - 4);
    for (k, v) in &best {
        let i = header.iter().position(|h| h == k).unwrap();
        match v {
            Value::Number(n) => assert_eq!(row[i].parse::<f64>().unwrap(), n.as_f64().unwrap(), "{k}"),
            other => assert_eq!(row[i], other.as_str().unwrap(), "{k}"),
        }
    }
}

#[test]
fn unit_window_plots_the_raw_log() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = TRAIN.to_vec();
    args[8] = "2";
    assert_eq!(rl(dir.path(), &args).0, EXIT_OK);
    assert_eq!(rl(dir.path(), &["plot", "--exp-id", "1", "--window", "1"]).0, EXIT_OK);
    let exp = dir.path().join("exp_1");
    let series = parse_sidecar(&fs::read_to_string(exp.join("training_curves.data.csv")).unwrap()).unwrap();
    for k in 0..2 {
        let log = TrainingLog::from_csv(&fs::read_to_string(exp.join(format!("seed_{k}/training_log.csv"))).unwrap()).unwrap();
        let raw: Vec<(f64, f64)> = log.rows.iter().map(|r| (r.timestep as f64, r.episode_return)).collect();
        let plotted = series.iter().find(|s| s.label == format!("seed_{k}")).unwrap();
        assert_eq!(plotted.points, raw);
    }
    assert!(fs::read_to_string(exp.join("training_curves.svg")).unwrap().contains("<svg"));
}

#[test]
fn every_write_stays_in_the_workspace() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_rl-reach");
    let go = |args: &[&str]| {
        let status = Command::new(bin)
            .current_dir(dir.path())
            .env("RL_REACH_WORKSPACE", "ws")
            .args(args)
            .output()
            .unwrap();
        assert!(status.status.success(), "{args:?}: {}", String::from_utf8_lossy(&status.stderr));
    };
    go(&TRAIN);
    go(&["evaluate", "--exp-id", "1", "--n-eval-episodes", "2", "--log-episode"]);
    go(&["benchmark", "--exp-ids", "1"]);
    go(&["plot", "--exp-id", "1"]);
    go(&["tune", "--algo", "td3", "--env", "reach-v2-planar", "--n-trials", "2", "--timesteps-per-trial", "200", "--checkpoints", "1"]);
    go(&["list-envs"]);
    let entries: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(entries, ["ws"]);
    let ws = dir.path().join("ws");
    for f in ["benchmark.csv", "benchmark_mean_return.svg", "benchmark_mean_return.data.csv", "studies/study_1/trials.csv"] {
        assert!(ws.join(f).is_file(), "{f}");
    }
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_rl-reach");
    let code = |args: &[&str]| Command::new(bin).arg("--workspace").arg(dir.path()).args(args).output().unwrap().status.code();
    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&["--version"]), Some(0));
    assert_eq!(code(&["frobnicate"]), Some(1));
    assert_eq!(code(&["evaluate", "--exp-id", "4"]), Some(1));
}

/// Each flag of a valid `train` call and the ways it can be broken.
fn mangled_train_calls() -> Vec<Vec<String>> {
    let valid: Vec<(&str, &str)> = vec![
        ("--algo", "ppo"),
        ("--env", "reach-v1"),
        ("--n-timesteps", "300"),
        ("--n-seeds", "1"),
        ("--base-seed", "0"),
        ("--parallel", "1"),
        ("--hp", "rollout_len=64"),
    ];
    let bad_values: &[(&str, &[&str])] = &[
        ("--algo", &["sac", "", "PPO1"]),
        ("--env", &["reach-v9", "reach-v1-3d", ""]),
        ("--n-timesteps", &["-5", "ten", "0", "1.5"]),
        ("--n-seeds", &["0", "-1", "x"]),
        ("--base-seed", &["-1", "seed"]),
        ("--parallel", &["0", "two"]),
        ("--hp", &["rollout_len", "=3", "rollout_len=-4", "gamma=2", "lr=\"fast\""]),
    ];
    let mut calls = Vec::new();
    for (i, (flag, _)) in valid.iter().enumerate() {
        let build = |replace: &dyn Fn(&str, &str) -> Vec<String>| {
            let mut argv = vec!["train".to_string()];
            for (j, (f, v)) in valid.iter().enumerate() {
                if i == j {
                    argv.extend(replace(f, v));
                } else {
                    argv.extend([f.to_string(), v.to_string()]);
                }
            }
            argv
        };
        calls.push(build(&|f, v| vec![format!("{f}x"), v.to_string()]));
        if !matches!(*flag, "--base-seed" | "--parallel" | "--hp") {
            calls.push(build(&|_, _| vec![]));
        }
        calls.push(build(&|f, _| vec![f.to_string()]));
        for bad in bad_values.iter().find(|(f, _)| f == flag).unwrap().1 {
            calls.push(build(&|f, _| vec![f.to_string(), bad.to_string()]));
        }
    }
    calls
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn one_broken_flag_exits_invalid_and_writes_nothing(idx in 0usize..1000) {
        let calls = mangled_train_calls();
        let argv = &calls[idx % calls.len()];
        let dir = tempfile::tempdir().unwrap();
        let ws = dir.path().join("ws");
        let args: Vec<&str> = argv.iter().map(String::as_str).collect();
        let (code, _, err) = rl(&ws, &args);
        prop_assert_eq!(code, EXIT_INVALID, "{:?}: {}", argv, err);
        prop_assert!(is_empty_dir(&ws), "{:?} wrote into the workspace", argv);
    }
}
