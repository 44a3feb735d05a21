//! Command-line front end: `train`, `evaluate`, `benchmark`, `tune`, `plot`
//! and `list-envs` over one workspace directory.
//!
//! Exit codes: 0 on success, 1 for invalid input, 2 when the work itself
//! fails.

use std::io::Write;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rl_reach::agents::{Algo, Hyperparams};
use rl_reach::evaluation::{
    self, append_benchmark_row, evaluate_experiment, log_episode, read_benchmark, DEFAULT_EVAL_EPISODES,
    DEFAULT_EVAL_SEED,
};
use rl_reach::experiment::{Status, Workspace};
use rl_reach::hypertune::{self, MedianPruner, SearchSpace, StudyConfig, TrialState};
use rl_reach::reach_env::{registered_ids, registry_lookup, PLANAR_SUFFIX};
use rl_reach::report::{self, DEFAULT_SMOOTHING_WINDOW};
use serde_json::Value;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "rl-reach", version, about = "Reproducible RL experiments on a robotic-arm reaching task")]
pub struct Cli {
    /// Workspace directory holding experiments, studies and benchmark.csv.
    #[arg(long, global = true, env = "RL_REACH_WORKSPACE", default_value = "experiments")]
    pub workspace: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create an experiment and train every seed run.
    Train(TrainArgs),
    /// Evaluate an experiment and upsert its benchmark row.
    Evaluate(EvaluateArgs),
    /// Bar chart comparing experiments on one benchmark metric.
    Benchmark(BenchmarkArgs),
    /// Random-search hyperparameter study with median pruning.
    Tune(TuneArgs),
    /// Smoothed training curves of an experiment.
    Plot(PlotArgs),
    /// List the registered environment IDs.
    ListEnvs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub algo: String,
    #[arg(long)]
    pub env: String,
    #[arg(long)]
    pub n_timesteps: u64,
    #[arg(long)]
    pub n_seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub base_seed: u64,
    /// Seed runs trained concurrently.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub parallel: u64,
    /// Hyperparameter override; the value is read as JSON, else as a string.
    #[arg(long = "hp", value_name = "KEY=VALUE", value_parser = parse_hp)]
    pub hp: Vec<(String, Value)>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub exp_id: u64,
    #[arg(long, default_value_t = DEFAULT_EVAL_EPISODES, value_parser = clap::builder::RangedU64ValueParser::<usize>::new().range(1..))]
    pub n_eval_episodes: usize,
    #[arg(long, default_value_t = DEFAULT_EVAL_SEED)]
    pub eval_seed: u64,
    /// Also write one episode log and its panel figure.
    #[arg(long)]
    pub log_episode: bool,
    /// Evaluate the completed seeds of an experiment that is not Complete.
    #[arg(long)]
    pub allow_partial: bool,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub exp_ids: Vec<u64>,
    #[arg(long, default_value = "mean_return")]
    pub metric: String,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub algo: String,
    #[arg(long)]
    pub env: String,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n_trials: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub timesteps_per_trial: u64,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub checkpoints: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub exp_id: u64,
    #[arg(long, default_value_t = DEFAULT_SMOOTHING_WINDOW, value_parser = clap::builder::RangedU64ValueParser::<usize>::new().range(1..))]
    pub window: usize,
}

fn parse_hp(s: &str) -> Result<(String, Value), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    if k.is_empty() {
        return Err("empty hyperparameter name".into());
    }
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_INVALID,
            };
            let text = if out_is_terminal() { e.render().ansi().to_string() } else { e.render().to_string() };
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            exit_code(&e)
        }
    }
}

fn out_is_terminal() -> bool {
    use std::io::IsTerminal;
    std::io::stdout().is_terminal()
}

pub fn exit_code(e: &anyhow::Error) -> i32 {
    match e.downcast_ref::<rl_reach::Error>() {
        Some(core) if core.is_validation() => EXIT_INVALID,
        _ => EXIT_FAILURE,
    }
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    let ws = Workspace::new(&cli.workspace);
    match &cli.command {
        Command::Train(a) => train(&ws, a, out),
        Command::Evaluate(a) => evaluate(&ws, a, out),
        Command::Benchmark(a) => benchmark(&ws, a, out),
        Command::Tune(a) => tune(&ws, a, out),
        Command::Plot(a) => plot(&ws, a, out),
        Command::ListEnvs => list_envs(out),
    }
}

fn train(ws: &Workspace, a: &TrainArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let hp: Hyperparams = a.hp.iter().cloned().collect();
    let record = ws.create_experiment(&a.algo, &a.env, a.n_timesteps, a.n_seeds, a.base_seed, hp)?;
    writeln!(out, "created {}", ws.exp_dir(record.exp_id).display())?;
    let done = ws.run_experiment(record.exp_id, a.parallel as usize, false)?;
    let status = done.status;
    if status == Status::Failed {
        for k in 0..done.n_seeds {
            if let Ok(meta) = ws.load_run_meta(done.exp_id, k) {
                if let Some(msg) = meta.error {
                    writeln!(out, "seed_{k} failed: {msg}")?;
                }
            }
        }
    }
    writeln!(out, "exp_id={}", record.exp_id)?;
    if status != Status::Complete {
        anyhow::bail!("experiment {} finished with status {status:?}", record.exp_id);
    }
    Ok(())
}

fn evaluate(ws: &Workspace, a: &EvaluateArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let record = ws.load_experiment(a.exp_id)?;
    let ev = evaluate_experiment(ws, &record, a.n_eval_episodes, a.eval_seed, a.allow_partial)?;
    append_benchmark_row(ws, &ev.metrics, &record)?;
    let env = record.env_config()?;
    write!(out, "{}", ev.metrics.to_text(&env.success_thresholds_mm))?;
    writeln!(out, "benchmark {}", evaluation::benchmark_path(ws).display())?;

    if a.log_episode {
        let k = ev.seeds[0];
        let policy = ws.load_policy(record.exp_id, k)?;
        let log = log_episode(&policy, &env, a.eval_seed)?;
        let dir = ws.exp_dir(record.exp_id);
        let csv_path = dir.join("episode_eval.csv");
        std::fs::write(&csv_path, log.to_csv()).with_context(|| format!("writing {}", csv_path.display()))?;
        let title = format!("Episode metadata, experiment {} seed_{k}", record.exp_id);
        let paths = report::emit_episode_panels(&log, &title).write(&dir, "episode_panels")?;
        writeln!(out, "episode log {}", csv_path.display())?;
        writeln!(out, "episode panels {}", paths.svg.display())?;
    }
    Ok(())
}

fn benchmark(ws: &Workspace, a: &BenchmarkArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let rows = read_benchmark(ws)?;
    let figure = report::emit_benchmark_comparison(&rows, &a.metric, &a.exp_ids)?;
    let paths = figure.write(ws.root(), &format!("benchmark_{}", a.metric))?;
    writeln!(out, "{}", paths.svg.display())?;
    writeln!(out, "{}", paths.data_csv.display())?;
    Ok(())
}

fn tune(ws: &Workspace, a: &TuneArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let algo: Algo = a.algo.parse()?;
    let env = registry_lookup(&a.env)?;
    let space = SearchSpace::default_for(algo)?;
    hypertune::checkpoint_steps(a.timesteps_per_trial, a.checkpoints)?;
    let cfg = StudyConfig {
        algo,
        env,
        space,
        n_trials: a.n_trials,
        timesteps_per_trial: a.timesteps_per_trial,
        checkpoints: a.checkpoints,
        seed: a.seed,
        pruner: MedianPruner::default(),
    };
    let report = hypertune::run_study(&cfg)?;
    let paths = hypertune::write_study(ws, &report, &cfg.space)?;
    for t in &report.trials {
        let value = t.final_value.map_or("-".to_string(), |v| format!("{v:.6}"));
        let extra = match (t.state, t.pruned_at_step) {
            (TrialState::Pruned, Some(s)) => format!(" at step {s}"),
            _ => String::new(),
        };
        writeln!(out, "trial {:>3}  {:<8}  {value}{extra}", t.trial_id, format!("{:?}", t.state))?;
    }
    writeln!(out, "best trial {}", report.best_trial_id)?;
    writeln!(out, "{}", paths.trials_csv.display())?;
    writeln!(out, "{}", paths.best_config.display())?;
    Ok(())
}

fn plot(ws: &Workspace, a: &PlotArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let paths = report::emit_training_curves(ws, a.exp_id, a.window)?;
    writeln!(out, "{}", paths.svg.display())?;
    writeln!(out, "{}", paths.data_csv.display())?;
    Ok(())
}

fn list_envs(out: &mut dyn Write) -> anyhow::Result<()> {
    for id in registered_ids() {
        let c = registry_lookup(&id)?;
        writeln!(out, "{id:<10} {:?} {:?} {:?}", c.action_mode, c.obs_mode, c.reward_type)?;
    }
    writeln!(out, "append `{PLANAR_SUFFIX}` to any ID for the 2-DOF planar arm")?;
    Ok(())
}
