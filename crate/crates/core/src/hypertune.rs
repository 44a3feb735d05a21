//! Hyperparameter studies: random sampling plus a median pruner.
//!
//! Trials run one after another, so a study is a pure function of its seed.

use std::collections::BTreeMap;
use std::ops::ControlFlow;
use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agents::{self, Actor, Algo, AlgoConfig, Hyperparams};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_policy, DEFAULT_EVAL_SEED};
use crate::experiment::{create_numbered_dir, write_atomic, Workspace};
use crate::neural::seeded_rng;
use crate::reach_env::EnvConfig;

pub const DEFAULT_MIN_TRIALS: usize = 5;
pub const CHECKPOINT_EVAL_EPISODES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Dimension {
    LogUniform { lo: f64, hi: f64 },
    Uniform { lo: f64, hi: f64 },
    Categorical { values: Vec<Value> },
}

impl Dimension {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Dimension::LogUniform { lo, hi } => *lo > 0.0 && lo < hi && hi.is_finite(),
            Dimension::Uniform { lo, hi } => lo < hi && lo.is_finite() && hi.is_finite(),
            Dimension::Categorical { values } => !values.is_empty(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid search dimension {self:?}")))
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Value {
        match self {
            Dimension::LogUniform { lo, hi } => Value::from(rng.random_range(lo.ln()..hi.ln()).exp()),
            Dimension::Uniform { lo, hi } => Value::from(rng.random_range(*lo..*hi)),
            Dimension::Categorical { values } => values[rng.random_range(0..values.len())].clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dimensions: BTreeMap<String, Dimension>,
}

impl SearchSpace {
    pub fn new(dimensions: BTreeMap<String, Dimension>) -> Result<Self> {
        let space = SearchSpace { dimensions };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<()> {
        self.dimensions.values().try_for_each(Dimension::validate)
    }

    pub fn default_for(algo: Algo) -> Result<Self> {
        let log = |lo, hi| Dimension::LogUniform { lo, hi };
        let uni = |lo, hi| Dimension::Uniform { lo, hi };
        let cat = |vs: &[Value]| Dimension::Categorical { values: vs.to_vec() };
        let dims: Vec<(&str, Dimension)> = match algo {
            Algo::Ppo => vec![
                ("lr", log(1e-5, 1e-2)),
                ("gamma", cat(&[0.95.into(), 0.99.into(), 0.999.into()])),
                ("clip_range", uni(0.1, 0.3)),
                ("rollout_len", cat(&[512.into(), 1024.into(), 2048.into()])),
            ],
            Algo::Td3 => vec![
                ("lr", log(1e-5, 1e-2)),
                ("tau", uni(0.001, 0.02)),
                ("policy_noise", uni(0.1, 0.5)),
            ],
            Algo::Random => {
                return Err(Error::Validation("the random agent has no hyperparameters to tune".into()))
            }
        };
        SearchSpace::new(dims.into_iter().map(|(k, d)| (k.to_string(), d)).collect())
    }
}

/// Dimensions are sampled in name order.
pub fn sample_config(space: &SearchSpace, rng: &mut impl Rng) -> Hyperparams {
    space
        .dimensions
        .iter()
        .map(|(name, dim)| (name.clone(), dim.sample(rng)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrialState {
    Running,
    Pruned,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub trial_id: u64,
    pub config: Hyperparams,
    pub intermediate_values: Vec<(u64, f64)>,
    pub final_value: Option<f64>,
    pub state: TrialState,
    pub pruned_at_step: Option<u64>,
}

impl Trial {
    pub fn new(trial_id: u64, config: Hyperparams) -> Self {
        Trial {
            trial_id,
            config,
            intermediate_values: Vec::new(),
            final_value: None,
            state: TrialState::Running,
            pruned_at_step: None,
        }
    }

    pub fn value_at(&self, step: u64) -> Option<f64> {
        self.intermediate_values
            .iter()
            .find(|(s, _)| *s == step)
            .map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MedianPruner {
    pub min_trials: usize,
}

impl Default for MedianPruner {
    fn default() -> Self {
        MedianPruner {
            min_trials: DEFAULT_MIN_TRIALS,
        }
    }
}

impl MedianPruner {
    /// Higher values are better. Only Complete trials form the history.
    pub fn should_prune(&self, history: &[Trial], current: &Trial, step: u64) -> bool {
        let Some(value) = current.value_at(step) else {
            return false;
        };
        let mut prior: Vec<f64> = history
            .iter()
            .filter(|t| t.state == TrialState::Complete && t.trial_id != current.trial_id)
            .filter_map(|t| t.value_at(step))
            .collect();
        if prior.len() < self.min_trials.max(1) {
            return false;
        }
        value < median(&mut prior)
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// `n` checkpoints evenly spaced over `total` steps; the last is `total`.
pub fn checkpoint_steps(total: u64, n: u64) -> Result<Vec<u64>> {
    if n == 0 || total == 0 {
        return Err(Error::Validation("checkpoints and timesteps must be at least 1".into()));
    }
    if n > total {
        return Err(Error::Validation(format!("{n} checkpoints do not fit in {total} timesteps")));
    }
    Ok((1..=n).map(|i| (total as u128 * i as u128 / n as u128) as u64).collect())
}

/// Callback through which a trial reports `(step, value)`; `Break` means stop.
pub type Report<'a> = dyn FnMut(u64, f64) -> ControlFlow<()> + 'a;

/// Trains one trial configuration, reporting at each checkpoint.
pub type TrialFn<'a> = dyn FnMut(&Hyperparams, &[u64], &mut Report<'_>) -> Result<()> + 'a;

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub algo: Algo,
    pub env: EnvConfig,
    pub space: SearchSpace,
    pub n_trials: u64,
    pub timesteps_per_trial: u64,
    pub checkpoints: u64,
    pub seed: u64,
    pub pruner: MedianPruner,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub checkpoints: Vec<u64>,
    pub trials: Vec<Trial>,
    pub best_trial_id: u64,
}

impl StudyReport {
    pub fn best(&self) -> &Trial {
        self.trials
            .iter()
            .find(|t| t.trial_id == self.best_trial_id)
            .expect("best trial is part of the report")
    }
}

/// Trains with the study's algorithm and scores each checkpoint by the mean
/// return of deterministic evaluation episodes.
pub fn training_trial(cfg: &StudyConfig) -> impl FnMut(&Hyperparams, &[u64], &mut Report<'_>) -> Result<()> + '_ {
    move |hp, checkpoints, report| {
        let algo = AlgoConfig::build(cfg.algo, cfg.timesteps_per_trial, hp)?;
        let mut hook = |step: u64, policy: &crate::neural::PolicyNet| {
            let value = evaluate_policy(policy as &dyn Actor, &cfg.env, CHECKPOINT_EVAL_EPISODES, true, DEFAULT_EVAL_SEED)
                .map(|eps| eps.iter().map(|e| e.episode_return).sum::<f64>() / eps.len() as f64)
                .unwrap_or(f64::NEG_INFINITY);
            report(step, value)
        };
        agents::train_with_checkpoints(&algo, &cfg.env, cfg.seed, checkpoints, Some(&mut hook))
            .map(|_| ())
            .map_err(|f| f.error)
    }
}

pub fn run_study(cfg: &StudyConfig) -> Result<StudyReport> {
    let mut trial_fn = training_trial(cfg);
    run_study_with(cfg, &mut trial_fn)
}

/// Runs `cfg.n_trials` trials sequentially through `trial_fn`.
///
/// A trial fails when `trial_fn` errors, reports a non-finite value, or
/// reports out of checkpoint order. It is pruned when the pruner says so.
pub fn run_study_with(cfg: &StudyConfig, trial_fn: &mut TrialFn<'_>) -> Result<StudyReport> {
    if cfg.n_trials == 0 {
        return Err(Error::Validation("a study needs at least one trial".into()));
    }
    cfg.space.validate()?;
    let checkpoints = checkpoint_steps(cfg.timesteps_per_trial, cfg.checkpoints)?;
    let mut rng = seeded_rng(cfg.seed);
    let mut trials: Vec<Trial> = Vec::with_capacity(cfg.n_trials as usize);

    for trial_id in 0..cfg.n_trials {
        let mut trial = Trial::new(trial_id, sample_config(&cfg.space, &mut rng));
        let mut bad_report = false;
        let config = trial.config.clone();
        let outcome = {
            let history = &trials;
            let trial = &mut trial;
            let bad_report = &mut bad_report;
            let mut report = |step: u64, value: f64| {
                if checkpoints.get(trial.intermediate_values.len()) != Some(&step) || !value.is_finite() {
                    *bad_report = true;
                    return ControlFlow::Break(());
                }
                trial.intermediate_values.push((step, value));
                if cfg.pruner.should_prune(history, trial, step) {
                    trial.pruned_at_step = Some(step);
                    return ControlFlow::Break(());
                }
                ControlFlow::Continue(())
            };
            trial_fn(&config, &checkpoints, &mut report)
        };

        trial.state = if outcome.is_err() || bad_report {
            TrialState::Failed
        } else if trial.pruned_at_step.is_some() {
            TrialState::Pruned
        } else if trial.intermediate_values.len() == checkpoints.len() {
            trial.final_value = trial.intermediate_values.last().map(|(_, v)| *v);
            TrialState::Complete
        } else {
            TrialState::Failed
        };
        if trial.state == TrialState::Failed {
            trial.pruned_at_step = None;
        }
        trials.push(trial);
    }

    let best = trials
        .iter()
        .filter(|t| t.state == TrialState::Complete)
        .fold(None::<&Trial>, |best, t| match best {
            Some(b) if b.final_value >= t.final_value => Some(b),
            _ => Some(t),
        })
        .ok_or_else(|| Error::Study("no completed trial".into()))?;
    Ok(StudyReport {
        checkpoints,
        best_trial_id: best.trial_id,
        trials,
    })
}

fn cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn trials_csv(report: &StudyReport, space: &SearchSpace) -> String {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let mut header = vec!["trial_id".to_string(), "state".into(), "final_value".into()];
    header.extend(space.dimensions.keys().cloned());
    header.push("pruned_at_step".into());
    w.write_record(&header).expect("in-memory write");
    for t in &report.trials {
        let mut rec = vec![
            t.trial_id.to_string(),
            format!("{:?}", t.state),
            t.final_value.map(|v| v.to_string()).unwrap_or_default(),
        ];
        rec.extend(space.dimensions.keys().map(|k| t.config.get(k).map(cell).unwrap_or_default()));
        rec.push(t.pruned_at_step.map(|s| s.to_string()).unwrap_or_default());
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
}

pub struct StudyPaths {
    pub study_id: u64,
    pub dir: PathBuf,
    pub trials_csv: PathBuf,
    pub best_config: PathBuf,
}

/// Writes `studies/study_<id>/{trials.csv,best_config.json}` under the workspace.
pub fn write_study(ws: &Workspace, report: &StudyReport, space: &SearchSpace) -> Result<StudyPaths> {
    let (study_id, dir) = create_numbered_dir(&ws.root().join("studies"), "study_")?;
    let trials_path = dir.join("trials.csv");
    write_atomic(&trials_path, trials_csv(report, space).as_bytes())?;
    let best_path = dir.join("best_config.json");
    let mut json = serde_json::to_string_pretty(&report.best().config).expect("config is serialisable");
    json.push('\n');
    write_atomic(&best_path, json.as_bytes())?;
    Ok(StudyPaths {
        study_id,
        dir,
        trials_csv: trials_path,
        best_config: best_path,
    })
}
