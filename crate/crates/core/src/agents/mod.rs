//! Trainers: PPO (on-policy), TD3 (off-policy) and a uniform random baseline.
//!
//! A run is fully determined by `(algo config, env config, seed)`. The seed
//! fans out to three generators at fixed offsets: the environment uses
//! `seed`, network initialisation `seed + 1000` and action noise / minibatch
//! shuffling `seed + 2000`.

mod gae;
pub mod ppo;
mod replay;
pub mod td3;

use std::collections::BTreeMap;
use std::fmt;
use std::ops::ControlFlow;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{gaussian_sample, Mlp, OutputActivation, PolicyNet};
use crate::reach_env::{EnvConfig, EnvInstance, StepResult};

pub use gae::compute_gae;
pub use ppo::{PpoConfig, PpoLossReport};
pub use replay::{ReplayBuffer, Transition, Transitions};
pub use td3::{Td3Config, Td3LossReport};

pub const NET_SEED_OFFSET: u64 = 1000;
pub const NOISE_SEED_OFFSET: u64 = 2000;

/// Free-form hyperparameter overrides, keyed by config field name.
pub type Hyperparams = BTreeMap<String, serde_json::Value>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Ppo,
    Td3,
    Random,
}

impl Algo {
    pub const ALL: [Algo; 3] = [Algo::Ppo, Algo::Td3, Algo::Random];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Ppo => "ppo",
            Algo::Td3 => "td3",
            Algo::Random => "random",
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algo::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Lookup {
                kind: "algorithm",
                name: s.to_string(),
                valid: Algo::ALL.iter().map(|a| a.name().to_string()).collect(),
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AlgoConfig {
    Ppo(PpoConfig),
    Td3(Td3Config),
    Random { n_timesteps: u64 },
}

impl AlgoConfig {
    /// Default config for `algo` with `overrides` applied on top. Unknown
    /// keys and ill-typed values are validation errors.
    pub fn build(algo: Algo, n_timesteps: u64, overrides: &Hyperparams) -> Result<Self> {
        if n_timesteps == 0 {
            return Err(Error::Validation("n_timesteps must be at least 1".into()));
        }
        let config = match algo {
            Algo::Ppo => {
                let mut c: PpoConfig = apply_overrides(PpoConfig::default(), overrides)?;
                c.n_timesteps = n_timesteps;
                c.validate()?;
                AlgoConfig::Ppo(c)
            }
            Algo::Td3 => {
                let mut c: Td3Config = apply_overrides(Td3Config::default(), overrides)?;
                c.n_timesteps = n_timesteps;
                c.validate()?;
                AlgoConfig::Td3(c)
            }
            Algo::Random => {
                if let Some(key) = overrides.keys().next() {
                    return Err(Error::Validation(format!(
                        "the random agent takes no hyperparameters (got `{key}`)"
                    )));
                }
                AlgoConfig::Random { n_timesteps }
            }
        };
        Ok(config)
    }

    pub fn algo(&self) -> Algo {
        match self {
            AlgoConfig::Ppo(_) => Algo::Ppo,
            AlgoConfig::Td3(_) => Algo::Td3,
            AlgoConfig::Random { .. } => Algo::Random,
        }
    }

    pub fn n_timesteps(&self) -> u64 {
        match self {
            AlgoConfig::Ppo(c) => c.n_timesteps,
            AlgoConfig::Td3(c) => c.n_timesteps,
            AlgoConfig::Random { n_timesteps } => *n_timesteps,
        }
    }
}

fn apply_overrides<T: Serialize + DeserializeOwned>(base: T, overrides: &Hyperparams) -> Result<T> {
    let mut value = serde_json::to_value(base).expect("config serialises");
    let map = value.as_object_mut().expect("config is a struct");
    for (key, v) in overrides {
        if key == "n_timesteps" || !map.contains_key(key) {
            let mut valid: Vec<String> = map.keys().filter(|k| *k != "n_timesteps").cloned().collect();
            valid.sort();
            return Err(Error::Lookup {
                kind: "hyperparameter",
                name: key.clone(),
                valid,
            });
        }
        map.insert(key.clone(), v.clone());
    }
    serde_json::from_value(value).map_err(|e| Error::Validation(format!("bad hyperparameter value: {e}")))
}

/// Anything that maps observations to actions.
pub trait Actor {
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn act(&self, obs: &[f64], deterministic: bool, rng: &mut ChaCha8Rng) -> Result<Vec<f64>>;
}

impl Actor for PolicyNet {
    fn obs_dim(&self) -> usize {
        PolicyNet::obs_dim(self)
    }

    fn action_dim(&self) -> usize {
        PolicyNet::action_dim(self)
    }

    fn act(&self, obs: &[f64], deterministic: bool, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let mean = self.mean_action(obs)?;
        if deterministic {
            Ok(mean)
        } else {
            Ok(gaussian_sample(&mean, &self.head.log_std, rng).0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub timestep: u64,
    pub episode: u64,
    pub episode_return: f64,
    pub episode_final_distance_m: f64,
}

/// One row per completed training episode.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

pub const TRAINING_LOG_HEADER: &str = "timestep,episode,episode_return,episode_final_distance_m";

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(32 * (self.rows.len() + 1));
        out.push_str(TRAINING_LOG_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.timestep, r.episode, r.episode_return, r.episode_final_distance_m
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(TRAINING_LOG_HEADER) {
            return Err(Error::Validation("training log header mismatch".into()));
        }
        let bad = |n: usize| Error::Validation(format!("malformed training log line {}", n + 2));
        let rows = lines
            .enumerate()
            .map(|(n, line)| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 4 {
                    return Err(bad(n));
                }
                Ok(LogRow {
                    timestep: f[0].parse().map_err(|_| bad(n))?,
                    episode: f[1].parse().map_err(|_| bad(n))?,
                    episode_return: f[2].parse().map_err(|_| bad(n))?,
                    episode_final_distance_m: f[3].parse().map_err(|_| bad(n))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(TrainingLog { rows })
    }
}

pub struct TrainOutput {
    pub policy: PolicyNet,
    pub log: TrainingLog,
    /// A checkpoint hook asked the run to stop before `n_timesteps`.
    pub stopped_early: bool,
}

/// A failed run keeps the episodes it logged before failing.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub log: TrainingLog,
}

impl fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "training failed after {} episodes: {}", self.log.rows.len(), self.error)
    }
}

impl std::error::Error for TrainFailure {}

pub type CheckpointHook<'a> = dyn FnMut(u64, &PolicyNet) -> ControlFlow<()> + 'a;

/// Invokes the hook each time training reaches one of the listed timesteps.
pub(crate) struct Checkpoints<'a, 'h> {
    steps: &'a [u64],
    next: usize,
    hook: Option<&'a mut CheckpointHook<'h>>,
}

impl<'a, 'h> Checkpoints<'a, 'h> {
    fn due(&self, timestep: u64) -> bool {
        self.hook.is_some() && self.steps.get(self.next) == Some(&timestep)
    }

    /// Returns `true` when the hook asks to stop.
    fn visit(&mut self, timestep: u64, policy: impl FnOnce() -> PolicyNet) -> bool {
        if !self.due(timestep) {
            return false;
        }
        self.next += 1;
        let policy = policy();
        let hook = self.hook.as_mut().expect("checked by due");
        hook(timestep, &policy).is_break()
    }
}

/// Accumulates per-episode statistics into the training log.
#[derive(Default)]
pub(crate) struct EpisodeTracker {
    log: TrainingLog,
    episode_return: f64,
}

impl EpisodeTracker {
    fn record(&mut self, timestep: u64, step: &StepResult) {
        self.episode_return += step.reward;
        if step.done {
            self.log.rows.push(LogRow {
                timestep,
                episode: self.log.rows.len() as u64,
                episode_return: self.episode_return,
                episode_final_distance_m: step.info.distance,
            });
            self.episode_return = 0.0;
        }
    }

    fn fail(self, error: Error) -> TrainFailure {
        TrainFailure { error, log: self.log }
    }
}

pub fn train(config: &AlgoConfig, env: &EnvConfig, seed: u64) -> Result<TrainOutput, TrainFailure> {
    train_with_checkpoints(config, env, seed, &[], None)
}

/// Like [`train`], calling `hook` with the current greedy policy whenever
/// the timestep counter hits an entry of `checkpoints` (ascending). The hook
/// may stop the run early.
pub fn train_with_checkpoints(
    config: &AlgoConfig,
    env: &EnvConfig,
    seed: u64,
    checkpoints: &[u64],
    hook: Option<&mut CheckpointHook<'_>>,
) -> Result<TrainOutput, TrainFailure> {
    let fail = |error| TrainFailure {
        error,
        log: TrainingLog::default(),
    };
    if checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(fail(Error::Contract("checkpoints must be strictly increasing".into())));
    }
    let instance = EnvInstance::new(env.clone(), seed).map_err(fail)?;
    let mut cps = Checkpoints {
        steps: checkpoints,
        next: 0,
        hook,
    };
    match config {
        AlgoConfig::Ppo(c) => ppo::run(c, instance, seed, &mut cps),
        AlgoConfig::Td3(c) => td3::run(c, instance, seed, &mut cps),
        AlgoConfig::Random { n_timesteps } => run_random(*n_timesteps, instance, seed, &mut cps),
    }
}

fn random_policy(env: &EnvConfig) -> PolicyNet {
    PolicyNet::new(Mlp::zeros(&[env.obs_dim(), env.action_dim()]), OutputActivation::Identity)
}

fn run_random(
    n_timesteps: u64,
    mut env: EnvInstance,
    seed: u64,
    cps: &mut Checkpoints<'_, '_>,
) -> Result<TrainOutput, TrainFailure> {
    let mut rng = crate::neural::seeded_rng(seed + NOISE_SEED_OFFSET);
    let policy = random_policy(env.config());
    let n = env.config().action_dim();
    let mut tracker = EpisodeTracker::default();
    env.reset(Some(seed));
    let mut stopped_early = false;
    for t in 1..=n_timesteps {
        let action: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let step = match env.step(&action) {
            Ok(s) => s,
            Err(e) => return Err(tracker.fail(e)),
        };
        tracker.record(t, &step);
        if step.done {
            env.reset(None);
        }
        if cps.visit(t, || policy.clone()) {
            stopped_early = t < n_timesteps;
            break;
        }
    }
    Ok(TrainOutput {
        policy,
        log: tracker.log,
        stopped_early,
    })
}
