//! Experiment bookkeeping on disk.
//!
//! The filesystem is the registry: every `exp_<id>` directory under the
//! workspace root is one experiment.
//!
//! ```text
//! <workspace>/exp_<id>/config.json
//! <workspace>/exp_<id>/seed_<k>/training_log.csv
//! <workspace>/exp_<id>/seed_<k>/policy.json
//! <workspace>/exp_<id>/seed_<k>/run_meta.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agents::{self, Algo, AlgoConfig, Hyperparams, TrainFailure, TrainOutput, TrainingLog};
use crate::error::{Error, Result};
use crate::neural::PolicyNet;
use crate::reach_env::{registry_lookup, EnvConfig};

pub const CONFIG_FILE: &str = "config.json";
pub const TRAINING_LOG_FILE: &str = "training_log.csv";
pub const POLICY_FILE: &str = "policy.json";
pub const RUN_META_FILE: &str = "run_meta.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Created,
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub exp_id: u64,
    pub algo: String,
    pub env_id: String,
    pub n_timesteps: u64,
    pub n_seeds: u64,
    pub base_seed: u64,
    pub hyperparams: Hyperparams,
    pub created_at: DateTime<Utc>,
    pub status: Status,
    /// Keys written by newer versions; kept verbatim on rewrite.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, Value>,
}

impl ExperimentRecord {
    pub fn seeds(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        (0..self.n_seeds).map(|k| (k, self.base_seed + k))
    }

    pub fn algo_config(&self) -> Result<AlgoConfig> {
        AlgoConfig::build(self.algo.parse()?, self.n_timesteps, &self.hyperparams)
    }

    pub fn env_config(&self) -> Result<EnvConfig> {
        registry_lookup(&self.env_id)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("record is always serialisable");
        s.push('\n');
        s
    }

    /// `path` is only used for error reporting.
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| parse_error(path, text, &e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub wall_time_s: f64,
    pub status: RunStatus,
    pub n_episodes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Trains one seed run. Swappable so tests can inject failures.
pub type SeedRunner = dyn Fn(&AlgoConfig, &EnvConfig, u64) -> Result<TrainOutput, TrainFailure> + Sync;

/// Converts a serde_json line/column into a byte offset into `text`.
pub(crate) fn parse_error(path: &Path, text: &str, e: &serde_json::Error) -> Error {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(e.line().saturating_sub(1))
        .map(str::len)
        .sum();
    Error::Parse {
        path: path.to_path_buf(),
        offset: (line_start + e.column().saturating_sub(1)) as u64,
        message: e.to_string(),
    }
}

/// Writes to a sibling temp file, then renames over `path`.
pub(crate) fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Scans `dir` for entries named `<prefix><integer>`.
pub(crate) fn numbered_entries(dir: &Path, prefix: &str) -> Result<Vec<u64>> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(dir, e)),
    };
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if !entry.path().is_dir() {
            continue;
        }
        let name = entry.file_name();
        let Some(rest) = name.to_str().and_then(|n| n.strip_prefix(prefix)) else {
            continue;
        };
        if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
            if let Ok(id) = rest.parse() {
                ids.push(id);
            }
        }
    }
    ids.sort_unstable();
    Ok(ids)
}

/// Claims the next free `<prefix><max+1>` directory under `dir`.
pub(crate) fn create_numbered_dir(dir: &Path, prefix: &str) -> Result<(u64, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut id = numbered_entries(dir, prefix)?.last().map_or(1, |m| m + 1);
    loop {
        let path = dir.join(format!("{prefix}{id}"));
        match fs::create_dir(&path) {
            Ok(()) => return Ok((id, path)),
            // Lost a race with another creator.
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => id += 1,
            Err(e) => return Err(Error::io(&path, e)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn exp_dir(&self, exp_id: u64) -> PathBuf {
        self.root.join(format!("exp_{exp_id}"))
    }

    pub fn seed_dir(&self, exp_id: u64, k: u64) -> PathBuf {
        self.exp_dir(exp_id).join(format!("seed_{k}"))
    }

    pub fn experiment_ids(&self) -> Result<Vec<u64>> {
        numbered_entries(&self.root, "exp_")
    }

    /// Validates everything up front, so a bad request never touches disk.
    pub fn create_experiment(
        &self,
        algo: &str,
        env_id: &str,
        n_timesteps: u64,
        n_seeds: u64,
        base_seed: u64,
        hyperparams: Hyperparams,
    ) -> Result<ExperimentRecord> {
        let parsed: Algo = algo.parse()?;
        registry_lookup(env_id)?;
        if n_seeds == 0 {
            return Err(Error::Validation("n_seeds must be at least 1".into()));
        }
        if base_seed.checked_add(n_seeds).is_none() {
            return Err(Error::Validation("base_seed + n_seeds overflows".into()));
        }
        AlgoConfig::build(parsed, n_timesteps, &hyperparams)?;

        let (exp_id, _) = create_numbered_dir(&self.root, "exp_")?;
        let now = Utc::now();
        let record = ExperimentRecord {
            exp_id,
            algo: parsed.name().to_string(),
            env_id: env_id.to_string(),
            n_timesteps,
            n_seeds,
            base_seed,
            hyperparams,
            created_at: DateTime::from_timestamp(now.timestamp(), 0).unwrap_or(now),
            status: Status::Created,
            extra: Default::default(),
        };
        self.save_record(&record)?;
        Ok(record)
    }

    pub fn save_record(&self, record: &ExperimentRecord) -> Result<()> {
        write_atomic(&self.exp_dir(record.exp_id).join(CONFIG_FILE), record.to_json().as_bytes())
    }

    pub fn load_experiment(&self, exp_id: u64) -> Result<ExperimentRecord> {
        let path = self.exp_dir(exp_id).join(CONFIG_FILE);
        if !path.is_file() {
            return Err(Error::Lookup {
                kind: "experiment",
                name: exp_id.to_string(),
                valid: self.experiment_ids()?.iter().map(u64::to_string).collect(),
            });
        }
        ExperimentRecord::from_json(&read_to_string(&path)?, &path)
    }

    pub fn run_experiment(&self, exp_id: u64, parallelism: usize, overwrite: bool) -> Result<ExperimentRecord> {
        self.run_experiment_with(exp_id, parallelism, overwrite, &|c, e, s| agents::train(c, e, s))
    }

    /// Runs every seed of the experiment, at most `parallelism` at a time.
    /// A failing seed marks the experiment Failed; the rest still finish.
    pub fn run_experiment_with(
        &self,
        exp_id: u64,
        parallelism: usize,
        overwrite: bool,
        runner: &SeedRunner,
    ) -> Result<ExperimentRecord> {
        if parallelism == 0 {
            return Err(Error::Validation("parallelism must be at least 1".into()));
        }
        let mut record = self.load_experiment(exp_id)?;
        if record.status != Status::Created && !overwrite {
            return Err(Error::Precondition(format!(
                "experiment {exp_id} has status {:?}; pass the overwrite flag to rerun it",
                record.status
            )));
        }
        let algo = record.algo_config()?;
        let env = record.env_config()?;

        record.status = Status::Running;
        self.save_record(&record)?;

        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .map_err(|e| Error::Validation(format!("cannot start worker pool: {e}")))?;
        let seeds: Vec<(u64, u64)> = record.seeds().collect();
        let outcomes: Vec<Result<RunStatus>> = pool.install(|| {
            seeds
                .par_iter()
                .map(|&(k, seed)| self.run_seed(exp_id, k, seed, &algo, &env, runner))
                .collect()
        });

        let mut all_ok = true;
        for outcome in outcomes {
            match outcome? {
                RunStatus::Complete => {}
                RunStatus::Failed => all_ok = false,
            }
        }
        record.status = if all_ok { Status::Complete } else { Status::Failed };
        self.save_record(&record)?;
        Ok(record)
    }

    fn run_seed(
        &self,
        exp_id: u64,
        k: u64,
        seed: u64,
        algo: &AlgoConfig,
        env: &EnvConfig,
        runner: &SeedRunner,
    ) -> Result<RunStatus> {
        let dir = self.seed_dir(exp_id, k);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

        let start = Instant::now();
        let result = runner(algo, env, seed);
        let wall_time_s = start.elapsed().as_secs_f64();

        let (log, status, error) = match result {
            Ok(out) => {
                write_atomic(&dir.join(POLICY_FILE), out.policy.to_json().as_bytes())?;
                (out.log, RunStatus::Complete, None)
            }
            Err(f) => (f.log, RunStatus::Failed, Some(f.error.to_string())),
        };
        write_atomic(&dir.join(TRAINING_LOG_FILE), log.to_csv().as_bytes())?;
        let meta = RunMeta {
            seed,
            wall_time_s,
            status,
            n_episodes: log.rows.len() as u64,
            error,
        };
        let mut json = serde_json::to_string_pretty(&meta).expect("run meta is serialisable");
        json.push('\n');
        write_atomic(&dir.join(RUN_META_FILE), json.as_bytes())?;
        Ok(status)
    }

    pub fn load_run_meta(&self, exp_id: u64, k: u64) -> Result<RunMeta> {
        let path = self.seed_dir(exp_id, k).join(RUN_META_FILE);
        let text = read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| parse_error(&path, &text, &e))
    }

    /// Seed indices whose run finished successfully.
    pub fn completed_seeds(&self, record: &ExperimentRecord) -> Result<Vec<u64>> {
        let mut done = Vec::new();
        for k in 0..record.n_seeds {
            if !self.seed_dir(record.exp_id, k).join(RUN_META_FILE).is_file() {
                continue;
            }
            if self.load_run_meta(record.exp_id, k)?.status == RunStatus::Complete {
                done.push(k);
            }
        }
        Ok(done)
    }

    pub fn load_policy(&self, exp_id: u64, k: u64) -> Result<PolicyNet> {
        let path = self.seed_dir(exp_id, k).join(POLICY_FILE);
        PolicyNet::from_json(&read_to_string(&path)?)
    }

    pub fn load_training_log(&self, exp_id: u64, k: u64) -> Result<TrainingLog> {
        let path = self.seed_dir(exp_id, k).join(TRAINING_LOG_FILE);
        TrainingLog::from_csv(&read_to_string(&path)?)
    }
}
