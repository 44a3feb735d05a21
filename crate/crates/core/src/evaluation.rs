//! Policy evaluation, per-step episode logs and the benchmark table.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::Actor;
use crate::arm_sim::{distance, Vec3};
use crate::error::{Error, Result};
use crate::experiment::{write_atomic, ExperimentRecord, Status, Workspace};
use crate::neural::seeded_rng;
use crate::reach_env::{EnvConfig, EnvInstance, DEFAULT_SUCCESS_THRESHOLDS_MM};

pub const DEFAULT_EVAL_EPISODES: usize = 100;
/// Kept far from the small integers used as training seeds.
pub const DEFAULT_EVAL_SEED: u64 = 1_000_000;
pub const BENCHMARK_FILE: &str = "benchmark.csv";
pub const BENCHMARK_HEADER: &str = "exp_id,env_id,algo,n_timesteps,n_seeds,n_eval_episodes,mean_return,std_return,\
success_ratio_5mm,success_ratio_10mm,success_ratio_20mm,success_ratio_50mm,mean_final_distance_mm,\
train_walltime_s,env_config_json,hyperparams_json";

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode_return: f64,
    pub final_distance_m: f64,
    pub success_flags: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mean_return: f64,
    pub std_return: f64,
    /// One entry per success threshold, ascending.
    pub success_ratio: Vec<f64>,
    pub mean_final_distance_mm: f64,
    pub n_episodes: usize,
    pub n_seeds: usize,
}

fn check_dims(actor: &dyn Actor, env: &EnvConfig) -> Result<()> {
    if actor.obs_dim() != env.obs_dim() || actor.action_dim() != env.action_dim() {
        return Err(Error::Validation(format!(
            "policy maps {} -> {} but {} needs {} -> {}",
            actor.obs_dim(),
            actor.action_dim(),
            env.env_id,
            env.obs_dim(),
            env.action_dim()
        )));
    }
    Ok(())
}

/// Runs `n_episodes` episodes, reseeding episode `k` with `seed + k`.
pub fn evaluate_policy(
    actor: &dyn Actor,
    env: &EnvConfig,
    n_episodes: usize,
    deterministic: bool,
    seed: u64,
) -> Result<Vec<EpisodeRecord>> {
    let mut instance = EnvInstance::new(env.clone(), seed)?;
    evaluate_in(&mut instance, actor, n_episodes, deterministic, seed)
}

/// [`evaluate_policy`] on a caller-prepared instance.
pub fn evaluate_in(
    env: &mut EnvInstance,
    actor: &dyn Actor,
    n_episodes: usize,
    deterministic: bool,
    seed: u64,
) -> Result<Vec<EpisodeRecord>> {
    check_dims(actor, env.config())?;
    if n_episodes == 0 {
        return Err(Error::Validation("n_episodes must be at least 1".into()));
    }
    let mut rng = seeded_rng(seed);
    let mut records = Vec::with_capacity(n_episodes);
    for k in 0..n_episodes as u64 {
        let mut obs = env.reset(Some(seed.wrapping_add(k)));
        let mut ret = 0.0;
        loop {
            let action = actor.act(&obs, deterministic, &mut rng)?;
            let step = env.step(&action)?;
            ret += step.reward;
            obs = step.observation;
            if step.done {
                records.push(EpisodeRecord {
                    episode_return: ret,
                    final_distance_m: step.info.distance,
                    success_flags: step.info.success_flags,
                });
                break;
            }
        }
    }
    Ok(records)
}

pub fn aggregate_across_seeds(per_seed: &[Vec<EpisodeRecord>]) -> Result<EvalMetrics> {
    let Some(first) = per_seed.first() else {
        return Err(Error::Validation("no seeds to aggregate".into()));
    };
    let n_episodes = first.len();
    if n_episodes == 0 || per_seed.iter().any(|s| s.len() != n_episodes) {
        return Err(Error::Validation("every seed needs the same, non-zero episode count".into()));
    }
    let n_flags = first[0].success_flags.len();
    if per_seed.iter().flatten().any(|e| e.success_flags.len() != n_flags) {
        return Err(Error::Validation("inconsistent success flag counts".into()));
    }

    let total = (per_seed.len() * n_episodes) as f64;
    let seed_means: Vec<f64> = per_seed
        .iter()
        .map(|s| s.iter().map(|e| e.episode_return).sum::<f64>() / n_episodes as f64)
        .collect();
    let all = || per_seed.iter().flatten();
    let mean_return = all().map(|e| e.episode_return).sum::<f64>() / total;
    let grand = seed_means.iter().sum::<f64>() / seed_means.len() as f64;
    let var = seed_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / seed_means.len() as f64;
    let success_ratio = (0..n_flags)
        .map(|i| all().filter(|e| e.success_flags[i]).count() as f64 / total)
        .collect();
    Ok(EvalMetrics {
        mean_return,
        std_return: var.sqrt(),
        success_ratio,
        mean_final_distance_mm: all().map(|e| e.final_distance_m * 1e3).sum::<f64>() / total,
        n_episodes,
        n_seeds: per_seed.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStep {
    pub step: usize,
    pub angles: Vec<f64>,
    pub ee: Vec3,
    pub goal: Vec3,
    pub action: Vec<f64>,
    pub reward: f64,
    pub distance_m: f64,
    pub velocity: f64,
    pub acceleration: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    /// Distance right after reset; the reward of step 0 depends on it.
    pub initial_distance_m: f64,
    pub rows: Vec<EpisodeStep>,
}

/// One deterministic episode with every per-step quantity recorded.
pub fn log_episode(actor: &dyn Actor, env: &EnvConfig, seed: u64) -> Result<EpisodeLog> {
    let mut instance = EnvInstance::new(env.clone(), seed)?;
    log_episode_in(&mut instance, actor, seed)
}

pub fn log_episode_in(env: &mut EnvInstance, actor: &dyn Actor, seed: u64) -> Result<EpisodeLog> {
    check_dims(actor, env.config())?;
    let mut rng = seeded_rng(seed);
    let mut obs = env.reset(Some(seed));
    let initial_distance_m = env.distance();
    let mut rows: Vec<EpisodeStep> = Vec::with_capacity(env.config().episode_len);
    loop {
        let action = actor.act(&obs, true, &mut rng)?;
        let step = env.step(&action)?;
        let t = rows.len();
        let velocity = match rows.last() {
            Some(prev) => step.info.distance - prev.distance_m,
            None => 0.0,
        };
        let acceleration = match rows.last() {
            Some(prev) if t >= 2 => velocity - prev.velocity,
            _ => 0.0,
        };
        rows.push(EpisodeStep {
            step: t,
            angles: env.arm_state().angles.clone(),
            ee: env.arm_state().ee_position,
            goal: env.goal(),
            action,
            reward: step.reward,
            distance_m: step.info.distance,
            velocity,
            acceleration,
        });
        obs = step.observation;
        if step.done {
            break;
        }
    }
    Ok(EpisodeLog {
        initial_distance_m,
        rows,
    })
}

impl EpisodeLog {
    pub fn n_joints(&self) -> usize {
        self.rows.first().map_or(0, |r| r.angles.len())
    }

    pub fn header(n_joints: usize) -> String {
        let mut cols = vec!["step".to_string()];
        cols.extend((1..=n_joints).map(|i| format!("q{i}")));
        cols.extend(["ee_x", "ee_y", "ee_z", "goal_x", "goal_y", "goal_z"].map(String::from));
        cols.extend((1..=n_joints).map(|i| format!("a{i}")));
        cols.extend(["reward", "distance_m", "velocity", "acceleration"].map(String::from));
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = Self::header(self.n_joints());
        out.push('\n');
        for r in &self.rows {
            let mut fields = vec![r.step.to_string()];
            let tail = [r.reward, r.distance_m, r.velocity, r.acceleration];
            let nums = r
                .angles
                .iter()
                .chain(&r.ee)
                .chain(&r.goal)
                .chain(&r.action)
                .chain(&tail);
            fields.extend(nums.map(f64::to_string));
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    /// Inverse of [`to_csv`](Self::to_csv), apart from the initial
    /// distance, which the CSV does not carry.
    pub fn from_csv(text: &str, initial_distance_m: f64) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let n_cols = header.split(',').count();
        if n_cols < 11 || (n_cols - 11) % 2 != 0 || header != Self::header((n_cols - 11) / 2) {
            return Err(Error::Validation("episode log header mismatch".into()));
        }
        let n = (n_cols - 11) / 2;
        let rows = lines
            .enumerate()
            .map(|(i, line)| {
                let bad = || Error::Validation(format!("malformed episode log line {}", i + 2));
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != n_cols {
                    return Err(bad());
                }
                let v: Vec<f64> = f[1..].iter().map(|s| s.parse()).collect::<Result<_, _>>().map_err(|_| bad())?;
                let vec3 = |o: usize| [v[o], v[o + 1], v[o + 2]];
                Ok(EpisodeStep {
                    step: f[0].parse().map_err(|_| bad())?,
                    angles: v[..n].to_vec(),
                    ee: vec3(n),
                    goal: vec3(n + 3),
                    action: v[n + 6..2 * n + 6].to_vec(),
                    reward: v[2 * n + 6],
                    distance_m: v[2 * n + 7],
                    velocity: v[2 * n + 8],
                    acceleration: v[2 * n + 9],
                })
            })
            .collect::<Result<_>>()?;
        Ok(EpisodeLog {
            initial_distance_m,
            rows,
        })
    }

    /// Largest deviation between each logged distance and the distance
    /// recomputed from the logged positions.
    pub fn distance_residual(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| (distance(&r.ee, &r.goal) - r.distance_m).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub exp_id: u64,
    pub env_id: String,
    pub algo: String,
    pub n_timesteps: u64,
    pub n_seeds: u64,
    pub n_eval_episodes: u64,
    pub mean_return: f64,
    pub std_return: f64,
    pub success_ratio_5mm: f64,
    pub success_ratio_10mm: f64,
    pub success_ratio_20mm: f64,
    pub success_ratio_50mm: f64,
    pub mean_final_distance_mm: f64,
    pub train_walltime_s: f64,
    pub env_config_json: String,
    pub hyperparams_json: String,
}

/// Numeric benchmark columns that can be plotted.
pub const NUMERIC_METRICS: [&str; 7] = [
    "mean_return",
    "std_return",
    "success_ratio_5mm",
    "success_ratio_10mm",
    "success_ratio_20mm",
    "success_ratio_50mm",
    "mean_final_distance_mm",
];

impl BenchmarkRow {
    pub fn new(record: &ExperimentRecord, metrics: &EvalMetrics, train_walltime_s: f64) -> Result<Self> {
        if metrics.success_ratio.len() != DEFAULT_SUCCESS_THRESHOLDS_MM.len() {
            return Err(Error::Contract(format!(
                "benchmark expects {} success ratios, got {}",
                DEFAULT_SUCCESS_THRESHOLDS_MM.len(),
                metrics.success_ratio.len()
            )));
        }
        let env = record.env_config()?;
        let s = &metrics.success_ratio;
        Ok(BenchmarkRow {
            exp_id: record.exp_id,
            env_id: record.env_id.clone(),
            algo: record.algo.clone(),
            n_timesteps: record.n_timesteps,
            n_seeds: metrics.n_seeds as u64,
            n_eval_episodes: metrics.n_episodes as u64,
            mean_return: metrics.mean_return,
            std_return: metrics.std_return,
            success_ratio_5mm: s[0],
            success_ratio_10mm: s[1],
            success_ratio_20mm: s[2],
            success_ratio_50mm: s[3],
            mean_final_distance_mm: metrics.mean_final_distance_mm,
            train_walltime_s,
            env_config_json: serde_json::to_string(&env).expect("env config is serialisable"),
            hyperparams_json: serde_json::to_string(&record.hyperparams).expect("hyperparams are serialisable"),
        })
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        Some(match name {
            "mean_return" => self.mean_return,
            "std_return" => self.std_return,
            "success_ratio_5mm" => self.success_ratio_5mm,
            "success_ratio_10mm" => self.success_ratio_10mm,
            "success_ratio_20mm" => self.success_ratio_20mm,
            "success_ratio_50mm" => self.success_ratio_50mm,
            "mean_final_distance_mm" => self.mean_final_distance_mm,
            _ => return None,
        })
    }
}

pub fn emit_benchmark(rows: &[BenchmarkRow]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("writing to memory cannot fail");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8");
    format!("{BENCHMARK_HEADER}\n{body}")
}

/// Strict parse: any deviation from the schema is reported, never repaired.
pub fn parse_benchmark(text: &str, path: &Path) -> Result<Vec<BenchmarkRow>> {
    let corrupt = |message: String| Error::Corrupt {
        path: path.to_path_buf(),
        message,
    };
    let (header, body) = text.split_once('\n').unwrap_or((text, ""));
    if header != BENCHMARK_HEADER {
        return Err(corrupt("header does not match the benchmark schema".into()));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(body.as_bytes());
    let mut rows: Vec<BenchmarkRow> = Vec::new();
    for (i, row) in reader.deserialize().enumerate() {
        let row: BenchmarkRow = row.map_err(|e| corrupt(format!("data row {}: {e}", i + 1)))?;
        if rows.iter().any(|r| r.exp_id == row.exp_id) {
            return Err(corrupt(format!("duplicate row for exp_id {}", row.exp_id)));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn benchmark_path(ws: &Workspace) -> PathBuf {
    ws.root().join(BENCHMARK_FILE)
}

pub fn read_benchmark(ws: &Workspace) -> Result<Vec<BenchmarkRow>> {
    let path = benchmark_path(ws);
    match fs::read_to_string(&path) {
        Ok(text) => parse_benchmark(&text, &path),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(Error::io(&path, e)),
    }
}

/// Inserts or replaces the row for `row.exp_id`, keeping rows sorted by
/// exp_id. Writers serialise on an exclusive lock file.
pub fn upsert_benchmark_row(ws: &Workspace, row: BenchmarkRow) -> Result<()> {
    fs::create_dir_all(ws.root()).map_err(|e| Error::io(ws.root(), e))?;
    let lock_path = ws.root().join(format!("{BENCHMARK_FILE}.lock"));
    let lock = File::create(&lock_path).map_err(|e| Error::io(&lock_path, e))?;
    lock.lock().map_err(|e| Error::io(&lock_path, e))?;

    let mut rows = read_benchmark(ws)?;
    rows.retain(|r| r.exp_id != row.exp_id);
    rows.push(row);
    rows.sort_by_key(|r| r.exp_id);
    let result = write_atomic(&benchmark_path(ws), emit_benchmark(&rows).as_bytes());
    drop(lock);
    result
}

pub fn append_benchmark_row(ws: &Workspace, metrics: &EvalMetrics, record: &ExperimentRecord) -> Result<BenchmarkRow> {
    let mut walltime = 0.0;
    for k in ws.completed_seeds(record)? {
        walltime += ws.load_run_meta(record.exp_id, k)?.wall_time_s;
    }
    let row = BenchmarkRow::new(record, metrics, walltime)?;
    upsert_benchmark_row(ws, row.clone())?;
    Ok(row)
}

#[derive(Debug, Clone)]
pub struct ExperimentEvaluation {
    pub seeds: Vec<u64>,
    pub per_seed: Vec<Vec<EpisodeRecord>>,
    pub metrics: EvalMetrics,
}

/// Evaluates every completed seed run with deterministic actions.
/// Experiments that are not Complete need `allow_partial`.
pub fn evaluate_experiment(
    ws: &Workspace,
    record: &ExperimentRecord,
    n_episodes: usize,
    eval_seed: u64,
    allow_partial: bool,
) -> Result<ExperimentEvaluation> {
    if record.status != Status::Complete && !allow_partial {
        return Err(Error::Precondition(format!(
            "experiment {} has status {:?}; evaluating it needs the allow-partial flag",
            record.exp_id, record.status
        )));
    }
    let seeds = ws.completed_seeds(record)?;
    if seeds.is_empty() {
        return Err(Error::Precondition(format!("experiment {} has no completed seed run", record.exp_id)));
    }
    let env = record.env_config()?;
    let per_seed = seeds
        .par_iter()
        .map(|&k| {
            let policy = ws.load_policy(record.exp_id, k)?;
            evaluate_policy(&policy, &env, n_episodes, true, eval_seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let metrics = aggregate_across_seeds(&per_seed)?;
    Ok(ExperimentEvaluation {
        seeds,
        per_seed,
        metrics,
    })
}

impl EvalMetrics {
    /// Aligned `name  value` lines for terminal output.
    pub fn to_text(&self, thresholds_mm: &[f64]) -> String {
        let mut lines: Vec<(String, String)> = vec![
            ("mean_return".into(), format!("{:.6}", self.mean_return)),
            ("std_return".into(), format!("{:.6}", self.std_return)),
        ];
        for (t, r) in thresholds_mm.iter().zip(&self.success_ratio) {
            lines.push((format!("success_ratio_{t}mm"), format!("{r:.4}")));
        }
        lines.push(("mean_final_distance_mm".into(), format!("{:.3}", self.mean_final_distance_mm)));
        lines.push(("n_episodes".into(), self.n_episodes.to_string()));
        lines.push(("n_seeds".into(), self.n_seeds.to_string()));
        let width = lines.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        lines
            .iter()
            .map(|(k, v)| format!("{k:<width$}  {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::Hyperparams;
    use crate::arm_sim::norm;
    use crate::neural::{Mlp, OutputActivation, PolicyNet};
    use crate::reach_env::{registry_lookup, RewardType};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn still(env: &EnvConfig) -> PolicyNet {
        PolicyNet::new(Mlp::zeros(&[env.obs_dim(), env.action_dim()]), OutputActivation::Identity)
    }

    fn rec(ret: f64, d: f64) -> EpisodeRecord {
        EpisodeRecord {
            episode_return: ret,
            final_distance_m: d,
            success_flags: DEFAULT_SUCCESS_THRESHOLDS_MM.iter().map(|t| d < t * 1e-3).collect(),
        }
    }

    #[test]
    fn forced_goal_at_home_is_a_perfect_episode() {
        let env = registry_lookup("reach-v1").unwrap();
        let mut inst = EnvInstance::new(env.clone(), 0).unwrap();
        inst.force_goal(Some(env.arm.home_state().ee_position));
        let recs = evaluate_in(&mut inst, &still(&env), 3, true, 5).unwrap();
        for r in recs {
            assert_eq!(r.final_distance_m, 0.0);
            assert!(r.success_flags.iter().all(|f| *f));
            assert_eq!(r.episode_return, 0.0);
        }
    }

    #[test]
    fn still_policy_return_is_horizon_times_reward() {
        let env = registry_lookup("reach-v1").unwrap();
        let recs = evaluate_policy(&still(&env), &env, 4, true, 11).unwrap();
        for (k, r) in recs.iter().enumerate() {
            let mut inst = EnvInstance::new(env.clone(), 0).unwrap();
            inst.reset(Some(11 + k as u64));
            let d = inst.distance();
            let expected = -(env.episode_len as f64) * d * d;
            assert!((r.episode_return - expected).abs() < 1e-12, "{} vs {expected}", r.episode_return);
        }
        assert_eq!(recs, evaluate_policy(&still(&env), &env, 4, true, 11).unwrap());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let env = registry_lookup("reach-v1").unwrap();
        let planar = registry_lookup("reach-v1-planar").unwrap();
        let err = evaluate_policy(&still(&planar), &env, 1, true, 0).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn aggregate_examples() {
        let per_seed = vec![vec![rec(1.0, 0.001)], vec![rec(2.0, 0.03)], vec![rec(3.0, 0.2)]];
        let m = aggregate_across_seeds(&per_seed).unwrap();
        assert_eq!(m.mean_return, 2.0);
        assert!((m.std_return - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(m.success_ratio, vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0]);
        let one = aggregate_across_seeds(&per_seed[..1]).unwrap();
        assert_eq!(one.std_return, 0.0);
        assert!(aggregate_across_seeds(&[]).is_err());
        assert!(aggregate_across_seeds(&[vec![rec(1.0, 0.0)], vec![]]).is_err());
    }

    #[test]
    fn stay_still_episode_log() {
        let env = registry_lookup("reach-v3").unwrap();
        let log = log_episode(&still(&env), &env, 9).unwrap();
        assert_eq!(log.rows.len(), env.episode_len);
        assert!(log.rows.iter().all(|r| r.velocity == 0.0 && r.acceleration == 0.0));
        assert!(log.distance_residual() < 1e-12);
        let text = log.to_csv();
        assert!(text.starts_with(
            "step,q1,q2,q3,q4,q5,q6,ee_x,ee_y,ee_z,goal_x,goal_y,goal_z,a1,a2,a3,a4,a5,a6,reward,distance_m,velocity,acceleration\n"
        ));
        let back = EpisodeLog::from_csv(&text, log.initial_distance_m).unwrap();
        assert_eq!(back, log);
        assert_eq!(back.to_csv(), text);
    }

    fn noisy_policy(env: &EnvConfig, seed: u64) -> PolicyNet {
        let mut rng = seeded_rng(seed);
        let mut p = PolicyNet::new(Mlp::new(&[env.obs_dim(), 8, env.action_dim()], &mut rng), OutputActivation::Tanh);
        for w in p.mlp.params_mut() {
            *w *= 3.0;
        }
        p
    }

    #[test]
    fn episode_log_is_internally_consistent() {
        for id in ["reach-v1", "reach-v2", "reach-v7", "reach-v4-planar"] {
            let mut env = registry_lookup(id).unwrap();
            for rt in [RewardType::DeltaDistance, env.reward_type] {
                env.reward_type = rt;
                let log = log_episode(&noisy_policy(&env, 3), &env, 21).unwrap();
                assert!(log.distance_residual() < 1e-12);
                let mut prev = log.initial_distance_m;
                for (t, r) in log.rows.iter().enumerate() {
                    let expected = env.compute_reward(r.distance_m, prev).unwrap();
                    assert!((r.reward - expected).abs() <= 1e-12, "{id} step {t}");
                    let v = if t == 0 { 0.0 } else { r.distance_m - log.rows[t - 1].distance_m };
                    assert_eq!(r.velocity, v);
                    let a = if t <= 1 { 0.0 } else { v - log.rows[t - 1].velocity };
                    assert_eq!(r.acceleration, a);
                    prev = r.distance_m;
                }
                assert!(log.rows.iter().any(|r| r.velocity != 0.0));
            }
        }
    }

    fn sample_row(exp_id: u64, rng: &mut impl Rng) -> BenchmarkRow {
        let mut pick = || match rng.random_range(0..4) {
            0 => 0.0,
            1 => -rng.random_range(0.0..100.0),
            2 => rng.random::<f64>() * 1e-9,
            _ => rng.random_range(-1e6..1e6),
        };
        BenchmarkRow {
            exp_id,
            env_id: "reach-v2".into(),
            algo: "ppo".into(),
            n_timesteps: 1000,
            n_seeds: 2,
            n_eval_episodes: 100,
            mean_return: pick(),
            std_return: pick().abs(),
            success_ratio_5mm: 0.0,
            success_ratio_10mm: 0.25,
            success_ratio_20mm: 0.5,
            success_ratio_50mm: 1.0,
            mean_final_distance_mm: pick().abs(),
            train_walltime_s: pick().abs(),
            env_config_json: r#"{"a":[1,2],"b":"x,y"}"#.into(),
            hyperparams_json: r#"{"lr":0.001}"#.into(),
        }
    }

    proptest! {
        #[test]
        fn benchmark_round_trip(seed in any::<u64>(), n in 0usize..6) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<_> = (0..n as u64).map(|i| sample_row(i + 1, &mut rng)).collect();
            let text = emit_benchmark(&rows);
            let back = parse_benchmark(&text, Path::new("b.csv")).unwrap();
            prop_assert_eq!(&back, &rows);
            prop_assert_eq!(emit_benchmark(&back), text);
        }

        #[test]
        fn aggregate_matches_flat_loop(seed in any::<u64>(), n_seeds in 1usize..5, n_eps in 1usize..8) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let per_seed: Vec<Vec<EpisodeRecord>> = (0..n_seeds)
                .map(|_| (0..n_eps).map(|_| rec(rng.random_range(-50.0..0.0), rng.random_range(0.0..0.1))).collect())
                .collect();
            let m = aggregate_across_seeds(&per_seed).unwrap();
            let (mut sum, mut dist, mut hits) = (0.0, 0.0, [0usize; 4]);
            let mut means = Vec::new();
            for s in &per_seed {
                let mut seed_sum = 0.0;
                for e in s {
                    sum += e.episode_return;
                    seed_sum += e.episode_return;
                    dist += e.final_distance_m * 1000.0;
                    for (i, t) in DEFAULT_SUCCESS_THRESHOLDS_MM.iter().enumerate() {
                        if e.final_distance_m < t / 1000.0 {
                            hits[i] += 1;
                        }
                    }
                }
                means.push(seed_sum / n_eps as f64);
            }
            let total = (n_seeds * n_eps) as f64;
            let mu = means.iter().sum::<f64>() / n_seeds as f64;
            let sd = (means.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n_seeds as f64).sqrt();
            prop_assert!((m.mean_return - sum / total).abs() <= 1e-12 * (1.0 + m.mean_return.abs()));
            prop_assert!((m.std_return - sd).abs() <= 1e-12 * (1.0 + sd));
            prop_assert!((m.mean_final_distance_mm - dist / total).abs() <= 1e-12 * (1.0 + dist / total));
            for i in 0..4 {
                prop_assert_eq!(m.success_ratio[i], hits[i] as f64 / total);
            }
            prop_assert!(m.success_ratio.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn corrupt_benchmark_is_reported() {
        let p = Path::new("benchmark.csv");
        assert!(matches!(parse_benchmark("exp_id,oops\n", p), Err(Error::Corrupt { .. })));
        let mut text = emit_benchmark(&[sample_row(1, &mut seeded_rng(0))]);
        text.push_str("2,reach-v1,ppo\n");
        assert!(matches!(parse_benchmark(&text, p), Err(Error::Corrupt { .. })));
        let dup = emit_benchmark(&[sample_row(1, &mut seeded_rng(0)), sample_row(1, &mut seeded_rng(1))]);
        assert!(matches!(parse_benchmark(&dup, p), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn upsert_creates_replaces_and_sorts() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        let mut rng = seeded_rng(4);
        upsert_benchmark_row(&ws, sample_row(3, &mut rng)).unwrap();
        let text = fs::read_to_string(benchmark_path(&ws)).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(text.lines().next().unwrap(), BENCHMARK_HEADER);

        let replacement = sample_row(3, &mut rng);
        upsert_benchmark_row(&ws, replacement.clone()).unwrap();
        upsert_benchmark_row(&ws, sample_row(1, &mut rng)).unwrap();
        let rows = read_benchmark(&ws).unwrap();
        assert_eq!(rows.iter().map(|r| r.exp_id).collect::<Vec<_>>(), vec![1, 3]);
        assert_eq!(rows[1], replacement);

        fs::write(benchmark_path(&ws), "garbage\n").unwrap();
        assert!(matches!(
            upsert_benchmark_row(&ws, sample_row(4, &mut rng)),
            Err(Error::Corrupt { .. })
        ));
        assert_eq!(fs::read_to_string(benchmark_path(&ws)).unwrap(), "garbage\n");
    }

    #[test]
    fn evaluate_experiment_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        let record = ws.create_experiment("random", "reach-v2", 200, 2, 0, Hyperparams::new()).unwrap();
        assert!(matches!(
            evaluate_experiment(&ws, &record, 5, 0, false),
            Err(Error::Precondition(_))
        ));
        let record = ws.run_experiment(record.exp_id, 2, false).unwrap();
        let ev = evaluate_experiment(&ws, &record, 5, DEFAULT_EVAL_SEED, false).unwrap();
        assert_eq!(ev.seeds, vec![0, 1]);
        assert_eq!(ev.metrics.n_episodes, 5);
        // The random agent's saved policy is a zero network: it never moves.
        assert_eq!(ev.per_seed[0], ev.per_seed[1]);
        let row = append_benchmark_row(&ws, &ev.metrics, &record).unwrap();
        assert_eq!(read_benchmark(&ws).unwrap(), vec![row.clone()]);
        let env: EnvConfig = serde_json::from_str(&row.env_config_json).unwrap();
        assert_eq!(env, record.env_config().unwrap());
        assert!(norm(&env.goal_box.high) > 0.0);
        assert!(ev.metrics.to_text(&DEFAULT_SUCCESS_THRESHOLDS_MM).contains("success_ratio_50mm"));
    }
}
