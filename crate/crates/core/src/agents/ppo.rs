//! Proximal policy optimisation with a clipped surrogate objective and GAE.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{compute_gae, Checkpoints, EpisodeTracker, TrainFailure, TrainOutput, NET_SEED_OFFSET, NOISE_SEED_OFFSET};
use crate::error::{Error, Result};
use crate::neural::{
    clip_grad_norm, gather_rows, gaussian_entropy, gaussian_log_prob, gaussian_sample, seeded_rng, AdamState,
    Mlp, OutputActivation, PolicyNet, DEFAULT_HIDDEN,
};
use crate::reach_env::EnvInstance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    pub n_timesteps: u64,
    pub rollout_len: usize,
    pub minibatch_size: usize,
    pub n_epochs: usize,
    pub lr: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_range: f64,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            n_timesteps: 1_000_000,
            rollout_len: 2048,
            minibatch_size: 64,
            n_epochs: 10,
            lr: 3e-4,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_range: 0.2,
            ent_coef: 0.0,
            vf_coef: 0.5,
            max_grad_norm: 0.5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Validation(format!("PPO config: {m}")));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return fail("gae_lambda must lie in [0, 1]");
        }
        if !(self.clip_range > 0.0) {
            return fail("clip_range must be positive");
        }
        if self.rollout_len == 0 || self.minibatch_size == 0 || self.n_epochs == 0 {
            return fail("rollout_len, minibatch_size and n_epochs must be positive");
        }
        if self.rollout_len % self.minibatch_size != 0 {
            return fail("rollout_len must be divisible by minibatch_size");
        }
        if !(self.lr > 0.0) || !(self.max_grad_norm > 0.0) {
            return fail("lr and max_grad_norm must be positive");
        }
        if !(self.vf_coef >= 0.0) || !(self.ent_coef >= 0.0) {
            return fail("loss coefficients must be non-negative");
        }
        Ok(())
    }
}

/// Flattened on-policy rollout ready for optimisation.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub obs: Array2<f64>,
    /// Raw sampled actions, before the environment clamps them.
    pub actions: Array2<f64>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.old_log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.old_log_probs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoLossReport {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
}

/// Loss terms and gradients of one minibatch.
#[derive(Debug, Clone)]
pub struct MinibatchLoss {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total: f64,
    pub clip_fraction: f64,
    pub ratios: Vec<f64>,
    pub policy_grad: Vec<f64>,
    pub log_std_grad: Vec<f64>,
    pub value_grad: Vec<f64>,
}

/// One Adam state per parameter group; Adam is elementwise, so this equals a
/// single optimizer over all parameters.
#[derive(Debug, Clone)]
pub struct PpoOptimizer {
    pub policy: AdamState,
    pub log_std: AdamState,
    pub value: AdamState,
}

impl PpoOptimizer {
    pub fn new(policy: &PolicyNet, value: &Mlp, lr: f64) -> Self {
        PpoOptimizer {
            policy: AdamState::new(policy.mlp.n_params(), lr),
            log_std: AdamState::new(policy.head.log_std.len(), lr),
            value: AdamState::new(value.n_params(), lr),
        }
    }
}

/// Standardises to zero mean and unit (population) standard deviation.
pub fn normalize_advantages(adv: &[f64]) -> Vec<f64> {
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    adv.iter().map(|a| (a - mean) / (std + 1e-8)).collect()
}

/// Evaluates the PPO objective on the rows `indices` of `batch`, using
/// `advantages` (already normalised) in place of `batch.advantages`.
pub fn minibatch_loss(
    policy: &PolicyNet,
    value: &Mlp,
    batch: &RolloutBatch,
    advantages: &[f64],
    indices: &[usize],
    config: &PpoConfig,
) -> Result<MinibatchLoss> {
    let n = indices.len();
    if n == 0 {
        return Err(Error::Contract("empty minibatch".into()));
    }
    let bf = n as f64;
    let obs = gather_rows(&batch.obs, indices);
    let fwd_pi = policy.mlp.forward_batch(obs.view())?;
    let fwd_v = value.forward_batch(obs.view())?;
    let means = fwd_pi.output();
    let log_std = &policy.head.log_std;
    let inv_var: Vec<f64> = log_std.iter().map(|ls| (-2.0 * ls).exp()).collect();

    let act_dim = policy.action_dim();
    let mut mean_grad = Array2::<f64>::zeros((n, act_dim));
    let mut log_std_grad = vec![0.0; act_dim];
    let mut value_grad = Array2::<f64>::zeros((n, 1));
    let mut ratios = Vec::with_capacity(n);
    let (mut policy_loss, mut value_loss, mut clipped) = (0.0, 0.0, 0usize);
    let (lo, hi) = (1.0 - config.clip_range, 1.0 + config.clip_range);

    for (row, &i) in indices.iter().enumerate() {
        let mean = means.row(row);
        let mean = mean.as_slice().expect("contiguous");
        let action = batch.actions.row(i);
        let action = action.as_slice().expect("contiguous");
        let lp = gaussian_log_prob(mean, log_std, action);
        let ratio = (lp - batch.old_log_probs[i]).exp();
        let adv = advantages[i];
        let unclipped = ratio * adv;
        let clipped_obj = ratio.clamp(lo, hi) * adv;
        policy_loss -= unclipped.min(clipped_obj) / bf;
        if (ratio - 1.0).abs() > config.clip_range {
            clipped += 1;
        }
        // gradient flows through the ratio only when the unclipped term is the minimum
        if unclipped <= clipped_obj {
            let dlp = -adv * ratio / bf;
            for j in 0..act_dim {
                let diff = action[j] - mean[j];
                mean_grad[[row, j]] = dlp * diff * inv_var[j];
                log_std_grad[j] += dlp * (diff * diff * inv_var[j] - 1.0);
            }
        }
        ratios.push(ratio);

        let err = fwd_v.output()[[row, 0]] - batch.returns[i];
        value_loss += err * err / bf;
        value_grad[[row, 0]] = config.vf_coef * 2.0 * err / bf;
    }
    let entropy = gaussian_entropy(log_std);
    log_std_grad.iter_mut().for_each(|g| *g -= config.ent_coef);
    let total = policy_loss + config.vf_coef * value_loss - config.ent_coef * entropy;
    if !total.is_finite() {
        return Err(Error::Numeric(format!("PPO loss is {total}")));
    }
    let (policy_grad, _) = policy.mlp.backward_batch(&fwd_pi, mean_grad.view())?;
    let (value_grad, _) = value.backward_batch(&fwd_v, value_grad.view())?;
    Ok(MinibatchLoss {
        policy_loss,
        value_loss,
        entropy,
        total,
        clip_fraction: clipped as f64 / bf,
        ratios,
        policy_grad,
        log_std_grad,
        value_grad,
    })
}

/// Runs `n_epochs` passes of shuffled minibatch updates over `batch`.
/// Returns losses averaged over all minibatches.
pub fn ppo_update(
    policy: &mut PolicyNet,
    value: &mut Mlp,
    opt: &mut PpoOptimizer,
    batch: &RolloutBatch,
    config: &PpoConfig,
    rng: &mut impl Rng,
) -> Result<PpoLossReport> {
    if batch.is_empty() {
        return Err(Error::Contract("empty rollout".into()));
    }
    let advantages = normalize_advantages(&batch.advantages);
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut report = PpoLossReport::default();
    let mut count = 0.0;
    for _ in 0..config.n_epochs {
        order.shuffle(rng);
        for idx in order.chunks(config.minibatch_size) {
            let mut loss = minibatch_loss(policy, value, batch, &advantages, idx, config)?;
            clip_grad_norm(
                &mut [&mut loss.policy_grad, &mut loss.log_std_grad, &mut loss.value_grad],
                config.max_grad_norm,
            );
            opt.policy.step(policy.mlp.params_mut(), &loss.policy_grad)?;
            opt.log_std.step(&mut policy.head.log_std, &loss.log_std_grad)?;
            opt.value.step(value.params_mut(), &loss.value_grad)?;
            policy.head.clamp();
            report.policy_loss += loss.policy_loss;
            report.value_loss += loss.value_loss;
            report.entropy += loss.entropy;
            report.clip_fraction += loss.clip_fraction;
            count += 1.0;
        }
    }
    report.policy_loss /= count;
    report.value_loss /= count;
    report.entropy /= count;
    report.clip_fraction /= count;
    Ok(report)
}

pub(crate) fn init_nets(obs_dim: usize, act_dim: usize, seed: u64) -> (PolicyNet, Mlp) {
    let mut rng = seeded_rng(seed + NET_SEED_OFFSET);
    let hidden = DEFAULT_HIDDEN;
    let policy = PolicyNet::new(
        Mlp::new(&[obs_dim, hidden[0], hidden[1], act_dim], &mut rng),
        OutputActivation::Identity,
    );
    let value = Mlp::new(&[obs_dim, hidden[0], hidden[1], 1], &mut rng);
    (policy, value)
}

struct Rollout {
    obs: Vec<f64>,
    actions: Vec<f64>,
    log_probs: Vec<f64>,
    rewards: Vec<f64>,
    values: Vec<f64>,
    dones: Vec<bool>,
}

pub(crate) fn run(
    config: &PpoConfig,
    mut env: EnvInstance,
    seed: u64,
    cps: &mut Checkpoints<'_, '_>,
) -> Result<TrainOutput, TrainFailure> {
    let obs_dim = env.config().obs_dim();
    let act_dim = env.config().action_dim();
    let (mut policy, mut value) = init_nets(obs_dim, act_dim, seed);
    let mut opt = PpoOptimizer::new(&policy, &value, config.lr);
    let mut rng = seeded_rng(seed + NOISE_SEED_OFFSET);
    let mut tracker = EpisodeTracker::default();
    let mut obs = env.reset(Some(seed));
    let mut t: u64 = 0;
    let mut stopped_early = false;

    macro_rules! tri {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(e) => return Err(tracker.fail(e)),
            }
        };
    }

    'outer: while t < config.n_timesteps {
        let len = (config.n_timesteps - t).min(config.rollout_len as u64) as usize;
        let mut ro = Rollout {
            obs: Vec::with_capacity(len * obs_dim),
            actions: Vec::with_capacity(len * act_dim),
            log_probs: Vec::with_capacity(len),
            rewards: Vec::with_capacity(len),
            values: Vec::with_capacity(len),
            dones: Vec::with_capacity(len),
        };
        for i in 0..len {
            let mean = tri!(policy.mean_action(&obs));
            let (action, lp) = gaussian_sample(&mean, &policy.head.log_std, &mut rng);
            let v = tri!(value.forward(&obs))[0];
            let step = tri!(env.step(&action));
            t += 1;
            tracker.record(t, &step);
            let mut reward = step.reward;
            if step.done {
                // fixed-horizon cut-off, not a true terminal: bootstrap through it
                reward += config.gamma * tri!(value.forward(&step.observation))[0];
            }
            ro.obs.extend_from_slice(&obs);
            ro.actions.extend_from_slice(&action);
            ro.log_probs.push(lp);
            ro.rewards.push(reward);
            ro.values.push(v);
            ro.dones.push(step.done);
            obs = if step.done { env.reset(None) } else { step.observation };
            // the rollout's last step is visited after its update
            if i + 1 < len && cps.visit(t, || policy.clone()) {
                stopped_early = t < config.n_timesteps;
                break 'outer;
            }
        }
        let next_value = tri!(value.forward(&obs))[0];
        let (advantages, returns) = tri!(compute_gae(
            &ro.rewards,
            &ro.values,
            next_value,
            &ro.dones,
            config.gamma,
            config.gae_lambda
        ));
        let batch = RolloutBatch {
            obs: Array2::from_shape_vec((len, obs_dim), ro.obs).expect("rollout shape"),
            actions: Array2::from_shape_vec((len, act_dim), ro.actions).expect("rollout shape"),
            old_log_probs: ro.log_probs,
            advantages,
            returns,
        };
        tri!(ppo_update(&mut policy, &mut value, &mut opt, &batch, config, &mut rng));
        if cps.visit(t, || policy.clone()) {
            stopped_early = t < config.n_timesteps;
            break;
        }
    }
    Ok(TrainOutput {
        policy,
        log: tracker.log,
        stopped_early,
    })
}
