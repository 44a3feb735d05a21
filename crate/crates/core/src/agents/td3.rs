//! Twin delayed deep deterministic policy gradient (TD3).

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    Checkpoints, EpisodeTracker, ReplayBuffer, TrainFailure, TrainOutput, Transitions, NET_SEED_OFFSET,
    NOISE_SEED_OFFSET,
};
use crate::error::{Error, Result};
use crate::neural::{seeded_rng, tanh, AdamState, GaussianHead, Mlp, OutputActivation, PolicyNet, DEFAULT_HIDDEN};
use crate::reach_env::EnvInstance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Td3Config {
    pub n_timesteps: u64,
    pub buffer_size: usize,
    pub batch_size: usize,
    pub learning_starts: u64,
    pub policy_delay: u64,
    pub lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub policy_noise: f64,
    pub noise_clip: f64,
    pub explore_noise: f64,
}

impl Default for Td3Config {
    fn default() -> Self {
        Td3Config {
            n_timesteps: 1_000_000,
            buffer_size: 100_000,
            batch_size: 256,
            learning_starts: 1000,
            policy_delay: 2,
            lr: 1e-3,
            gamma: 0.99,
            tau: 0.005,
            policy_noise: 0.2,
            noise_clip: 0.5,
            explore_noise: 0.1,
        }
    }
}

impl Td3Config {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Validation(format!("TD3 config: {m}")));
        if self.batch_size == 0 || self.buffer_size < self.batch_size {
            return fail("buffer_size must be at least batch_size > 0");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return fail("tau must lie in (0, 1]");
        }
        if self.policy_delay == 0 {
            return fail("policy_delay must be at least 1");
        }
        if !(self.gamma >= 0.0 && self.gamma <= 1.0) {
            return fail("gamma must lie in [0, 1]");
        }
        if !(self.lr > 0.0) {
            return fail("lr must be positive");
        }
        if !(self.policy_noise >= 0.0 && self.noise_clip >= 0.0 && self.explore_noise > 0.0) {
            return fail("noise scales must be non-negative (explore_noise positive)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Td3LossReport {
    pub critic_loss: f64,
    /// Present on the updates that also trained the actor.
    pub actor_loss: Option<f64>,
}

/// Online and target networks with their optimizers. The actor's raw
/// output is squashed by tanh into the action box.
#[derive(Debug, Clone)]
pub struct Td3Nets {
    pub actor: Mlp,
    pub actor_target: Mlp,
    pub critics: [Mlp; 2],
    pub critic_targets: [Mlp; 2],
    pub actor_opt: AdamState,
    pub critic_opts: [AdamState; 2],
    /// Critic updates performed so far.
    pub n_updates: u64,
}

impl Td3Nets {
    pub fn new(obs_dim: usize, act_dim: usize, hidden: &[usize], lr: f64, rng: &mut impl Rng) -> Self {
        let mut actor_sizes = vec![obs_dim];
        actor_sizes.extend_from_slice(hidden);
        actor_sizes.push(act_dim);
        let mut critic_sizes = vec![obs_dim + act_dim];
        critic_sizes.extend_from_slice(hidden);
        critic_sizes.push(1);
        let actor = Mlp::new(&actor_sizes, rng);
        let critics = [Mlp::new(&critic_sizes, rng), Mlp::new(&critic_sizes, rng)];
        Td3Nets {
            actor_target: actor.clone(),
            critic_targets: critics.clone(),
            actor_opt: AdamState::new(actor.n_params(), lr),
            critic_opts: [
                AdamState::new(critics[0].n_params(), lr),
                AdamState::new(critics[1].n_params(), lr),
            ],
            actor,
            critics,
            n_updates: 0,
        }
    }

    pub fn policy(&self, explore_noise: f64) -> PolicyNet {
        PolicyNet {
            mlp: self.actor.clone(),
            head: GaussianHead {
                log_std: vec![explore_noise.ln(); self.actor.output_dim()],
            },
            output_activation: OutputActivation::Tanh,
        }
    }
}

fn tanh_actions(actor: &Mlp, obs: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(actor.forward_batch(obs.view())?.output().mapv(tanh))
}

fn critic_input(obs: &Array2<f64>, actions: &Array2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[obs.view(), actions.view()]).expect("same row count")
}

/// Bellman targets `r + γ(1 − done)·min(Q1', Q2')` evaluated at smoothed
/// target-policy actions.
pub fn critic_targets(nets: &Td3Nets, batch: &Transitions, config: &Td3Config, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let mut next_actions = tanh_actions(&nets.actor_target, &batch.next_obs)?;
    next_actions.mapv_inplace(|a| {
        let z: f64 = rng.sample(StandardNormal);
        let noise = (z * config.policy_noise).clamp(-config.noise_clip, config.noise_clip);
        (a + noise).clamp(-1.0, 1.0)
    });
    let input = critic_input(&batch.next_obs, &next_actions);
    let q1 = nets.critic_targets[0].forward_batch(input.view())?;
    let q2 = nets.critic_targets[1].forward_batch(input.view())?;
    Ok((0..batch.rewards.len())
        .map(|i| {
            let not_done = if batch.dones[i] { 0.0 } else { 1.0 };
            let q = q1.output()[[i, 0]].min(q2.output()[[i, 0]]);
            batch.rewards[i] + config.gamma * not_done * q
        })
        .collect())
}

/// One TD3 gradient step on a batch sampled from `buffer`.
pub fn td3_update(
    nets: &mut Td3Nets,
    buffer: &ReplayBuffer,
    config: &Td3Config,
    step: u64,
    rng: &mut impl Rng,
) -> Result<Td3LossReport> {
    if step < config.learning_starts {
        return Err(Error::Precondition(format!(
            "step {step} is before learning_starts {}",
            config.learning_starts
        )));
    }
    let batch = buffer.sample(config.batch_size, rng)?;
    update_on_batch(nets, &batch, config, rng)
}

pub fn update_on_batch(
    nets: &mut Td3Nets,
    batch: &Transitions,
    config: &Td3Config,
    rng: &mut impl Rng,
) -> Result<Td3LossReport> {
    let n = batch.rewards.len() as f64;
    let y = critic_targets(nets, batch, config, rng)?;
    let input = critic_input(&batch.obs, &batch.actions);
    let mut critic_loss = 0.0;
    for k in 0..2 {
        let fwd = nets.critics[k].forward_batch(input.view())?;
        let mut grad = Array2::zeros((batch.rewards.len(), 1));
        for (i, target) in y.iter().enumerate() {
            let err = fwd.output()[[i, 0]] - target;
            critic_loss += err * err / n;
            grad[[i, 0]] = 2.0 * err / n;
        }
        let (g, _) = nets.critics[k].backward_batch(&fwd, grad.view())?;
        nets.critic_opts[k].step(nets.critics[k].params_mut(), &g)?;
    }
    if !critic_loss.is_finite() {
        return Err(Error::Numeric(format!("critic loss is {critic_loss}")));
    }

    let mut actor_loss = None;
    if nets.n_updates % config.policy_delay == 0 {
        let fwd_a = nets.actor.forward_batch(batch.obs.view())?;
        let actions = fwd_a.output().mapv(tanh);
        let q_in = critic_input(&batch.obs, &actions);
        let fwd_q = nets.critics[0].forward_batch(q_in.view())?;
        let loss = -fwd_q.output().sum() / n;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("actor loss is {loss}")));
        }
        let dq = Array2::from_elem((batch.rewards.len(), 1), -1.0 / n);
        let (_, d_input) = nets.critics[0].backward_batch(&fwd_q, dq.view())?;
        let obs_dim = batch.obs.ncols();
        let mut d_pre = d_input.slice(s![.., obs_dim..]).to_owned();
        ndarray::Zip::from(&mut d_pre)
            .and(&actions)
            .for_each(|d, &a| *d *= 1.0 - a * a);
        let (g, _) = nets.actor.backward_batch(&fwd_a, d_pre.view())?;
        nets.actor_opt.step(nets.actor.params_mut(), &g)?;
        actor_loss = Some(loss);

        nets.actor_target.polyak_update(&nets.actor, config.tau);
        for k in 0..2 {
            let src = nets.critics[k].clone();
            nets.critic_targets[k].polyak_update(&src, config.tau);
        }
    }
    nets.n_updates += 1;
    Ok(Td3LossReport {
        critic_loss,
        actor_loss,
    })
}

pub(crate) fn run(
    config: &Td3Config,
    mut env: EnvInstance,
    seed: u64,
    cps: &mut Checkpoints<'_, '_>,
) -> Result<TrainOutput, TrainFailure> {
    let obs_dim = env.config().obs_dim();
    let act_dim = env.config().action_dim();
    let mut nets = Td3Nets::new(
        obs_dim,
        act_dim,
        &DEFAULT_HIDDEN,
        config.lr,
        &mut seeded_rng(seed + NET_SEED_OFFSET),
    );
    let mut rng = seeded_rng(seed + NOISE_SEED_OFFSET);
    let mut buffer = ReplayBuffer::new(config.buffer_size, obs_dim, act_dim);
    let mut tracker = EpisodeTracker::default();
    let mut obs = env.reset(Some(seed));
    let mut stopped_early = false;

    macro_rules! tri {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(e) => return Err(tracker.fail(e)),
            }
        };
    }

    for t in 1..=config.n_timesteps {
        let action: Vec<f64> = if t <= config.learning_starts {
            (0..act_dim).map(|_| rng.random_range(-1.0..=1.0)).collect()
        } else {
            let mut a = tri!(nets.actor.forward(&obs));
            for v in &mut a {
                let z: f64 = rng.sample(StandardNormal);
                *v = (tanh(*v) + config.explore_noise * z).clamp(-1.0, 1.0);
            }
            a
        };
        let step = tri!(env.step(&action));
        tracker.record(t, &step);
        // episodes only end at the horizon, which is not a terminal state
        tri!(buffer.push(&obs, &action, step.reward, &step.observation, false));
        obs = if step.done { env.reset(None) } else { step.observation };
        if t >= config.learning_starts && buffer.len() >= config.batch_size {
            tri!(td3_update(&mut nets, &buffer, config, t, &mut rng));
        }
        if cps.visit(t, || nets.policy(config.explore_noise)) {
            stopped_early = t < config.n_timesteps;
            break;
        }
    }
    Ok(TrainOutput {
        policy: nets.policy(config.explore_noise),
        log: tracker.log,
        stopped_early,
    })
}
