//! Fixed-capacity ring buffer of transitions for off-policy training.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    act_dim: usize,
    obs: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_obs: Vec<f64>,
    dones: Vec<bool>,
    size: usize,
    cursor: usize,
}

/// A sampled minibatch, one row per transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Transitions {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Vec<f64>,
    pub next_obs: Array2<f64>,
    pub dones: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition<'a> {
    pub obs: &'a [f64],
    pub action: &'a [f64],
    pub reward: f64,
    pub next_obs: &'a [f64],
    pub done: bool,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, act_dim: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            obs_dim,
            act_dim,
            obs: vec![0.0; capacity * obs_dim],
            actions: vec![0.0; capacity * act_dim],
            rewards: vec![0.0; capacity],
            next_obs: vec![0.0; capacity * obs_dim],
            dones: vec![false; capacity],
            size: 0,
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(
        &mut self,
        obs: &[f64],
        action: &[f64],
        reward: f64,
        next_obs: &[f64],
        done: bool,
    ) -> Result<()> {
        if obs.len() != self.obs_dim || next_obs.len() != self.obs_dim || action.len() != self.act_dim {
            return Err(Error::Contract(format!(
                "transition shapes ({}, {}, {}) do not match buffer ({}, {})",
                obs.len(),
                action.len(),
                next_obs.len(),
                self.obs_dim,
                self.act_dim
            )));
        }
        let i = self.cursor;
        self.obs[i * self.obs_dim..(i + 1) * self.obs_dim].copy_from_slice(obs);
        self.next_obs[i * self.obs_dim..(i + 1) * self.obs_dim].copy_from_slice(next_obs);
        self.actions[i * self.act_dim..(i + 1) * self.act_dim].copy_from_slice(action);
        self.rewards[i] = reward;
        self.dones[i] = done;
        self.cursor = (self.cursor + 1) % self.capacity;
        self.size = (self.size + 1).min(self.capacity);
        Ok(())
    }

    /// Stored transition by age: `0` is the oldest still reachable.
    pub fn get(&self, index: usize) -> Option<Transition<'_>> {
        if index >= self.size {
            return None;
        }
        let start = if self.size == self.capacity { self.cursor } else { 0 };
        Some(self.slot((start + index) % self.capacity))
    }

    fn slot(&self, i: usize) -> Transition<'_> {
        Transition {
            obs: &self.obs[i * self.obs_dim..(i + 1) * self.obs_dim],
            action: &self.actions[i * self.act_dim..(i + 1) * self.act_dim],
            reward: self.rewards[i],
            next_obs: &self.next_obs[i * self.obs_dim..(i + 1) * self.obs_dim],
            done: self.dones[i],
        }
    }

    /// Uniform sample with replacement over filled slots.
    pub fn sample(&self, batch_size: usize, rng: &mut impl Rng) -> Result<Transitions> {
        if self.size < batch_size || batch_size == 0 {
            return Err(Error::Precondition(format!(
                "replay buffer holds {} transitions, batch needs {batch_size}",
                self.size
            )));
        }
        let mut out = Transitions {
            obs: Array2::zeros((batch_size, self.obs_dim)),
            actions: Array2::zeros((batch_size, self.act_dim)),
            rewards: Vec::with_capacity(batch_size),
            next_obs: Array2::zeros((batch_size, self.obs_dim)),
            dones: Vec::with_capacity(batch_size),
        };
        for row in 0..batch_size {
            let t = self.slot(rng.random_range(0..self.size));
            out.obs.row_mut(row).as_slice_mut().unwrap().copy_from_slice(t.obs);
            out.actions.row_mut(row).as_slice_mut().unwrap().copy_from_slice(t.action);
            out.next_obs.row_mut(row).as_slice_mut().unwrap().copy_from_slice(t.next_obs);
            out.rewards.push(t.reward);
            out.dones.push(t.done);
        }
        Ok(out)
    }
}
