//! Generalized advantage estimation.

use crate::error::{Error, Result};

/// Returns `(advantages, returns)` for one rollout.
///
/// `values[t]` is V(s_t) and `next_value` bootstraps the state after the
/// last transition. `dones[t]` cuts the recursion after step `t`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    next_value: f64,
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::Contract(format!(
            "GAE inputs differ in length: {} rewards, {} values, {} dones",
            n,
            values.len(),
            dones.len()
        )));
    }
    let mut advantages = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_v = next_value;
    for t in (0..n).rev() {
        let not_done = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_v * not_done - values[t];
        next_adv = delta + gamma * lambda * not_done * next_adv;
        advantages[t] = next_adv;
        next_v = values[t];
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((advantages, returns))
}
