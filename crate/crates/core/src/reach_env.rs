//! The reaching task: an arm must bring its end-effector to a goal sampled
//! in a box. Variants differ in how actions are decoded, what the agent
//! observes and how distance is turned into reward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arm_sim::{distance, ArmModel, ArmState, Vec3};
use crate::error::{Error, Result};

pub const DEFAULT_EPISODE_LEN: usize = 100;
pub const DEFAULT_SUCCESS_THRESHOLDS_MM: [f64; 4] = [5.0, 10.0, 20.0, 50.0];

/// Suffix selecting the two-link planar arm instead of the 6-DOF arm.
pub const PLANAR_SUFFIX: &str = "-planar";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionMode {
    /// Actions are joint deltas scaled by each joint's `max_step`.
    RelativeJoint,
    /// Actions are target angles mapped onto each joint's range.
    AbsoluteJoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObsMode {
    JointsGoal,
    JointsGoalEE,
    JointsGoalVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardType {
    DenseSquared,
    DenseLinear,
    DeltaDistance,
    Sparse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalBox {
    pub low: Vec3,
    pub high: Vec3,
}

impl GoalBox {
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.low[i] && p[i] <= self.high[i])
    }

    pub fn center(&self) -> Vec3 {
        [0, 1, 2].map(|i| 0.5 * (self.low[i] + self.high[i]))
    }

    fn corners(&self) -> impl Iterator<Item = Vec3> + '_ {
        (0..8).map(move |m| {
            [0, 1, 2].map(|i| if m & (1 << i) == 0 { self.low[i] } else { self.high[i] })
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub env_id: String,
    pub action_mode: ActionMode,
    pub obs_mode: ObsMode,
    pub reward_type: RewardType,
    pub episode_len: usize,
    pub goal_box: GoalBox,
    pub success_thresholds_mm: Vec<f64>,
    pub arm: ArmModel,
}

const VARIANTS: [(ActionMode, ObsMode, RewardType); 8] = {
    use ActionMode::*;
    use ObsMode::*;
    use RewardType::*;
    [
        (RelativeJoint, JointsGoal, DenseSquared),
        (RelativeJoint, JointsGoal, Sparse),
        (RelativeJoint, JointsGoalVector, DenseSquared),
        (RelativeJoint, JointsGoalVector, Sparse),
        (AbsoluteJoint, JointsGoal, DenseSquared),
        (AbsoluteJoint, JointsGoal, Sparse),
        (AbsoluteJoint, JointsGoalVector, DenseSquared),
        (AbsoluteJoint, JointsGoalVector, Sparse),
    ]
};

/// The eight registered base IDs, `reach-v1` .. `reach-v8`.
pub fn registered_ids() -> Vec<String> {
    (1..=VARIANTS.len()).map(|i| format!("reach-v{i}")).collect()
}

/// Resolves a registered environment ID. Each base ID may carry the
/// `-planar` suffix to run the same variant on the 2-DOF planar arm.
pub fn registry_lookup(env_id: &str) -> Result<EnvConfig> {
    let (base, planar) = match env_id.strip_suffix(PLANAR_SUFFIX) {
        Some(base) => (base, true),
        None => (env_id, false),
    };
    let index = base
        .strip_prefix("reach-v")
        .and_then(|n| n.parse::<usize>().ok())
        .filter(|n| (1..=VARIANTS.len()).contains(n) && base == format!("reach-v{n}"));
    let Some(n) = index else {
        let mut valid = registered_ids();
        valid.push(format!("(any of these with `{PLANAR_SUFFIX}` suffix)"));
        return Err(Error::Lookup {
            kind: "environment",
            name: env_id.to_string(),
            valid,
        });
    };
    let (action_mode, obs_mode, reward_type) = VARIANTS[n - 1];
    let (arm, goal_box) = if planar {
        (
            ArmModel::planar(),
            GoalBox {
                low: [0.10, -0.15, 0.0],
                high: [0.25, 0.15, 0.0],
            },
        )
    } else {
        (
            ArmModel::widowx(),
            GoalBox {
                low: [0.10, -0.15, 0.05],
                high: [0.25, 0.15, 0.25],
            },
        )
    };
    Ok(EnvConfig {
        env_id: env_id.to_string(),
        action_mode,
        obs_mode,
        reward_type,
        episode_len: DEFAULT_EPISODE_LEN,
        goal_box,
        success_thresholds_mm: DEFAULT_SUCCESS_THRESHOLDS_MM.to_vec(),
        arm,
    })
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.arm.validate()?;
        if self.episode_len == 0 {
            return Err(Error::Validation("episode_len must be at least 1".into()));
        }
        if self.success_thresholds_mm.is_empty()
            || self.success_thresholds_mm[0] <= 0.0
            || self.success_thresholds_mm.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Validation(
                "success thresholds must be positive and strictly increasing".into(),
            ));
        }
        if (0..3).any(|i| !(self.goal_box.low[i] <= self.goal_box.high[i])) {
            return Err(Error::Validation("goal box low corner exceeds high corner".into()));
        }
        let reach = self.arm.reach();
        if self.goal_box.corners().any(|c| crate::arm_sim::norm(&c) > reach) {
            return Err(Error::Validation(format!(
                "goal box extends beyond the arm's reach of {reach} m"
            )));
        }
        Ok(())
    }

    pub fn n_joints(&self) -> usize {
        self.arm.n_joints()
    }

    pub fn action_dim(&self) -> usize {
        self.n_joints()
    }

    pub fn obs_dim(&self) -> usize {
        self.n_joints()
            + match self.obs_mode {
                ObsMode::JointsGoal | ObsMode::JointsGoalVector => 3,
                ObsMode::JointsGoalEE => 6,
            }
    }

    pub fn smallest_threshold_m(&self) -> f64 {
        self.success_thresholds_mm[0] * 1e-3
    }

    pub fn success_flags(&self, distance: f64) -> Vec<bool> {
        self.success_thresholds_mm
            .iter()
            .map(|t| distance < t * 1e-3)
            .collect()
    }

    /// Maps an action in `[-1, 1]^n` to a joint command for the arm.
    /// Components outside the unit box are clamped first.
    pub fn decode_action(&self, state: &ArmState, action: &[f64]) -> Result<Vec<f64>> {
        if action.len() != self.n_joints() {
            return Err(Error::Contract(format!(
                "action has length {}, expected {}",
                action.len(),
                self.n_joints()
            )));
        }
        let joints = &self.arm.joints;
        let command = match self.action_mode {
            ActionMode::RelativeJoint => action
                .iter()
                .zip(joints)
                .map(|(a, j)| a.clamp(-1.0, 1.0) * j.max_step)
                .collect(),
            ActionMode::AbsoluteJoint => action
                .iter()
                .zip(joints)
                .zip(&state.angles)
                .map(|((a, j), q)| j.midpoint() + a.clamp(-1.0, 1.0) * j.half_range() - q)
                .collect(),
        };
        Ok(command)
    }

    pub fn compute_reward(&self, distance: f64, prev_distance: f64) -> Result<f64> {
        if !(distance >= 0.0) || !(prev_distance >= 0.0) {
            return Err(Error::Domain(format!(
                "distances must be non-negative, got {distance} and {prev_distance}"
            )));
        }
        Ok(match self.reward_type {
            RewardType::DenseSquared => -(distance * distance),
            RewardType::DenseLinear => -distance,
            RewardType::DeltaDistance => prev_distance - distance,
            RewardType::Sparse => {
                if distance < self.smallest_threshold_m() {
                    0.0
                } else {
                    -1.0
                }
            }
        })
    }

    /// Joint angles are rescaled from their limits to `[-1, 1]`; positions
    /// stay in meters.
    pub fn compose_observation(&self, state: &ArmState, goal: &Vec3) -> Vec<f64> {
        let mut obs = Vec::with_capacity(self.obs_dim());
        obs.extend(
            state
                .angles
                .iter()
                .zip(&self.arm.joints)
                .map(|(q, j)| (q - j.midpoint()) / j.half_range()),
        );
        match self.obs_mode {
            ObsMode::JointsGoal => obs.extend_from_slice(goal),
            ObsMode::JointsGoalEE => {
                obs.extend_from_slice(goal);
                obs.extend_from_slice(&state.ee_position);
            }
            ObsMode::JointsGoalVector => obs.extend((0..3).map(|i| goal[i] - state.ee_position[i])),
        }
        obs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub distance: f64,
    pub success_flags: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// A live, seeded episode of a reach variant.
#[derive(Debug, Clone)]
pub struct EnvInstance {
    config: EnvConfig,
    rng: ChaCha8Rng,
    arm_state: ArmState,
    goal: Vec3,
    step_count: usize,
    prev_distance: f64,
    goal_override: Option<Vec3>,
}

impl EnvInstance {
    pub fn new(config: EnvConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let arm_state = config.arm.home_state();
        let goal = config.goal_box.center();
        let prev_distance = distance(&arm_state.ee_position, &goal);
        Ok(EnvInstance {
            rng: ChaCha8Rng::seed_from_u64(seed),
            arm_state,
            goal,
            step_count: 0,
            prev_distance,
            goal_override: None,
            config,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn arm_state(&self) -> &ArmState {
        &self.arm_state
    }

    pub fn goal(&self) -> Vec3 {
        self.goal
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn distance(&self) -> f64 {
        distance(&self.arm_state.ee_position, &self.goal)
    }

    /// Pins every subsequent reset to `goal` instead of sampling one.
    /// Test hook; the goal may lie outside the goal box.
    pub fn force_goal(&mut self, goal: Option<Vec3>) {
        self.goal_override = goal;
    }

    pub fn reset(&mut self, seed: Option<u64>) -> Vec<f64> {
        if let Some(seed) = seed {
            self.rng = ChaCha8Rng::seed_from_u64(seed);
        }
        self.arm_state = self.config.arm.home_state();
        let sampled = self.sample_goal();
        self.goal = self.goal_override.unwrap_or(sampled);
        self.step_count = 0;
        self.prev_distance = self.distance();
        self.observation()
    }

    fn sample_goal(&mut self) -> Vec3 {
        let b = &self.config.goal_box;
        [0, 1, 2].map(|i| {
            let u: f64 = self.rng.random();
            b.low[i] + u * (b.high[i] - b.low[i])
        })
    }

    pub fn observation(&self) -> Vec<f64> {
        self.config.compose_observation(&self.arm_state, &self.goal)
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.step_count >= self.config.episode_len {
            return Err(Error::Lifecycle(format!(
                "episode finished after {} steps; call reset",
                self.step_count
            )));
        }
        let command = self.config.decode_action(&self.arm_state, action)?;
        self.arm_state = self.config.arm.apply_joint_command(&self.arm_state, &command)?;
        let d = self.distance();
        let reward = self.config.compute_reward(d, self.prev_distance)?;
        self.prev_distance = d;
        self.step_count += 1;
        Ok(StepResult {
            observation: self.observation(),
            reward,
            done: self.step_count == self.config.episode_len,
            info: StepInfo {
                distance: d,
                success_flags: self.config.success_flags(d),
            },
        })
    }
}
