//! Independent re-derivations checked against the library: homogeneous
//! transforms for kinematics, finite differences for gradients, brute-force
//! returns for GAE.

use nalgebra::{Matrix4, Rotation3, Translation3, Unit, Vector3, Vector4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rl_reach::agents::compute_gae;
use rl_reach::arm_sim::{ArmModel, Vec3};
use rl_reach::neural::Mlp;
use rl_reach::reach_env::{registry_lookup, EnvInstance, RewardType};

fn fk_oracle(model: &ArmModel, angles: &[f64]) -> Vec3 {
    let mut t = Matrix4::<f64>::identity();
    for (j, &q) in model.joints.iter().zip(angles) {
        let o = j.link_offset;
        let axis = Unit::new_normalize(Vector3::new(j.axis[0], j.axis[1], j.axis[2]));
        t = t * Translation3::new(o[0], o[1], o[2]).to_homogeneous() * Rotation3::from_axis_angle(&axis, q).to_homogeneous();
    }
    let tool = model.tool_offset;
    let p = t * Vector4::new(tool[0], tool[1], tool[2], 1.0);
    [p[0], p[1], p[2]]
}

fn random_angles(model: &ArmModel, rng: &mut impl Rng) -> Vec<f64> {
    model
        .joints
        .iter()
        .map(|j| rng.random_range(j.lower_limit..=j.upper_limit))
        .collect()
}

#[test]
fn fk_matches_homogeneous_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for model in [ArmModel::widowx(), ArmModel::planar()] {
        for _ in 0..1000 {
            let q = random_angles(&model, &mut rng);
            let got = model.forward_kinematics(&q).unwrap();
            let want = fk_oracle(&model, &q);
            for i in 0..3 {
                assert!((got[i] - want[i]).abs() < 1e-9, "{} {q:?}", model.name);
            }
        }
    }
}

#[test]
fn home_pose_is_sum_of_offsets() {
    let m = ArmModel::widowx();
    let home = m.forward_kinematics(&[0.0; 6]).unwrap();
    let oracle = fk_oracle(&m, &[0.0; 6]);
    let sum = m.joints.iter().fold([0.0; 3], |acc, j| [0, 1, 2].map(|i| acc[i] + j.link_offset[i]));
    for i in 0..3 {
        assert!((home[i] - oracle[i]).abs() < 1e-9);
        assert!((home[i] - sum[i]).abs() < 1e-12);
    }
}

#[test]
fn joint_command_matches_recomputed_fk() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for model in [ArmModel::widowx(), ArmModel::planar()] {
        for _ in 0..200 {
            let s = model.state_at(random_angles(&model, &mut rng)).unwrap();
            let delta: Vec<f64> = (0..model.n_joints()).map(|_| rng.random_range(-0.2..0.2)).collect();
            let next = model.apply_joint_command(&s, &delta).unwrap();
            let want = fk_oracle(&model, &next.angles);
            for i in 0..3 {
                assert!((next.ee_position[i] - want[i]).abs() < 1e-9);
            }
        }
    }
}

/// Loss `0.5‖f(x) − target‖²` and its analytic parameter gradient.
fn loss(mlp: &Mlp, x: &[f64], target: &[f64]) -> f64 {
    let y = mlp.forward(x).unwrap();
    0.5 * y.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

fn max_relative_gradient_error(mlp: &mut Mlp, x: &[f64], target: &[f64]) -> f64 {
    let y = mlp.forward(x).unwrap();
    let g: Vec<f64> = y.iter().zip(target).map(|(a, b)| a - b).collect();
    let analytic = mlp.backward(x, &g).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..mlp.n_params() {
        let orig = mlp.params()[i];
        mlp.params_mut()[i] = orig + h;
        let up = loss(mlp, x, target);
        mlp.params_mut()[i] = orig - h;
        let down = loss(mlp, x, target);
        mlp.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.params[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }
    worst
}

#[test]
fn mlp_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let n_in = rng.random_range(1..6);
        let n_hidden = rng.random_range(1..3);
        let mut sizes = vec![n_in];
        sizes.extend((0..n_hidden).map(|_| rng.random_range(1..=16)));
        sizes.push(rng.random_range(1..4));
        let mut mlp = Mlp::new(&sizes, &mut rng);
        let x: Vec<f64> = (0..n_in).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..sizes[sizes.len() - 1]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = max_relative_gradient_error(&mut mlp, &x, &t);
        assert!(err < 1e-4, "{sizes:?}: {err}");
    }
}

/// Discounted return-to-go, stopping at episode ends and bootstrapping
/// from `next_value` past the last step.
fn brute_return(rewards: &[f64], dones: &[bool], next_value: f64, gamma: f64, t: usize) -> f64 {
    let mut g = 0.0;
    let mut discount = 1.0;
    for k in t..rewards.len() {
        g += discount * rewards[k];
        if dones[k] {
            return g;
        }
        discount *= gamma;
    }
    g + discount * next_value
}

fn random_rollout(rng: &mut impl Rng, n: usize) -> (Vec<f64>, Vec<f64>, Vec<bool>, f64) {
    let rewards = (0..n).map(|_| rng.random_range(-2.0..1.0)).collect();
    let values = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let dones = (0..n).map(|_| rng.random_bool(0.1)).collect();
    (rewards, values, dones, rng.random_range(-3.0..3.0))
}

proptest! {
    #[test]
    fn gae_lambda_one_is_discounted_return(seed in any::<u64>(), n in 1usize..64, gamma in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, v, d, nv) = random_rollout(&mut rng, n);
        let (adv, ret) = compute_gae(&r, &v, nv, &d, gamma, 1.0).unwrap();
        for t in 0..n {
            let want = brute_return(&r, &d, nv, gamma, t);
            prop_assert!((adv[t] + v[t] - want).abs() < 1e-10);
            prop_assert!((ret[t] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn gae_lambda_zero_is_td_error(seed in any::<u64>(), n in 1usize..64, gamma in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, v, d, nv) = random_rollout(&mut rng, n);
        let (adv, _) = compute_gae(&r, &v, nv, &d, gamma, 0.0).unwrap();
        for t in 0..n {
            let next = if t + 1 < n { v[t + 1] } else { nv };
            let delta = r[t] + gamma * next * if d[t] { 0.0 } else { 1.0 } - v[t];
            prop_assert!((adv[t] - delta).abs() < 1e-10);
        }
    }

    #[test]
    fn delta_distance_rewards_telescope(seed in any::<u64>(), variant in 1usize..=8, planar in any::<bool>()) {
        let id = format!("reach-v{variant}{}", if planar { "-planar" } else { "" });
        let mut cfg = registry_lookup(&id).unwrap();
        cfg.reward_type = RewardType::DeltaDistance;
        let n = cfg.action_dim();
        let mut env = EnvInstance::new(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        env.reset(Some(seed));
        let d0 = env.distance();
        let mut sum = 0.0;
        let last = loop {
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
            let s = env.step(&a).unwrap();
            sum += s.reward;
            if s.done {
                break s.info.distance;
            }
        };
        prop_assert!((sum - (d0 - last)).abs() < 1e-10);
    }
}
