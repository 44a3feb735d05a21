//! Kinematic model of a serial revolute arm.
//!
//! The arm is a chain of revolute joints. Each joint frame is reached from the
//! previous one by a fixed translation (`link_offset`) and then rotated about
//! the joint axis by the joint angle. The end-effector is the tool point,
//! expressed in the last joint frame. There are no dynamics: a joint command
//! moves the angles directly, bounded per step and by the joint limits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Geometry of the default 6-DOF arm: (axis, link offset) per joint.
///
/// Yaw, pitch, pitch, pitch, roll, pitch. These values are placeholders for
/// the real WidowX dimensions, which are not published here.
const WIDOWX_CHAIN: [(Vec3, Vec3); 6] = [
    ([0.0, 0.0, 1.0], [0.0, 0.0, 0.125]),
    ([0.0, 1.0, 0.0], [0.0, 0.0, 0.045]),
    ([0.0, 1.0, 0.0], [0.05, 0.0, 0.14]),
    ([0.0, 1.0, 0.0], [0.14, 0.0, 0.0]),
    ([1.0, 0.0, 0.0], [0.06, 0.0, 0.0]),
    ([0.0, 1.0, 0.0], [0.045, 0.0, 0.0]),
];
const WIDOWX_LIMIT: f64 = 2.6;

const PLANAR_LINKS: [f64; 2] = [0.20, 0.15];
const PLANAR_LIMIT: f64 = std::f64::consts::PI;

pub const DEFAULT_MAX_STEP: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub axis: Vec3,
    pub link_offset: Vec3,
    pub lower_limit: f64,
    pub upper_limit: f64,
    pub max_step: f64,
}

impl JointSpec {
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower_limit + self.upper_limit)
    }

    pub fn half_range(&self) -> f64 {
        0.5 * (self.upper_limit - self.lower_limit)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmModel {
    pub name: String,
    pub joints: Vec<JointSpec>,
    /// Tool point in the frame of the last joint.
    #[serde(default)]
    pub tool_offset: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub angles: Vec<f64>,
    pub ee_position: Vec3,
}

impl ArmModel {
    /// Six-joint WidowX-style arm with the placeholder geometry above.
    pub fn widowx() -> Self {
        let joints = WIDOWX_CHAIN
            .iter()
            .map(|&(axis, link_offset)| JointSpec {
                axis,
                link_offset,
                lower_limit: -WIDOWX_LIMIT,
                upper_limit: WIDOWX_LIMIT,
                max_step: DEFAULT_MAX_STEP,
            })
            .collect();
        ArmModel {
            name: "widowx".to_string(),
            joints,
            tool_offset: [0.0; 3],
        }
    }

    /// Two-link planar arm moving in the xy-plane, for quick experiments.
    pub fn planar() -> Self {
        let joint = |offset: Vec3| JointSpec {
            axis: [0.0, 0.0, 1.0],
            link_offset: offset,
            lower_limit: -PLANAR_LIMIT,
            upper_limit: PLANAR_LIMIT,
            max_step: DEFAULT_MAX_STEP,
        };
        ArmModel {
            name: "planar".to_string(),
            joints: vec![joint([0.0; 3]), joint([PLANAR_LINKS[0], 0.0, 0.0])],
            tool_offset: [PLANAR_LINKS[1], 0.0, 0.0],
        }
    }

    pub fn n_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.joints.len(), 2 | 6) {
            return Err(Error::Validation(format!(
                "arm `{}` has {} joints; expected 2 or 6",
                self.name,
                self.joints.len()
            )));
        }
        for (i, j) in self.joints.iter().enumerate() {
            let norm = dot(&j.axis, &j.axis).sqrt();
            if (norm - 1.0).abs() > 1e-12 {
                return Err(Error::Validation(format!("joint {i}: axis norm {norm} is not 1")));
            }
            if !(j.lower_limit < j.upper_limit) {
                return Err(Error::Validation(format!(
                    "joint {i}: lower limit {} not below upper limit {}",
                    j.lower_limit, j.upper_limit
                )));
            }
            if !(j.max_step > 0.0) || !j.max_step.is_finite() {
                return Err(Error::Validation(format!("joint {i}: max_step must be positive")));
            }
            if j.link_offset.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("joint {i}: non-finite link offset")));
            }
        }
        if self.tool_offset.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite tool offset".into()));
        }
        Ok(())
    }

    /// Upper bound on the distance from the base to the tool point.
    pub fn reach(&self) -> f64 {
        self.joints.iter().map(|j| norm(&j.link_offset)).sum::<f64>() + norm(&self.tool_offset)
    }

    fn check_len(&self, v: &[f64], what: &str) -> Result<()> {
        if v.len() != self.joints.len() {
            return Err(Error::Contract(format!(
                "{what} has length {}, arm `{}` has {} joints",
                v.len(),
                self.name,
                self.joints.len()
            )));
        }
        Ok(())
    }

    pub fn forward_kinematics(&self, angles: &[f64]) -> Result<Vec3> {
        self.check_len(angles, "angle vector")?;
        for (i, (q, j)) in angles.iter().zip(&self.joints).enumerate() {
            if !(j.lower_limit..=j.upper_limit).contains(q) {
                return Err(Error::Domain(format!(
                    "joint {i} angle {q} outside [{}, {}]",
                    j.lower_limit, j.upper_limit
                )));
            }
        }
        Ok(self.chain(angles))
    }

    // Walks the chain accumulating the frame origin and orientation.
    fn chain(&self, angles: &[f64]) -> Vec3 {
        let mut rot = IDENTITY;
        let mut pos = [0.0; 3];
        for (q, j) in angles.iter().zip(&self.joints) {
            pos = add(&pos, &mat_vec(&rot, &j.link_offset));
            rot = mat_mul(&rot, &rodrigues(&j.axis, *q));
        }
        add(&pos, &mat_vec(&rot, &self.tool_offset))
    }

    pub fn clamp_to_limits(&self, angles: &[f64]) -> Result<Vec<f64>> {
        self.check_len(angles, "angle vector")?;
        Ok(angles
            .iter()
            .zip(&self.joints)
            .map(|(q, j)| q.clamp(j.lower_limit, j.upper_limit))
            .collect())
    }

    pub fn home_state(&self) -> ArmState {
        let angles = self
            .clamp_to_limits(&vec![0.0; self.n_joints()])
            .expect("length matches by construction");
        let ee_position = self.chain(&angles);
        ArmState { angles, ee_position }
    }

    pub fn state_at(&self, angles: Vec<f64>) -> Result<ArmState> {
        let ee_position = self.forward_kinematics(&angles)?;
        Ok(ArmState { angles, ee_position })
    }

    /// One position-controlled step: each delta is limited to `±max_step`,
    /// added to the current angle and the result clamped to the joint limits.
    pub fn apply_joint_command(&self, state: &ArmState, delta: &[f64]) -> Result<ArmState> {
        self.check_len(delta, "joint command")?;
        self.check_len(&state.angles, "state")?;
        if let Some(i) = delta.iter().position(|d| !d.is_finite()) {
            return Err(Error::Domain(format!("joint command component {i} is not finite")));
        }
        let angles: Vec<f64> = state
            .angles
            .iter()
            .zip(delta)
            .zip(&self.joints)
            .map(|((q, d), j)| (q + d.clamp(-j.max_step, j.max_step)).clamp(j.lower_limit, j.upper_limit))
            .collect();
        let ee_position = self.chain(&angles);
        Ok(ArmState { angles, ee_position })
    }
}

type Mat3 = [[f64; 3]; 3];

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Rotation by `theta` about the unit vector `k`: I + sin(θ)K + (1 − cos(θ))K².
fn rodrigues(k: &Vec3, theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    let kx: Mat3 = [[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]];
    let kx2 = mat_mul(&kx, &kx);
    let mut r = IDENTITY;
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] += s * kx[i][j] + (1.0 - c) * kx2[i][j];
        }
    }
    r
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn mat_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [dot(&a[0], v), dot(&a[1], v), dot(&a[2], v)]
}

fn add(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(v: &Vec3) -> f64 {
    dot(v, v).sqrt()
}

pub fn distance(a: &Vec3, b: &Vec3) -> f64 {
    norm(&[a[0] - b[0], a[1] - b[1], a[2] - b[2]])
}
