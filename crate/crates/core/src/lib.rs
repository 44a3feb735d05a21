//! Reproducible reinforcement-learning experiments on a robotic-arm
//! reaching task.
//!
//! The crate is organised bottom-up: [`arm_sim`] (kinematics),
//! [`reach_env`] (task variants), [`neural`] (networks and optimiser),
//! [`agents`] (PPO, TD3, random), then the bookkeeping layers
//! [`experiment`], [`evaluation`], [`hypertune`] and [`report`].

pub mod agents;
pub mod arm_sim;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod hypertune;
pub mod neural;
pub mod reach_env;
pub mod report;

pub use error::{Error, Result};
