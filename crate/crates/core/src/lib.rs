//! Online fine-tuning of diffusion models with optimistic reward surrogates
//! and KL-regularized stochastic control.

pub mod error;
pub mod rng;

pub mod grad;

pub mod diffusion;
pub mod sde;

pub mod features;
pub mod reward_model;
pub mod world;

pub mod planner;
pub mod ppo;

pub mod online;

pub mod eval;
pub mod verify;

pub mod config;
pub mod experiment;

pub use error::{Error, Result};
