//! Blockwise diffusion language modeling at desk scale: masked denoising
//! SFT, trace-replay RL with group-normalized advantages, and a persistent
//! rollout service with in-place weight updates.

pub mod bench;
pub mod blockmask;
pub mod config;
pub mod diffusion;
pub mod decoder;
pub mod dipo;
pub mod error;
pub mod fdcheck;
pub mod model;
pub mod service;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
