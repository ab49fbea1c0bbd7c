//! Learning pick-and-place action plans from a single video demonstration:
//! diffusion-based action segmentation, detection fusion, table-plane
//! grounding, plan synthesis, inverse kinematics and a tabletop simulator.

pub mod cli;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod kinematics;
pub mod planning;
pub mod render;
pub mod rng;
pub mod sim;
pub mod types;

pub use error::{Error, Result};
pub use rng::RngSeed;
