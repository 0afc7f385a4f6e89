//! Unified exploration / image-goal navigation in 2D occupancy gridworlds.
//!
//! One policy model serves two modes: undirected exploration (goal token
//! masked out of attention) and goal-conditioned navigation (goal token
//! attended). Actions are produced by iterative denoising of a waypoint
//! sequence conditioned on an observation context vector. A topological
//! graph built online from the policy's own temporal-distance predictions
//! provides episodic memory for frontier exploration and subgoal planning.
//!
//! Crate layout:
//! - [`autodiff`] — reverse-mode tape over dense arrays (the only "framework")
//! - [`world`] — occupancy maps, egocentric observations, waypoint kinematics
//! - [`data`] — expert trajectory generation and supervised sample slicing
//! - [`policy`] — encoders, goal-masked transformer, noise schedule, 1D U-Net
//! - [`train`] — joint diffusion + distance loss, AdamW, training variants
//! - [`nav`] — topological graph memory and exploration/navigation episodes
//! - [`bench`] — benchmark harness, multimodality probe, SVG rollout renderer

pub mod autodiff;
pub mod bench;
pub mod data;
pub mod nav;
pub mod policy;
pub mod train;
pub mod util;
pub mod world;

mod error;

pub use error::{Error, Result};
