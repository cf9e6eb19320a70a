//! Multi-agent trajectory optimization over Gaussian-process factor graphs.
//!
//! Each agent's trajectory is a chain of planar states tied together by a
//! constant-velocity GP prior and pinned at its start and goal. Obstacle
//! factors keep agents clear of a signed-distance map, and trust-related
//! factors couple agents: proximity safety (a hinge on surface distance),
//! consistency (similar accelerations when close) and transparency (wider
//! safety margins around agents whose shared plans disagree with what others
//! observe). The joint MAP estimate is found with Gauss-Newton or
//! Levenberg-Marquardt on a block-sparse linear system.

pub mod error;
pub mod gp;
pub mod graph;
pub mod metrics;
pub mod scenario;
pub mod solver;
pub mod sparse;
pub mod trust;
pub mod world;

pub use error::{Error, Result};
