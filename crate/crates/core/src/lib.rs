//! Dynamic navigation scenarios on top of static Gaussian-splat scenes.
//!
//! The crate covers the whole data path from a reconstructed splat scene to
//! an imitation-learning dataset:
//!
//! - [`splat`]: primitives, scene I/O (3DGS binary PLY) and rigid transforms
//! - [`voxel`]: opacity-filtered voxelization and inflated 2D occupancy maps
//! - [`human`]: procedural human obstacle and its root motion along a trajectory
//! - [`human_planner`]: interaction-rich endpoints, grid A* and spline smoothing
//! - [`expert`]: motion-primitive Hybrid A* expert with dynamic-obstacle replanning
//! - [`render`]: tile-based splat rasterizer (plus the naive reference renderer)
//! - [`scenario`]: episodes, datasets, metrics and the step protocol
//!
//! All quantities are metric, world frame is +z up.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod expert;
pub mod geometry;
pub mod grid;
pub mod human;
pub mod human_planner;
pub mod render;
pub mod scenario;
pub mod splat;
pub mod synthetic;
pub mod voxel;

pub use config::SimConfig;
pub use error::{Error, Result};
