//! Simulator configuration. Every tunable has a default; a JSON config file
//! only needs to name the keys it overrides.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Voxel edge length (m).
    pub voxel_resolution: f64,
    /// Summed opacity a voxel must exceed to be occupied.
    pub opacity_threshold: f64,
    /// Height bands start this far above the ground (m).
    pub ground_band_offset: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            voxel_resolution: 0.1,
            opacity_threshold: 2.0,
            ground_band_offset: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view (deg).
    pub hfov_deg: f64,
    /// Camera height above the ground (m).
    pub mount_height: f64,
    pub background: [f64; 3],
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 144,
            hfov_deg: 90.0,
            mount_height: 0.35,
            background: [0.62, 0.72, 0.85],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobotConfig {
    pub radius: f64,
    pub height: f64,
    pub v_max: f64,
    pub w_max: f64,
    pub camera: CameraConfig,
}

impl Default for RobotConfig {
    fn default() -> Self {
        Self {
            radius: 0.3,
            height: 0.5,
            v_max: 1.0,
            w_max: 1.0,
            camera: CameraConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HumanConfig {
    pub height: f64,
    pub radius: f64,
    /// Number of Gaussians in the procedural body.
    pub primitive_count: usize,
    pub model_seed: u64,
    pub walk_speed: [f64; 2],
    pub run_speed: [f64; 2],
    /// Probability that a sampled human runs instead of walking.
    pub run_probability: f64,
    /// Humans per episode, 0..=2.
    pub count: usize,
    /// Probability of a crossing (vs parallel) interaction.
    pub crossing_probability: f64,
    pub parallel_max_angle_deg: f64,
    pub parallel_offset: [f64; 2],
    /// Minimum human start/goal separation (m).
    pub min_path_length: f64,
    /// Spacing of smoothing waypoints (m).
    pub waypoint_spacing: f64,
    pub smoothing_iterations: usize,
    pub max_rejections: usize,
    /// Minimum distance from the robot's start and goal to either human
    /// endpoint (m).
    pub spawn_clearance: f64,
    /// Minimum distance from the robot's start to any point of a human path
    /// (m).
    pub path_start_clearance: f64,
}

impl Default for HumanConfig {
    fn default() -> Self {
        Self {
            height: 1.8,
            radius: 0.3,
            primitive_count: 300,
            model_seed: 7,
            walk_speed: [0.8, 1.6],
            run_speed: [2.0, 3.0],
            run_probability: 0.0,
            count: 1,
            crossing_probability: 0.5,
            parallel_max_angle_deg: 15.0,
            parallel_offset: [0.5, 2.0],
            min_path_length: 2.0,
            waypoint_spacing: 0.5,
            smoothing_iterations: 200,
            max_rejections: 10_000,
            spawn_clearance: 3.0,
            path_start_clearance: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub primitive_duration: f64,
    pub w_len: f64,
    pub w_steer: f64,
    pub w_h: f64,
    pub theta_bins: usize,
    /// Goal tolerance of the search itself (m).
    pub goal_tolerance: f64,
    pub node_budget: usize,
    pub replan_period: f64,
    pub safety_margin: f64,
    /// Seconds of the current plan checked against humans.
    pub lookahead: f64,
    /// Constant-velocity prediction horizon (s).
    pub prediction_horizon: f64,
    /// Added to the human radius when sweeping the predicted footprint (m).
    pub safety_buffer: f64,
    /// Voxel size for downsampling human primitives (m).
    pub downsample_resolution: f64,
    /// Seconds a human stays tracked after leaving the camera view.
    pub track_memory: f64,
    /// Humans within this distance of the robot are sensed even outside
    /// the camera view (m).
    pub proximity_radius: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            primitive_duration: 0.5,
            w_len: 1.0,
            w_steer: 0.3,
            w_h: 1.0,
            theta_bins: 16,
            goal_tolerance: 0.5,
            node_budget: 200_000,
            replan_period: 2.0,
            safety_margin: 0.6,
            lookahead: 2.0,
            prediction_horizon: 2.0,
            safety_buffer: 0.5,
            downsample_resolution: 0.1,
            track_memory: 3.0,
            proximity_radius: 2.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub control_dt: f64,
    pub time_limit: f64,
    /// Episode success radius (m).
    pub goal_tolerance: f64,
    pub observation_interval: f64,
    pub min_start_goal_distance: f64,
    /// Extra clearance beyond the robot radius required at sampled
    /// endpoints and along the region connecting them (m).
    pub endpoint_clearance: f64,
    pub episodes: usize,
    pub seed: u64,
    pub render: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            control_dt: 0.1,
            time_limit: 50.0,
            goal_tolerance: 1.0,
            observation_interval: 0.5,
            min_start_goal_distance: 3.0,
            endpoint_clearance: 0.3,
            episodes: 400,
            seed: 0,
            render: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub scene: SceneConfig,
    pub robot: RobotConfig,
    pub human: HumanConfig,
    pub planner: PlannerConfig,
    pub dataset: DatasetConfig,
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        let s = &self.scene;
        if !(s.voxel_resolution > 0.0) || !(s.opacity_threshold >= 0.0) {
            return bad("scene.voxel_resolution must be > 0 and opacity_threshold >= 0");
        }
        let r = &self.robot;
        if !(r.radius > 0.0 && r.height > 0.0 && r.v_max > 0.0 && r.w_max > 0.0) {
            return bad("robot radius, height, v_max and w_max must be > 0");
        }
        if r.camera.width == 0 || r.camera.height == 0 || !(r.camera.hfov_deg > 0.0 && r.camera.hfov_deg < 180.0) {
            return bad("robot.camera needs positive size and hfov in (0, 180)");
        }
        let h = &self.human;
        if !(h.height > 0.0 && h.radius > 0.0) || h.primitive_count < 10 || h.count > 2 {
            return bad("human height/radius must be > 0, primitive_count >= 10, count <= 2");
        }
        if !(h.spawn_clearance >= 0.0 && h.path_start_clearance >= 0.0) {
            return bad("human.spawn_clearance and path_start_clearance must be >= 0");
        }
        if !(h.walk_speed[0] > 0.0 && h.walk_speed[0] <= h.walk_speed[1]) || !(h.run_speed[0] > 0.0 && h.run_speed[0] <= h.run_speed[1]) {
            return bad("human speed ranges must be positive and ordered");
        }
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(h.crossing_probability) || !unit(h.run_probability) {
            return bad("human crossing_probability and run_probability must lie in [0, 1]");
        }
        if !(h.parallel_offset[0] >= 0.0 && h.parallel_offset[0] <= h.parallel_offset[1]) || !(h.parallel_max_angle_deg >= 0.0) {
            return bad("human.parallel_offset must be ordered and >= 0, parallel_max_angle_deg >= 0");
        }
        if !(h.min_path_length >= 0.0 && h.waypoint_spacing > 0.0) || h.max_rejections == 0 {
            return bad("human.min_path_length >= 0, waypoint_spacing > 0 and max_rejections > 0 required");
        }
        let p = &self.planner;
        if !(p.w_len > 0.0 && p.w_steer >= 0.0 && p.w_h >= 0.0) {
            return bad("planner.w_len must be > 0, w_steer and w_h >= 0");
        }
        let nonneg = [p.goal_tolerance, p.safety_margin, p.lookahead, p.prediction_horizon, p.safety_buffer];
        if !nonneg.iter().all(|&x| x >= 0.0) || !(p.replan_period > 0.0) {
            return bad("planner tolerances, margins and horizons must be >= 0 and replan_period > 0");
        }
        if !(p.primitive_duration > 0.0) || p.theta_bins == 0 || p.node_budget == 0 {
            return bad("planner.primitive_duration, theta_bins and node_budget must be > 0");
        }
        if !(p.track_memory >= 0.0) || !(p.proximity_radius >= 0.0) || !(p.downsample_resolution > 0.0) {
            return bad("planner.track_memory and proximity_radius must be >= 0 and downsample_resolution > 0");
        }
        let d = &self.dataset;
        if !(d.control_dt > 0.0 && d.time_limit > 0.0 && d.observation_interval > 0.0) {
            return bad("dataset.control_dt, time_limit and observation_interval must be > 0");
        }
        if !(d.endpoint_clearance >= 0.0 && d.goal_tolerance >= 0.0 && d.min_start_goal_distance >= 0.0) {
            return bad("dataset.endpoint_clearance, goal_tolerance and min_start_goal_distance must be >= 0");
        }
        let per_prim = p.primitive_duration / d.control_dt;
        if (per_prim - per_prim.round()).abs() > 1e-9 {
            return bad("planner.primitive_duration must be a multiple of dataset.control_dt");
        }
        let ratio = d.observation_interval / d.control_dt;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return bad("dataset.observation_interval must be a multiple of control_dt");
        }
        Ok(())
    }

    /// Control ticks per observation.
    pub fn ticks_per_observation(&self) -> usize {
        (self.dataset.observation_interval / self.dataset.control_dt).round() as usize
    }
}
