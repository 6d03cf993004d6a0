//! Episodes, datasets, metrics and the line-delimited step service.

use crate::config::SimConfig;
use crate::error::{Error, Result};
use crate::expert::{execute_expert, in_collision, ExpertRun, Outcome, RobotState, TraceEvent};
use crate::grid::{connected_components, inflate, MapKind, OccupancyGrid2D};
use crate::human::{make_human_model, HumanActor, HumanModel, HumanTrajectory};
use crate::human_planner::{
    astar_2d, sample_interaction_endpoints, smooth_spline, Interaction, InteractionParams, SmoothingParams,
};
use crate::render::{render_observation, CameraModel, Image};
use crate::splat::SplatScene;
use crate::voxel::{project_occupancy, voxelize, VoxelGrid};
use base64::Engine;
use nalgebra::Vector2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

/// Maps derived from a scene: the voxel grid, the robot-navigable map
/// (inflated by the robot radius) and the human-walkable map (inflated by
/// the human radius).
pub struct SceneMaps {
    pub voxels: VoxelGrid,
    pub robot: OccupancyGrid2D,
    pub human: OccupancyGrid2D,
}

pub fn build_maps(scene: &SplatScene, cfg: &SimConfig) -> Result<SceneMaps> {
    let voxels = voxelize(scene, cfg.scene.voxel_resolution, cfg.scene.opacity_threshold)?;
    let z0 = scene.ground_z + cfg.scene.ground_band_offset;
    let robot = project_occupancy(&voxels, z0, scene.ground_z + cfg.robot.height, MapKind::RobotNavigable)?;
    let human = project_occupancy(&voxels, z0, scene.ground_z + cfg.human.height, MapKind::HumanWalkable)?;
    Ok(SceneMaps {
        robot: inflate(&robot, cfg.robot.radius)?,
        human: inflate(&human, cfg.human.radius)?,
        voxels,
    })
}

/// Everything episodes in one scene share.
pub struct World {
    pub scene: SplatScene,
    pub cfg: SimConfig,
    pub robot_map: OccupancyGrid2D,
    pub human_map: OccupancyGrid2D,
    pub human_model: HumanModel,
    /// Robot map eroded by the endpoint clearance, for endpoint sampling.
    pub sampling_map: OccupancyGrid2D,
    sampling_components: Vec<usize>,
}

impl World {
    pub fn new(scene: SplatScene, cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        let maps = build_maps(&scene, &cfg)?;
        Self::from_maps(scene, cfg, maps.robot, maps.human)
    }

    pub fn from_maps(scene: SplatScene, cfg: SimConfig, robot_map: OccupancyGrid2D, human_map: OccupancyGrid2D) -> Result<Self> {
        cfg.validate()?;
        let h = &cfg.human;
        let human_model = make_human_model(h.height, h.radius, h.primitive_count, h.model_seed)?;
        let sampling_map = inflate(&robot_map, cfg.robot.radius + cfg.dataset.endpoint_clearance)?;
        Ok(Self {
            sampling_components: connected_components(&sampling_map),
            sampling_map,
            scene,
            cfg,
            robot_map,
            human_map,
            human_model,
        })
    }

    fn interaction_params(&self, start: Vector2<f64>, goal: Vector2<f64>) -> InteractionParams {
        let h = &self.cfg.human;
        let keep = h.spawn_clearance;
        InteractionParams {
            parallel_max_angle_deg: h.parallel_max_angle_deg,
            parallel_offset: h.parallel_offset,
            min_length: h.min_path_length,
            max_rejections: h.max_rejections,
            keep_out: vec![(start, keep), (goal, keep)],
        }
    }

    /// Simulation settings for one episode.
    pub fn episode_sim_config(&self, ep: &EpisodeConfig) -> SimConfig {
        let mut cfg = self.cfg.clone();
        cfg.dataset.control_dt = ep.control_dt;
        cfg.dataset.time_limit = ep.time_limit;
        cfg.dataset.goal_tolerance = ep.goal_tolerance;
        cfg
    }

    pub fn actors(&self, ep: &EpisodeConfig) -> Result<Vec<HumanActor>> {
        ep.humans
            .iter()
            .map(|h| HumanActor::new(self.human_model.clone(), h.trajectory.clone(), ep.control_dt, self.scene.ground_z))
            .collect()
    }

    pub fn camera_at(&self, s: &RobotState) -> Result<CameraModel> {
        CameraModel::robot_mounted(&self.cfg.robot.camera, s.x, s.y, s.theta, self.scene.ground_z)
    }

    pub fn render_at(&self, humans: &[HumanActor], s: &RobotState, t: f64) -> Result<Image> {
        let cam = self.camera_at(s)?;
        Ok(render_observation(&self.scene, humans, t, &cam, self.cfg.robot.camera.background))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanSpec {
    pub interaction: Interaction,
    pub speed: f64,
    pub start: [f64; 2],
    pub goal: [f64; 2],
    /// Smoothing failed and the grid path was used as is.
    pub unsmoothed: bool,
    pub trajectory: HumanTrajectory,
}

/// A self-contained episode: robot endpoints plus fully planned humans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub scene: String,
    pub seed: u64,
    /// Start pose (x, y, heading).
    pub start: [f64; 3],
    pub goal: [f64; 2],
    pub humans: Vec<HumanSpec>,
    pub control_dt: f64,
    pub time_limit: f64,
    pub goal_tolerance: f64,
}

impl EpisodeConfig {
    pub fn start_state(&self) -> RobotState {
        RobotState::at_rest(self.start[0], self.start[1], self.start[2])
    }

    pub fn goal(&self) -> Vector2<f64> {
        Vector2::new(self.goal[0], self.goal[1])
    }

    pub fn validate(&self, world: &World) -> Result<()> {
        if self.humans.len() > 2 {
            return Err(Error::InvalidParameter("at most 2 humans per episode".into()));
        }
        if !(self.control_dt > 0.0 && self.time_limit > 0.0 && self.goal_tolerance >= 0.0) {
            return Err(Error::InvalidParameter("episode timing and tolerance must be positive".into()));
        }
        let ratio = world.cfg.dataset.observation_interval / self.control_dt;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::InvalidParameter("observation interval must be a multiple of control_dt".into()));
        }
        if !world.robot_map.is_free(self.start_state().position()) || !world.robot_map.is_free(self.goal()) {
            return Err(Error::InvalidParameter("episode endpoints must be in free space".into()));
        }
        Ok(())
    }
}

/// Rejection-samples a start cell and a goal cell in free space, at least
/// `min_dist` apart and in the same connected region. The start faces the
/// goal.
pub fn sample_robot_endpoints(
    grid: &OccupancyGrid2D,
    min_dist: f64,
    rng: &mut impl Rng,
) -> Result<(RobotState, Vector2<f64>)> {
    sample_endpoints_with(grid, &connected_components(grid), min_dist, rng)
}

const MAX_DRAWS: usize = 10_000;

fn sample_endpoints_with(
    grid: &OccupancyGrid2D,
    labels: &[usize],
    min_dist: f64,
    rng: &mut impl Rng,
) -> Result<(RobotState, Vector2<f64>)> {
    let free = grid.free_cells();
    if free.is_empty() {
        return Err(Error::SamplingExhausted {
            attempts: 0,
            what: "robot endpoints (no free space)".into(),
        });
    }
    for _ in 0..MAX_DRAWS {
        let a = free[rng.random_range(0..free.len())];
        let b = free[rng.random_range(0..free.len())];
        let (pa, pb) = (grid.cell_center(a), grid.cell_center(b));
        if (pb - pa).norm() >= min_dist && labels[grid.index(a)] == labels[grid.index(b)] {
            let d = pb - pa;
            return Ok((RobotState::at_rest(pa.x, pa.y, d.y.atan2(d.x)), pb));
        }
    }
    Err(Error::SamplingExhausted {
        attempts: MAX_DRAWS,
        what: "robot endpoints".into(),
    })
}

/// Samples a complete episode: robot endpoints, then `human_count` humans
/// with interaction endpoints, a grid path and a smoothed trajectory each.
pub fn sample_episode(world: &World, seed: u64, human_count: usize) -> Result<EpisodeConfig> {
    if human_count > 2 {
        return Err(Error::InvalidParameter("at most 2 humans per episode".into()));
    }
    let cfg = &world.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // robot endpoints are redrawn when no interacting human fits around them
    for _ in 0..ENDPOINT_REDRAWS {
        let (start, goal) = sample_endpoints_with(&world.sampling_map, &world.sampling_components, cfg.dataset.min_start_goal_distance, &mut rng)?;
        if let Some(humans) = sample_humans(world, start.position(), goal, human_count, &mut rng)? {
            return Ok(EpisodeConfig {
                scene: world.scene.name.clone(),
                seed,
                start: [start.x, start.y, start.theta],
                goal: [goal.x, goal.y],
                humans,
                control_dt: cfg.dataset.control_dt,
                time_limit: cfg.dataset.time_limit,
                goal_tolerance: cfg.dataset.goal_tolerance,
            });
        }
    }
    Err(Error::SamplingExhausted {
        attempts: ENDPOINT_REDRAWS,
        what: "robot endpoints admitting interacting humans".into(),
    })
}

const ENDPOINT_REDRAWS: usize = 20;
const HUMAN_ATTEMPTS: usize = 50;

fn sample_humans(
    world: &World,
    start: Vector2<f64>,
    goal: Vector2<f64>,
    human_count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Vec<HumanSpec>>> {
    let cfg = &world.cfg;
    let params = world.interaction_params(start, goal);
    let smoothing = SmoothingParams {
        waypoint_spacing: cfg.human.waypoint_spacing,
        max_iterations: cfg.human.smoothing_iterations,
        clearance: cfg.human.radius,
        sample_dt: cfg.dataset.control_dt,
    };
    let mut humans = Vec::new();
    let mut attempts = 0;
    while humans.len() < human_count {
        attempts += 1;
        if attempts > HUMAN_ATTEMPTS {
            return Ok(None);
        }
        let kind = if rng.random_bool(cfg.human.crossing_probability.clamp(0.0, 1.0)) {
            Interaction::Crossing
        } else {
            Interaction::Parallel
        };
        let pair = match sample_interaction_endpoints(start, goal, &world.human_map, rng.next_u64(), Some(kind), &params) {
            Ok(p) => p,
            Err(Error::SamplingExhausted { .. }) => continue,
            Err(e) => return Err(e),
        };
        let seed_path = match astar_2d(&world.human_map, pair.start, pair.goal) {
            Ok(p) => p,
            Err(Error::NoPath(_)) => continue,
            Err(e) => return Err(e),
        };
        let range = if rng.random_bool(cfg.human.run_probability.clamp(0.0, 1.0)) {
            cfg.human.run_speed
        } else {
            cfg.human.walk_speed
        };
        let speed = if range[1] > range[0] { rng.random_range(range[0]..=range[1]) } else { range[0] };
        let smoothed = smooth_spline(&seed_path, &world.human_map, speed, &smoothing)?;
        // the robot needs room to turn toward its goal before anyone arrives
        let passes_start = smoothed
            .trajectory
            .samples
            .iter()
            .any(|q| (Vector2::new(q.x, q.y) - start).norm() < cfg.human.path_start_clearance);
        if passes_start {
            continue;
        }
        humans.push(HumanSpec {
            interaction: pair.interaction,
            speed,
            start: [pair.start.x, pair.start.y],
            goal: [pair.goal.x, pair.goal.y],
            unsmoothed: smoothed.fallback,
            trajectory: smoothed.trajectory,
        });
    }
    Ok(Some(humans))
}

/// Goal expressed in the robot frame (x forward, y left).
pub fn compute_relative_goal(x: f64, y: f64, theta: f64, gx: f64, gy: f64) -> [f64; 2] {
    let (s, c) = theta.sin_cos();
    let (dx, dy) = (gx - x, gy - y);
    [c * dx + s * dy, -s * dx + c * dy]
}

/// One training tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Observation index within the episode.
    pub k: usize,
    pub t: f64,
    /// Frames for observations k-2, k-1, k (clamped at the first frame),
    /// relative to the episode directory.
    pub frames: [String; 3],
    pub prev_action: [f64; 2],
    pub rel_goal: [f64; 2],
    pub action: [f64; 2],
    /// Robot pose (x, y, heading) at `t`.
    pub pose: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub config: EpisodeConfig,
    /// Robot state at every control tick.
    pub states: Vec<RobotState>,
    pub actions: Vec<[f64; 2]>,
    pub outcome: Outcome,
    pub reaching_time: f64,
    pub end_time: f64,
    pub replans: usize,
    pub replanned_at: Vec<f64>,
    pub min_human_distance: Option<f64>,
    #[serde(skip)]
    pub samples: Vec<Sample>,
    #[serde(skip)]
    pub trace: Vec<TraceEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub outcome: Outcome,
    pub reaching_time: f64,
}

impl EpisodeRecord {
    pub fn result(&self) -> EpisodeResult {
        EpisodeResult {
            outcome: self.outcome,
            reaching_time: self.reaching_time,
        }
    }
}

pub fn frame_name(k: usize) -> String {
    format!("frames/{k}.png")
}

/// Runs the expert on an episode and assembles observation samples. When
/// `frames_dir` is given each observation is rendered into it as `<k>.png`.
pub fn run_episode(world: &World, ep: &EpisodeConfig, frames_dir: Option<&Path>) -> Result<EpisodeRecord> {
    ep.validate(world)?;
    let cfg = world.episode_sim_config(ep);
    let humans = world.actors(ep)?;
    let run: ExpertRun = execute_expert(&world.robot_map, &humans, ep.start_state(), ep.goal(), world.scene.ground_z, &cfg)?;
    let every = cfg.ticks_per_observation();
    let mut samples: Vec<Sample> = Vec::new();
    for (k, tick) in (0..run.actions.len()).step_by(every).enumerate() {
        let s = run.states[tick];
        let t = tick as f64 * ep.control_dt;
        if let Some(dir) = frames_dir {
            world.render_at(&humans, &s, t)?.save_png(dir.join(format!("{k}.png")))?;
        }
        samples.push(Sample {
            k,
            t,
            frames: [frame_name(k.saturating_sub(2)), frame_name(k.saturating_sub(1)), frame_name(k)],
            prev_action: samples.last().map_or([0.0, 0.0], |p| p.action),
            rel_goal: compute_relative_goal(s.x, s.y, s.theta, ep.goal[0], ep.goal[1]),
            action: run.actions[tick],
            pose: [s.x, s.y, s.theta],
        });
    }
    Ok(EpisodeRecord {
        config: ep.clone(),
        states: run.states,
        actions: run.actions,
        outcome: run.outcome,
        reaching_time: run.reaching_time,
        end_time: run.end_time,
        replans: run.replanned_at.len(),
        replanned_at: run.replanned_at,
        min_human_distance: run.min_human_distance.is_finite().then_some(run.min_human_distance),
        samples,
        trace: run.trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub episodes: usize,
    pub successes: usize,
    pub collisions: usize,
    pub timeouts: usize,
    pub plan_failures: usize,
    /// Success rate in [0, 1].
    pub sr: f64,
    /// Mean reaching time with every failure counted as the time limit (s).
    pub art: f64,
}

pub fn compute_metrics(results: &[EpisodeResult], time_limit: f64) -> Result<Metrics> {
    if results.is_empty() {
        return Err(Error::EmptyInput("no episodes to score".into()));
    }
    let count = |o: Outcome| results.iter().filter(|r| r.outcome == o).count();
    let total: f64 = results
        .iter()
        .map(|r| if r.outcome == Outcome::Success { r.reaching_time } else { time_limit })
        .sum();
    let n = results.len();
    Ok(Metrics {
        episodes: n,
        successes: count(Outcome::Success),
        collisions: count(Outcome::Collision),
        timeouts: count(Outcome::Timeout),
        plan_failures: count(Outcome::PlanFailure),
        sr: count(Outcome::Success) as f64 / n as f64,
        art: total / n as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub outcome: Outcome,
    pub reaching_time: f64,
    pub samples: usize,
    pub replans: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scene: String,
    pub seed: u64,
    pub config_hash: String,
    pub time_limit: f64,
    pub total_samples: usize,
    pub metrics: Option<Metrics>,
    pub episodes: Vec<ManifestEntry>,
}

pub fn config_hash(cfg: &SimConfig) -> String {
    let text = serde_json::to_string(cfg).expect("config serializes");
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-episode seeds derived from the dataset seed.
pub fn episode_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.next_u64()).collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io_at(path, e))
}

/// Generates `n` episodes into `out_dir/<scene>/`. Episodes run in
/// parallel; everything written is a pure function of the world, `n` and
/// `seed`. Observations are rendered when `dataset.render` is set.
pub fn generate_dataset(world: &World, n: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    let root = out_dir.join(&world.scene.name);
    std::fs::create_dir_all(&root).map_err(|e| Error::io_at(&root, e))?;
    let human_count = world.cfg.human.count;
    let render = world.cfg.dataset.render;
    let entries: Vec<ManifestEntry> = episode_seeds(seed, n)
        .into_par_iter()
        .enumerate()
        .map(|(i, ep_seed)| -> Result<ManifestEntry> {
            let id = format!("ep{i:04}");
            let dir = root.join(&id);
            let frames = dir.join("frames");
            std::fs::create_dir_all(&frames).map_err(|e| Error::io_at(&frames, e))?;
            let ep = sample_episode(world, ep_seed, human_count)?;
            let rec = run_episode(world, &ep, render.then_some(frames.as_path()))?;
            let mut lines = String::new();
            for s in &rec.samples {
                lines.push_str(&serde_json::to_string(s)?);
                lines.push('\n');
            }
            let sp = dir.join("samples.jsonl");
            std::fs::write(&sp, lines).map_err(|e| Error::io_at(&sp, e))?;
            write_json(&dir.join("meta.json"), &rec)?;
            Ok(ManifestEntry {
                id,
                seed: ep_seed,
                outcome: rec.outcome,
                reaching_time: rec.reaching_time,
                samples: rec.samples.len(),
                replans: rec.replans,
            })
        })
        .collect::<Result<_>>()?;
    let results: Vec<EpisodeResult> = entries
        .iter()
        .map(|e| EpisodeResult {
            outcome: e.outcome,
            reaching_time: e.reaching_time,
        })
        .collect();
    let manifest = Manifest {
        scene: world.scene.name.clone(),
        seed,
        config_hash: config_hash(&world.cfg),
        time_limit: world.cfg.dataset.time_limit,
        total_samples: entries.iter().map(|e| e.samples).sum(),
        metrics: if results.is_empty() { None } else { Some(compute_metrics(&results, world.cfg.dataset.time_limit)?) },
        episodes: entries,
    };
    write_json(&root.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_samples(path: &Path) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// How the step service returns observations.
#[derive(Debug, Clone, PartialEq)]
pub enum ObsMode {
    /// PNG bytes, base64 encoded.
    Base64,
    /// PNG files written into a directory; the path is returned.
    Files(PathBuf),
    /// No rendering; `obs` is null.
    Off,
}

struct Session {
    ep: EpisodeConfig,
    humans: Vec<HumanActor>,
    state: RobotState,
    tick: usize,
    prev_action: [f64; 2],
    outcome: Option<Outcome>,
    frames: usize,
}

/// Closed-loop episode driver behind the JSON-lines protocol. Strictly one
/// session at a time.
pub struct StepService<'w> {
    world: &'w World,
    obs_mode: ObsMode,
    session: Option<Session>,
}

#[derive(Deserialize)]
#[serde(tag = "cmd", rename_all = "lowercase", deny_unknown_fields)]
enum Request {
    Reset {
        #[serde(default)]
        episode: Option<Box<EpisodeConfig>>,
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default)]
        humans: Option<usize>,
    },
    Step {
        action: [f64; 2],
        #[serde(default)]
        duration: Option<f64>,
    },
    Close,
}

impl<'w> StepService<'w> {
    pub fn new(world: &'w World, obs_mode: ObsMode) -> Self {
        Self {
            world,
            obs_mode,
            session: None,
        }
    }

    /// Current robot state of the open session.
    pub fn state(&self) -> Option<RobotState> {
        self.session.as_ref().map(|s| s.state)
    }

    fn observe(&self, s: &mut Session) -> Result<Value> {
        let t = s.tick as f64 * s.ep.control_dt;
        let value = match &self.obs_mode {
            ObsMode::Off => Value::Null,
            ObsMode::Base64 => {
                let png = self.world.render_at(&s.humans, &s.state, t)?.encode_png()?;
                Value::String(base64::engine::general_purpose::STANDARD.encode(png))
            }
            ObsMode::Files(dir) => {
                let path = dir.join(format!("obs_{:05}.png", s.frames));
                self.world.render_at(&s.humans, &s.state, t)?.save_png(&path)?;
                Value::String(path.to_string_lossy().into_owned())
            }
        };
        s.frames += 1;
        let rg = compute_relative_goal(s.state.x, s.state.y, s.state.theta, s.ep.goal[0], s.ep.goal[1]);
        Ok(json!({
            "obs": value,
            "rel_goal": rg,
            "prev_action": s.prev_action,
            "t": t,
            "state": [s.state.x, s.state.y, s.state.theta],
            "done": s.outcome.is_some(),
            "outcome": s.outcome.map_or("running", |o| o.as_str()),
        }))
    }

    /// Checks the terminal conditions at the session's current tick.
    fn judge(&self, s: &Session) -> Option<Outcome> {
        let t = s.tick as f64 * s.ep.control_dt;
        let p = s.state.position();
        if in_collision(&self.world.robot_map, &s.humans, t, p, self.world.cfg.robot.radius) {
            Some(Outcome::Collision)
        } else if (p - s.ep.goal()).norm() <= s.ep.goal_tolerance {
            Some(Outcome::Success)
        } else if t >= s.ep.time_limit - 1e-9 {
            Some(Outcome::Timeout)
        } else {
            None
        }
    }

    fn reset(&mut self, ep: EpisodeConfig) -> Result<Value> {
        ep.validate(self.world)?;
        let humans = self.world.actors(&ep)?;
        let mut s = Session {
            state: ep.start_state(),
            ep,
            humans,
            tick: 0,
            prev_action: [0.0, 0.0],
            outcome: None,
            frames: 0,
        };
        s.outcome = self.judge(&s);
        let out = self.observe(&mut s)?;
        self.session = Some(s);
        Ok(out)
    }

    fn step(&mut self, action: [f64; 2], duration: Option<f64>) -> Result<Value> {
        let mut s = self
            .session
            .take()
            .ok_or_else(|| Error::InvalidParameter("step before reset".into()))?;
        if s.outcome.is_some() {
            return Err(Error::InvalidParameter("episode already finished".into()));
        }
        if !action.iter().all(|a| a.is_finite()) {
            return Err(Error::InvalidParameter("action must be finite".into()));
        }
        let dt = s.ep.control_dt;
        let duration = duration.unwrap_or(self.world.cfg.dataset.observation_interval);
        let ticks_f = duration / dt;
        let ticks = ticks_f.round() as usize;
        if ticks == 0 || (ticks_f - ticks as f64).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("duration {duration} is not a positive multiple of {dt}")));
        }
        let r = &self.world.cfg.robot;
        let v = action[0].clamp(-r.v_max, r.v_max);
        let w = action[1].clamp(-r.w_max, r.w_max);
        for _ in 0..ticks {
            s.state = s.state.step(v, w, dt);
            s.tick += 1;
            s.outcome = self.judge(&s);
            if s.outcome.is_some() {
                break;
            }
        }
        s.prev_action = [v, w];
        let out = self.observe(&mut s)?;
        self.session = Some(s);
        Ok(out)
    }

    /// Handles one request line. Returns the response and whether the
    /// session should end. A bad request aborts the current episode.
    pub fn handle_line(&mut self, line: &str) -> (Value, bool) {
        let req: Request = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                self.session = None;
                return (json!({ "error": format!("malformed request: {e}") }), false);
            }
        };
        let result = match req {
            Request::Close => {
                self.session = None;
                return (json!({ "closed": true }), true);
            }
            Request::Reset { episode, seed, humans } => match (episode, seed) {
                (Some(ep), _) => self.reset(*ep),
                (None, Some(seed)) => {
                    let n = humans.unwrap_or(self.world.cfg.human.count);
                    sample_episode(self.world, seed, n).and_then(|ep| self.reset(ep))
                }
                (None, None) => Err(Error::MissingField("reset needs an episode or a seed".into())),
            },
            Request::Step { action, duration } => self.step(action, duration),
        };
        match result {
            Ok(v) => (v, false),
            Err(e) => {
                self.session = None;
                (json!({ "error": e.to_string() }), false)
            }
        }
    }

    /// Serves requests until `close` or end of input.
    pub fn serve<R: BufRead, W: Write>(&mut self, input: R, mut output: W) -> Result<()> {
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (resp, close) = self.handle_line(&line);
            writeln!(output, "{resp}")?;
            output.flush()?;
            if close {
                break;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_goal_examples() {
        assert_eq!(compute_relative_goal(0.0, 0.0, 0.0, 2.0, 0.0), [2.0, 0.0]);
        let r = compute_relative_goal(0.0, 0.0, std::f64::consts::FRAC_PI_2, 0.0, 3.0);
        assert!((r[0] - 3.0).abs() < 1e-12 && r[1].abs() < 1e-12);
    }

    #[test]
    fn metrics_examples() {
        let ok = |t| EpisodeResult {
            outcome: Outcome::Success,
            reaching_time: t,
        };
        let m = compute_metrics(&[ok(10.0); 10], 50.0).unwrap();
        assert_eq!((m.sr, m.art), (1.0, 10.0));
        let fail = EpisodeResult {
            outcome: Outcome::Collision,
            reaching_time: 3.0,
        };
        let m = compute_metrics(&[ok(10.0), fail], 50.0).unwrap();
        assert_eq!((m.sr, m.art, m.collisions), (0.5, 30.0, 1));
        assert!(compute_metrics(&[], 50.0).is_err());
    }

    #[test]
    fn seeds_are_stable() {
        assert_eq!(episode_seeds(3, 4), episode_seeds(3, 4));
        assert_ne!(episode_seeds(3, 4), episode_seeds(4, 4));
    }
}
