//! Expert planner: Hybrid A* over unicycle motion primitives, dynamic
//! obstacle handling from observed human Gaussians, and the closed-loop
//! executor that produces expert demonstrations.

use crate::config::SimConfig;
use crate::error::{Error, Result};
use crate::geometry::{
    integrate_unicycle, point_polyline_distance, point_segment_distance, segment_polyline_distance, wrap_angle,
};
use crate::grid::{distance_field, squared_distance_transform, OccupancyGrid2D};
use crate::human::HumanActor;
use crate::render::CameraModel;
use crate::splat::GaussianPrimitive;
use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
    pub w: f64,
}

impl RobotState {
    pub fn at_rest(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
            v: 0.0,
            w: 0.0,
        }
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    /// State after applying `(v, w)` for `dt`.
    pub fn step(&self, v: f64, w: f64, dt: f64) -> Self {
        let (x, y, theta) = integrate_unicycle(self.x, self.y, self.theta, v, w, dt);
        Self { x, y, theta, v, w }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionPrimitive {
    pub v: f64,
    pub w: f64,
    pub duration: f64,
    pub arc_length: f64,
    /// (dx, dy, dtheta) in the start frame.
    pub end_offset: [f64; 3],
}

/// The 9 primitives: speeds {1/3, 2/3, 1} of `v_max` times steering
/// {-w_max, 0, +w_max}, speed-major.
pub fn build_motion_primitives(v_max: f64, w_max: f64, duration: f64) -> Result<Vec<MotionPrimitive>> {
    if !(v_max > 0.0 && w_max > 0.0 && duration > 0.0) {
        return Err(Error::InvalidParameter("v_max, w_max and duration must be > 0".into()));
    }
    let mut out = Vec::with_capacity(9);
    for scale in [1.0 / 3.0, 2.0 / 3.0, 1.0] {
        let v = v_max * scale;
        for w in [-w_max, 0.0, w_max] {
            let (dx, dy, dth) = integrate_unicycle(0.0, 0.0, 0.0, v, w, duration);
            out.push(MotionPrimitive {
                v,
                w,
                duration,
                arc_length: v * duration,
                end_offset: [dx, dy, dth],
            });
        }
    }
    Ok(out)
}

/// Drops primitives whose covariance trace exceeds the nearest-rank 75th
/// percentile, then keeps one centroid per `downsample_res` voxel.
pub fn filter_human_primitives(prims: &[GaussianPrimitive], downsample_res: f64) -> Result<Vec<Vector3<f64>>> {
    if prims.is_empty() {
        return Err(Error::EmptyInput("no human primitives to filter".into()));
    }
    if !(downsample_res > 0.0) {
        return Err(Error::InvalidParameter("downsample resolution must be > 0".into()));
    }
    let traces: Vec<f64> = prims.iter().map(|p| p.covariance_trace()).collect();
    let cut = nearest_rank(&traces, 0.75);
    let mut cells: BTreeMap<[i64; 3], (Vector3<f64>, usize)> = BTreeMap::new();
    for (p, &tr) in prims.iter().zip(&traces) {
        if tr > cut {
            continue;
        }
        let key = [0, 1, 2].map(|a| (p.mean[a] / downsample_res).floor() as i64);
        let e = cells.entry(key).or_insert((Vector3::zeros(), 0));
        e.0 += p.mean;
        e.1 += 1;
    }
    Ok(cells.into_values().map(|(s, n)| s / n as f64).collect())
}

/// The `ceil(q * n)`-th smallest value (1-based).
fn nearest_rank(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Parameters of the predicted human footprint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepParams {
    pub human_radius: f64,
    pub safety_buffer: f64,
    /// Constant-velocity prediction horizon (s).
    pub horizon: f64,
    /// Radius used to inflate the added cells for the robot (m).
    pub robot_radius: f64,
}

/// True if any point is in the camera frustum and its constant-velocity
/// track over `horizon` comes closer than `margin` to the path polyline.
/// With zero velocity this is the plain point distance.
pub fn human_gate(
    points: &[Vector3<f64>],
    velocity: Vector2<f64>,
    horizon: f64,
    camera: &CameraModel,
    path: &[Vector2<f64>],
    margin: f64,
) -> bool {
    let visible: Vec<Vector3<f64>> = points.iter().filter(|p| camera.in_frustum(p)).copied().collect();
    track_threatens(&visible, velocity, horizon, path, margin)
}

/// True when any point, carried along `velocity` for `horizon` seconds,
/// passes within `margin` of `path`.
pub fn track_threatens(points: &[Vector3<f64>], velocity: Vector2<f64>, horizon: f64, path: &[Vector2<f64>], margin: f64) -> bool {
    let shift = velocity * horizon;
    points
        .iter()
        .any(|p| segment_polyline_distance(p.xy(), p.xy() + shift, path) < margin)
}

/// Cells whose centers lie within `radius` of the segment `a`-`b`.
pub fn capsule_cells(grid: &OccupancyGrid2D, a: Vector2<f64>, b: Vector2<f64>, radius: f64) -> Vec<usize> {
    let res = grid.resolution;
    let lo = a.inf(&b) - Vector2::repeat(radius + res);
    let hi = a.sup(&b) + Vector2::repeat(radius + res);
    let [nx, ny] = grid.dims;
    let i0 = (((lo.x - grid.origin.x) / res).floor().max(0.0) as usize).min(nx);
    let j0 = (((lo.y - grid.origin.y) / res).floor().max(0.0) as usize).min(ny);
    let i1 = (((hi.x - grid.origin.x) / res).ceil().max(0.0) as usize).min(nx);
    let j1 = (((hi.y - grid.origin.y) / res).ceil().max(0.0) as usize).min(ny);
    let mut out = Vec::new();
    for j in j0..j1 {
        for i in i0..i1 {
            if point_segment_distance(grid.cell_center((i, j)), a, b) <= radius {
                out.push(grid.index((i, j)));
            }
        }
    }
    out
}

/// Adds an observed human to a robot map.
///
/// When no point passes [`human_gate`] (predicted over the sweep horizon)
/// the base map is returned unchanged.
/// Otherwise the cells under the points and every cell whose center lies in
/// the capsule of radius `human_radius + safety_buffer` around the segment
/// from the points' centroid to `centroid + horizon * velocity` become
/// occupied, and the added cells are inflated by the robot radius.
pub fn update_navigable_map(
    base: &OccupancyGrid2D,
    human_points: &[Vector3<f64>],
    human_velocity: Vector2<f64>,
    camera: &CameraModel,
    robot_path_segment: &[Vector2<f64>],
    safety_margin: f64,
    sweep: &SweepParams,
) -> OccupancyGrid2D {
    if !human_gate(human_points, human_velocity, sweep.horizon, camera, robot_path_segment, safety_margin) {
        return base.clone();
    }
    add_human_sweep(base, human_points, human_velocity, sweep)
}

/// Marks the cells under `human_points` and the capsule swept by their
/// centroid over the horizon, then inflates the additions by the robot
/// radius. No gating.
pub fn add_human_sweep(
    base: &OccupancyGrid2D,
    human_points: &[Vector3<f64>],
    human_velocity: Vector2<f64>,
    sweep: &SweepParams,
) -> OccupancyGrid2D {
    if human_points.is_empty() {
        return base.clone();
    }
    let mut added = vec![false; base.len()];
    for p in human_points {
        if let Some(c) = base.cell_of(p.xy()) {
            added[base.index(c)] = true;
        }
    }
    let centroid = human_points.iter().map(|p| p.xy()).sum::<Vector2<f64>>() / human_points.len() as f64;
    let end = centroid + human_velocity * sweep.horizon;
    for k in capsule_cells(base, centroid, end, sweep.human_radius + sweep.safety_buffer) {
        added[k] = true;
    }
    let mut out = base.clone();
    let d2 = squared_distance_transform(&added, base.dims);
    let lim = sweep.robot_radius + crate::geometry::GEOM_EPS;
    for k in 0..out.len() {
        out.occupied[k] |= added[k];
        out.inflated[k] |= d2[k] * base.resolution * base.resolution <= lim * lim;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanWeights {
    pub w_len: f64,
    pub w_steer: f64,
    pub w_h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchOptions {
    pub goal_tolerance: f64,
    pub theta_bins: usize,
    pub node_budget: usize,
    /// Control period the emitted path is sampled at (s).
    pub control_dt: f64,
}

impl SearchOptions {
    pub fn from_config(cfg: &SimConfig) -> Self {
        Self {
            goal_tolerance: cfg.planner.goal_tolerance,
            theta_bins: cfg.planner.theta_bins,
            node_budget: cfg.planner.node_budget,
            control_dt: cfg.dataset.control_dt,
        }
    }
}

impl PlanWeights {
    pub fn from_config(cfg: &SimConfig) -> Self {
        Self {
            w_len: cfg.planner.w_len,
            w_steer: cfg.planner.w_steer,
            w_h: cfg.planner.w_h,
        }
    }

    pub fn edge_cost(&self, p: &MotionPrimitive) -> f64 {
        self.w_len * p.arc_length + self.w_steer * p.w.abs() * p.duration
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedPath {
    /// States at multiples of `dt` from the plan start; `states[0]` is the start.
    pub states: Vec<RobotState>,
    /// `actions[k]` drives `states[k]` to `states[k + 1]`.
    pub actions: Vec<[f64; 2]>,
    pub dt: f64,
    pub primitives: Vec<usize>,
    pub cost: f64,
    pub expanded: usize,
    pub open_remaining: usize,
}

impl PlannedPath {
    pub fn positions(&self) -> Vec<Vector2<f64>> {
        self.states.iter().map(|s| s.position()).collect()
    }
}

/// Number of pieces a primitive is checked in: at most half a cell long
/// and a multiple of `ticks` so every control tick is a piece boundary.
pub fn arc_samples(p: &MotionPrimitive, resolution: f64, ticks: usize) -> usize {
    let n = ((p.arc_length / (resolution / 2.0)).ceil() as usize).max(1);
    n.div_ceil(ticks) * ticks
}

/// True if the whole arc of `p` started from `(x, y, theta)` stays clear of
/// blocked cells (inflated or outside the map). The arc is split into `n`
/// pieces and each piece is intersected exactly with the closed boxes of
/// the blocked cells near it, so corners clipped between samples count.
pub fn primitive_is_free(grid: &OccupancyGrid2D, x: f64, y: f64, theta: f64, p: &MotionPrimitive, n: usize) -> bool {
    let n = n.max(1);
    let res = grid.resolution;
    let [nx, ny] = grid.dims;
    let mut a = Vector2::new(x, y);
    let mut ta = theta;
    (1..=n).all(|j| {
        let dt = p.duration / n as f64;
        let (bx, by, tb) = integrate_unicycle(x, y, theta, p.v, p.w, p.duration * j as f64 / n as f64);
        let b = Vector2::new(bx, by);
        // every point of a piece is within half its length of an endpoint
        let reach = 0.5 * p.v.abs() * dt;
        let lo = a.inf(&b) - Vector2::repeat(reach);
        let hi = a.sup(&b) + Vector2::repeat(reach);
        let i0 = ((lo.x - grid.origin.x) / res).floor() as i64;
        let i1 = ((hi.x - grid.origin.x) / res).floor() as i64;
        let j0 = ((lo.y - grid.origin.y) / res).floor() as i64;
        let j1 = ((hi.y - grid.origin.y) / res).floor() as i64;
        let clear = (j0..=j1).all(|cj| {
            (i0..=i1).all(|ci| {
                let inside = ci >= 0 && cj >= 0 && (ci as usize) < nx && (cj as usize) < ny;
                if inside && !grid.inflated[ci as usize + nx * cj as usize] {
                    return true;
                }
                let bmin = grid.origin + Vector2::new(ci as f64, cj as f64) * res;
                !piece_hits_box(a, ta, b, p.v, p.w, dt, bmin, bmin + Vector2::repeat(res))
            })
        });
        a = b;
        ta = tb;
        clear
    })
}

fn in_box(p: Vector2<f64>, lo: Vector2<f64>, hi: Vector2<f64>) -> bool {
    p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y
}

/// Exact test of one constant-(v, w) piece from `a` (heading `ta`) to `b`
/// against the closed box `[lo, hi]`.
#[allow(clippy::too_many_arguments)]
fn piece_hits_box(a: Vector2<f64>, ta: f64, b: Vector2<f64>, v: f64, w: f64, dt: f64, lo: Vector2<f64>, hi: Vector2<f64>) -> bool {
    if in_box(a, lo, hi) || in_box(b, lo, hi) {
        return true;
    }
    if w.abs() < 1e-12 {
        // slab clipping of the segment
        let d = b - a;
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for k in 0..2 {
            if d[k] == 0.0 {
                if a[k] < lo[k] || a[k] > hi[k] {
                    return false;
                }
            } else {
                let (u, v) = ((lo[k] - a[k]) / d[k], (hi[k] - a[k]) / d[k]);
                t0 = t0.max(u.min(v));
                t1 = t1.min(u.max(v));
            }
        }
        return t0 <= t1;
    }
    // both endpoints are outside, so the arc hits the box iff it crosses an edge
    let r = v / w;
    let c = a + Vector2::new(-ta.sin(), ta.cos()) * r;
    let rad = r.abs();
    let start = (a - c).y.atan2((a - c).x);
    let sweep = (w * dt).abs();
    let on_arc = |q: Vector2<f64>| {
        let ang = (q - c).y.atan2((q - c).x);
        let along = if w > 0.0 { ang - start } else { start - ang };
        along.rem_euclid(std::f64::consts::TAU) <= sweep + 1e-12
    };
    for k in 0..2 {
        let o = 1 - k;
        for edge in [lo[k], hi[k]] {
            let off = edge - c[k];
            let disc = rad * rad - off * off;
            if disc < 0.0 {
                continue;
            }
            for sgn in [-1.0, 1.0] {
                let along = c[o] + sgn * disc.sqrt();
                if along < lo[o] || along > hi[o] {
                    continue;
                }
                let mut q = Vector2::zeros();
                q[k] = edge;
                q[o] = along;
                if on_arc(q) {
                    return true;
                }
            }
        }
    }
    false
}

#[derive(Clone, Copy)]
struct Node {
    x: f64,
    y: f64,
    theta: f64,
    g: f64,
    parent: u32,
    prim: u8,
}

#[derive(Clone, Copy)]
struct Open {
    f: f64,
    h: f64,
    seq: u64,
    node: u32,
}

impl PartialEq for Open {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}

impl Eq for Open {}

impl Ord for Open {
    fn cmp(&self, o: &Self) -> Ordering {
        o.f.total_cmp(&self.f)
            .then_with(|| o.h.total_cmp(&self.h))
            .then_with(|| o.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// Hybrid A* from `start` to within the goal tolerance of `goal`.
///
/// Children are binned by grid cell and one of `theta_bins` heading bins,
/// keeping the lowest g per bin; expanded bins are closed. The heuristic is
/// the obstacle-aware 8-connected distance to the goal cell, less the goal
/// tolerance. The emitted path is resampled at `control_dt`.
pub fn hybrid_astar(
    start: RobotState,
    goal: Vector2<f64>,
    grid: &OccupancyGrid2D,
    primitives: &[MotionPrimitive],
    weights: &PlanWeights,
    opts: &SearchOptions,
) -> Result<PlannedPath> {
    let goal_cell = grid
        .cell_of(goal)
        .ok_or_else(|| Error::InvalidParameter(format!("goal {goal:?} outside the map")))?;
    if !grid.is_free(start.position()) {
        return Err(Error::InvalidParameter("start pose is in collision".into()));
    }
    if primitives.is_empty() || opts.theta_bins == 0 {
        return Err(Error::InvalidParameter("need primitives and theta bins".into()));
    }
    let dt = opts.control_dt;
    let ticks_f = primitives[0].duration / dt;
    let ticks = ticks_f.round() as usize;
    if ticks == 0 || (ticks_f - ticks as f64).abs() > 1e-9 {
        return Err(Error::InvalidParameter("primitive duration must be a multiple of control_dt".into()));
    }
    let dist = distance_field(grid, goal_cell);
    let heur = |x: f64, y: f64| -> f64 {
        match grid.cell_of(Vector2::new(x, y)) {
            Some(c) => (dist[grid.index(c)] - opts.goal_tolerance).max(0.0),
            None => f64::INFINITY,
        }
    };
    let bin_width = std::f64::consts::TAU / opts.theta_bins as f64;
    let bin_of = |x: f64, y: f64, th: f64| -> u64 {
        let c = grid.cell_of(Vector2::new(x, y)).expect("free samples lie inside the map");
        let tb = (((th + std::f64::consts::PI) / bin_width).floor() as usize).min(opts.theta_bins - 1);
        (grid.index(c) * opts.theta_bins + tb) as u64
    };
    let samples: Vec<usize> = primitives.iter().map(|p| arc_samples(p, grid.resolution, ticks)).collect();
    let costs: Vec<f64> = primitives.iter().map(|p| weights.edge_cost(p)).collect();

    let h0 = heur(start.x, start.y);
    if !h0.is_finite() {
        return Err(Error::NoPath("goal unreachable on the grid".into()));
    }
    let mut nodes = vec![Node {
        x: start.x,
        y: start.y,
        theta: start.theta,
        g: 0.0,
        parent: u32::MAX,
        prim: 0,
    }];
    // bin -> (best g, closed)
    let mut bins: HashMap<u64, (f64, bool)> = HashMap::new();
    bins.insert(bin_of(start.x, start.y, start.theta), (0.0, false));
    let mut open = BinaryHeap::new();
    let mut seq = 0u64;
    open.push(Open {
        f: weights.w_h * h0,
        h: h0,
        seq,
        node: 0,
    });
    let mut expanded = 0usize;
    while let Some(Open { node, .. }) = open.pop() {
        let n = nodes[node as usize];
        let bin = bin_of(n.x, n.y, n.theta);
        let entry = bins.get_mut(&bin).expect("pushed nodes have a bin");
        if entry.1 || n.g > entry.0 {
            continue;
        }
        entry.1 = true;
        if (Vector2::new(n.x, n.y) - goal).norm() <= opts.goal_tolerance {
            return Ok(reconstruct(&nodes, node, start, primitives, ticks, dt, expanded, open.len()));
        }
        expanded += 1;
        if expanded > opts.node_budget {
            return Err(Error::NoPath(format!("node budget {} exhausted", opts.node_budget)));
        }
        for (k, p) in primitives.iter().enumerate() {
            if !primitive_is_free(grid, n.x, n.y, n.theta, p, samples[k]) {
                continue;
            }
            let (cx, cy, ct) = integrate_unicycle(n.x, n.y, n.theta, p.v, p.w, p.duration);
            let h = heur(cx, cy);
            if !h.is_finite() {
                continue;
            }
            let g = n.g + costs[k];
            let cb = bin_of(cx, cy, ct);
            match bins.get_mut(&cb) {
                Some((_, true)) => continue,
                Some((best, false)) if g >= *best => continue,
                Some((best, false)) => *best = g,
                None => {
                    bins.insert(cb, (g, false));
                }
            }
            nodes.push(Node {
                x: cx,
                y: cy,
                theta: ct,
                g,
                parent: node,
                prim: k as u8,
            });
            seq += 1;
            open.push(Open {
                f: g + weights.w_h * h,
                h,
                seq,
                node: (nodes.len() - 1) as u32,
            });
        }
    }
    Err(Error::NoPath("open set exhausted".into()))
}

#[allow(clippy::too_many_arguments)]
fn reconstruct(
    nodes: &[Node],
    last: u32,
    start: RobotState,
    primitives: &[MotionPrimitive],
    ticks: usize,
    dt: f64,
    expanded: usize,
    open_remaining: usize,
) -> PlannedPath {
    let mut prims = Vec::new();
    let mut k = last;
    while nodes[k as usize].parent != u32::MAX {
        prims.push(nodes[k as usize].prim as usize);
        k = nodes[k as usize].parent;
    }
    prims.reverse();
    let mut states = vec![start];
    let mut actions = Vec::with_capacity(prims.len() * ticks);
    for &pi in &prims {
        let p = &primitives[pi];
        for _ in 0..ticks {
            let s = states[states.len() - 1].step(p.v, p.w, dt);
            states.push(s);
            actions.push([p.v, p.w]);
        }
    }
    PlannedPath {
        states,
        actions,
        dt,
        primitives: prims,
        cost: nodes[last as usize].g,
        expanded,
        open_remaining,
    }
}

/// Replan when the plan is `period` old or an observed human point comes
/// closer than `margin` to the lookahead polyline.
pub fn should_replan(
    elapsed_since_plan: f64,
    period: f64,
    human_points: &[Vector2<f64>],
    lookahead: &[Vector2<f64>],
    margin: f64,
) -> bool {
    elapsed_since_plan >= period || human_points.iter().any(|&p| point_polyline_distance(p, lookahead) < margin)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Success,
    Collision,
    Timeout,
    PlanFailure,
}

impl Outcome {
    pub fn as_str(&self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::Collision => "collision",
            Outcome::Timeout => "timeout",
            Outcome::PlanFailure => "plan-failure",
        }
    }
}

/// Robot collision at `t`: its cell is blocked in the inflated robot map,
/// or a human root is closer than the sum of radii.
pub fn in_collision(
    robot_map: &OccupancyGrid2D,
    humans: &[HumanActor],
    t: f64,
    pos: Vector2<f64>,
    robot_radius: f64,
) -> bool {
    !robot_map.is_free(pos) || humans.iter().any(|h| (h.position(t) - pos).norm() < robot_radius + h.model.radius)
}

/// What the robot senses of one human: filtered points inside the camera
/// frustum or within `planner.proximity_radius` of the robot, and the
/// finite-difference velocity over the last observation interval.
#[derive(Debug, Clone)]
pub struct HumanObservation {
    /// Index of the observed human.
    pub human: usize,
    pub points: Vec<Vector3<f64>>,
    pub velocity: Vector2<f64>,
}

pub fn observe_humans(
    humans: &[HumanActor],
    t: f64,
    camera: &CameraModel,
    cfg: &SimConfig,
) -> Result<Vec<HumanObservation>> {
    let dt_obs = cfg.dataset.observation_interval;
    let t_obs = (t / dt_obs + 1e-9).floor() * dt_obs;
    let here = camera.position().xy();
    let mut out = Vec::new();
    for (i, h) in humans.iter().enumerate() {
        let pts: Vec<Vector3<f64>> = filter_human_primitives(&h.prims_at(t), cfg.planner.downsample_resolution)?
            .into_iter()
            .filter(|p| camera.in_frustum(p) || (p.xy() - here).norm() <= cfg.planner.proximity_radius)
            .collect();
        if pts.is_empty() {
            continue;
        }
        let velocity = (h.position(t_obs) - h.position(t_obs - dt_obs)) / dt_obs;
        out.push(HumanObservation { human: i, points: pts, velocity });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum TraceEvent {
    Plan {
        t: f64,
        ok: bool,
        expanded: usize,
        open: usize,
        cost: f64,
        /// Fallback rung: 0 is the full safety buffer.
        rung: usize,
        humans_added: usize,
    },
    Replan {
        t: f64,
        periodic: bool,
    },
    Wait {
        t: f64,
    },
    /// Planning failed around humans; one tick of the best evasive action.
    Evade {
        t: f64,
        action: [f64; 2],
    },
    Done {
        t: f64,
        outcome: Outcome,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertRun {
    /// Robot state at every control tick, starting with the initial state.
    pub states: Vec<RobotState>,
    pub actions: Vec<[f64; 2]>,
    pub outcome: Outcome,
    /// Time of success, or the time limit for every other outcome (s).
    pub reaching_time: f64,
    /// Time the run stopped (s).
    pub end_time: f64,
    pub replanned_at: Vec<f64>,
    pub min_human_distance: f64,
    pub trace: Vec<TraceEvent>,
}

/// Safety buffer and horizon tried in order when planning around humans fails.
const FALLBACK: [(f64, f64); 4] = [(1.0, 1.0), (0.5, 1.0), (0.0, 0.5), (0.0, 0.0)];

/// Least robot-human gap beyond the summed radii a plan must keep over the
/// prediction horizon (m).
const MIN_TIME_CLEARANCE: f64 = 0.2;



struct PlanContext<'a> {
    robot_map: &'a OccupancyGrid2D,
    goal: Vector2<f64>,
    prims: Vec<MotionPrimitive>,
    weights: PlanWeights,
    opts: SearchOptions,
    cfg: &'a SimConfig,
}

impl PlanContext<'_> {
    fn map_with_humans(&self, tracks: &[HumanObservation], path: &[Vector2<f64>], rung: usize) -> (OccupancyGrid2D, usize) {
        let (buf, hor) = FALLBACK[rung];
        let sweep = SweepParams {
            human_radius: self.cfg.human.radius,
            safety_buffer: self.cfg.planner.safety_buffer * buf,
            horizon: self.cfg.planner.prediction_horizon * hor,
            robot_radius: self.cfg.robot.radius,
        };
        let mut map = self.robot_map.clone();
        let mut added = 0;
        for o in tracks {
            if track_threatens(&o.points, o.velocity, sweep.horizon, path, self.cfg.planner.safety_margin) {
                map = add_human_sweep(&map, &o.points, o.velocity, &sweep);
                added += 1;
            }
        }
        (map, added)
    }

    /// Plans from `state`, adding humans that threaten either `lookahead`
    /// or the lookahead of the fresh plan, walking down the fallback ladder
    /// on failure.
    fn plan(
        &self,
        t: f64,
        state: RobotState,
        tracks: &[HumanObservation],
        lookahead: &[Vector2<f64>],
        trace: &mut Vec<TraceEvent>,
    ) -> Option<PlannedPath> {
        let horizon_ticks = (self.cfg.planner.lookahead / self.opts.control_dt).round() as usize;
        let rungs = if tracks.is_empty() { 1 } else { FALLBACK.len() };
        for rung in 0..rungs {
            let (map, added) = self.map_with_humans(tracks, lookahead, rung);
            let mut result = hybrid_astar(state, self.goal, &map, &self.prims, &self.weights, &self.opts);
            let mut total_added = added;
            if let Ok(p) = &result {
                // second stage: the candidate itself may head into a human
                let ahead: Vec<Vector2<f64>> = p.positions().into_iter().take(horizon_ticks + 1).collect();
                let mut path = lookahead.to_vec();
                path.extend(ahead);
                let (map2, added2) = self.map_with_humans(tracks, &path, rung);
                if added2 > added {
                    total_added = added2;
                    result = hybrid_astar(state, self.goal, &map2, &self.prims, &self.weights, &self.opts);
                }
            }
            if let Ok(p) = &result {
                if !self.time_safe(p, 0, tracks, rung) {
                    result = Err(crate::error::Error::NoPath("plan meets a predicted human".into()));
                }
            }
            let ok = result.is_ok();
            trace.push(TraceEvent::Plan {
                t,
                ok,
                expanded: result.as_ref().map_or(0, |p| p.expanded),
                open: result.as_ref().map_or(0, |p| p.open_remaining),
                cost: result.as_ref().map_or(f64::INFINITY, |p| p.cost),
                rung,
                humans_added: total_added,
            });
            if let Ok(p) = result {
                return Some(p);
            }
        }
        None
    }

    /// Steps the plan and the constant-velocity prediction of every track
    /// together over the prediction horizon and checks they stay apart by
    /// the summed radii plus a rung-dependent gap.
    fn time_safe(&self, plan: &PlannedPath, from: usize, tracks: &[HumanObservation], rung: usize) -> bool {
        let dt = self.opts.control_dt;
        let ticks = (self.cfg.planner.prediction_horizon / dt).round() as usize;
        let extra = (self.cfg.planner.safety_buffer * FALLBACK[rung].0).max(MIN_TIME_CLEARANCE);
        let clearance = self.cfg.robot.radius + self.cfg.human.radius + extra;
        let last = plan.states.len() - 1;
        tracks.iter().all(|o| {
            let c = o.points.iter().map(|p| p.xy()).sum::<Vector2<f64>>() / o.points.len() as f64;
            let gap = |k: usize| (plan.states[(from + k).min(last)].position() - (c + o.velocity * (k as f64 * dt))).norm();
            // already inside the clearance: the plan may not close in further
            let need = clearance.min(gap(0));
            (1..=ticks).all(|k| gap(k) >= need)
        })
    }

    /// Searches short sequences of primitives, driven forward or in
    /// reverse, or standing still, covering
    /// the prediction horizon for the one keeping the largest predicted
    /// distance to every tracked human while staying clear of static
    /// obstacles. Returns the first action of the best sequence.
    fn evade(&self, state: RobotState, tracks: &[HumanObservation]) -> [f64; 2] {
        let dt = self.opts.control_dt;
        let seg_ticks = ((self.cfg.planner.primitive_duration / dt).round() as usize).max(1);
        let depth = ((self.cfg.planner.prediction_horizon / (seg_ticks as f64 * dt)).ceil() as usize).max(1);
        let centroids: Vec<(Vector2<f64>, Vector2<f64>)> = tracks
            .iter()
            .map(|o| (o.points.iter().map(|p| p.xy()).sum::<Vector2<f64>>() / o.points.len() as f64, o.velocity))
            .collect();
        let mut actions = vec![[0.0, 0.0]];
        actions.extend(self.prims.iter().map(|p| [p.v, p.w]));
        // the planner only drives forward, but evasion may also back away
        actions.extend(self.prims.iter().map(|p| [-p.v, p.w]));
        let mut best = (f64::NEG_INFINITY, [0.0, 0.0]);
        let mut stack = vec![(state, 0usize, 0usize, f64::INFINITY, [0.0, 0.0])];
        while let Some((s0, tick, level, dist, first)) = stack.pop() {
            if level == depth {
                if dist > best.0 + 1e-9 {
                    best = (dist, first);
                }
                continue;
            }
            for a in &actions {
                let mut s = s0;
                let mut d = dist;
                let mut free = true;
                for k in 1..=seg_ticks {
                    s = s.step(a[0], a[1], dt);
                    if !self.robot_map.is_free(s.position()) {
                        free = false;
                        break;
                    }
                    let tk = (tick + k) as f64 * dt;
                    for (c, vel) in &centroids {
                        d = d.min((c + vel * tk - s.position()).norm());
                    }
                }
                // a worse partial minimum can never win
                if free && d > best.0 + 1e-9 {
                    stack.push((s, tick + seg_ticks, level + 1, d, if level == 0 { *a } else { first }));
                }
            }
        }
        best.1
    }
}

/// Humans seen within the last `memory` seconds, with points carried along
/// their last velocity when out of view.
fn coast_tracks(last_seen: &[Option<(HumanObservation, f64)>], t: f64, memory: f64) -> Vec<HumanObservation> {
    last_seen
        .iter()
        .flatten()
        .filter(|(_, seen)| t - seen <= memory + 1e-9)
        .map(|(o, seen)| {
            let shift = o.velocity * (t - seen);
            HumanObservation {
                human: o.human,
                points: o.points.iter().map(|p| p + Vector3::new(shift.x, shift.y, 0.0)).collect(),
                velocity: o.velocity,
            }
        })
        .collect()
}

/// Closed-loop expert rollout.
///
/// Each tick the robot checks for success, collision and timeout, observes
/// the humans in its camera, decides whether to replan, and then applies
/// the next action of its current plan. A human that leaves the view stays
/// tracked at constant velocity for `planner.track_memory` seconds. With no
/// tracked human the first plan is followed to the end; a tracked human
/// triggers replanning on the period or when it nears the lookahead. If
/// planning around tracked humans fails on every fallback rung the robot
/// takes one evasive tick; a failure without tracked humans ends the run as
/// a plan failure.
pub fn execute_expert(
    robot_map: &OccupancyGrid2D,
    humans: &[HumanActor],
    start: RobotState,
    goal: Vector2<f64>,
    ground_z: f64,
    cfg: &SimConfig,
) -> Result<ExpertRun> {
    cfg.validate()?;
    let ctx = PlanContext {
        robot_map,
        goal,
        prims: build_motion_primitives(cfg.robot.v_max, cfg.robot.w_max, cfg.planner.primitive_duration)?,
        weights: PlanWeights::from_config(cfg),
        opts: SearchOptions::from_config(cfg),
        cfg,
    };
    let dt = cfg.dataset.control_dt;
    let max_ticks = (cfg.dataset.time_limit / dt).round() as usize;
    let lookahead_ticks = (cfg.planner.lookahead / dt).round() as usize;
    let mut state = start;
    let mut states = vec![state];
    let mut actions = Vec::new();
    let mut trace = Vec::new();
    let mut replanned_at = Vec::new();
    let mut plan: Option<(PlannedPath, usize, f64)> = None;
    let mut last_seen: Vec<Option<(HumanObservation, f64)>> = vec![None; humans.len()];
    let mut min_human = f64::INFINITY;
    let mut tick = 0usize;
    let outcome = loop {
        let t = tick as f64 * dt;
        for h in humans {
            min_human = min_human.min((h.position(t) - state.position()).norm());
        }
        if in_collision(robot_map, humans, t, state.position(), cfg.robot.radius) {
            break Outcome::Collision;
        }
        if (state.position() - goal).norm() <= cfg.dataset.goal_tolerance {
            break Outcome::Success;
        }
        if tick >= max_ticks {
            break Outcome::Timeout;
        }
        let camera = CameraModel::robot_mounted(&cfg.robot.camera, state.x, state.y, state.theta, ground_z)?;
        for o in observe_humans(humans, t, &camera, cfg)? {
            let i = o.human;
            last_seen[i] = Some((o, t));
        }
        let tracks = coast_tracks(&last_seen, t, cfg.planner.track_memory);
        let lookahead: Vec<Vector2<f64>> = match &plan {
            Some((p, idx, _)) => p.states[*idx..].iter().take(lookahead_ticks + 1).map(|s| s.position()).collect(),
            None => vec![state.position()],
        };
        let need = match &plan {
            None => true,
            Some((p, idx, _)) if *idx >= p.actions.len() => true,
            Some((p, idx, since)) if !tracks.is_empty() => {
                let pts: Vec<Vector2<f64>> = tracks.iter().flat_map(|o| o.points.iter().map(|p| p.xy())).collect();
                let periodic = t - since >= cfg.planner.replan_period;
                let threat = !ctx.time_safe(p, *idx, &tracks, FALLBACK.len() - 1)
                    || tracks.iter().any(|o| {
                        track_threatens(&o.points, o.velocity, cfg.planner.prediction_horizon, &lookahead, cfg.planner.safety_margin)
                    });
                let fire = threat
                    || should_replan(t - since, cfg.planner.replan_period, &pts, &lookahead, cfg.planner.safety_margin);
                if fire {
                    trace.push(TraceEvent::Replan { t, periodic });
                }
                fire
            }
            _ => false,
        };
        let mut evasive = None;
        if need {
            let had_plan = plan.is_some();
            match ctx.plan(t, state, &tracks, &lookahead, &mut trace) {
                Some(p) => {
                    if had_plan {
                        replanned_at.push(t);
                    }
                    plan = Some((p, 0, t));
                }
                None if !tracks.is_empty() => {
                    let a = ctx.evade(state, &tracks);
                    trace.push(if a == [0.0, 0.0] { TraceEvent::Wait { t } } else { TraceEvent::Evade { t, action: a } });
                    evasive = Some(a);
                    plan = None;
                }
                None => break Outcome::PlanFailure,
            }
        }
        let [v, w] = match (&mut plan, evasive) {
            (Some((p, idx, _)), _) => {
                let a = p.actions[*idx];
                *idx += 1;
                a
            }
            (None, Some(a)) => a,
            (None, None) => [0.0, 0.0],
        };
        state = state.step(v, w, dt);
        states.push(state);
        actions.push([v, w]);
        tick += 1;
    };
    let end_time = tick as f64 * dt;
    trace.push(TraceEvent::Done { t: end_time, outcome });
    Ok(ExpertRun {
        states,
        actions,
        outcome,
        reaching_time: if outcome == Outcome::Success { end_time } else { cfg.dataset.time_limit },
        end_time,
        replanned_at,
        min_human_distance: min_human,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{inflate, MapKind};
    use std::f64::consts::FRAC_PI_2;

    fn open_map(w: f64, h: f64) -> OccupancyGrid2D {
        let res = 0.1;
        OccupancyGrid2D::new_empty(
            Vector2::new(-1.0, -h / 2.0),
            res,
            [(w / res).round() as usize, (h / res).round() as usize],
            MapKind::RobotNavigable,
        )
        .unwrap()
    }

    fn opts() -> SearchOptions {
        SearchOptions::from_config(&SimConfig::default())
    }

    fn weights() -> PlanWeights {
        PlanWeights::from_config(&SimConfig::default())
    }

    #[test]
    fn primitive_examples() {
        let p = build_motion_primitives(1.0, 1.0, 1.0).unwrap();
        assert_eq!(p.len(), 9);
        let straight_full = p[7];
        assert_eq!(straight_full.end_offset, [1.0, 0.0, 0.0]);
        let q = build_motion_primitives(1.0, 1.0, FRAC_PI_2).unwrap();
        let left = q[8].end_offset;
        assert!((left[0] - 1.0).abs() < 1e-12 && (left[1] - 1.0).abs() < 1e-12 && (left[2] - FRAC_PI_2).abs() < 1e-12);
        for s in 0..3 {
            let (r, l) = (p[3 * s].end_offset, p[3 * s + 2].end_offset);
            assert_eq!([r[0], -r[1], -r[2]], l);
        }
    }

    #[test]
    fn percentile_examples() {
        let mk = |tr: f64, x: f64| {
            GaussianPrimitive::isotropic(Vector3::new(x, 0.0, 0.0), (tr / 3.0).sqrt(), 1.0, Vector3::zeros())
        };
        let prims = vec![mk(1.0, 0.0), mk(2.0, 1.0), mk(3.0, 2.0), mk(100.0, 3.0)];
        let pts = filter_human_primitives(&prims, 0.1).unwrap();
        assert_eq!(pts.len(), 3);
        assert!(pts.iter().all(|p| p.x < 2.5));
        let same = vec![mk(1.0, 0.0), mk(1.0, 0.02), mk(1.0, 5.0)];
        let pts = filter_human_primitives(&same, 0.1).unwrap();
        assert_eq!(pts.len(), 2);
        assert!(pts.iter().any(|p| (p.x - 0.01).abs() < 1e-12));
        assert!(filter_human_primitives(&[], 0.1).is_err());
    }

    #[test]
    fn should_replan_examples() {
        let la = [Vector2::new(0.0, 0.0), Vector2::new(2.0, 0.0)];
        assert!(should_replan(5.0, 2.0, &[], &la, 0.5));
        assert!(!should_replan(0.1, 2.0, &[Vector2::new(1.0, 3.0)], &la, 0.5));
        assert!(should_replan(0.1, 2.0, &[Vector2::new(1.0, 0.3)], &la, 0.5));
    }

    fn cam() -> CameraModel {
        CameraModel::robot_mounted(&SimConfig::default().robot.camera, 0.0, 0.0, 0.0, 0.0).unwrap()
    }

    fn sweep() -> SweepParams {
        SweepParams {
            human_radius: 0.3,
            safety_buffer: 0.5,
            horizon: 2.0,
            robot_radius: 0.3,
        }
    }

    #[test]
    fn human_behind_camera_is_ignored() {
        let base = open_map(8.0, 6.0);
        let pts = vec![Vector3::new(-0.8, 0.0, 0.5)];
        let path = [Vector2::new(0.0, 0.0), Vector2::new(-0.8, 0.0)];
        let out = update_navigable_map(&base, &pts, Vector2::zeros(), &cam(), &path, 0.6, &sweep());
        assert_eq!(out, base);
    }

    #[test]
    fn sweep_covers_predicted_position() {
        let base = open_map(8.0, 6.0);
        let pts = vec![Vector3::new(2.0, 0.0, 0.5)];
        let path = [Vector2::new(0.0, 0.0), Vector2::new(3.0, 0.0)];
        let out = update_navigable_map(&base, &pts, Vector2::new(1.0, 0.0), &cam(), &path, 0.6, &sweep());
        let c = out.cell_of(Vector2::new(4.0, 0.0)).unwrap();
        assert!(out.is_occupied_cell(c));
        let still = update_navigable_map(&base, &pts, Vector2::zeros(), &cam(), &path, 0.6, &sweep());
        let n = still.occupied.iter().filter(|&&o| o).count();
        let disk = capsule_cells(&base, Vector2::new(2.0, 0.0), Vector2::new(2.0, 0.0), 0.8).len();
        assert_eq!(n, disk);
    }

    #[test]
    fn straight_corridor_plan() {
        let g = open_map(6.0, 4.0);
        let p = hybrid_astar(RobotState::at_rest(0.0, 0.0, 0.0), Vector2::new(3.0, 0.0), &g, &build_motion_primitives(1.0, 1.0, 0.5).unwrap(), &weights(), &opts()).unwrap();
        let len: f64 = p.actions.iter().map(|a| a[0] * p.dt).sum();
        assert!(len <= 3.2);
        assert!((p.states.last().unwrap().position() - Vector2::new(3.0, 0.0)).norm() <= 0.5);
        // states follow the actions exactly
        let mut s = p.states[0];
        for (k, a) in p.actions.iter().enumerate() {
            s = s.step(a[0], a[1], p.dt);
            assert!((s.position() - p.states[k + 1].position()).norm() < 1e-9);
        }
    }

    #[test]
    fn enclosed_goal_has_no_path() {
        let mut g = open_map(8.0, 8.0);
        let c = Vector2::new(3.0, 0.0);
        for k in 0..g.len() {
            let d = (g.cell_center((k % g.dims[0], k / g.dims[0])) - c).norm();
            g.occupied[k] = (1.0..1.2).contains(&d);
        }
        let g = inflate(&g, 0.3).unwrap();
        let r = hybrid_astar(RobotState::at_rest(0.0, 0.0, 0.0), c, &g, &build_motion_primitives(1.0, 1.0, 0.5).unwrap(), &weights(), &opts());
        assert!(matches!(r, Err(Error::NoPath(_))));
    }

    #[test]
    fn static_expert_reaches_goal_without_replans() {
        let g = open_map(8.0, 6.0);
        let run = execute_expert(&g, &[], RobotState::at_rest(0.0, 0.0, 0.0), Vector2::new(5.0, 1.0), 0.0, &SimConfig::default()).unwrap();
        assert_eq!(run.outcome, Outcome::Success);
        assert!(run.replanned_at.is_empty());
        assert!(run.reaching_time < 10.0);
    }
}
