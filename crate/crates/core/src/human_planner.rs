//! Human obstacle planning: interaction-rich endpoint sampling, a grid A*
//! seed path and B-spline smoothing into a constant-speed trajectory.

use crate::error::{Error, Result};
use crate::geometry::segments_cross_strictly;
use crate::grid::{clearance_field, Cell, OccupancyGrid2D};
use crate::human::HumanTrajectory;
use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BinaryHeap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interaction {
    Crossing,
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EndpointPair {
    pub start: Vector2<f64>,
    pub goal: Vector2<f64>,
    pub interaction: Interaction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionParams {
    pub parallel_max_angle_deg: f64,
    /// Allowed perpendicular offset of both endpoints from the robot line.
    pub parallel_offset: [f64; 2],
    pub min_length: f64,
    pub max_rejections: usize,
    /// Discs (center, radius) the human endpoints must stay out of.
    pub keep_out: Vec<(Vector2<f64>, f64)>,
}

impl Default for InteractionParams {
    fn default() -> Self {
        Self {
            parallel_max_angle_deg: 15.0,
            parallel_offset: [0.5, 2.0],
            min_length: 0.0,
            max_rejections: 10_000,
            keep_out: Vec::new(),
        }
    }
}

/// Signed perpendicular offset of `p` from the infinite line through `a, b`.
fn signed_offset(p: Vector2<f64>, a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    let d = (b - a).normalize();
    d.x * (p.y - a.y) - d.y * (p.x - a.x)
}

/// Interaction predicate between the human segment and the robot segment.
///
/// Crossing: the open segments intersect at an interior point. Parallel: the
/// undirected angle between them is at most the configured limit and both
/// human endpoints sit on the same side of the robot line with an offset in
/// the configured band.
pub fn interaction_holds(
    robot_start: Vector2<f64>,
    robot_goal: Vector2<f64>,
    start: Vector2<f64>,
    goal: Vector2<f64>,
    kind: Interaction,
    params: &InteractionParams,
) -> bool {
    match kind {
        Interaction::Crossing => segments_cross_strictly(start, goal, robot_start, robot_goal),
        Interaction::Parallel => {
            let (dr, dh) = (robot_goal - robot_start, goal - start);
            if dh.norm() == 0.0 || dr.norm() == 0.0 {
                return false;
            }
            let cos = (dr.dot(&dh) / (dr.norm() * dh.norm())).abs().min(1.0);
            if cos.acos() > params.parallel_max_angle_deg.to_radians() + 1e-12 {
                return false;
            }
            let (o1, o2) = (
                signed_offset(start, robot_start, robot_goal),
                signed_offset(goal, robot_start, robot_goal),
            );
            let [lo, hi] = params.parallel_offset;
            o1 * o2 > 0.0 && (lo..=hi).contains(&o1.abs()) && (lo..=hi).contains(&o2.abs())
        }
    }
}

/// Rejection-samples human endpoints among free cell centers until the
/// interaction predicate holds. When `kind` is `None` the interaction type
/// is drawn 50/50 from the seeded generator.
pub fn sample_interaction_endpoints(
    robot_start: Vector2<f64>,
    robot_goal: Vector2<f64>,
    grid: &OccupancyGrid2D,
    seed: u64,
    kind: Option<Interaction>,
    params: &InteractionParams,
) -> Result<EndpointPair> {
    if (robot_goal - robot_start).norm() < 1.0 {
        return Err(Error::InvalidParameter("robot segment shorter than 1 m".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = kind.unwrap_or_else(|| {
        if rng.random_bool(0.5) {
            Interaction::Crossing
        } else {
            Interaction::Parallel
        }
    });
    let keep_out_ok = |p: Vector2<f64>| params.keep_out.iter().all(|(c, r)| (p - c).norm() >= *r);
    let free: Vec<Vector2<f64>> = grid
        .free_cells()
        .into_iter()
        .map(|c| grid.cell_center(c))
        .filter(|&p| keep_out_ok(p))
        .collect();
    // parallel proposals come from the offset band, the predicate still decides
    let pool: Vec<Vector2<f64>> = match kind {
        Interaction::Crossing => free,
        Interaction::Parallel => {
            let [lo, hi] = params.parallel_offset;
            free.into_iter()
                .filter(|&p| (lo..=hi).contains(&signed_offset(p, robot_start, robot_goal).abs()))
                .collect()
        }
    };
    if pool.is_empty() {
        return Err(Error::SamplingExhausted {
            attempts: 0,
            what: "no free cells to sample human endpoints from".into(),
        });
    }
    for _ in 0..params.max_rejections {
        let start = pool[rng.random_range(0..pool.len())];
        let goal = pool[rng.random_range(0..pool.len())];
        if (goal - start).norm() < params.min_length.max(1e-9) {
            continue;
        }
        if interaction_holds(robot_start, robot_goal, start, goal, kind, params) {
            return Ok(EndpointPair { start, goal, interaction: kind });
        }
    }
    Err(Error::SamplingExhausted {
        attempts: params.max_rejections,
        what: format!("{kind:?} human endpoints"),
    })
}

#[derive(Clone, Copy)]
struct Open {
    f: f64,
    h: f64,
    seq: u64,
    idx: usize,
}

impl PartialEq for Open {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}

impl Eq for Open {}

impl Ord for Open {
    fn cmp(&self, o: &Self) -> Ordering {
        // min-heap on (f, h, insertion order)
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

/// 8-connected A* over free cells (edge costs 1 and sqrt 2 cells, no
/// corner cutting). Returns the cell-center path from the cell containing
/// `start` to the one containing `goal`.
pub fn astar_2d(grid: &OccupancyGrid2D, start: Vector2<f64>, goal: Vector2<f64>) -> Result<Vec<Vector2<f64>>> {
    let sc = grid
        .cell_of(start)
        .filter(|&c| grid.is_free_cell(c))
        .ok_or_else(|| Error::InvalidParameter(format!("A* start {start:?} is not in free space")))?;
    let gc = grid
        .cell_of(goal)
        .filter(|&c| grid.is_free_cell(c))
        .ok_or_else(|| Error::InvalidParameter(format!("A* goal {goal:?} is not in free space")))?;
    let cells = astar_cells(grid, sc, gc)?;
    Ok(cells.into_iter().map(|c| grid.cell_center(c)).collect())
}

fn astar_cells(grid: &OccupancyGrid2D, sc: Cell, gc: Cell) -> Result<Vec<Cell>> {
    let res = grid.resolution;
    let goal_center = grid.cell_center(gc);
    let h = |c: Cell| (grid.cell_center(c) - goal_center).norm();
    let n = grid.len();
    let mut g = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let s = grid.index(sc);
    g[s] = 0.0;
    heap.push(Open { f: h(sc), h: h(sc), seq, idx: s });
    let nx = grid.dims[0];
    let target = grid.index(gc);
    while let Some(Open { idx, .. }) = heap.pop() {
        if closed[idx] {
            continue;
        }
        closed[idx] = true;
        if idx == target {
            let mut path = vec![gc];
            let mut k = idx;
            while parent[k] != usize::MAX {
                k = parent[k];
                path.push((k % nx, k / nx));
            }
            path.reverse();
            return Ok(path);
        }
        let c = (idx % nx, idx / nx);
        for (nb, diag) in grid.neighbors8(c) {
            if !grid.step_allowed(c, nb) {
                continue;
            }
            let k = grid.index(nb);
            if closed[k] {
                continue;
            }
            let ng = g[idx] + if diag { std::f64::consts::SQRT_2 * res } else { res };
            if ng < g[k] {
                g[k] = ng;
                parent[k] = idx;
                seq += 1;
                let hk = h(nb);
                heap.push(Open { f: ng + hk, h: hk, seq, idx: k });
            }
        }
    }
    Err(Error::NoPath(format!("goal cell {gc:?} unreachable from {sc:?}")))
}

pub fn path_length(path: &[Vector2<f64>]) -> f64 {
    path.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingParams {
    /// Minimum spacing of the smoothing waypoints (m).
    pub waypoint_spacing: f64,
    pub max_iterations: usize,
    /// Clearance below which the barrier starts pushing (m).
    pub clearance: f64,
    /// Time between trajectory samples (s).
    pub sample_dt: f64,
}

impl Default for SmoothingParams {
    fn default() -> Self {
        Self {
            waypoint_spacing: 0.5,
            max_iterations: 200,
            clearance: 0.3,
            sample_dt: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedPath {
    pub trajectory: HumanTrajectory,
    /// Smoothing failed the collision check and the seed polyline was used.
    pub fallback: bool,
    /// Control points after optimization.
    pub control_points: Vec<Vector2<f64>>,
}

fn downsample(seed: &[Vector2<f64>], spacing: f64) -> Vec<Vector2<f64>> {
    let mut out = vec![seed[0]];
    let end = seed[seed.len() - 1];
    for &p in &seed[1..seed.len() - 1] {
        if (p - out[out.len() - 1]).norm() >= spacing && (end - p).norm() >= spacing {
            out.push(p);
        }
    }
    out.push(end);
    out
}

/// Clamped uniform cubic B-spline basis evaluated at `samples_per_span`
/// parameters per span (endpoints included). Row-major, `m` columns.
fn bspline_basis(m: usize, samples_per_span: usize) -> Vec<Vec<(usize, f64)>> {
    const P: usize = 3;
    let spans = m - P;
    let mut knots = vec![0.0; P + 1];
    knots.extend((1..spans).map(|k| k as f64));
    knots.extend(std::iter::repeat_n(spans as f64, P + 1));
    let total = spans * samples_per_span;
    (0..=total)
        .map(|s| {
            let u = s as f64 / samples_per_span as f64;
            // span index with u in [knots[i], knots[i+1])
            let i = if s == total { m - 1 } else { P + (u.floor() as usize).min(spans - 1) };
            let mut n = [0.0f64; P + 1];
            n[0] = 1.0;
            let mut left = [0.0; P + 1];
            let mut right = [0.0; P + 1];
            for j in 1..=P {
                left[j] = u - knots[i + 1 - j];
                right[j] = knots[i + j] - u;
                let mut saved = 0.0;
                for r in 0..j {
                    let denom = right[r + 1] + left[j - r];
                    let tmp = if denom == 0.0 { 0.0 } else { n[r] / denom };
                    n[r] = saved + right[r + 1] * tmp;
                    saved = left[j - r] * tmp;
                }
                n[j] = saved;
            }
            (0..=P).map(|r| (i - P + r, n[r])).collect()
        })
        .collect()
}

fn bilinear(field: &[f64], grid: &OccupancyGrid2D, p: Vector2<f64>) -> (f64, Vector2<f64>) {
    let [nx, ny] = grid.dims;
    let fx = ((p.x - grid.origin.x) / grid.resolution - 0.5).clamp(0.0, (nx - 1) as f64);
    let fy = ((p.y - grid.origin.y) / grid.resolution - 0.5).clamp(0.0, (ny - 1) as f64);
    let (i0, j0) = (fx.floor() as usize, fy.floor() as usize);
    let (i1, j1) = ((i0 + 1).min(nx - 1), (j0 + 1).min(ny - 1));
    let (tx, ty) = (fx - i0 as f64, fy - j0 as f64);
    let v = |i: usize, j: usize| field[j * nx + i].min(1e3);
    let (a, b, c, d) = (v(i0, j0), v(i1, j0), v(i0, j1), v(i1, j1));
    let val = a * (1.0 - tx) * (1.0 - ty) + b * tx * (1.0 - ty) + c * (1.0 - tx) * ty + d * tx * ty;
    let gx = ((b - a) * (1.0 - ty) + (d - c) * ty) / grid.resolution;
    let gy = ((c - a) * (1.0 - tx) + (d - b) * tx) / grid.resolution;
    (val, Vector2::new(gx, gy))
}

/// Points along `line` whose consecutive Euclidean gaps are exactly `ds`
/// (the final gap to the end point may be shorter).
pub fn resample_equal_chords(line: &[Vector2<f64>], ds: f64) -> Vec<Vector2<f64>> {
    let mut out = vec![line[0]];
    let end = line[line.len() - 1];
    let mut cur = line[0];
    let mut seg = 0;
    // param along segment `seg` where the walk currently is
    let mut s0 = 0.0;
    'walk: while seg + 1 < line.len() {
        let (a, b) = (line[seg], line[seg + 1]);
        let d = b - a;
        let len2 = d.norm_squared();
        if len2 > 0.0 {
            // smallest s >= s0 with |a + s d - cur| = ds
            let f = a - cur;
            let bq = 2.0 * f.dot(&d);
            let cq = f.norm_squared() - ds * ds;
            let disc = bq * bq - 4.0 * len2 * cq;
            if disc >= 0.0 {
                let s = (-bq + disc.sqrt()) / (2.0 * len2);
                if s >= s0 && s <= 1.0 {
                    cur = a + d * s;
                    out.push(cur);
                    s0 = s;
                    continue 'walk;
                }
            }
        }
        seg += 1;
        s0 = 0.0;
    }
    if (end - cur).norm() > 1e-9 {
        out.push(end);
    }
    out
}

/// Smooths a seed path into a constant-speed trajectory.
///
/// Downsampled seed waypoints become the control points of a clamped cubic
/// B-spline; interior control points then descend on squared second
/// differences plus a quadratic barrier on clearance. The result is sampled
/// at chord length `speed * sample_dt`. If any sample is not free the seed
/// polyline is used instead and `fallback` is set.
pub fn smooth_spline(
    seed: &[Vector2<f64>],
    grid: &OccupancyGrid2D,
    speed: f64,
    params: &SmoothingParams,
) -> Result<SmoothedPath> {
    if seed.len() < 2 {
        return Err(Error::InvalidParameter("seed path needs at least 2 points".into()));
    }
    if !(speed > 0.0 && params.sample_dt > 0.0) {
        return Err(Error::InvalidParameter("speed and sample_dt must be > 0".into()));
    }
    let ds = speed * params.sample_dt;
    let mut ctrl = downsample(seed, params.waypoint_spacing);
    while ctrl.len() < 4 {
        // split the longest leg
        let (k, _) = ctrl
            .windows(2)
            .enumerate()
            .map(|(k, w)| (k, (w[1] - w[0]).norm()))
            .fold((0, -1.0), |a, b| if b.1 > a.1 { b } else { a });
        let mid = (ctrl[k] + ctrl[k + 1]) * 0.5;
        ctrl.insert(k + 1, mid);
    }
    let m = ctrl.len();
    let basis = bspline_basis(m, 12);
    let clear = clearance_field(grid);
    let eval = |ctrl: &[Vector2<f64>]| -> Vec<Vector2<f64>> {
        basis
            .iter()
            .map(|row| row.iter().fold(Vector2::zeros(), |acc, &(c, w)| acc + ctrl[c] * w))
            .collect()
    };

    const STEP: f64 = 0.05;
    const BARRIER: f64 = 4.0;
    let margin = params.clearance + 0.5 * grid.resolution;
    for _ in 0..params.max_iterations {
        let mut grad = vec![Vector2::zeros(); m];
        for i in 1..m - 1 {
            let d = ctrl[i - 1] - ctrl[i] * 2.0 + ctrl[i + 1];
            grad[i - 1] += d * 2.0;
            grad[i] -= d * 4.0;
            grad[i + 1] += d * 2.0;
        }
        let curve = eval(&ctrl);
        let mut barrier_active = false;
        for (row, p) in basis.iter().zip(&curve) {
            let (c, g) = bilinear(&clear, grid, *p);
            if c < margin {
                barrier_active = true;
                let gb = g * (-2.0 * BARRIER * (margin - c));
                for &(k, w) in row {
                    grad[k] += gb * w;
                }
            }
        }
        let mut max_move: f64 = 0.0;
        for i in 1..m - 1 {
            let step = grad[i] * STEP;
            max_move = max_move.max(step.norm());
            ctrl[i] -= step;
        }
        if max_move < 1e-7 && !barrier_active {
            break;
        }
    }

    let curve = eval(&ctrl);
    let samples = resample_equal_chords(&curve, ds);
    let curve_ok = curve.iter().all(|&p| grid.is_free(p)) && samples.iter().all(|&p| grid.is_free(p));
    let (points, fallback) = if curve_ok {
        (samples, false)
    } else {
        (resample_equal_chords(seed, ds), true)
    };
    Ok(SmoothedPath {
        trajectory: HumanTrajectory::from_equally_spaced(&points, speed, params.sample_dt)?,
        fallback,
        control_points: ctrl,
    })
}
