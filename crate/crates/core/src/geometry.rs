//! Small planar helpers shared by the planners and the simulator.

use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector2, Vector3};
use std::f64::consts::PI;

/// Rigid transform in 3D (rotation + translation).
pub type Pose3 = Isometry3<f64>;

/// Tolerance used when comparing distances against radii on grids.
pub const GEOM_EPS: f64 = 1e-9;

/// Wraps an angle to `(-pi, pi]`. Angles already in range are returned
/// unchanged, and `wrap_angle(-a) == -wrap_angle(a)` away from +-pi.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut r = a.abs().rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    let r = if a < 0.0 { -r } else { r };
    if r <= -PI {
        r + 2.0 * PI
    } else {
        r
    }
}

/// Signed shortest angular difference `b - a` in `(-pi, pi]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(b - a)
}

/// Exact unicycle integration of constant `(v, w)` over `dt` starting at
/// `(x, y, theta)`. Returns the end pose with theta wrapped.
pub fn integrate_unicycle(x: f64, y: f64, theta: f64, v: f64, w: f64, dt: f64) -> (f64, f64, f64) {
    if w.abs() < 1e-12 {
        (
            x + v * dt * theta.cos(),
            y + v * dt * theta.sin(),
            wrap_angle(theta),
        )
    } else {
        let th1 = theta + w * dt;
        let r = v / w;
        (
            x + r * (th1.sin() - theta.sin()),
            y - r * (th1.cos() - theta.cos()),
            wrap_angle(th1),
        )
    }
}

/// Planar yaw-plus-translation pose lifted to SE(3).
pub fn planar_pose(x: f64, y: f64, z: f64, yaw: f64) -> Pose3 {
    Isometry3::from_parts(
        Translation3::new(x, y, z),
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
    )
}

/// Distance from `p` to the closed segment `[a, b]`.
pub fn point_segment_distance(p: Vector2<f64>, a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Minimum distance from `p` to a polyline. A single-vertex polyline is a
/// point; an empty one is infinitely far away.
pub fn point_polyline_distance(p: Vector2<f64>, line: &[Vector2<f64>]) -> f64 {
    match line.len() {
        0 => f64::INFINITY,
        1 => (p - line[0]).norm(),
        _ => line
            .windows(2)
            .map(|w| point_segment_distance(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min),
    }
}

fn orient(a: Vector2<f64>, b: Vector2<f64>, c: Vector2<f64>) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

/// True when the open segments `(p1, p2)` and `(q1, q2)` cross at a single
/// interior point (touching or collinear overlap does not count).
pub fn segments_cross_strictly(
    p1: Vector2<f64>,
    p2: Vector2<f64>,
    q1: Vector2<f64>,
    q2: Vector2<f64>,
) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

/// Minimum distance between the closed segments `[a, b]` and `[c, d]`.
pub fn segment_segment_distance(a: Vector2<f64>, b: Vector2<f64>, c: Vector2<f64>, d: Vector2<f64>) -> f64 {
    if segments_cross_strictly(a, b, c, d) {
        return 0.0;
    }
    point_segment_distance(a, c, d)
        .min(point_segment_distance(b, c, d))
        .min(point_segment_distance(c, a, b))
        .min(point_segment_distance(d, a, b))
}

/// Minimum distance from the segment `[a, b]` to a polyline.
pub fn segment_polyline_distance(a: Vector2<f64>, b: Vector2<f64>, line: &[Vector2<f64>]) -> f64 {
    match line.len() {
        0 => f64::INFINITY,
        1 => point_segment_distance(line[0], a, b),
        _ => line
            .windows(2)
            .map(|w| segment_segment_distance(a, b, w[0], w[1]))
            .fold(f64::INFINITY, f64::min),
    }
}
