//! Human obstacles as rigid Gaussian clusters moved along a planar
//! trajectory. Only the body root moves; limbs are not articulated.

use crate::error::{Error, Result};
use crate::geometry::{angle_diff, planar_pose, wrap_angle, Pose3};
use crate::splat::{read_ply, transform_primitives, write_ply, GaussianPrimitive, ShMode};
use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

/// Canonical human body: origin on the ground between the feet, facing +x.
#[derive(Debug, Clone, PartialEq)]
pub struct HumanModel {
    pub canonical_prims: Vec<GaussianPrimitive>,
    pub height: f64,
    pub radius: f64,
}

const SKIN: [f64; 3] = [0.85, 0.66, 0.53];
const SHIRT: [f64; 3] = [0.70, 0.18, 0.16];
const PANTS: [f64; 3] = [0.16, 0.20, 0.38];

/// Procedural body: `count` isotropic Gaussians on a capsule surface
/// (cylinder plus hemispherical cap), sigma `radius / 4`, opacity 0.95.
/// Everything above `0.85 * height` is skin colored.
pub fn make_human_model(height: f64, radius: f64, count: usize, seed: u64) -> Result<HumanModel> {
    if !(height > 0.0 && radius > 0.0) || 2.0 * radius > height {
        return Err(Error::InvalidParameter(format!(
            "human height {height} and radius {radius} must be positive with 2*radius <= height"
        )));
    }
    if count < 10 {
        return Err(Error::InvalidParameter(format!("human primitive count {count} < 10")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // keep means on the closed cylinder despite rounding
    let r = radius * (1.0 - 1e-9);
    let body_top = height - radius;
    let p_cap = radius / height;
    let sigma = radius / 4.0;
    let prims = (0..count)
        .map(|_| {
            let phi = rng.random_range(0.0..2.0 * PI);
            let mean = if rng.random::<f64>() < p_cap {
                // uniform on the upper hemisphere: cos of polar angle is uniform
                let c: f64 = rng.random_range(0.0..1.0);
                let s = (1.0 - c * c).sqrt();
                Vector3::new(r * s * phi.cos(), r * s * phi.sin(), body_top + r * c)
            } else {
                Vector3::new(r * phi.cos(), r * phi.sin(), rng.random_range(0.0..body_top))
            };
            let base = if mean.z > 0.85 * height {
                SKIN
            } else if mean.z > 0.5 * height {
                SHIRT
            } else {
                PANTS
            };
            let jitter = rng.random_range(-0.04..0.04);
            GaussianPrimitive::isotropic(
                mean,
                sigma,
                0.95,
                Vector3::from(base).map(|c| (c + jitter).clamp(0.0, 1.0)),
            )
        })
        .collect();
    Ok(HumanModel {
        canonical_prims: prims,
        height,
        radius,
    })
}

pub fn save_human_model(model: &HumanModel, path: impl AsRef<Path>) -> Result<()> {
    write_ply(path, &model.canonical_prims)
}

/// Loads an externally built body in the canonical frame. Height and radius
/// are the bounds of the primitive means.
pub fn load_human_model(path: impl AsRef<Path>) -> Result<HumanModel> {
    let prims = read_ply(path, ShMode::DcOnly)?;
    let height = prims.iter().map(|p| p.mean.z).fold(0.0, f64::max);
    let radius = prims.iter().map(|p| p.mean.xy().norm()).fold(0.0, f64::max);
    if !(height > 0.0 && radius > 0.0) {
        return Err(Error::Format("human model has degenerate extent".into()));
    }
    Ok(HumanModel {
        canonical_prims: prims,
        height,
        radius,
    })
}

/// One timed root sample; serialized as `[t, x, y, heading]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct TrajSample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl From<[f64; 4]> for TrajSample {
    fn from(a: [f64; 4]) -> Self {
        Self {
            t: a[0],
            x: a[1],
            y: a[2],
            heading: a[3],
        }
    }
}

impl From<TrajSample> for [f64; 4] {
    fn from(s: TrajSample) -> Self {
        [s.t, s.x, s.y, s.heading]
    }
}

impl TrajSample {
    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanTrajectory {
    pub samples: Vec<TrajSample>,
    /// Constant walking speed (m/s).
    pub speed: f64,
}

impl HumanTrajectory {
    pub fn new(samples: Vec<TrajSample>, speed: f64) -> Result<Self> {
        let traj = Self { samples, speed };
        traj.check_timing()?;
        Ok(traj)
    }

    /// Builds a trajectory from points spaced `speed * dt` apart; sample `k`
    /// gets `t = k * dt` except the last, whose gap may be shorter. Headings
    /// follow the central-difference tangent.
    pub fn from_equally_spaced(points: &[Vector2<f64>], speed: f64, dt: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("trajectory needs at least one point".into()));
        }
        if !(speed > 0.0 && dt > 0.0) {
            return Err(Error::InvalidParameter(format!("speed {speed} and dt {dt} must be > 0")));
        }
        let n = points.len();
        let mut samples = Vec::with_capacity(n);
        for k in 0..n {
            let t = if k + 1 < n || k == 0 {
                k as f64 * dt
            } else {
                let gap = (points[k] - points[k - 1]).norm();
                if (gap - speed * dt).abs() < 1e-9 {
                    k as f64 * dt
                } else {
                    (k - 1) as f64 * dt + gap / speed
                }
            };
            let tangent = if n == 1 {
                Vector2::x()
            } else if k == 0 {
                points[1] - points[0]
            } else if k == n - 1 {
                points[n - 1] - points[n - 2]
            } else {
                points[k + 1] - points[k - 1]
            };
            samples.push(TrajSample {
                t,
                x: points[k].x,
                y: points[k].y,
                heading: tangent.y.atan2(tangent.x),
            });
        }
        Self::new(samples, speed)
    }

    fn check_timing(&self) -> Result<()> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::EmptyInput("empty human trajectory".into()))?;
        if first.t != 0.0 {
            return Err(Error::InvalidParameter("trajectory must start at t = 0".into()));
        }
        if self.samples.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(Error::InvalidParameter("trajectory times must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.t)
    }

    pub fn start(&self) -> Vector2<f64> {
        self.samples[0].position()
    }

    pub fn end(&self) -> Vector2<f64> {
        self.samples[self.samples.len() - 1].position()
    }

    /// Root position and heading at `t`, held at the ends outside
    /// `[0, duration]`.
    pub fn state_at(&self, t: f64) -> (Vector2<f64>, f64) {
        let s = &self.samples;
        if t <= 0.0 || s.len() == 1 {
            return (s[0].position(), s[0].heading);
        }
        if t >= self.duration() {
            let l = s[s.len() - 1];
            return (l.position(), l.heading);
        }
        let i = s.partition_point(|p| p.t <= t) - 1;
        let (a, b) = (s[i], s[i + 1]);
        let alpha = (t - a.t) / (b.t - a.t);
        let p = a.position() + (b.position() - a.position()) * alpha;
        (p, wrap_angle(a.heading + alpha * angle_diff(a.heading, b.heading)))
    }
}

fn yaw_of(pose: &Pose3) -> f64 {
    pose.rotation.euler_angles().2
}

/// One root pose per frame `k * frame_dt` for all frames within the
/// trajectory duration.
pub fn trajectory_to_root_motion(traj: &HumanTrajectory, frame_dt: f64) -> Result<Vec<Pose3>> {
    if traj.samples.is_empty() {
        return Err(Error::EmptyInput("empty human trajectory".into()));
    }
    if !(frame_dt > 0.0) {
        return Err(Error::InvalidParameter(format!("frame_dt {frame_dt} must be > 0")));
    }
    let frames = (traj.duration() / frame_dt + 1e-9).floor() as usize + 1;
    Ok((0..frames)
        .map(|k| {
            let (p, h) = traj.state_at(k as f64 * frame_dt);
            planar_pose(p.x, p.y, 0.0, h)
        })
        .collect())
}

/// Root pose at time `t`, interpolated between the surrounding frames
/// (linear translation, shortest-arc yaw).
pub fn root_pose_at(motion: &[Pose3], t: f64, frame_dt: f64) -> Result<Pose3> {
    if motion.is_empty() {
        return Err(Error::EmptyInput("empty root motion".into()));
    }
    let t_end = (motion.len() - 1) as f64 * frame_dt;
    if !(t >= 0.0 && t <= t_end + 1e-9) {
        return Err(Error::OutOfRange(format!("t = {t} outside [0, {t_end}]")));
    }
    let k = ((t / frame_dt).floor() as usize).min(motion.len() - 1);
    let alpha = t / frame_dt - k as f64;
    if k + 1 == motion.len() || alpha <= 0.0 {
        return Ok(motion[k]);
    }
    let (a, b) = (&motion[k], &motion[k + 1]);
    let pa = a.translation.vector;
    let pb = b.translation.vector;
    let p = pa + (pb - pa) * alpha;
    let ya = yaw_of(a);
    let yaw = ya + alpha * angle_diff(ya, yaw_of(b));
    Ok(Pose3::from_parts(
        p.into(),
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
    ))
}

/// World-frame primitives of the human at time `t`.
pub fn human_prims_at(model: &HumanModel, motion: &[Pose3], t: f64, frame_dt: f64) -> Result<Vec<GaussianPrimitive>> {
    let pose = root_pose_at(motion, t, frame_dt)?;
    Ok(transform_primitives(&model.canonical_prims, &pose))
}

/// A human placed in a scene: body model, planned trajectory and the root
/// motion sampled from it. Before the start and after the end of the
/// trajectory the human stands still.
#[derive(Debug, Clone, PartialEq)]
pub struct HumanActor {
    pub model: HumanModel,
    pub trajectory: HumanTrajectory,
    pub motion: Vec<Pose3>,
    pub frame_dt: f64,
    pub ground_z: f64,
}

impl HumanActor {
    pub fn new(model: HumanModel, trajectory: HumanTrajectory, frame_dt: f64, ground_z: f64) -> Result<Self> {
        let motion = trajectory_to_root_motion(&trajectory, frame_dt)?;
        Ok(Self {
            model,
            trajectory,
            motion,
            frame_dt,
            ground_z,
        })
    }

    fn clamp_t(&self, t: f64) -> f64 {
        t.clamp(0.0, (self.motion.len() - 1) as f64 * self.frame_dt)
    }

    pub fn root_pose(&self, t: f64) -> Pose3 {
        let mut pose = root_pose_at(&self.motion, self.clamp_t(t), self.frame_dt).expect("t clamped into range");
        pose.translation.vector.z += self.ground_z;
        pose
    }

    pub fn position(&self, t: f64) -> Vector2<f64> {
        let p = self.root_pose(t).translation.vector;
        Vector2::new(p.x, p.y)
    }

    /// World-frame primitives at time `t`.
    pub fn prims_at(&self, t: f64) -> Vec<GaussianPrimitive> {
        transform_primitives(&self.model.canonical_prims, &self.root_pose(t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight(speed: f64, dt: f64, n: usize) -> HumanTrajectory {
        let pts: Vec<_> = (0..n).map(|k| Vector2::new(k as f64 * speed * dt, 0.0)).collect();
        HumanTrajectory::from_equally_spaced(&pts, speed, dt).unwrap()
    }

    #[test]
    fn model_is_deterministic_and_contained() {
        let a = make_human_model(1.8, 0.3, 200, 7).unwrap();
        let b = make_human_model(1.8, 0.3, 200, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.canonical_prims.len(), 200);
        for p in &a.canonical_prims {
            assert!(p.mean.x * p.mean.x + p.mean.y * p.mean.y <= 0.3 * 0.3);
            assert!(p.mean.z >= 0.0 && p.mean.z <= 1.8);
            assert!((p.covariance().trace() - 3.0 * (0.3f64 / 4.0).powi(2)).abs() < 1e-12);
            assert_eq!(p.opacity, 0.95);
        }
        let c = make_human_model(1.8, 0.3, 200, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn head_band_is_skin() {
        let m = make_human_model(1.8, 0.3, 400, 1).unwrap();
        let heads: Vec<_> = m.canonical_prims.iter().filter(|p| p.mean.z > 0.85 * 1.8).collect();
        assert!(!heads.is_empty());
        for p in heads {
            assert!((p.color.x - SKIN[0]).abs() <= 0.04 + 1e-12);
        }
    }

    #[test]
    fn model_errors() {
        assert!(make_human_model(0.0, 0.3, 100, 1).is_err());
        assert!(make_human_model(1.8, -0.3, 100, 1).is_err());
        assert!(make_human_model(1.8, 0.3, 9, 1).is_err());
    }

    #[test]
    fn straight_root_motion() {
        let traj = straight(1.0, 0.1, 21); // 2 s along +x
        let motion = trajectory_to_root_motion(&traj, 0.5).unwrap();
        assert_eq!(motion.len(), 5);
        for (k, m) in motion.iter().enumerate() {
            let t = m.translation.vector;
            assert!((t - Vector3::new(0.5 * k as f64, 0.0, 0.0)).norm() < 1e-12);
            assert!(yaw_of(m).abs() < 1e-12);
        }
        assert_eq!(motion[0].translation.vector, Vector3::zeros());
    }

    #[test]
    fn prims_at_zero_are_start_pose() {
        let model = make_human_model(1.8, 0.3, 50, 2).unwrap();
        let traj = straight(1.2, 0.1, 30);
        let motion = trajectory_to_root_motion(&traj, 0.1).unwrap();
        let a = human_prims_at(&model, &motion, 0.0, 0.1).unwrap();
        assert_eq!(a, transform_primitives(&model.canonical_prims, &motion[0]));
        assert!(human_prims_at(&model, &motion, -0.1, 0.1).is_err());
        assert!(human_prims_at(&model, &motion, 100.0, 0.1).is_err());
    }

    #[test]
    fn constant_speed_displacement() {
        let model = make_human_model(1.8, 0.3, 50, 2).unwrap();
        let speed = 1.3;
        let traj = straight(speed, 0.1, 40);
        let motion = trajectory_to_root_motion(&traj, 0.1).unwrap();
        for t in [0.0, 0.37, 1.21, 2.5] {
            let a = root_pose_at(&motion, t, 0.1).unwrap().translation.vector;
            let b = root_pose_at(&motion, t + 0.1, 0.1).unwrap().translation.vector;
            assert!(((b - a).norm() - speed * 0.1).abs() < 1e-6);
            // footprint stays inside the body disk
            let prims = human_prims_at(&model, &motion, t, 0.1).unwrap();
            for p in prims {
                assert!((p.mean.xy() - a.xy()).norm() <= model.radius + 1e-6);
            }
        }
    }

    #[test]
    fn root_reproduces_samples() {
        let traj = straight(0.9, 0.1, 25);
        let motion = trajectory_to_root_motion(&traj, 0.1).unwrap();
        for (k, s) in traj.samples.iter().enumerate().take(motion.len()) {
            let p = motion[k].translation.vector;
            assert_eq!((p.x, p.y), (s.x, s.y));
        }
    }

    #[test]
    fn trajectory_json_is_array_of_quads() {
        let traj = straight(1.0, 0.5, 3);
        let v = serde_json::to_value(&traj.samples).unwrap();
        assert_eq!(v, serde_json::json!([[0.0, 0.0, 0.0, 0.0], [0.5, 0.5, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0]]));
    }

    #[test]
    fn bad_trajectories() {
        assert!(HumanTrajectory::new(vec![], 1.0).is_err());
        let s = |t| TrajSample { t, x: 0.0, y: 0.0, heading: 0.0 };
        assert!(HumanTrajectory::new(vec![s(0.1), s(0.2)], 1.0).is_err());
        assert!(HumanTrajectory::new(vec![s(0.0), s(0.0)], 1.0).is_err());
    }
}
