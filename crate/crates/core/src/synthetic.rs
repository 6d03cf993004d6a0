//! Procedural test scene: box-like Gaussian clusters and a few tables on a
//! flat splatted floor, plus faint floaters that opacity filtering must
//! ignore.

use crate::error::Result;
use crate::splat::{GaussianPrimitive, SplatScene};
use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticParams {
    /// Side of the square floor (m).
    pub size: f64,
    pub boxes: usize,
    pub tables: usize,
    pub floaters: usize,
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            size: 12.0,
            boxes: 20,
            tables: 3,
            floaters: 200,
            seed: 0,
        }
    }
}

const SURFACE_SPACING: f64 = 0.08;

fn surfel(center: Vector3<f64>, rot: UnitQuaternion<f64>, tangent: f64, normal: f64, color: Vector3<f64>) -> GaussianPrimitive {
    GaussianPrimitive {
        mean: center,
        rotation: rot,
        scale: Vector3::new(tangent, tangent, normal),
        opacity: 0.9,
        color,
    }
}

/// Covers the faces of an oriented box (all but the bottom) with flat
/// Gaussians whose third axis is the face normal.
fn splat_box(out: &mut Vec<GaussianPrimitive>, center: Vector3<f64>, half: Vector3<f64>, yaw: f64, color: Vector3<f64>, rng: &mut ChaCha8Rng) {
    let body = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw);
    // (normal axis, sign) for the 4 side faces and the top
    let faces = [(0usize, 1.0), (0, -1.0), (1, 1.0), (1, -1.0), (2, 1.0)];
    for (axis, sign) in faces {
        let (u, v) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let nu = ((2.0 * half[u] / SURFACE_SPACING).ceil() as usize).max(1);
        let nv = ((2.0 * half[v] / SURFACE_SPACING).ceil() as usize).max(1);
        // rotate local z onto the face normal
        let mut normal = Vector3::zeros();
        normal[axis] = sign;
        let face_rot = body * UnitQuaternion::rotation_between(&Vector3::z(), &normal).unwrap_or_else(|| {
            UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI)
        });
        for a in 0..=nu {
            for b in 0..=nv {
                let mut local = Vector3::zeros();
                local[axis] = sign * half[axis];
                local[u] = -half[u] + 2.0 * half[u] * a as f64 / nu as f64;
                local[v] = -half[v] + 2.0 * half[v] * b as f64 / nv as f64;
                let shade = 1.0 + rng.random_range(-0.06..0.06);
                let c = (color * shade).map(|x| x.clamp(0.0, 1.0));
                out.push(surfel(center + body * local, face_rot, 0.06, 0.01, c));
            }
        }
    }
}

/// Deterministic synthetic scene with the ground at z = 0.
pub fn make_synthetic_scene(params: &SyntheticParams) -> Result<SplatScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut prims = Vec::new();
    let s = params.size;

    // floor slightly below z = 0 so it never reaches the obstacle bands
    let floor_step = 0.2;
    let n = (s / floor_step).round() as usize;
    for i in 0..n {
        for j in 0..n {
            let shade = rng.random_range(0.9..1.1);
            let checker = if (i / 5 + j / 5) % 2 == 0 { 1.0 } else { 0.85 };
            prims.push(GaussianPrimitive {
                mean: Vector3::new((i as f64 + 0.5) * floor_step, (j as f64 + 0.5) * floor_step, -0.02),
                rotation: UnitQuaternion::identity(),
                scale: Vector3::new(0.15, 0.15, 0.005),
                opacity: 0.95,
                color: Vector3::new(0.55, 0.52, 0.47) * shade * checker,
            });
        }
    }

    for _ in 0..params.boxes {
        let half = Vector3::new(rng.random_range(0.2..0.75), rng.random_range(0.2..0.75), rng.random_range(0.3..1.0));
        let center = Vector3::new(rng.random_range(0.8..s - 0.8), rng.random_range(0.8..s - 0.8), half.z);
        let yaw = rng.random_range(0.0..std::f64::consts::PI);
        let color = Vector3::new(rng.random_range(0.2..0.9), rng.random_range(0.2..0.9), rng.random_range(0.2..0.9));
        splat_box(&mut prims, center, half, yaw, color, &mut rng);
    }

    // tables: a slab the robot passes under but a human does not
    for _ in 0..params.tables {
        let (hx, hy) = (rng.random_range(0.4..0.7), rng.random_range(0.4..0.7));
        let top = 0.78;
        let center = Vector3::new(rng.random_range(1.0..s - 1.0), rng.random_range(1.0..s - 1.0), top);
        let yaw = rng.random_range(0.0..std::f64::consts::PI);
        let wood = Vector3::new(0.45, 0.3, 0.18);
        splat_box(&mut prims, center, Vector3::new(hx, hy, 0.03), yaw, wood, &mut rng);
        let body = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw);
        for (sx, sy) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
            let foot = center + body * Vector3::new(sx * (hx - 0.05), sy * (hy - 0.05), 0.0);
            splat_box(&mut prims, Vector3::new(foot.x, foot.y, top / 2.0), Vector3::new(0.03, 0.03, top / 2.0), yaw, wood, &mut rng);
        }
    }

    // faint floaters never sum past the occupancy threshold alone
    for _ in 0..params.floaters {
        let mean = Vector3::new(rng.random_range(0.0..s), rng.random_range(0.0..s), rng.random_range(0.1..0.45));
        prims.push(GaussianPrimitive::isotropic(mean, rng.random_range(0.02..0.06), 0.05, Vector3::new(0.8, 0.8, 0.8)));
    }

    SplatScene::new(prims, 0.0, "synthetic")
}
