//! Opacity-filtered voxelization of a splat scene and its projection into
//! 2D occupancy maps.
//!
//! A primitive contributes its full opacity to every voxel whose closed box
//! intersects its 1-sigma ellipsoid; a voxel is occupied when the summed
//! opacity exceeds the threshold. Low-opacity floaters near the floor are
//! filtered out this way without touching the splats themselves.

use crate::error::{Error, Result};
use crate::grid::{MapKind, OccupancyGrid2D};
use crate::splat::{GaussianPrimitive, SplatScene};
use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use std::path::Path;

pub use crate::grid::inflate;

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub origin: Vector3<f64>,
    pub resolution: f64,
    pub dims: [usize; 3],
    pub opacity_sum: Vec<f64>,
    pub occupied: Vec<bool>,
    pub opacity_threshold: f64,
}

impl VoxelGrid {
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn voxel_min(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + Vector3::new(i as f64, j as f64, k as f64) * self.resolution
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.voxel_min(i, j, k) + Vector3::repeat(0.5 * self.resolution)
    }

    pub fn layer_center_z(&self, k: usize) -> f64 {
        self.origin.z + (k as f64 + 0.5) * self.resolution
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }

    /// Dumps one PGM per z-layer into `dir` (`slice_<k>.pgm`, occupied black).
    pub fn write_pgm_slices(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
        for k in 0..self.dims[2] {
            let mask: Vec<bool> = (0..self.dims[0] * self.dims[1])
                .map(|c| self.occupied[c + k * self.dims[0] * self.dims[1]])
                .collect();
            let slice = OccupancyGrid2D::from_occupied(
                self.origin.xy(),
                self.resolution,
                [self.dims[0], self.dims[1]],
                mask,
                MapKind::RobotNavigable,
            )?;
            slice.write_pgm(dir.join(format!("slice_{k:03}.pgm")))?;
        }
        Ok(())
    }
}

/// Minimum of `(x - mu)^T A (x - mu)` over the closed box `[lo, hi]`.
///
/// The minimizer sits in the relative interior of one of the 27 faces of the
/// box (each coordinate free or pinned to a bound). Every candidate is
/// solved exactly and the best feasible one is returned.
pub fn box_quadratic_min(a: &Matrix3<f64>, mu: &Vector3<f64>, lo: &Vector3<f64>, hi: &Vector3<f64>) -> f64 {
    if (0..3).all(|d| mu[d] >= lo[d] && mu[d] <= hi[d]) {
        return 0.0;
    }
    let eval = |x: &Vector3<f64>| {
        let d = x - mu;
        d.dot(&(a * d))
    };
    let mut best = f64::INFINITY;
    // state per axis: 0 free, 1 at lo, 2 at hi
    for code in 0..27usize {
        let st = [code % 3, (code / 3) % 3, code / 9];
        let mut x = *mu;
        let mut free = [0usize; 3];
        let mut nf = 0;
        for d in 0..3 {
            match st[d] {
                0 => {
                    free[nf] = d;
                    nf += 1;
                }
                1 => x[d] = lo[d],
                _ => x[d] = hi[d],
            }
        }
        if nf == 3 {
            continue; // mu outside the box, interior stationary point infeasible
        }
        // A_FF (x_F - mu_F) = -A_FC (x_C - mu_C)
        let dx = x - mu;
        let ok = match nf {
            0 => true,
            1 => {
                let f = free[0];
                let rhs: f64 = (0..3).filter(|&c| c != f).map(|c| a[(f, c)] * dx[c]).sum();
                x[f] = mu[f] - rhs / a[(f, f)];
                x[f] >= lo[f] && x[f] <= hi[f]
            }
            _ => {
                let (f0, f1) = (free[0], free[1]);
                let c = 3 - f0 - f1;
                let (a00, a01, a11) = (a[(f0, f0)], a[(f0, f1)], a[(f1, f1)]);
                let r0 = -a[(f0, c)] * dx[c];
                let r1 = -a[(f1, c)] * dx[c];
                let det = a00 * a11 - a01 * a01;
                let y0 = (r0 * a11 - a01 * r1) / det;
                let y1 = (a00 * r1 - a01 * r0) / det;
                x[f0] = mu[f0] + y0;
                x[f1] = mu[f1] + y1;
                x[f0] >= lo[f0] && x[f0] <= hi[f0] && x[f1] >= lo[f1] && x[f1] <= hi[f1]
            }
        };
        if ok {
            best = best.min(eval(&x));
        }
    }
    best
}

struct Prepared {
    precision: Matrix3<f64>,
    mean: Vector3<f64>,
    lo: [usize; 3],
    hi: [usize; 3],
    opacity: f64,
}

/// Voxelizes a scene. The grid covers the union of the ellipsoid boxes,
/// centered on it and padded by at least one voxel per side.
pub fn voxelize(scene: &SplatScene, resolution: f64, opacity_threshold: f64) -> Result<VoxelGrid> {
    voxelize_primitives(&scene.primitives, resolution, opacity_threshold)
}

pub fn voxelize_primitives(prims: &[GaussianPrimitive], resolution: f64, opacity_threshold: f64) -> Result<VoxelGrid> {
    if prims.is_empty() {
        return Err(Error::EmptyScene);
    }
    if !(resolution > 0.0) {
        return Err(Error::InvalidParameter(format!("resolution {resolution} must be > 0")));
    }
    if !(opacity_threshold >= 0.0) {
        return Err(Error::InvalidParameter(format!("opacity threshold {opacity_threshold} must be >= 0")));
    }
    let mut bmin = Vector3::repeat(f64::INFINITY);
    let mut bmax = Vector3::repeat(f64::NEG_INFINITY);
    let halves: Vec<Vector3<f64>> = prims.iter().map(|p| p.aabb_half_extent()).collect();
    for (p, h) in prims.iter().zip(&halves) {
        bmin = bmin.inf(&(p.mean - h));
        bmax = bmax.sup(&(p.mean + h));
    }
    // centered on the bounds, at least one voxel of padding per side
    let extent = bmax - bmin;
    let counts = extent.map(|e| (e / resolution).ceil().max(1.0) + 2.0);
    let origin = (bmin + bmax) * 0.5 - counts * (0.5 * resolution);
    let dims = [counts.x as usize, counts.y as usize, counts.z as usize];
    let n = dims[0] * dims[1] * dims[2];

    let prepared: Vec<Prepared> = prims
        .iter()
        .zip(&halves)
        .map(|(p, h)| {
            let to_idx = |v: f64, d: usize| {
                let f = ((v - origin[d]) / resolution).floor();
                (f.max(0.0) as usize).min(dims[d] - 1)
            };
            let a = p.mean - h;
            let b = p.mean + h;
            Prepared {
                precision: p.precision(),
                mean: p.mean,
                lo: [to_idx(a.x, 0), to_idx(a.y, 1), to_idx(a.z, 2)],
                hi: [to_idx(b.x, 0), to_idx(b.y, 1), to_idx(b.z, 2)],
                opacity: p.opacity,
            }
        })
        .collect();

    // per-layer primitive lists keep the accumulation order equal to the
    // primitive order, so the parallel result is bitwise the sequential one
    let mut by_layer: Vec<Vec<u32>> = vec![Vec::new(); dims[2]];
    for (idx, p) in prepared.iter().enumerate() {
        for layer in &mut by_layer[p.lo[2]..=p.hi[2]] {
            layer.push(idx as u32);
        }
    }

    let layer_len = dims[0] * dims[1];
    let mut opacity_sum = vec![0.0f64; n];
    opacity_sum
        .par_chunks_mut(layer_len)
        .enumerate()
        .for_each(|(k, slab)| {
            for &pi in &by_layer[k] {
                let p = &prepared[pi as usize];
                for j in p.lo[1]..=p.hi[1] {
                    for i in p.lo[0]..=p.hi[0] {
                        let vmin = origin + Vector3::new(i as f64, j as f64, k as f64) * resolution;
                        let vmax = vmin + Vector3::repeat(resolution);
                        if box_quadratic_min(&p.precision, &p.mean, &vmin, &vmax) <= 1.0 {
                            slab[i + dims[0] * j] += p.opacity;
                        }
                    }
                }
            }
        });
    let occupied = opacity_sum.iter().map(|&s| s > opacity_threshold).collect();
    Ok(VoxelGrid {
        origin,
        resolution,
        dims,
        opacity_sum,
        occupied,
        opacity_threshold,
    })
}

/// Collapses voxel columns whose center height lies in `[z_min, z_max]`.
pub fn project_occupancy(grid: &VoxelGrid, z_min: f64, z_max: f64, kind: MapKind) -> Result<OccupancyGrid2D> {
    if !(z_min < z_max) {
        return Err(Error::InvalidParameter(format!("height range [{z_min}, {z_max}] is empty")));
    }
    let layers: Vec<usize> = (0..grid.dims[2])
        .filter(|&k| {
            let z = grid.layer_center_z(k);
            z >= z_min && z <= z_max
        })
        .collect();
    if layers.is_empty() {
        return Err(Error::OutOfRange(format!(
            "height range [{z_min}, {z_max}] contains no voxel layer"
        )));
    }
    let (nx, ny) = (grid.dims[0], grid.dims[1]);
    let mut occ = vec![false; nx * ny];
    for &k in &layers {
        for (c, o) in occ.iter_mut().enumerate() {
            *o |= grid.occupied[c + k * nx * ny];
        }
    }
    OccupancyGrid2D::from_occupied(
        Vector2::new(grid.origin.x, grid.origin.y),
        grid.resolution,
        [nx, ny],
        occ,
        kind,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one(opacity: f64) -> Vec<GaussianPrimitive> {
        vec![GaussianPrimitive::isotropic(Vector3::zeros(), 0.1, opacity, Vector3::repeat(0.5))]
    }

    #[test]
    fn small_gaussian_fills_one_voxel() {
        let g = voxelize_primitives(&one(0.9), 0.5, 0.1).unwrap();
        assert_eq!(g.occupied_count(), 1);
        let k = g.occupied.iter().position(|&o| o).unwrap();
        let (i, j, l) = (k % g.dims[0], (k / g.dims[0]) % g.dims[1], k / (g.dims[0] * g.dims[1]));
        let lo = g.voxel_min(i, j, l);
        assert!(lo.iter().all(|&v| v <= 0.0) && (lo + Vector3::repeat(0.5)).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn below_threshold_is_free() {
        let g = voxelize_primitives(&one(0.05), 0.5, 0.1).unwrap();
        assert_eq!(g.occupied_count(), 0);
    }

    #[test]
    fn errors() {
        assert!(matches!(voxelize_primitives(&[], 0.1, 0.1), Err(Error::EmptyScene)));
        assert!(voxelize_primitives(&one(0.5), 0.0, 0.1).is_err());
        assert!(voxelize_primitives(&one(0.5), -1.0, 0.1).is_err());
    }

    #[test]
    fn storage_matches_dims() {
        let g = voxelize_primitives(&one(0.9), 0.05, 0.1).unwrap();
        assert_eq!(g.opacity_sum.len(), g.dims.iter().product::<usize>());
        assert_eq!(g.occupied.len(), g.len());
        // every occupied voxel exceeds the threshold
        for (o, s) in g.occupied.iter().zip(&g.opacity_sum) {
            assert!(!*o || *s > g.opacity_threshold);
        }
    }

    #[test]
    fn box_min_matches_dense_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let p = GaussianPrimitive {
                mean: Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                rotation: UnitQuaternion::from_euler_angles(rng.random(), rng.random(), rng.random::<f64>() * 3.0),
                scale: Vector3::new(rng.random_range(0.05..0.6), rng.random_range(0.05..0.6), rng.random_range(0.02..0.3)),
                opacity: 1.0,
                color: Vector3::zeros(),
            };
            let lo = Vector3::new(rng.random_range(-0.5..0.3), rng.random_range(-0.5..0.3), rng.random_range(-0.5..0.3));
            let hi = lo + Vector3::repeat(0.25);
            let a = p.precision();
            let exact = box_quadratic_min(&a, &p.mean, &lo, &hi);
            let mut dense = f64::INFINITY;
            let n = 40;
            for i in 0..=n {
                for j in 0..=n {
                    for k in 0..=n {
                        let x = lo + Vector3::new(i as f64, j as f64, k as f64) * (0.25 / n as f64);
                        let d = x - p.mean;
                        dense = dense.min(d.dot(&(a * d)));
                    }
                }
            }
            assert!(exact <= dense + 1e-9, "exact {exact} dense {dense}");
            assert!(exact >= dense - 0.15 * dense.max(1.0), "exact {exact} dense {dense}");
        }
    }

    fn column_grid() -> VoxelGrid {
        // 3x3 columns, 20 layers of 0.1 m starting at z = 0
        let dims = [3, 3, 20];
        let n = 180;
        VoxelGrid {
            origin: Vector3::zeros(),
            resolution: 0.1,
            dims,
            opacity_sum: vec![0.0; n],
            occupied: vec![false; n],
            opacity_threshold: 1.0,
        }
    }

    #[test]
    fn projection_height_band() {
        let mut g = column_grid();
        let k = g.index(1, 1, 3); // center z = 0.35
        g.occupied[k] = true;
        let m = project_occupancy(&g, 0.1, 1.0, MapKind::RobotNavigable).unwrap();
        assert!(m.occupied[m.index((1, 1))]);
        assert_eq!(m.occupied.iter().filter(|&&o| o).count(), 1);
        assert_eq!(m.inflated, m.occupied);

        let mut g = column_grid();
        let k = g.index(1, 1, 15); // center z = 1.55
        g.occupied[k] = true;
        let m = project_occupancy(&g, 0.1, 1.0, MapKind::RobotNavigable).unwrap();
        assert!(m.occupied.iter().all(|&o| !o));
    }

    #[test]
    fn projection_errors() {
        let g = column_grid();
        assert!(project_occupancy(&g, 1.0, 1.0, MapKind::HumanWalkable).is_err());
        assert!(project_occupancy(&g, 5.0, 6.0, MapKind::HumanWalkable).is_err());
    }

    #[test]
    fn threshold_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let prims: Vec<_> = (0..30)
            .map(|_| {
                GaussianPrimitive::isotropic(
                    Vector3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
                    rng.random_range(0.05..0.2),
                    rng.random_range(0.1..1.0),
                    Vector3::zeros(),
                )
            })
            .collect();
        let mut prev: Option<VoxelGrid> = None;
        for t in [0.0, 0.3, 0.8, 1.5, 3.0] {
            let g = voxelize_primitives(&prims, 0.1, t).unwrap();
            if let Some(p) = &prev {
                assert!(g.occupied.iter().zip(&p.occupied).all(|(a, b)| !*a || *b));
            }
            prev = Some(g);
        }
    }
}
