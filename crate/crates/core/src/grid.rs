//! 2D occupancy maps and the grid algorithms that run on them.

use crate::error::{Error, Result};
use crate::geometry::GEOM_EPS;
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapKind {
    RobotNavigable,
    HumanWalkable,
}

/// Row-major (x fastest) 2D occupancy map. `inflated` always contains
/// `occupied`. Anything outside the map counts as blocked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyGrid2D {
    pub origin: Vector2<f64>,
    pub resolution: f64,
    pub dims: [usize; 2],
    pub occupied: Vec<bool>,
    pub inflated: Vec<bool>,
    pub kind: MapKind,
}

pub type Cell = (usize, usize);

impl OccupancyGrid2D {
    pub fn new_empty(origin: Vector2<f64>, resolution: f64, dims: [usize; 2], kind: MapKind) -> Result<Self> {
        if dims[0] == 0 || dims[1] == 0 {
            return Err(Error::InvalidParameter("map dims must be positive".into()));
        }
        if !(resolution > 0.0) {
            return Err(Error::InvalidParameter("resolution must be positive".into()));
        }
        let n = dims[0] * dims[1];
        Ok(Self {
            origin,
            resolution,
            dims,
            occupied: vec![false; n],
            inflated: vec![false; n],
            kind,
        })
    }

    /// Builds a map from an occupied mask; `inflated` starts equal to it.
    pub fn from_occupied(
        origin: Vector2<f64>,
        resolution: f64,
        dims: [usize; 2],
        occupied: Vec<bool>,
        kind: MapKind,
    ) -> Result<Self> {
        let mut g = Self::new_empty(origin, resolution, dims, kind)?;
        if occupied.len() != g.len() {
            return Err(Error::InvalidParameter("occupied mask length mismatch".into()));
        }
        g.inflated = occupied.clone();
        g.occupied = occupied;
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, (i, j): Cell) -> usize {
        j * self.dims[0] + i
    }

    #[inline]
    pub fn cell_center(&self, (i, j): Cell) -> Vector2<f64> {
        self.origin + Vector2::new((i as f64 + 0.5) * self.resolution, (j as f64 + 0.5) * self.resolution)
    }

    /// Cell containing `p`, if inside the map.
    #[inline]
    pub fn cell_of(&self, p: Vector2<f64>) -> Option<Cell> {
        let fx = ((p.x - self.origin.x) / self.resolution).floor();
        let fy = ((p.y - self.origin.y) / self.resolution).floor();
        if fx < 0.0 || fy < 0.0 || !fx.is_finite() || !fy.is_finite() {
            return None;
        }
        let (i, j) = (fx as usize, fy as usize);
        (i < self.dims[0] && j < self.dims[1]).then_some((i, j))
    }

    pub fn is_occupied_cell(&self, c: Cell) -> bool {
        self.occupied[self.index(c)]
    }

    pub fn is_free_cell(&self, c: Cell) -> bool {
        !self.inflated[self.index(c)]
    }

    /// Free in the inflated map. Points outside the map are not free.
    #[inline]
    pub fn is_free(&self, p: Vector2<f64>) -> bool {
        match self.cell_of(p) {
            Some(c) => !self.inflated[self.index(c)],
            None => false,
        }
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        let nx = self.dims[0];
        (0..self.len()).map(move |k| (k % nx, k / nx))
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        self.cells().filter(|&c| self.is_free_cell(c)).collect()
    }

    pub fn extent(&self) -> Vector2<f64> {
        Vector2::new(self.dims[0] as f64, self.dims[1] as f64) * self.resolution
    }

    pub fn neighbors8(&self, (i, j): Cell) -> impl Iterator<Item = (Cell, bool)> + '_ {
        const D: [(i64, i64); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];
        let (nx, ny) = (self.dims[0] as i64, self.dims[1] as i64);
        D.iter().filter_map(move |&(di, dj)| {
            let (a, b) = (i as i64 + di, j as i64 + dj);
            (a >= 0 && b >= 0 && a < nx && b < ny).then_some(((a as usize, b as usize), di != 0 && dj != 0))
        })
    }

    /// True when moving from `a` to its 8-neighbor `b` stays on free cells and
    /// a diagonal step does not squeeze between two blocked side cells.
    pub fn step_allowed(&self, a: Cell, b: Cell) -> bool {
        if !self.is_free_cell(b) {
            return false;
        }
        if a.0 != b.0 && a.1 != b.1 {
            return self.is_free_cell((a.0, b.1)) && self.is_free_cell((b.0, a.1));
        }
        true
    }

    /// Writes the map as a binary PGM (free 255, inflated 128, occupied 0),
    /// with +y pointing up in the image.
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(self.len() + 32);
        write!(buf, "P5\n{} {}\n255\n", self.dims[0], self.dims[1])?;
        for j in (0..self.dims[1]).rev() {
            for i in 0..self.dims[0] {
                let k = self.index((i, j));
                buf.push(if self.occupied[k] {
                    0
                } else if self.inflated[k] {
                    128
                } else {
                    255
                });
            }
        }
        std::fs::write(path, buf).map_err(|e| Error::io_at(path, e))
    }
}

/// Exact squared Euclidean distance transform in cell units: for each cell,
/// the squared distance (in cells) from its center to the nearest cell
/// whose `mask` is set. Infinite when the mask is empty.
pub fn squared_distance_transform(mask: &[bool], dims: [usize; 2]) -> Vec<f64> {
    let (nx, ny) = (dims[0], dims[1]);
    let mut f = vec![0.0f64; nx * ny];
    // columns first
    let mut col = vec![0.0; ny];
    let mut out = vec![0.0; ny.max(nx)];
    for i in 0..nx {
        for j in 0..ny {
            col[j] = if mask[j * nx + i] { 0.0 } else { f64::INFINITY };
        }
        edt_1d(&col, &mut out[..ny]);
        for j in 0..ny {
            f[j * nx + i] = out[j];
        }
    }
    let mut row = vec![0.0; nx];
    for j in 0..ny {
        row.copy_from_slice(&f[j * nx..(j + 1) * nx]);
        edt_1d(&row, &mut out[..nx]);
        f[j * nx..(j + 1) * nx].copy_from_slice(&out[..nx]);
    }
    f
}

/// Felzenszwalb-Huttenlocher lower envelope of parabolas.
fn edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let first = match f.iter().position(|v| v.is_finite()) {
        Some(k) => k,
        None => {
            d.iter_mut().for_each(|x| *x = f64::INFINITY);
            return;
        }
    };
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        let meet = |p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
        let mut s = meet(v[k]);
        // z[0] is -inf, so this stops at k == 0
        while s <= z[k] {
            k -= 1;
            s = meet(v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0;
    for (q, out) in d.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *out = dq * dq + f[p];
    }
}

/// Marks every cell whose center lies within `radius` of the center of an
/// occupied cell. `occupied` is unchanged.
pub fn inflate(grid: &OccupancyGrid2D, radius: f64) -> Result<OccupancyGrid2D> {
    if !(radius >= 0.0) {
        return Err(Error::InvalidParameter(format!("inflation radius {radius} < 0")));
    }
    let mut out = grid.clone();
    let d2 = squared_distance_transform(&grid.occupied, grid.dims);
    let r = radius + GEOM_EPS;
    for (k, infl) in out.inflated.iter_mut().enumerate() {
        *infl = grid.occupied[k] || d2[k] * grid.resolution * grid.resolution <= r * r;
    }
    Ok(out)
}

/// Euclidean clearance (meters) from each cell center to the nearest
/// occupied cell center.
pub fn clearance_field(grid: &OccupancyGrid2D) -> Vec<f64> {
    squared_distance_transform(&grid.occupied, grid.dims)
        .into_iter()
        .map(|d| d.sqrt() * grid.resolution)
        .collect()
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem {
    cost: f64,
    idx: usize,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, o: &Self) -> Ordering {
        o.cost.total_cmp(&self.cost).then_with(|| o.idx.cmp(&self.idx))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// Obstacle-aware distance (meters) from every free cell to `goal`, over
/// the 8-connected free graph. Unreachable cells are infinite. The goal
/// cell itself seeds the search even when blocked.
pub fn distance_field(grid: &OccupancyGrid2D, goal: Cell) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; grid.len()];
    let mut heap = BinaryHeap::new();
    let g = grid.index(goal);
    dist[g] = 0.0;
    heap.push(HeapItem { cost: 0.0, idx: g });
    let nx = grid.dims[0];
    while let Some(HeapItem { cost, idx }) = heap.pop() {
        if cost > dist[idx] {
            continue;
        }
        let c = (idx % nx, idx / nx);
        for (n, diag) in grid.neighbors8(c) {
            // reverse step n -> c must be allowed; symmetric except for the goal seed
            if !grid.is_free_cell(n) {
                continue;
            }
            if diag && !(grid.is_free_cell((c.0, n.1)) && grid.is_free_cell((n.0, c.1))) {
                continue;
            }
            let step = if diag { std::f64::consts::SQRT_2 } else { 1.0 } * grid.resolution;
            let k = grid.index(n);
            let nc = cost + step;
            if nc < dist[k] {
                dist[k] = nc;
                heap.push(HeapItem { cost: nc, idx: k });
            }
        }
    }
    dist
}

/// 8-connected free-space components; blocked cells get `usize::MAX`.
pub fn connected_components(grid: &OccupancyGrid2D) -> Vec<usize> {
    let mut label = vec![usize::MAX; grid.len()];
    let mut next = 0;
    let mut stack = Vec::new();
    for c in grid.cells() {
        let k = grid.index(c);
        if label[k] != usize::MAX || !grid.is_free_cell(c) {
            continue;
        }
        label[k] = next;
        stack.push(c);
        while let Some(a) = stack.pop() {
            for (b, _) in grid.neighbors8(a) {
                let kb = grid.index(b);
                if label[kb] == usize::MAX && grid.step_allowed(a, b) {
                    label[kb] = next;
                    stack.push(b);
                }
            }
        }
        next += 1;
    }
    label
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(nx: usize, ny: usize) -> OccupancyGrid2D {
        OccupancyGrid2D::new_empty(Vector2::zeros(), 0.1, [nx, ny], MapKind::RobotNavigable).unwrap()
    }

    #[test]
    fn cell_lookup_and_outside_is_blocked() {
        let g = map(10, 5);
        assert_eq!(g.cell_of(Vector2::new(0.05, 0.05)), Some((0, 0)));
        assert_eq!(g.cell_of(Vector2::new(0.95, 0.45)), Some((9, 4)));
        assert_eq!(g.cell_of(Vector2::new(1.01, 0.2)), None);
        assert!(!g.is_free(Vector2::new(-0.01, 0.2)));
        assert!(g.is_free(Vector2::new(0.5, 0.2)));
    }

    #[test]
    fn inflate_zero_is_identity() {
        let mut g = map(12, 9);
        let (a, b) = (g.index((3, 4)), g.index((7, 1)));
        g.occupied[a] = true;
        g.occupied[b] = true;
        g.inflated = g.occupied.clone();
        let h = inflate(&g, 0.0).unwrap();
        assert_eq!(h.inflated, g.occupied);
        assert_eq!(h.occupied, g.occupied);
    }

    #[test]
    fn inflate_single_cell_gives_disk() {
        let mut g = map(11, 11);
        let k = g.index((5, 5));
        g.occupied[k] = true;
        let h = inflate(&g, 0.2).unwrap();
        for c in h.cells() {
            let di = c.0 as i64 - 5;
            let dj = c.1 as i64 - 5;
            assert_eq!(h.inflated[h.index(c)], di * di + dj * dj <= 4, "{c:?}");
        }
    }

    #[test]
    fn inflate_negative_radius_rejected() {
        assert!(inflate(&map(3, 3), -1.0).is_err());
    }

    #[test]
    fn edt_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let dims = [rng.random_range(1..30), rng.random_range(1..30)];
            let mask: Vec<bool> = (0..dims[0] * dims[1]).map(|_| rng.random_bool(0.05)).collect();
            let d = squared_distance_transform(&mask, dims);
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let mut best = f64::INFINITY;
                    for b in 0..dims[1] {
                        for a in 0..dims[0] {
                            if mask[b * dims[0] + a] {
                                let dx = a as f64 - i as f64;
                                let dy = b as f64 - j as f64;
                                best = best.min(dx * dx + dy * dy);
                            }
                        }
                    }
                    assert_eq!(d[j * dims[0] + i], best);
                }
            }
        }
    }

    #[test]
    fn distance_field_on_open_map() {
        let g = map(20, 20);
        let d = distance_field(&g, (0, 0));
        assert!((d[g.index((10, 0))] - 1.0).abs() < 1e-12);
        assert!((d[g.index((3, 3))] - 3.0 * 0.1 * std::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn components_split_by_wall() {
        let mut g = map(10, 10);
        for j in 0..10 {
            let k = g.index((5, j));
            g.occupied[k] = true;
            g.inflated[k] = true;
        }
        let lab = connected_components(&g);
        assert_ne!(lab[g.index((0, 0))], lab[g.index((9, 9))]);
        assert_eq!(lab[g.index((0, 0))], lab[g.index((4, 9))]);
        assert_eq!(lab[g.index((5, 5))], usize::MAX);
    }
}
