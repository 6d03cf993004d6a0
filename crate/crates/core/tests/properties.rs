use nalgebra::{Rotation2, Vector2, Vector3};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatnav::expert::{add_human_sweep, arc_samples, build_motion_primitives, primitive_is_free, SweepParams};
use splatnav::geometry::integrate_unicycle;
use splatnav::grid::{inflate, MapKind, OccupancyGrid2D};
use splatnav::human_planner::{
    astar_2d, interaction_holds, sample_interaction_endpoints, smooth_spline, Interaction, InteractionParams,
    SmoothingParams,
};
use splatnav::render::{render, CameraModel};
use splatnav::scenario::compute_relative_goal;
use splatnav::splat::GaussianPrimitive;

fn random_grid(seed: u64, dims: [usize; 2], density: f64) -> OccupancyGrid2D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let occ = (0..dims[0] * dims[1]).map(|_| rng.random_bool(density)).collect();
    OccupancyGrid2D::from_occupied(Vector2::new(-1.0, 0.5), 0.1, dims, occ, MapKind::RobotNavigable).unwrap()
}

fn is_subset(a: &[bool], b: &[bool]) -> bool {
    a.iter().zip(b).all(|(&x, &y)| !x || y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_arc_check_implies_dense_samples_are_free(
        seed in any::<u64>(),
        fx in 0.0..1.0f64,
        fy in 0.0..1.0f64,
        theta in -3.2..3.2f64,
    ) {
        let grid = random_grid(seed, [24, 24], 0.06);
        let (x, y) = (-1.0 + 2.4 * fx, 0.5 + 2.4 * fy);
        prop_assume!(grid.is_free(Vector2::new(x, y)));
        for p in build_motion_primitives(0.5, 1.0, 1.0).unwrap() {
            if primitive_is_free(&grid, x, y, theta, &p, arc_samples(&p, grid.resolution, 10)) {
                for k in 0..=400 {
                    let (px, py, _) = integrate_unicycle(x, y, theta, p.v, p.w, p.duration * k as f64 / 400.0);
                    prop_assert!(grid.is_free(Vector2::new(px, py)), "v={} w={} k={k}", p.v, p.w);
                }
            }
        }
    }

    #[test]
    fn inflation_is_monotone_in_radius(seed in any::<u64>(), r1 in 0.0..0.4f64, dr in 0.0..0.3f64) {
        let grid = random_grid(seed, [30, 20], 0.05);
        let a = inflate(&grid, r1).unwrap();
        let b = inflate(&grid, r1 + dr).unwrap();
        prop_assert!(is_subset(&grid.occupied, &a.inflated));
        prop_assert!(is_subset(&a.inflated, &b.inflated));
        prop_assert_eq!(&a.occupied, &grid.occupied);
    }

    #[test]
    fn human_sweep_only_adds_and_grows_with_horizon(
        seed in any::<u64>(),
        hx in 0.0..2.0f64,
        hy in 0.5..2.5f64,
        vx in -1.0..1.0f64,
        vy in -1.0..1.0f64,
        h1 in 0.0..2.0f64,
        dh in 0.0..2.0f64,
    ) {
        let base = inflate(&random_grid(seed, [40, 40], 0.02), 0.2).unwrap();
        let pts = vec![Vector3::new(-1.0 + hx, hy, 0.9), Vector3::new(-0.9 + hx, hy + 0.05, 1.4)];
        let sweep = |horizon| SweepParams { human_radius: 0.3, safety_buffer: 0.1, horizon, robot_radius: 0.2 };
        let v = Vector2::new(vx, vy);
        let a = add_human_sweep(&base, &pts, v, &sweep(h1));
        let b = add_human_sweep(&base, &pts, v, &sweep(h1 + dh));
        prop_assert!(is_subset(&base.occupied, &a.occupied) && is_subset(&base.inflated, &a.inflated));
        prop_assert!(is_subset(&a.occupied, &b.occupied) && is_subset(&a.inflated, &b.inflated));
        prop_assert!(is_subset(&a.occupied, &a.inflated));
    }

    #[test]
    fn relative_goal_is_frame_invariant(
        x in -20.0..20.0f64, y in -20.0..20.0f64, th in -4.0..4.0f64,
        gx in -20.0..20.0f64, gy in -20.0..20.0f64,
        phi in -4.0..4.0f64, tx in -10.0..10.0f64, ty in -10.0..10.0f64,
    ) {
        let r = compute_relative_goal(x, y, th, gx, gy);
        prop_assert!(((r[0].hypot(r[1])) - (gx - x).hypot(gy - y)).abs() < 1e-9);
        let rot = Rotation2::new(phi);
        let p = rot * Vector2::new(x, y) + Vector2::new(tx, ty);
        let g = rot * Vector2::new(gx, gy) + Vector2::new(tx, ty);
        let q = compute_relative_goal(p.x, p.y, th + phi, g.x, g.y);
        prop_assert!((r[0] - q[0]).abs() < 1e-9 && (r[1] - q[1]).abs() < 1e-9);
    }

    #[test]
    fn interaction_endpoints_satisfy_their_predicate(
        seed in any::<u64>(),
        crossing in any::<bool>(),
        ax in 0.5..4.5f64, ay in 0.5..4.5f64, bx in 0.5..4.5f64, by in 0.5..4.5f64,
    ) {
        let (rs, rg) = (Vector2::new(ax, ay), Vector2::new(bx, by));
        prop_assume!((rg - rs).norm() >= 1.0);
        let grid = OccupancyGrid2D::new_empty(Vector2::zeros(), 0.1, [50, 50], MapKind::HumanWalkable).unwrap();
        let kind = if crossing { Interaction::Crossing } else { Interaction::Parallel };
        let params = InteractionParams::default();
        if let Ok(pair) = sample_interaction_endpoints(rs, rg, &grid, seed, Some(kind), &params) {
            prop_assert_eq!(pair.interaction, kind);
            prop_assert!(grid.is_free(pair.start) && grid.is_free(pair.goal));
            prop_assert!(interaction_holds(rs, rg, pair.start, pair.goal, kind, &params));
        } else {
            // only a parallel band that leaves the map can come up empty
            prop_assert!(!crossing);
        }
    }

    #[test]
    fn smoothed_human_paths_stay_free_and_keep_endpoints(seed in any::<u64>(), speed in 0.5..1.6f64) {
        let grid = inflate(&random_grid(seed, [40, 40], 0.03), 0.15).unwrap();
        let free = grid.free_cells();
        prop_assume!(free.len() > 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let a = grid.cell_center(free[rng.random_range(0..free.len())]);
        let b = grid.cell_center(free[rng.random_range(0..free.len())]);
        prop_assume!((a - b).norm() > 0.5);
        let Ok(path) = astar_2d(&grid, a, b) else { return Ok(()) };
        let params = SmoothingParams::default();
        let sm = smooth_spline(&path, &grid, speed, &params).unwrap();
        let samples = &sm.trajectory.samples;
        prop_assert!(samples.iter().all(|s| grid.is_free(s.position())));
        prop_assert!((samples[0].position() - a).norm() <= 0.1);
        prop_assert!((samples[samples.len() - 1].position() - b).norm() <= 0.1);
        // equal chords, so equal time steps except a shorter final one
        let steps: Vec<f64> = samples.windows(2).map(|w| w[1].t - w[0].t).collect();
        let (last, inner) = steps.split_last().unwrap();
        prop_assert!(inner.iter().all(|d| (d - params.sample_dt).abs() < 1e-9), "{steps:?}");
        prop_assert!(*last > 0.0 && *last <= params.sample_dt + 1e-9);
    }
}

fn random_prims(seed: u64, n: usize, black: bool) -> Vec<GaussianPrimitive> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mean = Vector3::new(rng.random_range(1.0..6.0), rng.random_range(-1.5..1.5), rng.random_range(-1.0..1.0));
            let color = if black {
                Vector3::zeros()
            } else {
                Vector3::new(rng.random(), rng.random(), rng.random())
            };
            GaussianPrimitive::isotropic(mean, rng.random_range(0.05..0.4), rng.random_range(0.1..0.95), color)
        })
        .collect()
}

fn camera() -> CameraModel {
    CameraModel::looking(96, 64, 90f64.to_radians(), Vector3::zeros(), 0.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn render_ignores_primitive_order(seed in any::<u64>(), n in 1usize..40) {
        let prims = random_prims(seed, n, false);
        let mut shuffled = prims.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(!seed));
        let cam = camera();
        let bg = [0.2, 0.3, 0.4];
        prop_assert!(render(&prims, &cam, bg).max_abs_diff(&render(&shuffled, &cam, bg)) <= 1e-6);
    }

    #[test]
    fn black_splats_only_attenuate_the_background(seed in any::<u64>(), n in 1usize..30) {
        let prims = random_prims(seed, n + 1, true);
        let cam = camera();
        let fewer = render(&prims[..n], &cam, [1.0; 3]);
        let more = render(&prims, &cam, [1.0; 3]);
        for (a, b) in fewer.rgb.iter().flatten().zip(more.rgb.iter().flatten()) {
            prop_assert!((0.0..=1.0).contains(b));
            prop_assert!(*b <= *a + 1e-5);
        }
    }
}
