use ecam_core::data::TrajectoryWindow;
use ecam_core::gridmap::{ContourPoint, Homography, OccupancyMap, OBSTACLE};
use ecam_core::model::{PredictionSet, Trajectory};
use ecam_core::Vec2;
use ecam_train::losses::{collision_gates, env_collision_loss, variety_loss};
use ecam_train::metrics::{ade_fde_min, ecfl};
use ecam_train::sampling::{build_sample_set, draw_positive, expand_negatives, SampleRngs, SamplingConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid_map(seed: u64, w: usize, h: usize, frac: f64) -> OccupancyMap {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = OccupancyMap::open(w, h, Homography::scaling(10.0)).unwrap();
    for c in 0..w {
        for r in 0..h {
            if rng.random_bool(frac) {
                map.set_cell(c, r, OBSTACLE);
            }
        }
    }
    map
}

fn traj(pts: &[(f64, f64)]) -> Trajectory {
    pts.iter().map(|&(x, y)| Vec2::new(x, y)).collect()
}

fn pts_strategy(t: usize, lo: f64, hi: f64) -> impl Strategy<Value = Trajectory> {
    prop::collection::vec((lo..hi, lo..hi), t).prop_map(|v| traj(&v))
}

#[test]
fn positive_noise_std_per_axis() {
    let future = vec![Vec2::new(1.5, -2.0); 12];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    let (mut sx, mut sy, mut sxx, mut syy) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..n {
        let p = draw_positive(&future, 4, 0.05, &mut rng).unwrap() - future[3];
        sx += p.x;
        sy += p.y;
        sxx += p.x * p.x;
        syy += p.y * p.y;
    }
    let nf = n as f64;
    let std = |s: f64, ss: f64| ((ss - s * s / nf) / (nf - 1.0)).sqrt();
    let (stx, sty) = (std(sx, sxx), std(sy, syy));
    assert!((0.049..=0.051).contains(&stx), "x std {stx}");
    assert!((0.049..=0.051).contains(&sty), "y std {sty}");
    assert!((sx / nf).abs() < 1e-3 && (sy / nf).abs() < 1e-3);
}

#[test]
fn noisy_negatives_stay_near_the_ring() {
    let seeds: Vec<Vec2> = (0..12_500).map(|i| Vec2::new(i as f64 * 0.01, -(i as f64) * 0.02)).collect();
    let negs = expand_negatives(&seeds, 0.5, 0.05, &mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(negs.len(), 100_000);
    let outside = negs
        .iter()
        .enumerate()
        .filter(|(j, n)| ((**n - seeds[j / 8]).norm() - 0.5).abs() > 5.0 * 0.05)
        .count();
    assert!(outside as f64 / negs.len() as f64 <= 1e-4, "{outside} outside ρ ± 5c_ε");
}

#[test]
fn noise_free_negatives_sit_on_the_ring() {
    let seeds = [Vec2::new(2.0, 3.0), Vec2::new(-1.25, 0.5)];
    let negs = expand_negatives(&seeds, 0.5, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
    for (j, n) in negs.iter().enumerate() {
        let d = *n - seeds[j / 8];
        assert!((d.norm() - 0.5).abs() < 1e-15);
        let want = std::f64::consts::FRAC_PI_4 * (j % 8) as f64;
        let diff = (d.y.atan2(d.x) - want).rem_euclid(std::f64::consts::TAU);
        assert!(diff < 1e-12 || std::f64::consts::TAU - diff < 1e-12, "direction {j}");
    }
}

fn window_with_future(future: Trajectory) -> TrajectoryWindow {
    TrajectoryWindow {
        ped_id: 0,
        scene_label: "s".into(),
        start_frame: 0,
        past: (0..8).map(|t| Vec2::new(1.0 + 0.3 * t as f64, 4.0)).collect(),
        future,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn negatives_ignore_the_future(seed in any::<u64>(), a in pts_strategy(12, 0.0, 8.0), b in pts_strategy(12, 0.0, 8.0)) {
        let map = grid_map(seed, 80, 80, 0.1);
        let contours: Vec<ContourPoint> = map.extract_contours();
        let cfg = SamplingConfig::default();
        let sa = build_sample_set(&window_with_future(a), &contours, &cfg, &mut SampleRngs::new(seed)).unwrap();
        let sb = build_sample_set(&window_with_future(b), &contours, &cfg, &mut SampleRngs::new(seed)).unwrap();
        prop_assert_eq!(sa.seed_indices, sb.seed_indices);
        prop_assert_eq!(sa.negatives, sb.negatives);
    }

    #[test]
    fn ecfl_ignores_ordering(seed in any::<u64>(), n in 1usize..8, k in 1usize..6, rot in 0usize..64) {
        use rand::seq::SliceRandom;
        use rand::Rng;
        let map = grid_map(seed, 60, 60, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let mut samples: Vec<Vec<Trajectory>> = (0..n)
            .map(|_| (0..k).map(|_| (0..12).map(|_| Vec2::new(rng.random_range(-0.5..6.5), rng.random_range(-0.5..6.5))).collect()).collect())
            .collect();
        let base = ecfl(&PredictionSet::new(samples.clone()).unwrap(), &map);
        samples.rotate_left(rot % n);
        for ped in &mut samples {
            ped.shuffle(&mut rng);
        }
        prop_assert_eq!(base, ecfl(&PredictionSet::new(samples).unwrap(), &map));
    }

    #[test]
    fn ade_fde_unchanged_by_duplicate_sample(
        gt in pts_strategy(12, -5.0, 5.0),
        samples in prop::collection::vec(pts_strategy(12, -5.0, 5.0), 1..6),
        pick in 0usize..6,
    ) {
        let base = ade_fde_min(&PredictionSet::new(vec![samples.clone()]).unwrap(), std::slice::from_ref(&gt)).unwrap();
        let mut more = samples.clone();
        more.push(samples[pick % samples.len()].clone());
        let dup = ade_fde_min(&PredictionSet::new(vec![more]).unwrap(), &[gt]).unwrap();
        prop_assert_eq!(base, dup);
    }

    #[test]
    fn ade_fde_rigid_invariance(
        gt in pts_strategy(12, -5.0, 5.0),
        samples in prop::collection::vec(pts_strategy(12, -5.0, 5.0), 1..6),
        theta in -3.2f64..3.2,
        tx in -50.0f64..50.0,
        ty in -50.0f64..50.0,
    ) {
        let f = |p: &Vec2| p.rotate(theta) + Vec2::new(tx, ty);
        let (a, fd) = ade_fde_min(&PredictionSet::new(vec![samples.clone()]).unwrap(), std::slice::from_ref(&gt)).unwrap();
        let moved: Vec<Trajectory> = samples.iter().map(|s| s.iter().map(f).collect()).collect();
        let gt2: Trajectory = gt.iter().map(f).collect();
        let (a2, fd2) = ade_fde_min(&PredictionSet::new(vec![moved]).unwrap(), &[gt2]).unwrap();
        prop_assert!((a - a2).abs() < 1e-9 && (fd - fd2).abs() < 1e-9, "{a} {a2} {fd} {fd2}");
    }

    #[test]
    fn env_loss_grows_as_colliding_sample_moves_away(
        offsets in prop::collection::vec(0.55f64..0.89, 12),
        ys in prop::collection::vec(1.0f64..9.0, 12),
        s1 in 8.0f64..10.0,
        s2 in 8.0f64..10.0,
        free in pts_strategy(12, 0.5, 4.5),
    ) {
        // obstacle block covering x in [5, 10)
        let mut map = OccupancyMap::open(100, 100, Homography::scaling(10.0)).unwrap();
        for c in 50..100 {
            for r in 0..100 {
                map.set_cell(c, r, OBSTACLE);
            }
        }
        let gt: Trajectory = ys.iter().map(|&y| Vec2::new(1.0, y)).collect();
        let push = |s: f64| -> Trajectory { gt.iter().zip(&offsets).map(|(g, a)| Vec2::new(1.0 + s * a, g.y)).collect() };
        let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
        let near = PredictionSet::new(vec![vec![push(lo), free.clone()]]).unwrap();
        let far = PredictionSet::new(vec![vec![push(hi), free]]).unwrap();
        prop_assert_eq!(collision_gates(&near, &map, false), collision_gates(&far, &map, false));
        let ln = env_collision_loss(&near, std::slice::from_ref(&gt), &map, false).unwrap().value;
        let lf = env_collision_loss(&far, &[gt], &map, false).unwrap().value;
        prop_assert!(lf >= ln, "{lf} < {ln}");
    }

    #[test]
    fn variety_at_most_mean_sample_error(
        gt in pts_strategy(12, -5.0, 5.0),
        samples in prop::collection::vec(pts_strategy(12, -5.0, 5.0), 1..8),
    ) {
        let v = variety_loss(&PredictionSet::new(vec![samples.clone()]).unwrap(), std::slice::from_ref(&gt)).unwrap().value;
        let mean = samples
            .iter()
            .map(|s| s.iter().zip(&gt).map(|(p, q)| (*p - *q).norm_sq()).sum::<f64>() / 12.0)
            .sum::<f64>()
            / samples.len() as f64;
        prop_assert!(v <= mean + 1e-12);
    }

    #[test]
    fn env_zero_iff_no_collisions(seed in any::<u64>(), n in 1usize..5, k in 1usize..5) {
        use rand::Rng;
        let map = grid_map(seed, 60, 60, 0.03);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let free_point = |rng: &mut ChaCha8Rng| loop {
            let p = Vec2::new(rng.random_range(0.0..6.0), rng.random_range(0.0..6.0));
            if !map.blocked(p) {
                return p;
            }
        };
        let gt: Vec<Trajectory> = (0..n).map(|_| (0..12).map(|_| free_point(&mut rng)).collect()).collect();
        let samples: Vec<Vec<Trajectory>> = (0..n)
            .map(|_| (0..k).map(|_| (0..12).map(|_| Vec2::new(rng.random_range(0.0..6.0), rng.random_range(0.0..6.0))).collect()).collect())
            .collect();
        let preds = PredictionSet::new(samples).unwrap();
        let loss = env_collision_loss(&preds, &gt, &map, false).unwrap().value;
        let colliding = collision_gates(&preds, &map, false).iter().flatten().filter(|g| **g).count();
        prop_assert_eq!(loss == 0.0, colliding == 0);
    }
}
