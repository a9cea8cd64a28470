use ecam_core::gridmap::{Homography, OccupancyMap, OBSTACLE, WALKABLE};
use ecam_core::Vec2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize, hom: Homography) -> OccupancyMap {
    let cells = (0..w * h).map(|_| if rng.random_bool(0.3) { OBSTACLE } else { WALKABLE }).collect();
    OccupancyMap::new(w, h, cells, hom).unwrap()
}

/// Similarity plus a mild projective term, well away from singular.
fn random_homography(rng: &mut ChaCha8Rng) -> Homography {
    let s = rng.random_range(2.0..20.0);
    let th: f64 = rng.random_range(-3.0..3.0);
    let (c, si) = (th.cos(), th.sin());
    Homography([
        [s * c, -s * si, rng.random_range(-50.0..50.0)],
        [s * si, s * c, rng.random_range(-50.0..50.0)],
        [rng.random_range(-1e-3..1e-3), rng.random_range(-1e-3..1e-3), 1.0],
    ])
}

#[test]
fn homography_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let h = random_homography(&mut rng);
        let map = OccupancyMap::open(8, 8, h).unwrap();
        for _ in 0..100 {
            let p = Vec2::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0));
            let back = map.pixel_to_world(map.world_to_pixel(p).unwrap()).unwrap();
            assert!(back.dist(p) < 1e-9, "{p:?} -> {back:?}");
        }
    }
}

#[test]
fn is_obstacle_matches_rasterization() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let hom = Homography([[4.0, 0.5, 3.0], [-0.25, 4.0, 7.0], [0.0, 0.0, 1.0]]);
    let map = random_map(&mut rng, 40, 30, hom);
    for _ in 0..10_000 {
        let p = Vec2::new(rng.random_range(-3.0..14.0), rng.random_range(-4.0..10.0));
        let m = &hom.0;
        let u = (m[0][0] * p.x + m[0][1] * p.y + m[0][2]).floor() as i64;
        let v = (m[1][0] * p.x + m[1][1] * p.y + m[1][2]).floor() as i64;
        let inside = (0..40).contains(&u) && (0..30).contains(&v);
        let expect = !inside || map.cells()[(v * 40 + u) as usize] == OBSTACLE;
        assert_eq!(map.is_obstacle(p).unwrap(), expect, "{p:?}");
    }
}

proptest! {
    #[test]
    fn contour_points_border_walkable_space(seed in 0u64..1000, w in 2usize..24, h in 2usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = random_map(&mut rng, w, h, Homography::scaling(10.0));
        let contours = map.extract_contours();
        for c in &contours {
            prop_assert_eq!(map.cell(c.col as i64, c.row as i64), OBSTACLE);
            prop_assert!(map.is_obstacle(c.position).unwrap());
            let (x, y) = (c.col as i64, c.row as i64);
            prop_assert!([(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)]
                .iter()
                .any(|&(a, b)| map.cell(a, b) == WALKABLE));
        }
        // every qualifying cell is reported, in row-major order
        let mut expect = Vec::new();
        for r in 0..h as i64 {
            for c in 0..w as i64 {
                if map.cell(c, r) == OBSTACLE
                    && [(c - 1, r), (c + 1, r), (c, r - 1), (c, r + 1)].iter().any(|&(a, b)| map.cell(a, b) == WALKABLE)
                {
                    expect.push((c as usize, r as usize));
                }
            }
        }
        let got: Vec<_> = contours.iter().map(|c| (c.col, c.row)).collect();
        prop_assert_eq!(got, expect);
        prop_assert_eq!(map.extract_contours(), contours);
    }
}
