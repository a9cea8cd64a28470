//! Positive and negative samples for the contrastive map objective.
//!
//! The positive is a noisy ground-truth future position. Negatives are
//! placed on a ring of radius `rho` around obstacle-contour seeds drawn near
//! the pedestrian, eight per seed at angles `pπ/4`.

use ecam_core::data::TrajectoryWindow;
use ecam_core::gridmap::ContourPoint;
use ecam_core::Vec2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Result, TrainError};

pub const DIRECTIONS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveMode {
    /// One future timestep drawn uniformly per pedestrian and step.
    Uniform,
    /// Every future timestep contributes its own positive.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub z_seeds: usize,
    pub rho_m: f64,
    pub c_eps_m: f64,
    pub seed_radius_m: f64,
    pub positive_t_mode: PositiveMode,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            z_seeds: 10,
            rho_m: 0.5,
            c_eps_m: 0.05,
            seed_radius_m: 8.0,
            positive_t_mode: PositiveMode::Uniform,
        }
    }
}

/// Independent random streams for the three sampling stages, so negatives
/// never depend on how many draws the positive consumed.
#[derive(Debug, Clone)]
pub struct SampleRngs {
    pub positive: ChaCha8Rng,
    pub seeds: ChaCha8Rng,
    pub negatives: ChaCha8Rng,
}

impl SampleRngs {
    pub fn new(seed: u64) -> Self {
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        Self {
            positive: stream(1),
            seeds: stream(2),
            negatives: stream(3),
        }
    }
}

fn gaussian2<R: Rng>(rng: &mut R, sigma: f64) -> Vec2 {
    let x: f64 = rng.sample(StandardNormal);
    let y: f64 = rng.sample(StandardNormal);
    Vec2::new(x * sigma, y * sigma)
}

/// `future[t-1] + ε`, `ε ~ N(0, c_eps² I)`; `t` is 1-based.
pub fn draw_positive<R: Rng>(future: &[Vec2], t: usize, c_eps: f64, rng: &mut R) -> Result<Vec2> {
    if t == 0 || t > future.len() {
        return Err(TrainError::Core(ecam_core::Error::Index {
            index: t,
            len: future.len(),
        }));
    }
    Ok(future[t - 1] + gaussian2(rng, c_eps))
}

/// Indices of `z` contour seeds near `ped_pos`.
///
/// Draws without replacement among contours within `radius`; when fewer
/// than `z` are in range, among all contours; when the map has fewer than
/// `z` contours in total, with replacement. Empty contours give no seeds.
pub fn select_seed_indices<R: Rng>(
    contours: &[ContourPoint],
    ped_pos: Vec2,
    radius: f64,
    z: usize,
    rng: &mut R,
) -> Vec<usize> {
    if contours.is_empty() || z == 0 {
        return Vec::new();
    }
    let r2 = radius * radius;
    let near: Vec<usize> = contours
        .iter()
        .enumerate()
        .filter(|(_, c)| (c.position - ped_pos).norm_sq() <= r2)
        .map(|(i, _)| i)
        .collect();
    if near.len() >= z {
        return index::sample(rng, near.len(), z).into_iter().map(|i| near[i]).collect();
    }
    if contours.len() >= z {
        return index::sample(rng, contours.len(), z).into_vec();
    }
    (0..z).map(|_| rng.random_range(0..contours.len())).collect()
}

pub fn select_seeds<R: Rng>(
    contours: &[ContourPoint],
    ped_pos: Vec2,
    radius: f64,
    z: usize,
    rng: &mut R,
) -> Vec<ContourPoint> {
    select_seed_indices(contours, ped_pos, radius, z, rng)
        .into_iter()
        .map(|i| contours[i])
        .collect()
}

/// Eight ring points per seed, seed-major: `c + ρ(cos pπ/4, sin pπ/4) + ε`.
pub fn expand_negatives<R: Rng>(seeds: &[Vec2], rho: f64, c_eps: f64, rng: &mut R) -> Vec<Vec2> {
    let mut out = Vec::with_capacity(seeds.len() * DIRECTIONS);
    for &c in seeds {
        for p in 0..DIRECTIONS {
            let theta = std::f64::consts::FRAC_PI_4 * p as f64;
            let ring = Vec2::new(rho * theta.cos(), rho * theta.sin());
            let noise = if c_eps > 0.0 { gaussian2(rng, c_eps) } else { Vec2::ZERO };
            out.push(c + ring + noise);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    /// `(t, point)` pairs; one entry unless every timestep is used.
    pub positives: Vec<(usize, Vec2)>,
    pub negatives: Vec<Vec2>,
    pub seed_indices: Vec<usize>,
    /// Set when the map offers no contours; the pedestrian is left out of
    /// the contrastive objective.
    pub skip: bool,
}

pub fn build_sample_set(
    window: &TrajectoryWindow,
    contours: &[ContourPoint],
    cfg: &SamplingConfig,
    rngs: &mut SampleRngs,
) -> Result<SampleSet> {
    if window.future.is_empty() {
        return Err(TrainError::Invalid("window has no future ground truth".into()));
    }
    if !(cfg.rho_m > 0.0) {
        return Err(TrainError::Invalid(format!("rho must be positive, got {}", cfg.rho_m)));
    }
    let ts: Vec<usize> = match cfg.positive_t_mode {
        PositiveMode::Uniform => vec![rngs.positive.random_range(1..=window.future.len())],
        PositiveMode::All => (1..=window.future.len()).collect(),
    };
    let positives = ts
        .into_iter()
        .map(|t| Ok((t, draw_positive(&window.future, t, cfg.c_eps_m, &mut rngs.positive)?)))
        .collect::<Result<Vec<_>>>()?;
    let seed_indices = select_seed_indices(
        contours,
        window.last_observed(),
        cfg.seed_radius_m,
        cfg.z_seeds,
        &mut rngs.seeds,
    );
    let seeds: Vec<Vec2> = seed_indices.iter().map(|&i| contours[i].position).collect();
    let negatives = expand_negatives(&seeds, cfg.rho_m, cfg.c_eps_m, &mut rngs.negatives);
    Ok(SampleSet {
        positives,
        skip: negatives.is_empty(),
        negatives,
        seed_indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ecam_core::gridmap::{Homography, OccupancyMap, OBSTACLE};

    fn contour(x: f64, y: f64) -> ContourPoint {
        ContourPoint {
            position: Vec2::new(x, y),
            col: 0,
            row: 0,
        }
    }

    fn window() -> TrajectoryWindow {
        TrajectoryWindow {
            ped_id: 0,
            scene_label: "s".into(),
            start_frame: 0,
            past: (0..8).map(|i| Vec2::new(i as f64 * 0.5, 5.0)).collect(),
            future: (8..20).map(|i| Vec2::new(i as f64 * 0.5, 5.0)).collect(),
        }
    }

    #[test]
    fn positive_without_noise() {
        let mut fut = vec![Vec2::ZERO; 12];
        fut[2] = Vec2::new(1.0, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(draw_positive(&fut, 3, 0.0, &mut rng).unwrap(), Vec2::new(1.0, 2.0));
        assert!(draw_positive(&fut, 0, 0.0, &mut rng).is_err());
        assert!(draw_positive(&fut, 13, 0.0, &mut rng).is_err());
    }

    #[test]
    fn positive_is_reproducible() {
        let fut = window().future;
        let a = draw_positive(&fut, 4, 0.05, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = draw_positive(&fut, 4, 0.05, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seeds_within_radius_are_distinct() {
        let contours: Vec<_> = (0..50).map(|i| contour(i as f64 * 0.1, 0.0)).collect();
        let far: Vec<_> = (0..50).map(|i| contour(100.0 + i as f64, 0.0)).collect();
        let all: Vec<_> = contours.iter().chain(&far).copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx = select_seed_indices(&all, Vec2::ZERO, 8.0, 10, &mut rng);
        assert_eq!(idx.len(), 10);
        let mut sorted = idx.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 10);
        assert!(idx.iter().all(|&i| i < 50));
    }

    #[test]
    fn seed_fallbacks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let three: Vec<_> = (0..3).map(|i| contour(i as f64, 0.0)).collect();
        let idx = select_seed_indices(&three, Vec2::ZERO, 8.0, 10, &mut rng);
        assert_eq!(idx.len(), 10);
        assert!(idx.iter().all(|&i| i < 3));
        // few near, enough overall: widen to all contours, still distinct
        let mut many: Vec<_> = (0..3).map(|i| contour(i as f64, 0.0)).collect();
        many.extend((0..20).map(|i| contour(50.0 + i as f64, 0.0)));
        let mut idx = select_seed_indices(&many, Vec2::ZERO, 8.0, 10, &mut rng);
        idx.sort();
        idx.dedup();
        assert_eq!(idx.len(), 10);
        assert!(select_seed_indices(&[], Vec2::ZERO, 8.0, 10, &mut rng).is_empty());
    }

    #[test]
    fn ring_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let neg = expand_negatives(&[Vec2::ZERO], 0.5, 0.0, &mut rng);
        let s = 0.5 * std::f64::consts::FRAC_1_SQRT_2;
        let expect = [
            (0.5, 0.0),
            (s, s),
            (0.0, 0.5),
            (-s, s),
            (-0.5, 0.0),
            (-s, -s),
            (0.0, -0.5),
            (s, -s),
        ];
        for (n, (x, y)) in neg.iter().zip(expect) {
            assert!((n.x - x).abs() < 1e-12 && (n.y - y).abs() < 1e-12, "{n:?}");
        }
        let seeds: Vec<_> = (0..10).map(|i| Vec2::new(i as f64, -2.0 * i as f64)).collect();
        let neg = expand_negatives(&seeds, 0.5, 0.0, &mut rng);
        assert_eq!(neg.len(), 80);
        for (i, n) in neg.iter().enumerate() {
            assert!((n.dist(seeds[i / 8]) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_set_assembly() {
        let mut map = OccupancyMap::open(100, 100, Homography::scaling(10.0)).unwrap();
        let cfg = SamplingConfig::default();
        let empty = build_sample_set(&window(), &map.extract_contours(), &cfg, &mut SampleRngs::new(1)).unwrap();
        assert!(empty.skip);
        assert!(empty.negatives.is_empty());
        for c in 0..100 {
            map.set_cell(c, 40, OBSTACLE);
        }
        let contours = map.extract_contours();
        let a = build_sample_set(&window(), &contours, &cfg, &mut SampleRngs::new(4)).unwrap();
        let b = build_sample_set(&window(), &contours, &cfg, &mut SampleRngs::new(4)).unwrap();
        assert_eq!(a, b);
        assert!(!a.skip);
        assert_eq!(a.negatives.len(), 80);
        assert_eq!(a.positives.len(), 1);
        let all = SamplingConfig {
            positive_t_mode: PositiveMode::All,
            ..cfg
        };
        let c = build_sample_set(&window(), &contours, &all, &mut SampleRngs::new(4)).unwrap();
        assert_eq!(c.positives.len(), 12);
    }
}
