//! Environment collision loss, best-of-K variety loss and their weighted sum.

use ecam_core::gridmap::OccupancyMap;
use ecam_core::model::{PredictionSet, Trajectory};
use ecam_core::Vec2;
use serde::{Deserialize, Serialize};

use crate::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub variety: f64,
    pub env_col: f64,
    pub map_nce: f64,
    pub total: f64,
    pub colliding_fraction: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.variety, self.env_col, self.map_nce, self.total, self.colliding_fraction]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_env: f64,
    pub lambda_nce: f64,
    pub collision_segment_check: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_env: 1.0,
            lambda_nce: 0.25,
            collision_segment_check: false,
        }
    }
}

/// True when any predicted point lies over an obstacle; with `segments`,
/// midpoints between consecutive points are checked too.
pub fn collides(traj: &[Vec2], map: &OccupancyMap, segments: bool) -> bool {
    if traj.iter().any(|p| map.blocked(*p)) {
        return true;
    }
    segments && traj.windows(2).any(|w| map.blocked((w[0] + w[1]) * 0.5))
}

pub fn collision_gates(preds: &PredictionSet, map: &OccupancyMap, segments: bool) -> Vec<Vec<bool>> {
    preds
        .iter()
        .map(|samples| samples.iter().map(|s| collides(s, map, segments)).collect())
        .collect()
}

fn sq_err(a: &[Vec2], b: &[Vec2]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (*p - *q).norm_sq()).sum()
}

/// Per-pedestrian collision term: mean over gated samples of the summed
/// squared error, with `dL/dŷ` for every sample (zero where the gate is off).
pub fn pedestrian_env(samples: &[Trajectory], gt: &[Vec2], gates: &[bool]) -> (f64, Vec<Vec<Vec2>>) {
    let n_col = gates.iter().filter(|g| **g).count();
    let mut grads = vec![vec![Vec2::ZERO; gt.len()]; samples.len()];
    if n_col == 0 {
        return (0.0, grads);
    }
    let inv = 1.0 / n_col as f64;
    let mut loss = 0.0;
    for ((s, g), gate) in samples.iter().zip(&mut grads).zip(gates) {
        if !*gate {
            continue;
        }
        loss += sq_err(s, gt);
        for ((gp, p), q) in g.iter_mut().zip(s).zip(gt) {
            *gp = (*p - *q) * (2.0 * inv);
        }
    }
    (loss * inv, grads)
}

/// Per-pedestrian best-of-K term: the smallest mean-per-step squared error,
/// the index that attains it (first on ties) and its gradient.
pub fn pedestrian_variety(samples: &[Trajectory], gt: &[Vec2]) -> (f64, usize, Vec<Vec2>) {
    let t = gt.len().max(1) as f64;
    let (best, loss) = samples
        .iter()
        .map(|s| sq_err(s, gt) / t)
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (k, l)| if l < acc.1 { (k, l) } else { acc });
    let grad = samples[best]
        .iter()
        .zip(gt)
        .map(|(p, q)| (*p - *q) * (2.0 / t))
        .collect();
    (loss, best, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    /// `dL/dŷ` per pedestrian, sample and timestep.
    pub grads: Vec<Vec<Vec<Vec2>>>,
}

fn check_aligned(preds: &PredictionSet, gt: &[Trajectory]) -> Result<()> {
    if preds.num_pedestrians() != gt.len() {
        return Err(TrainError::Invalid(format!(
            "{} predicted pedestrians but {} ground-truth futures",
            preds.num_pedestrians(),
            gt.len()
        )));
    }
    if preds.k() == 0 && !gt.is_empty() {
        return Err(TrainError::Invalid("prediction set has no samples (K = 0)".into()));
    }
    for (samples, y) in preds.iter().zip(gt) {
        if samples.iter().any(|s| s.len() != y.len()) {
            return Err(TrainError::Invalid("prediction length differs from ground truth".into()));
        }
    }
    Ok(())
}

/// Collision loss with externally fixed gates.
pub fn env_collision_loss_gated(preds: &PredictionSet, gt: &[Trajectory], gates: &[Vec<bool>]) -> Result<LossGrad> {
    check_aligned(preds, gt)?;
    let n = gt.len().max(1) as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(gt.len());
    for ((samples, y), g) in preds.iter().zip(gt).zip(gates) {
        let (l, mut gr) = pedestrian_env(samples, y, g);
        value += l;
        gr.iter_mut().flatten().for_each(|v| *v = *v * (1.0 / n));
        grads.push(gr);
    }
    Ok(LossGrad { value: value / n, grads })
}

pub fn env_collision_loss(
    preds: &PredictionSet,
    gt: &[Trajectory],
    map: &OccupancyMap,
    segments: bool,
) -> Result<LossGrad> {
    check_aligned(preds, gt)?;
    env_collision_loss_gated(preds, gt, &collision_gates(preds, map, segments))
}

pub fn variety_loss(preds: &PredictionSet, gt: &[Trajectory]) -> Result<LossGrad> {
    check_aligned(preds, gt)?;
    let n = gt.len().max(1) as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(gt.len());
    for (samples, y) in preds.iter().zip(gt) {
        let (l, best, g) = pedestrian_variety(samples, y);
        value += l;
        let mut gr = vec![vec![Vec2::ZERO; y.len()]; samples.len()];
        gr[best] = g.into_iter().map(|v| v * (1.0 / n)).collect();
        grads.push(gr);
    }
    Ok(LossGrad { value: value / n, grads })
}

pub fn total_loss(variety: f64, env_col: f64, map_nce: f64, lambda_env: f64, lambda_nce: f64) -> LossBreakdown {
    LossBreakdown {
        variety,
        env_col,
        map_nce,
        total: variety + lambda_env * env_col + lambda_nce * map_nce,
        colliding_fraction: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ecam_core::gridmap::{Homography, OBSTACLE};

    fn map_with_wall() -> OccupancyMap {
        // 1 px = 0.1 m; vertical one-pixel wall at column 20 (x ∈ [2.0, 2.1))
        let mut m = OccupancyMap::open(50, 50, Homography::scaling(10.0)).unwrap();
        for r in 0..50 {
            m.set_cell(20, r, OBSTACLE);
        }
        m
    }

    fn line(x0: f64, dx: f64, y: f64, n: usize) -> Trajectory {
        (0..n).map(|i| Vec2::new(x0 + dx * i as f64, y)).collect()
    }

    #[test]
    fn collision_modes() {
        let m = map_with_wall();
        assert!(!collides(&line(0.5, 0.1, 1.0, 12), &m, false));
        assert!(collides(&line(1.5, 0.1, 1.0, 12), &m, false));
        // 1.95 → 2.15 skips over the wall; the midpoint 2.05 lands on it
        let jump = vec![Vec2::new(1.95, 1.0), Vec2::new(2.15, 1.0)];
        assert!(!collides(&jump, &m, false));
        assert!(collides(&jump, &m, true));
        assert!(m.blocked(Vec2::new(2.05, 1.0)));
    }

    #[test]
    fn env_examples() {
        let gt = vec![vec![Vec2::ZERO]];
        // ‖Ŷ − Y‖² = 4
        let p = PredictionSet::new(vec![vec![vec![Vec2::new(2.0, 0.0)], vec![Vec2::new(0.1, 0.0)]]]).unwrap();
        let out = env_collision_loss_gated(&p, &gt, &[vec![true, false]]).unwrap();
        assert_eq!(out.value, 4.0);
        assert_eq!(out.grads[0][1], vec![Vec2::ZERO]);
        assert!(out.grads[0][0][0].x != 0.0);
        let none = env_collision_loss_gated(&p, &gt, &[vec![false, false]]).unwrap();
        assert_eq!(none.value, 0.0);

        let a = vec![vec![Vec2::new(2f64.sqrt(), 0.0)], vec![Vec2::new(0.0, 6f64.sqrt())]];
        let b = vec![vec![Vec2::new(1.0, 1.0)], vec![Vec2::new(3.0, 3.0)]];
        let p = PredictionSet::new(vec![a, b]).unwrap();
        let gt = vec![vec![Vec2::ZERO], vec![Vec2::ZERO]];
        let out = env_collision_loss_gated(&p, &gt, &[vec![true, true], vec![false, false]]).unwrap();
        assert!((out.value - 2.0).abs() < 1e-12);

        let empty = PredictionSet::new(vec![vec![]]).unwrap();
        assert!(env_collision_loss(&empty, &[vec![Vec2::ZERO]], &map_with_wall(), false).is_err());
    }

    #[test]
    fn env_against_map() {
        let m = map_with_wall();
        let gt = vec![line(0.5, 0.1, 1.0, 12)];
        let clean = line(0.5, 0.1, 1.2, 12);
        let hit = line(1.5, 0.1, 1.0, 12);
        let p = PredictionSet::new(vec![vec![clean, hit.clone()]]).unwrap();
        let out = env_collision_loss(&p, &gt, &m, false).unwrap();
        let expect: f64 = hit.iter().zip(&gt[0]).map(|(a, b)| (*a - *b).norm_sq()).sum();
        assert!((out.value - expect).abs() < 1e-12);
    }

    #[test]
    fn variety_examples() {
        let gt = vec![vec![Vec2::ZERO, Vec2::ZERO]];
        // per-sample mean squared errors 1.0 and 3.0
        let s1 = vec![Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0)];
        let s2 = vec![Vec2::new(3f64.sqrt(), 0.0), Vec2::new(0.0, 3f64.sqrt())];
        let p = PredictionSet::new(vec![vec![s1.clone(), s2.clone()]]).unwrap();
        let out = variety_loss(&p, &gt).unwrap();
        assert!((out.value - 1.0).abs() < 1e-12);
        assert!(out.grads[0][1].iter().all(|g| *g == Vec2::ZERO));
        // finite differences on the non-argmin sample are exactly zero
        let h = 1e-5;
        let mut s2p = s2.clone();
        s2p[0].x += h;
        let pp = PredictionSet::new(vec![vec![s1.clone(), s2p]]).unwrap();
        assert_eq!(variety_loss(&pp, &gt).unwrap().value, out.value);

        let single = PredictionSet::new(vec![vec![s2.clone()]]).unwrap();
        assert!((variety_loss(&single, &gt).unwrap().value - 3.0).abs() < 1e-12);
        let exact = PredictionSet::new(vec![vec![s2, gt[0].clone()]]).unwrap();
        assert_eq!(variety_loss(&exact, &gt).unwrap().value, 0.0);
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(1.0, 1.0, 2.0, 1.0, 0.25).total, 2.5);
        assert_eq!(total_loss(0.7, 3.0, 9.0, 0.0, 0.0).total, 0.7);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 1.0, 0.25).total, 0.0);
    }
}
