//! Best-of-K displacement errors and the environment collision-free rate.
//!
//! ADE and FDE minima are taken independently per pedestrian: the sample
//! with the lowest average error need not be the one with the lowest final
//! error.

use ecam_core::gridmap::OccupancyMap;
use ecam_core::model::{PredictionSet, Trajectory};
use serde::{Deserialize, Serialize};

use crate::losses::collides;
use crate::{Result, TrainError};

fn ade(s: &[ecam_core::Vec2], y: &[ecam_core::Vec2]) -> f64 {
    s.iter().zip(y).map(|(a, b)| a.dist(*b)).sum::<f64>() / y.len() as f64
}

fn fde(s: &[ecam_core::Vec2], y: &[ecam_core::Vec2]) -> f64 {
    s.last().zip(y.last()).map_or(0.0, |(a, b)| a.dist(*b))
}

/// Per-pedestrian `(min_k ADE, min_k FDE)`.
pub fn pedestrian_ade_fde(samples: &[Trajectory], gt: &[ecam_core::Vec2]) -> (f64, f64) {
    samples.iter().fold((f64::INFINITY, f64::INFINITY), |(a, f), s| {
        (a.min(ade(s, gt)), f.min(fde(s, gt)))
    })
}

pub fn ade_fde_min(preds: &PredictionSet, gt: &[Trajectory]) -> Result<(f64, f64)> {
    if gt.is_empty() || preds.num_pedestrians() == 0 {
        return Err(TrainError::Invalid("cannot evaluate an empty dataset".into()));
    }
    if preds.num_pedestrians() != gt.len() {
        return Err(TrainError::Invalid(format!(
            "{} predicted pedestrians but {} ground-truth futures",
            preds.num_pedestrians(),
            gt.len()
        )));
    }
    if preds.k() == 0 || gt.iter().any(|y| y.is_empty()) {
        return Err(TrainError::Invalid("empty samples or futures".into()));
    }
    let (mut sa, mut sf) = (0.0, 0.0);
    for (samples, y) in preds.iter().zip(gt) {
        let (a, f) = pedestrian_ade_fde(samples, y);
        sa += a;
        sf += f;
    }
    let n = gt.len() as f64;
    Ok((sa / n, sf / n))
}

/// Number of sampled trajectories with at least one point over an obstacle.
pub fn colliding_count(preds: &PredictionSet, map: &OccupancyMap) -> usize {
    preds
        .iter()
        .map(|samples| samples.iter().filter(|s| collides(s, map, false)).count())
        .sum()
}

/// Percentage of sampled trajectories free of obstacle points.
pub fn ecfl(preds: &PredictionSet, map: &OccupancyMap) -> f64 {
    let total = preds.num_pedestrians() * preds.k();
    if total == 0 {
        return 100.0;
    }
    100.0 - 100.0 * colliding_count(preds, map) as f64 / total as f64
}

/// Running sums for one group of pedestrians.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricSums {
    pub ade: f64,
    pub fde: f64,
    pub colliding: usize,
    pub pedestrians: usize,
    pub samples: usize,
}

impl MetricSums {
    pub fn add_pedestrian(&mut self, samples: &[Trajectory], gt: &[ecam_core::Vec2], map: &OccupancyMap) {
        let (a, f) = pedestrian_ade_fde(samples, gt);
        self.ade += a;
        self.fde += f;
        self.colliding += samples.iter().filter(|s| collides(s, map, false)).count();
        self.pedestrians += 1;
        self.samples += samples.len();
    }

    pub fn merge(&mut self, other: &MetricSums) {
        self.ade += other.ade;
        self.fde += other.fde;
        self.colliding += other.colliding;
        self.pedestrians += other.pedestrians;
        self.samples += other.samples;
    }

    pub fn ade_min(&self) -> f64 {
        self.ade / self.pedestrians.max(1) as f64
    }

    pub fn fde_min(&self) -> f64 {
        self.fde / self.pedestrians.max(1) as f64
    }

    pub fn ecfl(&self) -> f64 {
        if self.samples == 0 {
            100.0
        } else {
            100.0 - 100.0 * self.colliding as f64 / self.samples as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene: String,
    pub ade_min: f64,
    pub fde_min: f64,
    pub ecfl: f64,
    pub n_pedestrians: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ade_min: f64,
    pub fde_min: f64,
    pub ecfl: f64,
    pub n_pedestrians: usize,
    pub k_samples: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_scene: Vec<SceneMetrics>,
}

impl MetricsReport {
    /// Builds a report from per-scene sums, in the given scene order.
    pub fn from_scenes(k: usize, scenes: &[(String, MetricSums)], per_scene: bool) -> Result<Self> {
        let mut all = MetricSums::default();
        for (_, s) in scenes {
            all.merge(s);
        }
        if all.pedestrians == 0 {
            return Err(TrainError::Invalid("cannot evaluate an empty dataset".into()));
        }
        Ok(Self {
            ade_min: all.ade_min(),
            fde_min: all.fde_min(),
            ecfl: all.ecfl(),
            n_pedestrians: all.pedestrians,
            k_samples: k,
            per_scene: if per_scene {
                scenes
                    .iter()
                    .map(|(label, s)| SceneMetrics {
                        scene: label.clone(),
                        ade_min: s.ade_min(),
                        fde_min: s.fde_min(),
                        ecfl: s.ecfl(),
                        n_pedestrians: s.pedestrians,
                    })
                    .collect()
            } else {
                Vec::new()
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

/// Metrics over repeated sampling runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunsReport {
    pub runs: usize,
    pub k_samples: usize,
    pub n_pedestrians: usize,
    pub ade_min: MeanStd,
    pub fde_min: MeanStd,
    pub ecfl: MeanStd,
    pub per_run: Vec<MetricsReport>,
}

impl RunsReport {
    pub fn new(per_run: Vec<MetricsReport>) -> Result<Self> {
        let first = per_run
            .first()
            .ok_or_else(|| TrainError::Invalid("at least one run is required".into()))?;
        let pick = |f: fn(&MetricsReport) -> f64| MeanStd::of(&per_run.iter().map(f).collect::<Vec<_>>());
        Ok(Self {
            runs: per_run.len(),
            k_samples: first.k_samples,
            n_pedestrians: first.n_pedestrians,
            ade_min: pick(|r| r.ade_min),
            fde_min: pick(|r| r.fde_min),
            ecfl: pick(|r| r.ecfl),
            per_run,
        })
    }
}
