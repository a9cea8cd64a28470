//! Central finite-difference verification of every parameter gradient of
//! the training objective.
//!
//! Random draws and collision gates are fixed at the base point, so the
//! objective is a smooth function of the parameters (up to best-sample
//! switches, which random fixtures avoid with probability one).

use ecam_core::data::TrajectoryWindow;
use ecam_core::gridmap::{Homography, OccupancyMap, OBSTACLE};
use ecam_core::model::PredictionSet;
use ecam_core::Vec2;
use serde::Serialize;

use crate::losses::{env_collision_loss_gated, variety_loss, LossBreakdown};
use crate::trainer::{batch_objective, draw_window, mix, Ablation, BatchItem, Dataset, TrainConfig, TrainScene, TrainState};
use crate::Result;

pub const FD_STEP: f64 = 1e-5;
/// Gradients below `REL_FLOOR · max(1, |L|)` are compared in absolute
/// terms: central differences carry a roundoff error of order `ε|L|/h`.
pub const REL_FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

pub fn rel_error(analytic: f64, numeric: f64, loss: f64) -> f64 {
    let floor = REL_FLOOR * loss.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub ablation: Ablation,
    pub n_params: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub loss: LossBreakdown,
    /// Every sample other than the best one gets exactly zero variety gradient.
    pub non_argmin_zero: bool,
    pub colliding_samples: usize,
    /// Each colliding sample receives a nonzero collision-loss gradient.
    pub colliding_grad_nonzero: bool,
    pub tolerance: f64,
    pub passed: bool,
}

/// Three pedestrians beside a wall, `K = 4`.
pub fn fixture(ablation: Ablation, seed: u64) -> (TrainConfig, TrainScene) {
    let mut map = OccupancyMap::open(80, 60, Homography::scaling(10.0)).expect("valid fixture map");
    for c in 0..80 {
        for r in 36..40 {
            map.set_cell(c, r, OBSTACLE);
        }
    }
    for r in 0..36 {
        map.set_cell(60, r, OBSTACLE);
    }
    // the last observed point sits a few centimetres short of a wall, so
    // any sample stepping forward collides
    let ends = [(5.95, 3.55, 0.30, 0.0), (5.96, 2.0, 0.25, 0.05), (4.0, 3.56, 0.0, 0.28)];
    let windows = ends
        .iter()
        .enumerate()
        .map(|(i, &(x, y, vx, vy))| {
            let pts: Vec<Vec2> = (0..20)
                .map(|t| {
                    let dt = t as f64 - 7.0;
                    // future turns parallel to the wall
                    if dt <= 0.0 {
                        Vec2::new(x + vx * dt, y + vy * dt)
                    } else {
                        Vec2::new(x - 0.2 * dt * (vy > vx) as u8 as f64, y - 0.2 * dt * (vx >= vy) as u8 as f64)
                    }
                })
                .collect();
            TrajectoryWindow {
                ped_id: i as i64,
                scene_label: "gradcheck".into(),
                start_frame: 0,
                past: pts[..8].to_vec(),
                future: pts[8..].to_vec(),
            }
        })
        .collect();
    let cfg = TrainConfig {
        ablation,
        seed,
        k_samples: 4,
        batch_size: 3,
        ..TrainConfig::default()
    };
    let scene = TrainScene {
        label: "gradcheck".into(),
        contours: map.extract_contours(),
        map,
        windows,
    };
    (cfg, scene)
}

fn tensor_name(specs: &[ecam_core::nn::TensorSpec], prefix: &str, i: usize) -> String {
    specs
        .iter()
        .find(|s| s.range().contains(&i))
        .map_or_else(|| format!("{prefix}[{i}]"), |s| format!("{prefix}{}[{}]", s.name, i - s.offset))
}

/// Compares analytic and numeric gradients for every model and head
/// parameter on `batch`.
pub fn check_gradients(state: &TrainState, data: &Dataset, batch: &[usize], cfg: &TrainConfig) -> Result<GradcheckReport> {
    let items: Vec<BatchItem<'_>> = batch.iter().map(|&i| data.item(i)).collect();
    let draws = items
        .iter()
        .enumerate()
        .map(|(j, it)| draw_window(&state.model, it, cfg, mix(cfg.seed, j as u64)))
        .collect::<Result<Vec<_>>>()?;
    let base = batch_objective(&state.model, &state.heads, &items, &draws, None, cfg, true)?;
    let gates = base.gates.clone();

    let mut model = state.model.clone();
    let mut heads = state.heads.clone();
    let mut max_err = 0.0f64;
    let mut worst = String::new();
    let eval = |m: &ecam_core::model::Predictor, h: &crate::nce::NceHeads| -> Result<f64> {
        Ok(batch_objective(m, h, &items, &draws, Some(&gates), cfg, false)?.breakdown.total)
    };
    for i in 0..model.params.len() {
        let orig = model.params.values[i];
        model.params.values[i] = orig + FD_STEP;
        let lp = eval(&model, &heads)?;
        model.params.values[i] = orig - FD_STEP;
        let lm = eval(&model, &heads)?;
        model.params.values[i] = orig;
        let e = rel_error(base.grad_model[i], (lp - lm) / (2.0 * FD_STEP), base.breakdown.total);
        if e > max_err {
            max_err = e;
            worst = tensor_name(&model.params.specs, "", i);
        }
    }
    for i in 0..heads.params.len() {
        let orig = heads.params.values[i];
        heads.params.values[i] = orig + FD_STEP;
        let lp = eval(&model, &heads)?;
        heads.params.values[i] = orig - FD_STEP;
        let lm = eval(&model, &heads)?;
        heads.params.values[i] = orig;
        let e = rel_error(base.grad_heads[i], (lp - lm) / (2.0 * FD_STEP), base.breakdown.total);
        if e > max_err {
            max_err = e;
            worst = tensor_name(&heads.params.specs, "nce.", i);
        }
    }

    // sample-level properties of the two trajectory losses
    let mut samples = Vec::with_capacity(items.len());
    for (it, d) in items.iter().zip(&draws) {
        let enc = model.encode(it.prep);
        samples.push(model.decode(&it.prep.frame, &enc.h, &d.noise).trajectories);
    }
    let gt: Vec<Vec<Vec2>> = items.iter().map(|it| it.window.future.clone()).collect();
    let preds = PredictionSet::new(samples)?;
    let var = variety_loss(&preds, &gt)?;
    let mut non_argmin_zero = true;
    for (ped, term) in var.grads.iter().zip(&base.terms) {
        for (k, g) in ped.iter().enumerate() {
            if k != term.best_sample && g.iter().any(|v| v.x != 0.0 || v.y != 0.0) {
                non_argmin_zero = false;
            }
        }
    }
    let env = env_collision_loss_gated(&preds, &gt, &gates)?;
    let mut colliding = 0;
    let mut colliding_grad_nonzero = true;
    for (ped_g, ped_gates) in env.grads.iter().zip(&gates) {
        for (g, &c) in ped_g.iter().zip(ped_gates) {
            if c {
                colliding += 1;
                if g.iter().all(|v| v.x == 0.0 && v.y == 0.0) {
                    colliding_grad_nonzero = false;
                }
            }
        }
    }
    let passed = max_err < TOLERANCE && non_argmin_zero && colliding_grad_nonzero;
    Ok(GradcheckReport {
        ablation: cfg.ablation,
        n_params: model.params.len() + heads.params.len(),
        max_rel_error: max_err,
        worst_param: worst,
        loss: base.breakdown,
        non_argmin_zero,
        colliding_samples: colliding,
        colliding_grad_nonzero,
        tolerance: TOLERANCE,
        passed,
    })
}

/// Builds the standard fixture for `ablation` and checks it.
pub fn run_fixture(ablation: Ablation, seed: u64) -> Result<GradcheckReport> {
    let (cfg, scene) = fixture(ablation, seed);
    let state = TrainState::init(&cfg)?;
    let data = Dataset::new(vec![scene], &state.model)?;
    check_gradients(&state, &data, &[0, 1, 2], &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_error(1.0, 1.0, 0.5), 0.0);
        assert!((rel_error(2.0, 1.0, 0.5) - 0.5).abs() < 1e-15);
        assert!((rel_error(0.0, 1e-9, 0.5) - 1e-3).abs() < 1e-15);
        assert!((rel_error(0.0, 1e-9, 10.0) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn fixture_has_collisions() {
        let (cfg, scene) = fixture(Ablation::Ecam, 1);
        let st = TrainState::init(&cfg).unwrap();
        let data = Dataset::new(vec![scene], &st.model).unwrap();
        let items: Vec<_> = (0..3).map(|i| data.item(i)).collect();
        let draws: Vec<_> = items
            .iter()
            .enumerate()
            .map(|(j, it)| draw_window(&st.model, it, &cfg, mix(cfg.seed, j as u64)).unwrap())
            .collect();
        let out = batch_objective(&st.model, &st.heads, &items, &draws, None, &cfg, false).unwrap();
        assert!(out.breakdown.colliding_fraction > 0.0);
        assert!(out.breakdown.map_nce > 0.0);
    }
}
