//! Optional reconstruction pretraining of the map-patch encoder.
//!
//! A linear decoder maps the patch embedding back to the patch; encoder and
//! decoder are trained jointly on random patches with mean squared error.
//! Only `patch.*` tensors of the predictor change.

use ecam_core::gridmap::{OccupancyMap, WALKABLE};
use ecam_core::model::Predictor;
use ecam_core::nn::ParamBuilder;
use ecam_core::Vec2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            lr: 0.05,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// Losses are averaged over the first and last ten steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
}

fn random_patch<R: Rng>(model: &Predictor, map: &OccupancyMap, rng: &mut R) -> Vec<f64> {
    // prefer walkable centers, as pedestrians stand in free space
    let mut center = Vec2::ZERO;
    for _ in 0..50 {
        let c = rng.random_range(0..map.width());
        let r = rng.random_range(0..map.height());
        center = map.cell_center(c, r).unwrap_or(Vec2::ZERO);
        if map.cell(c as i64, r as i64) == WALKABLE {
            break;
        }
    }
    let heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    map.extract_patch(center, heading, &model.cfg.patch).occupancy()
}

pub fn pretrain_patch(model: &mut Predictor, maps: &[&OccupancyMap], cfg: &PretrainConfig) -> Result<PretrainReport> {
    let enc = model
        .patch_encoder()
        .cloned()
        .ok_or_else(|| TrainError::Invalid("model has no map-patch encoder".into()))?;
    if maps.is_empty() || cfg.batch_size == 0 {
        return Err(TrainError::Invalid("pretraining needs at least one map and a positive batch size".into()));
    }
    let pixels = model.cfg.patch.size * model.cfg.patch.size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut b = ParamBuilder::new();
    let dec = b.linear("recon", model.cfg.map_embed, pixels);
    let mut dec_params = b.build(&mut rng);
    let mut v_model = model.params.zeros_like();
    let mut v_dec = dec_params.zeros_like();
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut g_model = model.params.zeros_like();
        let mut g_dec = dec_params.zeros_like();
        let mut loss = 0.0;
        let scale = 1.0 / (cfg.batch_size * pixels) as f64;
        for _ in 0..cfg.batch_size {
            let map = maps[rng.random_range(0..maps.len())];
            let input = random_patch(model, map, &mut rng);
            let acts = enc.forward(&model.params.values, &input);
            let emb = acts.last().expect("embedding");
            let recon = dec.forward(&dec_params.values, emb);
            let g_recon: Vec<f64> = recon
                .iter()
                .zip(&input)
                .map(|(r, x)| {
                    loss += (r - x) * (r - x) * scale;
                    2.0 * (r - x) * scale
                })
                .collect();
            let g_emb = dec.backward(&dec_params.values, emb, &g_recon, &mut g_dec);
            enc.backward(&model.params.values, &input, &acts, &g_emb, &mut g_model);
        }
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                message: format!("reconstruction loss {loss} at step {step}"),
                diagnostic: serde_json::json!({ "step": step }),
            });
        }
        history.push(loss);
        for (p, (v, g)) in model.params.values.iter_mut().zip(v_model.iter_mut().zip(&g_model)) {
            *v = cfg.momentum * *v + g;
            *p -= cfg.lr * *v;
        }
        for (p, (v, g)) in dec_params.values.iter_mut().zip(v_dec.iter_mut().zip(&g_dec)) {
            *v = cfg.momentum * *v + g;
            *p -= cfg.lr * *v;
        }
    }
    let w = history.len().clamp(1, 10);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(PretrainReport {
        initial_loss: mean(&history[..w.min(history.len())]),
        final_loss: mean(&history[history.len().saturating_sub(w)..]),
        steps: cfg.steps,
    })
}
