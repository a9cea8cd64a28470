//! Ablation-aware training loop: batched forward/backward, SGD with
//! momentum, checkpoints and evaluation.
//!
//! Randomness is derived from `(seed, epoch, step, window)` alone, and
//! per-window gradients are summed in batch order, so a run is bit-for-bit
//! reproducible regardless of thread scheduling.

use std::str::FromStr;

use ecam_core::checkpoint::Checkpoint;
use ecam_core::data::{Scene, TrajectoryWindow, WindowConfig};
use ecam_core::gridmap::{ContourPoint, OccupancyMap, PatchConfig};
use ecam_core::model::{ModelConfig, Predictor, Prepared};
use ecam_core::nn::ParamSet;
use ecam_core::Vec2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::losses::{collides, pedestrian_env, pedestrian_variety, total_loss, LossBreakdown, LossWeights};
use crate::metrics::{MetricSums, MetricsReport};
use crate::nce::{NceConfig, NceHeads};
use crate::sampling::{build_sample_set, SampleRngs, SampleSet, SamplingConfig};
use crate::{Result, TrainError};

/// The five loss/input compositions compared in the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// History only, variety loss only.
    Baseline,
    /// Adds the map patch encoder.
    Map,
    /// Map plus the environment collision loss.
    EnvColLoss,
    /// Map plus the contrastive map loss.
    MapNce,
    /// Map plus both losses.
    Ecam,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Baseline,
        Ablation::Map,
        Ablation::EnvColLoss,
        Ablation::MapNce,
        Ablation::Ecam,
    ];

    pub fn use_map(self) -> bool {
        self != Ablation::Baseline
    }

    pub fn use_env_col_loss(self) -> bool {
        matches!(self, Ablation::EnvColLoss | Ablation::Ecam)
    }

    pub fn use_map_nce(self) -> bool {
        matches!(self, Ablation::MapNce | Ablation::Ecam)
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::Map => "map",
            Ablation::EnvColLoss => "env-col-loss",
            Ablation::MapNce => "map-nce",
            Ablation::Ecam => "ecam",
        }
    }

    /// Row label used in report tables.
    pub fn row_label(self) -> &'static str {
        match self {
            Ablation::Baseline => "Baseline",
            Ablation::Map => "+MAP",
            Ablation::EnvColLoss => "+EnvColLoss",
            Ablation::MapNce => "+MapNCE",
            Ablation::Ecam => "+ECAM",
        }
    }
}

impl FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let norm: String = s.to_ascii_lowercase().chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        match norm.as_str() {
            "baseline" => Ok(Ablation::Baseline),
            "map" => Ok(Ablation::Map),
            "envcolloss" | "envcol" | "env" => Ok(Ablation::EnvColLoss),
            "mapnce" | "nce" => Ok(Ablation::MapNce),
            "ecam" => Ok(Ablation::Ecam),
            _ => Err(format!(
                "unknown ablation {s:?} (baseline | map | env-col-loss | map-nce | ecam)"
            )),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Every tunable of a training run in one flat namespace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub ablation: Ablation,
    pub epochs: usize,
    pub batch_size: usize,
    pub k_samples: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global L2 norm cap on the gradient; `0` disables clipping.
    pub grad_clip_norm: f64,
    pub stride: usize,
    pub t_obs: usize,
    pub t_pred: usize,
    pub hidden: usize,
    pub noise_dim: usize,
    pub map_embed: usize,
    pub decoder_hidden: usize,
    pub patch_size: usize,
    pub patch_cell_m: f64,
    pub patch_forward_m: f64,
    #[serde(flatten)]
    pub sampling: SamplingConfig,
    #[serde(flatten)]
    pub nce: NceConfig,
    #[serde(flatten)]
    pub losses: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            seed: 0,
            ablation: Ablation::Ecam,
            epochs: 10,
            batch_size: 32,
            k_samples: 20,
            lr: 1e-3,
            momentum: 0.9,
            grad_clip_norm: 10.0,
            stride: 1,
            t_obs: m.t_obs,
            t_pred: m.t_pred,
            hidden: m.hidden,
            noise_dim: m.noise_dim,
            map_embed: m.map_embed,
            decoder_hidden: m.decoder_hidden,
            patch_size: m.patch.size,
            patch_cell_m: m.patch.cell_size,
            patch_forward_m: m.patch.forward_offset,
            sampling: SamplingConfig::default(),
            nce: NceConfig::default(),
            losses: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            t_obs: self.t_obs,
            t_pred: self.t_pred,
            hidden: self.hidden,
            noise_dim: self.noise_dim,
            map_embed: self.map_embed,
            decoder_hidden: self.decoder_hidden,
            use_map: self.ablation.use_map(),
            patch: PatchConfig {
                size: self.patch_size,
                cell_size: self.patch_cell_m,
                forward_offset: self.patch_forward_m,
            },
        }
    }

    pub fn window_config(&self) -> WindowConfig {
        WindowConfig {
            t_obs: self.t_obs,
            t_pred: self.t_pred,
            stride: self.stride,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Invalid(m.to_string()));
        if self.batch_size == 0 || self.k_samples == 0 {
            return bad("batch_size and k_samples must be positive");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("lr must be positive and momentum in [0, 1)");
        }
        if !(self.grad_clip_norm >= 0.0) {
            return bad("grad_clip_norm must be non-negative");
        }
        if self.stride == 0 {
            return bad("stride must be positive");
        }
        if !(self.losses.lambda_env >= 0.0) || !(self.losses.lambda_nce >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.sampling.z_seeds == 0 || !(self.sampling.rho_m > 0.0) || !(self.sampling.c_eps_m >= 0.0) {
            return bad("z_seeds and rho_m must be positive, c_eps_m non-negative");
        }
        Ok(())
    }

    fn lambda_env(&self) -> f64 {
        if self.ablation.use_env_col_loss() {
            self.losses.lambda_env
        } else {
            0.0
        }
    }

    fn lambda_nce(&self) -> f64 {
        if self.ablation.use_map_nce() {
            self.losses.lambda_nce
        } else {
            0.0
        }
    }
}

/// SplitMix64 finalizer used to derive independent seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const INIT_TAG: u64 = 0x1000;
const SHUFFLE_TAG: u64 = 0x2000;

/// A scene ready for training: map, its contour points and windows.
#[derive(Debug, Clone)]
pub struct TrainScene {
    pub label: String,
    pub map: OccupancyMap,
    pub contours: Vec<ContourPoint>,
    pub windows: Vec<TrajectoryWindow>,
}

impl From<Scene> for TrainScene {
    fn from(s: Scene) -> Self {
        Self {
            contours: s.map.extract_contours(),
            label: s.label,
            map: s.map,
            windows: s.windows,
        }
    }
}

/// Training scenes plus the parameter-independent per-window inputs.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scenes: Vec<TrainScene>,
    prepared: Vec<Vec<Prepared>>,
    index: Vec<(usize, usize)>,
}

impl Dataset {
    pub fn new(scenes: Vec<TrainScene>, model: &Predictor) -> Result<Self> {
        let mut prepared = Vec::with_capacity(scenes.len());
        let mut index = Vec::new();
        for (si, s) in scenes.iter().enumerate() {
            let preps = s
                .windows
                .iter()
                .map(|w| model.prepare(w, Some(&s.map)))
                .collect::<ecam_core::Result<Vec<_>>>()?;
            index.extend((0..preps.len()).map(|wi| (si, wi)));
            prepared.push(preps);
        }
        if index.is_empty() {
            return Err(TrainError::Invalid("training data contains no windows".into()));
        }
        Ok(Self {
            scenes,
            prepared,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn item(&self, i: usize) -> BatchItem<'_> {
        let (s, w) = self.index[i];
        let scene = &self.scenes[s];
        BatchItem {
            window: &scene.windows[w],
            prep: &self.prepared[s][w],
            map: &scene.map,
            contours: &scene.contours,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub window: &'a TrajectoryWindow,
    pub prep: &'a Prepared,
    pub map: &'a OccupancyMap,
    pub contours: &'a [ContourPoint],
}

/// Random inputs of one window for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowDraws {
    pub noise: Vec<Vec<f64>>,
    pub samples: Option<SampleSet>,
}

pub fn draw_window(model: &Predictor, item: &BatchItem<'_>, cfg: &TrainConfig, seed: u64) -> Result<WindowDraws> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = model.draw_noise(cfg.k_samples, &mut rng);
    let samples = if cfg.ablation.use_map_nce() {
        Some(build_sample_set(
            item.window,
            item.contours,
            &cfg.sampling,
            &mut SampleRngs::new(seed),
        )?)
    } else {
        None
    };
    Ok(WindowDraws { noise, samples })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowTerms {
    pub variety: f64,
    pub env_col: f64,
    pub map_nce: Option<f64>,
    pub colliding: usize,
    pub best_sample: usize,
}

struct WindowResult {
    terms: WindowTerms,
    gates: Vec<bool>,
    g_model: Vec<f64>,
    g_heads: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Scales {
    variety: f64,
    env: f64,
    nce: f64,
}

#[allow(clippy::too_many_arguments)]
fn window_objective(
    model: &Predictor,
    heads: &NceHeads,
    item: &BatchItem<'_>,
    draws: &WindowDraws,
    gates: Option<&[bool]>,
    cfg: &TrainConfig,
    scales: Scales,
    want_grad: bool,
) -> Result<WindowResult> {
    let prep = item.prep;
    let enc = model.encode(prep);
    let dec = model.decode(&prep.frame, &enc.h, &draws.noise);
    let gt = &item.window.future;
    let (variety, best, g_var) = pedestrian_variety(&dec.trajectories, gt);
    let gates: Vec<bool> = match gates {
        Some(g) => g.to_vec(),
        None => dec
            .trajectories
            .iter()
            .map(|s| collides(s, item.map, cfg.losses.collision_segment_check))
            .collect(),
    };
    let colliding = gates.iter().filter(|g| **g).count();
    let (env_col, g_env) = if cfg.ablation.use_env_col_loss() {
        let (l, g) = pedestrian_env(&dec.trajectories, gt, &gates);
        (l, Some(g))
    } else {
        (0.0, None)
    };

    let mut g_model = if want_grad { model.params.zeros_like() } else { Vec::new() };
    let mut g_heads = if want_grad { heads.params.zeros_like() } else { Vec::new() };
    let mut g_h: Option<Vec<f64>> = None;
    let map_nce = match &draws.samples {
        Some(set) if !set.skip => {
            let frame = &prep.frame;
            let negatives: Vec<Vec2> = set.negatives.iter().map(|p| frame.to_local(*p)).collect();
            let inv = 1.0 / set.positives.len() as f64;
            let mut sum = 0.0;
            let mut gh = vec![0.0; enc.h.len()];
            for (_, pos) in &set.positives {
                let grads = if want_grad { Some(g_heads.as_mut_slice()) } else { None };
                let (l, g) = heads.pedestrian_loss(&enc.h, frame.to_local(*pos), &negatives, scales.nce * inv, grads)?;
                sum += l;
                ecam_core::nn::add_assign(&mut gh, &g);
            }
            g_h = Some(gh);
            Some(sum * inv)
        }
        _ => None,
    };

    if want_grad {
        let mut g_traj = vec![vec![Vec2::ZERO; gt.len()]; dec.trajectories.len()];
        for (g, v) in g_traj[best].iter_mut().zip(&g_var) {
            *g = *v * scales.variety;
        }
        if let Some(ge) = &g_env {
            for (gk, ek) in g_traj.iter_mut().zip(ge) {
                for (g, e) in gk.iter_mut().zip(ek) {
                    *g += *e * scales.env;
                }
            }
        }
        model.backward(prep, &enc, &dec, &g_traj, g_h.as_deref(), &mut g_model);
    }
    Ok(WindowResult {
        terms: WindowTerms {
            variety,
            env_col,
            map_nce,
            colliding,
            best_sample: best,
        },
        gates,
        g_model,
        g_heads,
    })
}

/// Loss, gradients and collision gates of one batch.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub breakdown: LossBreakdown,
    pub grad_model: Vec<f64>,
    pub grad_heads: Vec<f64>,
    pub gates: Vec<Vec<bool>>,
    pub terms: Vec<WindowTerms>,
}

/// Mean losses over the batch and their gradients. Passing `gates` freezes
/// the collision membership instead of recomputing it.
pub fn batch_objective(
    model: &Predictor,
    heads: &NceHeads,
    items: &[BatchItem<'_>],
    draws: &[WindowDraws],
    gates: Option<&[Vec<bool>]>,
    cfg: &TrainConfig,
    want_grad: bool,
) -> Result<BatchOutput> {
    if items.is_empty() || items.len() != draws.len() {
        return Err(TrainError::Invalid("batch items and draws must be non-empty and aligned".into()));
    }
    let n = items.len() as f64;
    let n_nce = draws
        .iter()
        .filter(|d| d.samples.as_ref().is_some_and(|s| !s.skip))
        .count();
    let scales = Scales {
        variety: 1.0 / n,
        env: cfg.lambda_env() / n,
        nce: if n_nce > 0 { cfg.lambda_nce() / n_nce as f64 } else { 0.0 },
    };
    let results: Vec<Result<WindowResult>> = items
        .par_iter()
        .zip(draws)
        .enumerate()
        .map(|(i, (item, d))| {
            let g = gates.map(|g| g[i].as_slice());
            window_objective(model, heads, item, d, g, cfg, scales, want_grad)
        })
        .collect();
    let mut grad_model = if want_grad { model.params.zeros_like() } else { Vec::new() };
    let mut grad_heads = if want_grad { heads.params.zeros_like() } else { Vec::new() };
    let (mut var, mut env, mut nce, mut col) = (0.0, 0.0, 0.0, 0usize);
    let mut all_gates = Vec::with_capacity(items.len());
    let mut terms = Vec::with_capacity(items.len());
    let mut k_total = 0usize;
    for r in results {
        let r = r?;
        var += r.terms.variety;
        env += r.terms.env_col;
        nce += r.terms.map_nce.unwrap_or(0.0);
        col += r.terms.colliding;
        k_total += r.gates.len();
        if want_grad {
            ecam_core::nn::add_assign(&mut grad_model, &r.g_model);
            ecam_core::nn::add_assign(&mut grad_heads, &r.g_heads);
        }
        all_gates.push(r.gates);
        terms.push(r.terms);
    }
    let map_nce = if n_nce > 0 { nce / n_nce as f64 } else { 0.0 };
    let mut breakdown = total_loss(var / n, env / n, map_nce, cfg.losses.lambda_env, cfg.losses.lambda_nce);
    breakdown.colliding_fraction = col as f64 / k_total.max(1) as f64;
    Ok(BatchOutput {
        breakdown,
        grad_model,
        grad_heads,
        gates: all_gates,
        terms,
    })
}

/// Parameters, optimizer state and progress counters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Predictor,
    pub heads: NceHeads,
    pub velocity: Vec<f64>,
    pub head_velocity: Vec<f64>,
    pub epoch: usize,
    pub step: u64,
}

pub const HEADS_GROUP: &str = "nce";
const MOMENTUM_MODEL: &str = "momentum.model";
const MOMENTUM_HEADS: &str = "momentum.nce";

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, INIT_TAG));
        let model = Predictor::new(cfg.model_config(), &mut rng)?;
        let heads = NceHeads::new(cfg.nce, cfg.hidden, &mut rng)?;
        Ok(Self {
            velocity: model.params.zeros_like(),
            head_velocity: heads.params.zeros_like(),
            model,
            heads,
            epoch: 0,
            step: 0,
        })
    }

    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut ck = Checkpoint::new(&self.model);
        ck.config = serde_json::to_value(cfg).expect("config serializes");
        ck.state = json!({ "epoch": self.epoch, "step": self.step });
        ck.insert(HEADS_GROUP, &self.heads.params);
        let with = |p: &ParamSet, v: &[f64]| ParamSet {
            specs: p.specs.clone(),
            values: v.to_vec(),
        };
        ck.insert(MOMENTUM_MODEL, &with(&self.model.params, &self.velocity));
        ck.insert(MOMENTUM_HEADS, &with(&self.heads.params, &self.head_velocity));
        ck
    }

    /// Restores a state and the configuration it was trained with.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, TrainConfig)> {
        let cfg: TrainConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| TrainError::Invalid(format!("checkpoint has no training config: {e}")))?;
        let model = ck.predictor()?;
        let group = |name: &str| {
            ck.group(name)
                .ok_or_else(|| TrainError::Invalid(format!("checkpoint lacks group {name:?}")))?
                .map_err(TrainError::from)
        };
        let heads = NceHeads::from_params(cfg.nce, cfg.hidden, group(HEADS_GROUP)?)?;
        let velocity = group(MOMENTUM_MODEL)?.values;
        let head_velocity = group(MOMENTUM_HEADS)?.values;
        if velocity.len() != model.num_params() || head_velocity.len() != heads.params.len() {
            return Err(TrainError::Invalid("momentum buffers do not match the parameters".into()));
        }
        let epoch = ck.state.get("epoch").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        let step = ck.state.get("step").and_then(|v| v.as_u64()).unwrap_or(0);
        Ok((
            Self {
                model,
                heads,
                velocity,
                head_velocity,
                epoch,
                step,
            },
            cfg,
        ))
    }
}

fn sgd(params: &mut [f64], velocity: &mut [f64], grads: &[f64], lr: f64, momentum: f64) {
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// Rescales both gradient buffers together when their joint norm exceeds `max`.
pub fn clip_global_norm(a: &mut [f64], b: &mut [f64], max: f64) -> f64 {
    let norm = a.iter().chain(b.iter()).map(|g| g * g).sum::<f64>().sqrt();
    if max > 0.0 && norm > max {
        let s = max / norm;
        a.iter_mut().chain(b.iter_mut()).for_each(|g| *g *= s);
    }
    norm
}

fn diagnostic(state: &TrainState, items: &[BatchItem<'_>], terms: &[WindowTerms], b: &LossBreakdown) -> serde_json::Value {
    let pts = |v: &[Vec2]| v.iter().map(|p| [p.x, p.y]).collect::<Vec<_>>();
    json!({
        "epoch": state.epoch,
        "step": state.step,
        "breakdown": b,
        "windows": items.iter().zip(terms.iter().map(Some).chain(std::iter::repeat(None))).map(|(it, t)| json!({
            "scene": it.window.scene_label,
            "ped_id": it.window.ped_id,
            "start_frame": it.window.start_frame,
            "past": pts(&it.window.past),
            "future": pts(&it.window.future),
            "terms": t,
        })).collect::<Vec<_>>(),
        "non_finite_parameters": state.model.params.values.iter().filter(|v| !v.is_finite()).count(),
    })
}

/// One optimizer update on the given dataset indices.
pub fn train_step(state: &mut TrainState, data: &Dataset, batch: &[usize], cfg: &TrainConfig) -> Result<LossBreakdown> {
    let step_seed = mix(mix(cfg.seed, state.epoch as u64), state.step);
    let items: Vec<BatchItem<'_>> = batch.iter().map(|&i| data.item(i)).collect();
    let draws = items
        .iter()
        .enumerate()
        .map(|(j, it)| draw_window(&state.model, it, cfg, mix(step_seed, j as u64)))
        .collect::<Result<Vec<_>>>()?;
    let out = match batch_objective(&state.model, &state.heads, &items, &draws, None, cfg, true) {
        Err(TrainError::Core(ecam_core::Error::Numeric(msg))) => {
            return Err(TrainError::NonFinite {
                message: format!("epoch {} step {}: {msg}", state.epoch, state.step),
                diagnostic: diagnostic(state, &items, &[], &LossBreakdown::default()),
            })
        }
        other => other?,
    };
    let grads_ok = out.grad_model.iter().chain(&out.grad_heads).all(|g| g.is_finite());
    if !out.breakdown.is_finite() || !grads_ok {
        return Err(TrainError::NonFinite {
            message: format!(
                "epoch {} step {}: total = {}, finite gradients = {grads_ok}",
                state.epoch, state.step, out.breakdown.total
            ),
            diagnostic: diagnostic(state, &items, &out.terms, &out.breakdown),
        });
    }
    let (mut gm, mut gh) = (out.grad_model, out.grad_heads);
    clip_global_norm(&mut gm, &mut gh, cfg.grad_clip_norm);
    sgd(&mut state.model.params.values, &mut state.velocity, &gm, cfg.lr, cfg.momentum);
    if cfg.ablation.use_map_nce() {
        sgd(&mut state.heads.params.values, &mut state.head_velocity, &gh, cfg.lr, cfg.momentum);
    }
    state.step += 1;
    Ok(out.breakdown)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    #[serde(flatten)]
    pub mean: LossBreakdown,
}

/// Shuffles the dataset with an epoch-specific seed and runs every batch.
pub fn train_epoch(state: &mut TrainState, data: &Dataset, cfg: &TrainConfig) -> Result<EpochLog> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(mix(cfg.seed, SHUFFLE_TAG), state.epoch as u64)));
    let mut sum = LossBreakdown::default();
    let mut steps = 0;
    for batch in order.chunks(cfg.batch_size) {
        let b = train_step(state, data, batch, cfg)?;
        sum.variety += b.variety;
        sum.env_col += b.env_col;
        sum.map_nce += b.map_nce;
        sum.total += b.total;
        sum.colliding_fraction += b.colliding_fraction;
        steps += 1;
    }
    let s = steps.max(1) as f64;
    let log = EpochLog {
        epoch: state.epoch,
        steps,
        mean: LossBreakdown {
            variety: sum.variety / s,
            env_col: sum.env_col / s,
            map_nce: sum.map_nce / s,
            total: sum.total / s,
            colliding_fraction: sum.colliding_fraction / s,
        },
    };
    state.epoch += 1;
    Ok(log)
}

/// Best-of-K metrics of `model` on `scenes`; each window draws its samples
/// from a seed derived from `(seed, scene, window)`.
pub fn evaluate(
    model: &Predictor,
    scenes: &[(String, &OccupancyMap, &[TrajectoryWindow])],
    k: usize,
    seed: u64,
    per_scene: bool,
) -> Result<MetricsReport> {
    let mut sums = Vec::with_capacity(scenes.len());
    for (si, (label, map, windows)) in scenes.iter().enumerate() {
        let per_window: Vec<Result<MetricSums>> = windows
            .par_iter()
            .enumerate()
            .map(|(wi, w)| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(seed, si as u64), wi as u64));
                let samples = model.predict(w, Some(map), k, &mut rng)?;
                let mut s = MetricSums::default();
                s.add_pedestrian(&samples, &w.future, map);
                Ok(s)
            })
            .collect();
        let mut total = MetricSums::default();
        for s in per_window {
            total.merge(&s?);
        }
        sums.push((label.clone(), total));
    }
    MetricsReport::from_scenes(k, &sums, per_scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ecam_core::gridmap::{Homography, OBSTACLE};

    pub(crate) fn tiny_scene() -> TrainScene {
        let mut map = OccupancyMap::open(80, 60, Homography::scaling(10.0)).unwrap();
        for c in 0..80 {
            for r in 40..44 {
                map.set_cell(c, r, OBSTACLE);
            }
        }
        let windows = (0..6)
            .map(|i| {
                let y = 1.0 + 0.4 * i as f64;
                let pts: Vec<Vec2> = (0..20).map(|t| Vec2::new(0.5 + 0.3 * t as f64, y + 0.02 * t as f64)).collect();
                TrajectoryWindow {
                    ped_id: i,
                    scene_label: "tiny".into(),
                    start_frame: 0,
                    past: pts[..8].to_vec(),
                    future: pts[8..].to_vec(),
                }
            })
            .collect();
        TrainScene {
            label: "tiny".into(),
            contours: map.extract_contours(),
            map,
            windows,
        }
    }

    fn small_cfg(ablation: Ablation) -> TrainConfig {
        TrainConfig {
            ablation,
            seed: 3,
            batch_size: 3,
            k_samples: 4,
            lr: 5e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn ablation_flags() {
        assert!(!Ablation::Baseline.use_map());
        assert!(Ablation::Ecam.use_env_col_loss() && Ablation::Ecam.use_map_nce());
        assert!(Ablation::EnvColLoss.use_env_col_loss() && !Ablation::EnvColLoss.use_map_nce());
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!("nope".parse::<Ablation>().is_err());
    }

    #[test]
    fn config_round_trips_through_flat_json() {
        let cfg = small_cfg(Ablation::MapNce);
        let v = serde_json::to_value(cfg).unwrap();
        assert_eq!(v["tau"], 0.5);
        assert_eq!(v["z_seeds"], 10);
        assert_eq!(v["lambda_nce"], 0.25);
        let back: TrainConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, cfg);
        let partial: TrainConfig = serde_json::from_str(r#"{"tau": 0.1, "epochs": 3}"#).unwrap();
        assert_eq!(partial.nce.tau, 0.1);
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.k_samples, 20);
    }

    #[test]
    fn baseline_breakdown_has_only_variety() {
        let cfg = small_cfg(Ablation::Baseline);
        let mut st = TrainState::init(&cfg).unwrap();
        let data = Dataset::new(vec![tiny_scene()], &st.model).unwrap();
        let b = train_step(&mut st, &data, &[0, 1, 2], &cfg).unwrap();
        assert_eq!(b.env_col, 0.0);
        assert_eq!(b.map_nce, 0.0);
        assert_eq!(b.total, b.variety);
        let cfg = small_cfg(Ablation::Ecam);
        let mut st = TrainState::init(&cfg).unwrap();
        let data = Dataset::new(vec![tiny_scene()], &st.model).unwrap();
        let b = train_step(&mut st, &data, &[0, 1, 2], &cfg).unwrap();
        assert!(b.map_nce > 0.0);
        assert_eq!(b.total, b.variety + b.env_col + 0.25 * b.map_nce);
    }

    #[test]
    fn zero_weights_match_variety_only_step() {
        let mut cfg = small_cfg(Ablation::Ecam);
        cfg.losses.lambda_env = 0.0;
        cfg.losses.lambda_nce = 0.0;
        let mut a = TrainState::init(&cfg).unwrap();
        let data = Dataset::new(vec![tiny_scene()], &a.model).unwrap();
        let mut b = a.clone();
        train_step(&mut a, &data, &[0, 1, 2], &cfg).unwrap();
        let mut plain = cfg;
        plain.ablation = Ablation::Map;
        train_step(&mut b, &data, &[0, 1, 2], &plain).unwrap();
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn deterministic_and_converging() {
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 6,
            ..small_cfg(Ablation::Ecam)
        };
        let run = || {
            let mut st = TrainState::init(&cfg).unwrap();
            let data = Dataset::new(vec![tiny_scene()], &st.model).unwrap();
            (0..200).map(|_| train_step(&mut st, &data, &[0, 1, 2, 3, 4, 5], &cfg).unwrap()).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        let head: f64 = a[..10].iter().map(|b| b.total).sum::<f64>() / 10.0;
        let tail: f64 = a[190..].iter().map(|b| b.total).sum::<f64>() / 10.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn checkpoint_resume_is_exact() {
        let cfg = small_cfg(Ablation::Ecam);
        let mut st = TrainState::init(&cfg).unwrap();
        let data = Dataset::new(vec![tiny_scene()], &st.model).unwrap();
        train_epoch(&mut st, &data, &cfg).unwrap();
        let json = st.checkpoint(&cfg).to_json();
        let ck: Checkpoint = serde_json::from_str(&json).unwrap();
        let (mut resumed, cfg2) = TrainState::from_checkpoint(&ck).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(resumed, st);
        let a = train_epoch(&mut st, &data, &cfg).unwrap();
        let b = train_epoch(&mut resumed, &data, &cfg2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let cfg = small_cfg(Ablation::Map);
        let mut st = TrainState::init(&cfg).unwrap();
        let data = Dataset::new(vec![tiny_scene()], &st.model).unwrap();
        let i = st.model.params.specs.iter().find(|s| s.name == "decoder.fc1.bias").unwrap().offset;
        st.model.params.values[i] = f64::INFINITY;
        match train_step(&mut st, &data, &[0], &cfg) {
            Err(TrainError::NonFinite { diagnostic, .. }) => {
                assert_eq!(diagnostic["windows"].as_array().unwrap().len(), 1);
            }
            other => panic!("expected a non-finite error, got {other:?}"),
        }
    }
}
