//! Multi-sample trajectory predictor.
//!
//! History and map patch are encoded in a pedestrian-centric frame (origin
//! at the last observed position, +x along the current heading). The two
//! encodings are summed into the hidden state `h`, which a noise-conditioned
//! decoder turns into `K` future trajectories. `h` is also the hook the
//! contrastive head attaches to during training.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::TrajectoryWindow;
use crate::error::{Error, Result};
use crate::geom::{Frame, Vec2};
use crate::gridmap::{MapPatch, OccupancyMap, PatchConfig};
use crate::nn::{self, Conv2d, Linear, ParamBuilder, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub t_obs: usize,
    pub t_pred: usize,
    /// Width of the fused hidden state.
    pub hidden: usize,
    pub noise_dim: usize,
    /// Width of the patch encoder's embedding before projection to `hidden`.
    pub map_embed: usize,
    pub decoder_hidden: usize,
    pub use_map: bool,
    pub patch: PatchConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            t_obs: 8,
            t_pred: 12,
            hidden: 64,
            noise_dim: 8,
            map_embed: 64,
            decoder_hidden: 64,
            use_map: true,
            patch: PatchConfig::default(),
        }
    }
}

const CONV_CHANNELS: [usize; 4] = [4, 8, 8, 8];

#[derive(Debug, Clone, PartialEq)]
pub struct PatchEncoder {
    pub convs: Vec<Conv2d>,
    /// Flattened conv features to the map embedding.
    pub fc: Linear,
}

impl PatchEncoder {
    pub fn register(b: &mut ParamBuilder, size: usize, embed: usize) -> Self {
        let mut convs = Vec::new();
        let (mut ch, mut s) = (1, size);
        for (i, &out) in CONV_CHANNELS.iter().enumerate() {
            let c = b.conv(&format!("patch.conv{i}"), ch, out, s);
            ch = out;
            s = c.out_size;
            convs.push(c);
        }
        let flat = ch * s * s;
        let fc = b.linear("patch.fc", flat, embed);
        Self { convs, fc }
    }

    /// Forward pass keeping every activation; the last entry is the embedding.
    pub fn forward(&self, p: &[f64], input: &[f64]) -> Vec<Vec<f64>> {
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.convs.len() + 1);
        for conv in &self.convs {
            let x = acts.last().map(Vec::as_slice).unwrap_or(input);
            let mut y = conv.forward(p, x);
            nn::tanh_inplace(&mut y);
            acts.push(y);
        }
        let mut emb = self.fc.forward(p, acts.last().expect("conv stack is non-empty"));
        nn::tanh_inplace(&mut emb);
        acts.push(emb);
        acts
    }

    pub fn backward(&self, p: &[f64], input: &[f64], acts: &[Vec<f64>], g_emb: &[f64], g: &mut [f64]) {
        let n = self.convs.len();
        let mut gy = nn::tanh_backward(&acts[n], g_emb);
        gy = self.fc.backward(p, &acts[n - 1], &gy, g);
        for i in (0..n).rev() {
            let pre = nn::tanh_backward(&acts[i], &gy);
            let x = if i == 0 { input } else { &acts[i - 1] };
            gy = self.convs[i].backward(p, x, &pre, g);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layers {
    hist_in: Linear,
    hist_out: Linear,
    patch: Option<PatchEncoder>,
    map_proj: Option<Linear>,
    dec_in: Linear,
    dec_out: Linear,
}

impl Layers {
    fn register(cfg: &ModelConfig) -> (ParamBuilder, Self) {
        let mut b = ParamBuilder::new();
        let hist_in = b.linear("history.fc0", 2 * (cfg.t_obs - 1), cfg.hidden);
        let hist_out = b.linear("history.fc1", cfg.hidden, cfg.hidden);
        let (patch, map_proj) = if cfg.use_map {
            let enc = PatchEncoder::register(&mut b, cfg.patch.size, cfg.map_embed);
            let proj = b.linear("map.proj", cfg.map_embed, cfg.hidden);
            (Some(enc), Some(proj))
        } else {
            (None, None)
        };
        let dec_in = b.linear("decoder.fc0", cfg.hidden + cfg.noise_dim, cfg.decoder_hidden);
        let dec_out = b.linear("decoder.fc1", cfg.decoder_hidden, 2 * cfg.t_pred);
        (
            b,
            Self {
                hist_in,
                hist_out,
                patch,
                map_proj,
                dec_in,
                dec_out,
            },
        )
    }
}

/// Heading of the most recent non-zero displacement; +x when the
/// pedestrian never moved.
pub fn heading_of(past: &[Vec2]) -> f64 {
    past.windows(2)
        .rev()
        .map(|w| w[1] - w[0])
        .find(|d| d.norm_sq() > 0.0)
        .map(|d| d.y.atan2(d.x))
        .unwrap_or(0.0)
}

pub fn canonical_frame(window: &TrajectoryWindow) -> Frame {
    Frame::new(window.last_observed(), heading_of(&window.past))
}

/// Observed displacements rotated into the pedestrian frame, flattened.
pub fn canonical_history(window: &TrajectoryWindow, frame: &Frame) -> Vec<f64> {
    window
        .past
        .windows(2)
        .flat_map(|w| {
            let d = frame.vec_to_local(w[1] - w[0]);
            [d.x, d.y]
        })
        .collect()
}

pub fn fuse(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x + y).collect())
}

/// Per-window inputs that do not depend on the parameters.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub frame: Frame,
    pub history: Vec<f64>,
    pub patch: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Encoded {
    hist_hidden: Vec<f64>,
    pub h_hist: Vec<f64>,
    patch_acts: Option<Vec<Vec<f64>>>,
    pub map_h: Option<Vec<f64>>,
    /// Fused hidden state.
    pub h: Vec<f64>,
}

#[derive(Debug, Clone)]
struct SampleCache {
    input: Vec<f64>,
    hidden: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Decoded {
    caches: Vec<SampleCache>,
    /// Decoder output per sample: `t_pred` canonical-frame step offsets.
    pub raw: Vec<Vec<f64>>,
    pub trajectories: Vec<Vec<Vec2>>,
}

/// Trajectory predictor state: architecture plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    layers: Layers,
}

impl Predictor {
    pub fn new<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        Self::validate_config(&cfg)?;
        let (b, layers) = Layers::register(&cfg);
        Ok(Self {
            cfg,
            params: b.build(rng),
            layers,
        })
    }

    /// Rebuilds a predictor from stored parameters; names and shapes must
    /// match the architecture implied by `cfg`.
    pub fn from_params(cfg: ModelConfig, params: ParamSet) -> Result<Self> {
        Self::validate_config(&cfg)?;
        let (b, layers) = Layers::register(&cfg);
        let (specs, len) = b.layout();
        if specs != params.specs || len != params.values.len() {
            return Err(Error::Validation(
                "parameter layout does not match the model configuration".into(),
            ));
        }
        if !params.all_finite() {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(Self { cfg, params, layers })
    }

    fn validate_config(cfg: &ModelConfig) -> Result<()> {
        if cfg.t_obs < 2 || cfg.t_pred < 1 || cfg.hidden == 0 || cfg.decoder_hidden == 0 {
            return Err(Error::Validation(format!("invalid model dimensions: {cfg:?}")));
        }
        if cfg.use_map && cfg.patch.size < 16 {
            return Err(Error::Validation("patch size must be at least 16".into()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn patch_encoder(&self) -> Option<&PatchEncoder> {
        self.layers.patch.as_ref()
    }

    pub fn extract_patch(&self, map: &OccupancyMap, frame: &Frame) -> MapPatch {
        map.extract_patch(frame.origin, frame.heading, &self.cfg.patch)
    }

    pub fn prepare(&self, window: &TrajectoryWindow, map: Option<&OccupancyMap>) -> Result<Prepared> {
        window.validate()?;
        if window.past.len() != self.cfg.t_obs {
            return Err(Error::Shape {
                expected: self.cfg.t_obs,
                actual: window.past.len(),
            });
        }
        let frame = canonical_frame(window);
        let history = canonical_history(window, &frame);
        let patch = if self.cfg.use_map {
            let map = map.ok_or_else(|| Error::Validation("model needs a map".into()))?;
            Some(self.extract_patch(map, &frame).occupancy())
        } else {
            None
        };
        Ok(Prepared {
            frame,
            history,
            patch,
        })
    }

    /// History pathway only (`h_hist`).
    pub fn encode_history(&self, window: &TrajectoryWindow) -> Result<Vec<f64>> {
        let frame = canonical_frame(window);
        let x = canonical_history(window, &frame);
        self.layers.hist_in.check_input(&x)?;
        Ok(self.history_forward(&x).1)
    }

    fn history_forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let p = &self.params.values;
        let mut a = self.layers.hist_in.forward(p, x);
        nn::tanh_inplace(&mut a);
        let out = self.layers.hist_out.forward(p, &a);
        (a, out)
    }

    pub fn encode(&self, prep: &Prepared) -> Encoded {
        let p = &self.params.values;
        let (hist_hidden, h_hist) = self.history_forward(&prep.history);
        let (patch_acts, map_h) = match (&self.layers.patch, &self.layers.map_proj, &prep.patch) {
            (Some(enc), Some(proj), Some(input)) => {
                let acts = enc.forward(p, input);
                let map_h = proj.forward(p, acts.last().expect("embedding"));
                (Some(acts), Some(map_h))
            }
            _ => (None, None),
        };
        let h = match &map_h {
            Some(m) => fuse(&h_hist, m).expect("hidden widths agree"),
            None => h_hist.clone(),
        };
        Encoded {
            hist_hidden,
            h_hist,
            patch_acts,
            map_h,
            h,
        }
    }

    pub fn draw_noise<R: Rng>(&self, k: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..k)
            .map(|_| (0..self.cfg.noise_dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect()
    }

    /// Decodes one trajectory per noise vector and maps it to world space.
    pub fn decode(&self, frame: &Frame, h: &[f64], noise: &[Vec<f64>]) -> Decoded {
        let p = &self.params.values;
        let mut caches = Vec::with_capacity(noise.len());
        let mut raw = Vec::with_capacity(noise.len());
        let mut trajectories = Vec::with_capacity(noise.len());
        for z in noise {
            let mut input = h.to_vec();
            input.extend_from_slice(z);
            let mut hidden = self.layers.dec_in.forward(p, &input);
            nn::tanh_inplace(&mut hidden);
            let out = self.layers.dec_out.forward(p, &hidden);
            trajectories.push(offsets_to_world(frame, &out));
            raw.push(out);
            caches.push(SampleCache { input, hidden });
        }
        Decoded {
            caches,
            raw,
            trajectories,
        }
    }

    pub fn decode_samples<R: Rng>(&self, frame: &Frame, h: &[f64], k: usize, rng: &mut R) -> Vec<Vec<Vec2>> {
        let noise = self.draw_noise(k, rng);
        self.decode(frame, h, &noise).trajectories
    }

    /// Draws `k` future trajectories for one window.
    pub fn predict<R: Rng>(
        &self,
        window: &TrajectoryWindow,
        map: Option<&OccupancyMap>,
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<Vec2>>> {
        let prep = self.prepare(window, map)?;
        let enc = self.encode(&prep);
        Ok(self.decode_samples(&prep.frame, &enc.h, k, rng))
    }

    /// Accumulates `dL/dθ` into `grads` given `dL/dŶ` for every decoded
    /// sample (world frame) and any extra `dL/dh` from heads attached to `h`.
    pub fn backward(
        &self,
        prep: &Prepared,
        enc: &Encoded,
        dec: &Decoded,
        g_traj: &[Vec<Vec2>],
        g_h_extra: Option<&[f64]>,
        grads: &mut [f64],
    ) {
        let p = &self.params.values;
        let hidden = self.cfg.hidden;
        let mut g_h = match g_h_extra {
            Some(g) => g.to_vec(),
            None => vec![0.0; hidden],
        };
        for ((cache, gt), _) in dec.caches.iter().zip(g_traj).zip(&dec.raw) {
            if gt.iter().all(|g| *g == Vec2::ZERO) {
                continue;
            }
            let g_out = world_grad_to_offsets(&prep.frame, gt);
            let g_hidden = self.layers.dec_out.backward(p, &cache.hidden, &g_out, grads);
            let g_pre = nn::tanh_backward(&cache.hidden, &g_hidden);
            let g_in = self.layers.dec_in.backward(p, &cache.input, &g_pre, grads);
            nn::add_assign(&mut g_h, &g_in[..hidden]);
        }
        // h = h_hist + map_h
        if let (Some(enc_patch), Some(proj), Some(acts), Some(input)) = (
            &self.layers.patch,
            &self.layers.map_proj,
            &enc.patch_acts,
            &prep.patch,
        ) {
            let g_emb = proj.backward(p, acts.last().expect("embedding"), &g_h, grads);
            enc_patch.backward(p, input, acts, &g_emb, grads);
        }
        let g_a = self.layers.hist_out.backward(p, &enc.hist_hidden, &g_h, grads);
        let g_pre = nn::tanh_backward(&enc.hist_hidden, &g_a);
        self.layers.hist_in.backward(p, &prep.history, &g_pre, grads);
    }
}

/// Cumulative canonical offsets to world positions.
pub fn offsets_to_world(frame: &Frame, raw: &[f64]) -> Vec<Vec2> {
    let mut acc = Vec2::ZERO;
    raw.chunks_exact(2)
        .map(|d| {
            acc += Vec2::new(d[0], d[1]);
            frame.to_world(acc)
        })
        .collect()
}

/// Inverse of [`offsets_to_world`].
pub fn world_to_offsets(frame: &Frame, traj: &[Vec2]) -> Vec<f64> {
    let mut prev = Vec2::ZERO;
    traj.iter()
        .flat_map(|p| {
            let local = frame.to_local(*p);
            let d = local - prev;
            prev = local;
            [d.x, d.y]
        })
        .collect()
}

fn world_grad_to_offsets(frame: &Frame, g: &[Vec2]) -> Vec<f64> {
    // y_t = o + R Σ_{s≤t} d_s  ⇒  dL/dd_s = Rᵀ Σ_{t≥s} dL/dy_t
    let mut out = vec![0.0; 2 * g.len()];
    let mut acc = Vec2::ZERO;
    for (s, gt) in g.iter().enumerate().rev() {
        acc += *gt;
        let local = frame.vec_to_local(acc);
        out[2 * s] = local.x;
        out[2 * s + 1] = local.y;
    }
    out
}

pub type Trajectory = Vec<Vec2>;

/// `K` sampled futures for each of `N` pedestrians.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionSet {
    samples: Vec<Vec<Trajectory>>,
}

impl PredictionSet {
    /// Every pedestrian must carry the same number of samples, all of equal
    /// length with finite coordinates.
    pub fn new(samples: Vec<Vec<Trajectory>>) -> Result<Self> {
        if let Some(first) = samples.first() {
            let k = first.len();
            let t = first.first().map_or(0, |s| s.len());
            for ped in &samples {
                if ped.len() != k {
                    return Err(Error::Shape {
                        expected: k,
                        actual: ped.len(),
                    });
                }
                for s in ped {
                    if s.len() != t {
                        return Err(Error::Shape {
                            expected: t,
                            actual: s.len(),
                        });
                    }
                    if !s.iter().all(|p| p.is_finite()) {
                        return Err(Error::Numeric("non-finite predicted coordinate".into()));
                    }
                }
            }
        }
        Ok(Self { samples })
    }

    pub fn num_pedestrians(&self) -> usize {
        self.samples.len()
    }

    pub fn k(&self) -> usize {
        self.samples.first().map_or(0, |p| p.len())
    }

    pub fn pedestrian(&self, i: usize) -> &[Trajectory] {
        &self.samples[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[Trajectory]> {
        self.samples.iter().map(|p| p.as_slice())
    }

    pub fn into_inner(self) -> Vec<Vec<Trajectory>> {
        self.samples
    }
}
