//! Query/key heads and the contrastive map loss.
//!
//! The query is a linear projection of the fused hidden state. Keys are an
//! MLP over sample positions expressed in the pedestrian's canonical frame.
//! The loss is softmax cross-entropy of the positive among `1 + J` keys.

use ecam_core::nn::{self, Linear, ParamBuilder, ParamSet};
use ecam_core::Vec2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NceConfig {
    pub tau: f64,
    pub embed_dim: usize,
    pub key_hidden: usize,
    pub normalize_embeddings: bool,
}

impl Default for NceConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            embed_dim: 16,
            key_hidden: 32,
            normalize_embeddings: false,
        }
    }
}

/// Both projection heads in one parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct NceHeads {
    pub cfg: NceConfig,
    pub hidden: usize,
    pub params: ParamSet,
    query: Linear,
    key_in: Linear,
    key_out: Linear,
}

struct HeadLayers {
    query: Linear,
    key_in: Linear,
    key_out: Linear,
}

fn register(cfg: &NceConfig, hidden: usize) -> (ParamBuilder, HeadLayers) {
    let mut b = ParamBuilder::new();
    let query = b.linear("query", hidden, cfg.embed_dim);
    let key_in = b.linear("key.fc0", 2, cfg.key_hidden);
    let key_out = b.linear("key.fc1", cfg.key_hidden, cfg.embed_dim);
    (b, HeadLayers { query, key_in, key_out })
}

/// Forward cache of one key.
#[derive(Debug, Clone)]
pub struct KeyCache {
    input: [f64; 2],
    hidden: Vec<f64>,
    pub out: Vec<f64>,
}

impl NceHeads {
    pub fn new<R: Rng>(cfg: NceConfig, hidden: usize, rng: &mut R) -> Result<Self> {
        Self::validate(&cfg)?;
        let (b, l) = register(&cfg, hidden);
        Ok(Self {
            cfg,
            hidden,
            params: b.build(rng),
            query: l.query,
            key_in: l.key_in,
            key_out: l.key_out,
        })
    }

    pub fn from_params(cfg: NceConfig, hidden: usize, params: ParamSet) -> Result<Self> {
        Self::validate(&cfg)?;
        let (b, l) = register(&cfg, hidden);
        let (specs, len) = b.layout();
        if specs != params.specs || len != params.len() {
            return Err(TrainError::Invalid("head parameters do not match the configuration".into()));
        }
        Ok(Self {
            cfg,
            hidden,
            params,
            query: l.query,
            key_in: l.key_in,
            key_out: l.key_out,
        })
    }

    fn validate(cfg: &NceConfig) -> Result<()> {
        if !(cfg.tau > 0.0) || cfg.embed_dim == 0 || cfg.key_hidden == 0 {
            return Err(TrainError::Invalid(format!("invalid contrastive config: {cfg:?}")));
        }
        Ok(())
    }

    pub fn encode_query(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.query.check_input(h)?;
        Ok(self.query.forward(&self.params.values, h))
    }

    /// Accumulates head gradients and returns `dL/dh`.
    pub fn query_backward(&self, h: &[f64], g_q: &[f64], grads: &mut [f64]) -> Vec<f64> {
        self.query.backward(&self.params.values, h, g_q, grads)
    }

    pub fn key_forward(&self, p: Vec2) -> KeyCache {
        let input = [p.x, p.y];
        let mut hidden = self.key_in.forward(&self.params.values, &input);
        nn::tanh_inplace(&mut hidden);
        let out = self.key_out.forward(&self.params.values, &hidden);
        KeyCache { input, hidden, out }
    }

    pub fn encode_key(&self, p: Vec2) -> Vec<f64> {
        self.key_forward(p).out
    }

    pub fn key_backward(&self, cache: &KeyCache, g_k: &[f64], grads: &mut [f64]) {
        let p = &self.params.values;
        let g_hidden = self.key_out.backward(p, &cache.hidden, g_k, grads);
        let g_pre = nn::tanh_backward(&cache.hidden, &g_hidden);
        self.key_in.backward(p, &cache.input, &g_pre, grads);
    }

    /// Contrastive loss of one pedestrian for one positive; accumulates
    /// head gradients scaled by `scale` and returns `(loss, scale·dL/dh)`.
    pub fn pedestrian_loss(
        &self,
        h: &[f64],
        positive: Vec2,
        negatives: &[Vec2],
        scale: f64,
        grads: Option<&mut [f64]>,
    ) -> Result<(f64, Vec<f64>)> {
        let q_raw = self.encode_query(h)?;
        let caches: Vec<KeyCache> = std::iter::once(positive)
            .chain(negatives.iter().copied())
            .map(|p| self.key_forward(p))
            .collect();
        let norm = self.cfg.normalize_embeddings;
        let (q, q_n) = if norm { l2_normalize(&q_raw) } else { (q_raw.clone(), 1.0) };
        let keyed: Vec<(Vec<f64>, f64)> = caches
            .iter()
            .map(|c| if norm { l2_normalize(&c.out) } else { (c.out.clone(), 1.0) })
            .collect();
        let keys: Vec<Vec<f64>> = keyed.iter().map(|(k, _)| k.clone()).collect();
        let out = mapnce_loss(&q, &keys, self.cfg.tau)?;
        let Some(grads) = grads else {
            return Ok((out.loss, vec![0.0; h.len()]));
        };
        let mut g_q: Vec<f64> = out.grad_query.iter().map(|g| g * scale).collect();
        if norm {
            g_q = l2_normalize_backward(&q, q_n, &g_q);
        }
        for ((cache, (k, k_n)), gk) in caches.iter().zip(&keyed).zip(&out.grad_keys) {
            let mut g: Vec<f64> = gk.iter().map(|v| v * scale).collect();
            if norm {
                g = l2_normalize_backward(k, *k_n, &g);
            }
            self.key_backward(cache, &g, grads);
        }
        let g_h = self.query_backward(h, &g_q, grads);
        Ok((out.loss, g_h))
    }
}

const NORM_EPS: f64 = 1e-12;

fn l2_normalize(v: &[f64]) -> (Vec<f64>, f64) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
    (v.iter().map(|x| x / n).collect(), n)
}

/// Gradient through `u = v/‖v‖` given `u`, `‖v‖` and `dL/du`.
fn l2_normalize_backward(u: &[f64], n: f64, g_u: &[f64]) -> Vec<f64> {
    let dot: f64 = u.iter().zip(g_u).map(|(a, b)| a * b).sum();
    u.iter().zip(g_u).map(|(ui, gi)| (gi - ui * dot) / n).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NceOutput {
    pub loss: f64,
    pub grad_query: Vec<f64>,
    /// Gradient for every key, positive first.
    pub grad_keys: Vec<Vec<f64>>,
}

/// `-log softmax(q·k_j/τ)_0` with a max-shifted log-sum-exp.
pub fn mapnce_loss(query: &[f64], keys: &[Vec<f64>], tau: f64) -> Result<NceOutput> {
    if keys.is_empty() {
        return Err(TrainError::Invalid("contrastive batch needs at least one key".into()));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(TrainError::Invalid(format!("temperature must be positive, got {tau}")));
    }
    for k in keys {
        if k.len() != query.len() {
            return Err(TrainError::Core(ecam_core::Error::Shape {
                expected: query.len(),
                actual: k.len(),
            }));
        }
    }
    if !query.iter().chain(keys.iter().flatten()).all(|v| v.is_finite()) {
        return Err(TrainError::Core(ecam_core::Error::Numeric(
            "non-finite query or key embedding".into(),
        )));
    }
    let logits: Vec<f64> = keys
        .iter()
        .map(|k| k.iter().zip(query).map(|(a, b)| a * b).sum::<f64>() / tau)
        .collect();
    // work with d_j = l_j - l_0 so a near-saturated loss keeps its precision
    let d: Vec<f64> = logits.iter().map(|l| l - logits[0]).collect();
    let m = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let loss = if m <= 0.0 {
        d[1..].iter().map(|v| v.exp()).sum::<f64>().ln_1p()
    } else {
        m + d.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
    };
    if !loss.is_finite() {
        return Err(TrainError::Core(ecam_core::Error::Numeric(format!(
            "contrastive loss is {loss}"
        ))));
    }
    // dL/dlogit_j = softmax_j - [j == 0], softmax_j = exp(d_j - loss)
    let coef: Vec<f64> = d
        .iter()
        .enumerate()
        .map(|(j, v)| (v - loss).exp() - if j == 0 { 1.0 } else { 0.0 })
        .collect();
    let mut grad_query = vec![0.0; query.len()];
    for (k, c) in keys.iter().zip(&coef) {
        for (g, kv) in grad_query.iter_mut().zip(k) {
            *g += c * kv / tau;
        }
    }
    let grad_keys = coef
        .iter()
        .map(|c| query.iter().map(|q| c * q / tau).collect())
        .collect();
    Ok(NceOutput {
        loss: loss.max(0.0),
        grad_query,
        grad_keys,
    })
}

/// Mean over pedestrians that were not skipped; `None` entries are skipped.
pub fn scene_mean(losses: &[Option<f64>]) -> f64 {
    let kept: Vec<f64> = losses.iter().flatten().copied().collect();
    if kept.is_empty() {
        0.0
    } else {
        kept.iter().sum::<f64>() / kept.len() as f64
    }
}
