//! Embedding functions `f_φ`: a small trainable convolutional network with
//! reverse-mode gradients, a linear embedder, an identity embedder for oracle
//! tests, and a precomputed embedding-table loader.
//!
//! Parameters and activations are f32; loss and metric reductions accumulate
//! in f64.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protonet::{self, ClassPosterior};
use crate::rng;
use crate::table;
use crate::tensor::Payload;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderKind {
    Identity,
    Linear,
    ToyCnn,
    Table,
}

/// Shape of the toy Conv4 backbone: 4 blocks of (3×3 conv, ReLU, 2×2 max-pool)
/// followed by global average pooling. Input sides must be divisible by 16.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv4Config {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub widths: [usize; 4],
}

impl Conv4Config {
    pub fn validate(&self) -> Result<()> {
        if self.in_h % 16 != 0 || self.in_w % 16 != 0 || self.in_h < 16 || self.in_w < 16 {
            return Err(Error::InvalidConfig(format!(
                "conv4 input sides must be multiples of 16, got {}x{}",
                self.in_h, self.in_w
            )));
        }
        if self.widths.iter().any(|&w| w == 0) || self.in_c == 0 {
            return Err(Error::InvalidConfig("conv4 widths must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut in_c = self.in_c;
        for &out_c in &self.widths {
            total += out_c * in_c * 9 + out_c;
            in_c = out_c;
        }
        total
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Model {
    Identity {
        dim: usize,
    },
    Linear {
        in_dim: usize,
        out_dim: usize,
        params: Vec<f32>, // W row-major (out×in), then bias
    },
    ToyCnn {
        cfg: Conv4Config,
        params: Vec<f32>, // per block: conv weights [out][in][3][3], then bias
    },
    Table {
        dim: usize,
        map: HashMap<String, Vec<f32>>,
    },
}

/// The embedding function `f_φ` with trainable parameters `φ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    model: Model,
    frozen: bool,
}

impl Embedder {
    pub fn identity(dim: usize) -> Self {
        Self {
            model: Model::Identity { dim },
            frozen: false,
        }
    }

    pub fn linear(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut params = vec![0.0f32; out_dim * in_dim + out_dim];
        let std = (1.0 / in_dim as f64).sqrt();
        let mut rng = rng::stream(seed, "init-linear", 0);
        for p in params[..out_dim * in_dim].iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *p = (z * std) as f32;
        }
        Self {
            model: Model::Linear {
                in_dim,
                out_dim,
                params,
            },
            frozen: false,
        }
    }

    pub fn linear_from_weights(in_dim: usize, out_dim: usize, params: Vec<f32>) -> Result<Self> {
        if params.len() != out_dim * in_dim + out_dim {
            return Err(Error::ShapeMismatch(format!(
                "linear params: expected {}, got {}",
                out_dim * in_dim + out_dim,
                params.len()
            )));
        }
        Ok(Self {
            model: Model::Linear {
                in_dim,
                out_dim,
                params,
            },
            frozen: false,
        })
    }

    pub fn toy_cnn(cfg: Conv4Config, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = vec![0.0f32; cfg.param_count()];
        let mut rng = rng::stream(seed, "init-conv4", 0);
        let mut offset = 0;
        let mut in_c = cfg.in_c;
        for &out_c in &cfg.widths {
            let fan_in = in_c * 9;
            let std = (2.0 / fan_in as f64).sqrt();
            for p in params[offset..offset + out_c * fan_in].iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *p = (z * std) as f32;
            }
            offset += out_c * fan_in + out_c; // biases stay zero
            in_c = out_c;
        }
        Ok(Self {
            model: Model::ToyCnn { cfg, params },
            frozen: false,
        })
    }

    pub fn table(dim: usize, map: HashMap<String, Vec<f32>>) -> Result<Self> {
        for (id, v) in &map {
            if v.len() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "table entry '{id}' has dim {}, expected {dim}",
                    v.len()
                )));
            }
        }
        Ok(Self {
            model: Model::Table { dim, map },
            frozen: true, // tables have no trainable parameters
        })
    }

    pub fn kind(&self) -> EmbedderKind {
        match &self.model {
            Model::Identity { .. } => EmbedderKind::Identity,
            Model::Linear { .. } => EmbedderKind::Linear,
            Model::ToyCnn { .. } => EmbedderKind::ToyCnn,
            Model::Table { .. } => EmbedderKind::Table,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        match &self.model {
            Model::Identity { dim } => *dim,
            Model::Linear { out_dim, .. } => *out_dim,
            Model::ToyCnn { cfg, .. } => cfg.widths[3],
            Model::Table { dim, .. } => *dim,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// A frozen copy (the DL baseline artifact).
    pub fn frozen_copy(&self) -> Self {
        let mut copy = self.clone();
        copy.frozen = true;
        copy
    }

    pub fn params(&self) -> &[f32] {
        match &self.model {
            Model::Linear { params, .. } | Model::ToyCnn { params, .. } => params,
            _ => &[],
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().len()
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f32] {
        match &mut self.model {
            Model::Linear { params, .. } | Model::ToyCnn { params, .. } => params,
            _ => &mut [],
        }
    }

    fn check_input(&self, payload: &Payload) -> Result<()> {
        match (&self.model, payload) {
            (Model::Identity { dim }, p) if p.len() == *dim => Ok(()),
            (Model::Linear { in_dim, .. }, p) if p.len() == *in_dim => Ok(()),
            (Model::ToyCnn { cfg, .. }, Payload::Image(img))
                if img.shape() == (cfg.in_c, cfg.in_h, cfg.in_w) =>
            {
                Ok(())
            }
            (Model::Table { .. }, _) => Ok(()),
            _ => Err(Error::ShapeMismatch(format!(
                "{:?} embedder cannot embed {}",
                self.kind(),
                payload.shape_desc()
            ))),
        }
    }

    /// `f_φ(x)`: deterministic, finite embedding of length `embedding_dim()`.
    pub fn embed(&self, payload: &Payload, source_id: &str) -> Result<Vec<f32>> {
        self.check_input(payload)?;
        let out = match &self.model {
            Model::Identity { .. } => payload.values().to_vec(),
            Model::Linear {
                in_dim,
                out_dim,
                params,
            } => linear_forward(payload.values(), params, *in_dim, *out_dim),
            Model::ToyCnn { cfg, params } => conv4_forward(payload.values(), cfg, params).0,
            Model::Table { map, .. } => map
                .get(source_id)
                .cloned()
                .ok_or_else(|| Error::UnknownSourceId(source_id.to_string()))?,
        };
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(out)
    }

    /// Forward pass that records the values needed for backprop.
    fn forward_cached(&self, payload: &Payload) -> Result<(Vec<f32>, ForwardCache)> {
        self.check_input(payload)?;
        match &self.model {
            Model::Identity { .. } => Ok((payload.values().to_vec(), ForwardCache::Identity)),
            Model::Linear { in_dim, out_dim, params } => {
                let out = linear_forward(payload.values(), params, *in_dim, *out_dim);
                Ok((out, ForwardCache::Linear { input: payload.values().to_vec() }))
            }
            Model::ToyCnn { cfg, params } => {
                let (out, cache) = conv4_forward(payload.values(), cfg, params);
                Ok((out, ForwardCache::Conv(Box::new(cache))))
            }
            Model::Table { .. } => Err(Error::InvalidArgument(
                "table embedders are not trainable".into(),
            )),
        }
    }

    /// Accumulate `∂L/∂φ` into `grad` given `∂L/∂embedding`.
    fn backward(&self, cache: &ForwardCache, d_emb: &[f32], grad: &mut [f32]) {
        match (&self.model, cache) {
            (Model::Identity { .. }, ForwardCache::Identity) => {}
            (Model::Linear { in_dim, out_dim, .. }, ForwardCache::Linear { input }) => {
                linear_backward(input, d_emb, *in_dim, *out_dim, grad);
            }
            (Model::ToyCnn { cfg, params }, ForwardCache::Conv(c)) => {
                conv4_backward(cfg, params, c, d_emb, grad);
            }
            _ => unreachable!("cache kind mismatch"),
        }
    }
}

enum ForwardCache {
    Identity,
    Linear { input: Vec<f32> },
    Conv(Box<Conv4Cache>),
}

// ---------------------------------------------------------------------------
// Linear layer math
// ---------------------------------------------------------------------------

fn linear_forward(x: &[f32], params: &[f32], in_dim: usize, out_dim: usize) -> Vec<f32> {
    let bias = &params[out_dim * in_dim..];
    (0..out_dim)
        .map(|o| {
            let row = &params[o * in_dim..(o + 1) * in_dim];
            let mut acc = bias[o] as f64;
            for (w, v) in row.iter().zip(x) {
                acc += *w as f64 * *v as f64;
            }
            acc as f32
        })
        .collect()
}

fn linear_backward(x: &[f32], d_out: &[f32], in_dim: usize, out_dim: usize, grad: &mut [f32]) {
    for o in 0..out_dim {
        let g = d_out[o];
        let row = &mut grad[o * in_dim..(o + 1) * in_dim];
        for (gw, v) in row.iter_mut().zip(x) {
            *gw += g * v;
        }
        grad[out_dim * in_dim + o] += g;
    }
}

// ---------------------------------------------------------------------------
// Conv4 forward / backward
// ---------------------------------------------------------------------------

struct Conv4Cache {
    /// input to each block (post previous pool)
    block_inputs: Vec<Vec<f32>>,
    /// conv output before ReLU, per block
    pre_acts: Vec<Vec<f32>>,
    /// flat argmax index (into the post-ReLU map) per pooled cell, per block
    pool_argmax: Vec<Vec<usize>>,
    /// pooled output of the last block (input to GAP)
    last_pooled: Vec<f32>,
}

fn block_dims(cfg: &Conv4Config, b: usize) -> (usize, usize, usize) {
    let in_c = if b == 0 { cfg.in_c } else { cfg.widths[b - 1] };
    (in_c, cfg.in_h >> b, cfg.in_w >> b)
}

fn conv3x3(
    input: &[f32],
    in_c: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    bias: &[f32],
    out_c: usize,
) -> Vec<f32> {
    let mut out = vec![0.0f32; out_c * h * w];
    for o in 0..out_c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = bias[o] as f64;
                for i in 0..in_c {
                    for ky in 0..3usize {
                        let yy = y as isize + ky as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let xx = x as isize + kx as isize - 1;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let wv = weight[((o * in_c + i) * 3 + ky) * 3 + kx];
                            let iv = input[(i * h + yy as usize) * w + xx as usize];
                            acc += wv as f64 * iv as f64;
                        }
                    }
                }
                out[(o * h + y) * w + x] = acc as f32;
            }
        }
    }
    out
}

fn conv4_forward(input: &[f32], cfg: &Conv4Config, params: &[f32]) -> (Vec<f32>, Conv4Cache) {
    let mut cache = Conv4Cache {
        block_inputs: Vec::with_capacity(4),
        pre_acts: Vec::with_capacity(4),
        pool_argmax: Vec::with_capacity(4),
        last_pooled: Vec::new(),
    };
    let mut cur = input.to_vec();
    let mut offset = 0;
    for b in 0..4 {
        let (in_c, h, w) = block_dims(cfg, b);
        let out_c = cfg.widths[b];
        let w_len = out_c * in_c * 9;
        let weight = &params[offset..offset + w_len];
        let bias = &params[offset + w_len..offset + w_len + out_c];
        offset += w_len + out_c;

        cache.block_inputs.push(cur.clone());
        let pre = conv3x3(&cur, in_c, h, w, weight, bias, out_c);
        // ReLU + 2×2 max-pool
        let (ph, pw) = (h / 2, w / 2);
        let mut pooled = vec![0.0f32; out_c * ph * pw];
        let mut argmax = vec![0usize; out_c * ph * pw];
        for o in 0..out_c {
            for py in 0..ph {
                for px in 0..pw {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = (o * h + 2 * py + dy) * w + 2 * px + dx;
                            let v = pre[idx].max(0.0);
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    pooled[(o * ph + py) * pw + px] = best;
                    argmax[(o * ph + py) * pw + px] = best_idx;
                }
            }
        }
        cache.pre_acts.push(pre);
        cache.pool_argmax.push(argmax);
        cur = pooled;
    }
    // global average pool over the final (widths[3], h/16, w/16) map
    let (fh, fw) = (cfg.in_h / 16, cfg.in_w / 16);
    let m = cfg.widths[3];
    let mut emb = vec![0.0f32; m];
    for o in 0..m {
        let mut acc = 0.0f64;
        for s in 0..fh * fw {
            acc += cur[o * fh * fw + s] as f64;
        }
        emb[o] = (acc / (fh * fw) as f64) as f32;
    }
    cache.last_pooled = cur;
    (emb, cache)
}

fn conv4_backward(
    cfg: &Conv4Config,
    params: &[f32],
    cache: &Conv4Cache,
    d_emb: &[f32],
    grad: &mut [f32],
) {
    // GAP backward
    let (fh, fw) = (cfg.in_h / 16, cfg.in_w / 16);
    let m = cfg.widths[3];
    let mut d_pooled = vec![0.0f32; cache.last_pooled.len()];
    for o in 0..m {
        let g = d_emb[o] / (fh * fw) as f32;
        for s in 0..fh * fw {
            d_pooled[o * fh * fw + s] = g;
        }
    }

    // per-block parameter offsets
    let mut offsets = [0usize; 4];
    {
        let mut off = 0;
        for b in 0..4 {
            offsets[b] = off;
            let (in_c, _, _) = block_dims(cfg, b);
            off += cfg.widths[b] * in_c * 9 + cfg.widths[b];
        }
    }

    for b in (0..4).rev() {
        let (in_c, h, w) = block_dims(cfg, b);
        let out_c = cfg.widths[b];
        let (ph, pw) = (h / 2, w / 2);
        let pre = &cache.pre_acts[b];
        let input = &cache.block_inputs[b];
        let argmax = &cache.pool_argmax[b];

        // pool + ReLU backward: route pooled grads to argmax cells where pre > 0
        let mut d_pre = vec![0.0f32; out_c * h * w];
        for cell in 0..out_c * ph * pw {
            let idx = argmax[cell];
            if pre[idx] > 0.0 {
                d_pre[idx] += d_pooled[cell];
            }
        }

        // conv backward
        let w_len = out_c * in_c * 9;
        let w_off = offsets[b];
        let weight = &params[w_off..w_off + w_len];
        let mut d_input = vec![0.0f32; in_c * h * w];
        for o in 0..out_c {
            for y in 0..h {
                for x in 0..w {
                    let g = d_pre[(o * h + y) * w + x];
                    if g == 0.0 {
                        continue;
                    }
                    grad[w_off + w_len + o] += g; // bias
                    for i in 0..in_c {
                        for ky in 0..3usize {
                            let yy = y as isize + ky as isize - 1;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for kx in 0..3usize {
                                let xx = x as isize + kx as isize - 1;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                let widx = ((o * in_c + i) * 3 + ky) * 3 + kx;
                                let iidx = (i * h + yy as usize) * w + xx as usize;
                                grad[w_off + widx] += g * input[iidx];
                                d_input[iidx] += g * weight[widx];
                            }
                        }
                    }
                }
            }
        }
        d_pooled = d_input;
    }
}

// ---------------------------------------------------------------------------
// Linear classification head (conventional training)
// ---------------------------------------------------------------------------

/// A softmax classification head over embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub in_dim: usize,
    pub num_classes: usize,
    pub params: Vec<f32>, // W (classes×in), then bias
}

impl LinearHead {
    pub fn new(in_dim: usize, num_classes: usize, seed: u64) -> Self {
        let mut params = vec![0.0f32; num_classes * in_dim + num_classes];
        let std = (1.0 / in_dim as f64).sqrt();
        let mut rng = rng::stream(seed, "init-head", 0);
        for p in params[..num_classes * in_dim].iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *p = (z * std) as f32;
        }
        Self {
            in_dim,
            num_classes,
            params,
        }
    }

    pub fn logits(&self, emb: &[f32]) -> Vec<f64> {
        let bias = &self.params[self.num_classes * self.in_dim..];
        (0..self.num_classes)
            .map(|k| {
                let row = &self.params[k * self.in_dim..(k + 1) * self.in_dim];
                let mut acc = bias[k] as f64;
                for (w, v) in row.iter().zip(emb) {
                    acc += *w as f64 * *v as f64;
                }
                acc
            })
            .collect()
    }

    pub fn predict(&self, emb: &[f32]) -> usize {
        let logits = self.logits(emb);
        let mut best = 0;
        for k in 1..logits.len() {
            if logits[k] > logits[best] {
                best = k;
            }
        }
        best
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// `−Σ t_k ln p_k`, the cross-entropy between a soft target and a predicted
/// distribution.
pub fn cross_entropy(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter()
        .zip(target)
        .filter(|(_, t)| **t > 0.0)
        .map(|(p, t)| -t * p.max(f64::MIN_POSITIVE).ln())
        .sum()
}

/// Gradient record produced by a forward/backward pass: `∂J/∂φ` aligned with
/// the embedder's parameter layout, plus the head gradient when a linear
/// classifier head was attached.
#[derive(Debug, Clone)]
pub struct GradientTape {
    pub emb_grad: Vec<f32>,
    pub head_grad: Option<Vec<f32>>,
    pub loss: f64,
}

impl GradientTape {
    fn check_finite(&self) -> Result<()> {
        if !self.loss.is_finite()
            || self.emb_grad.iter().any(|v| !v.is_finite())
            || self
                .head_grad
                .as_ref()
                .is_some_and(|g| g.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite("gradient".into()));
        }
        Ok(())
    }
}

/// Mean soft-label cross-entropy of `batch` under `embedder → head → softmax`,
/// with gradients for both the embedder and the head.
pub fn forward_loss_classifier(
    embedder: &Embedder,
    head: &LinearHead,
    batch: &[(&Payload, &str)],
    targets: &[Vec<f64>],
) -> Result<(f64, GradientTape)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if batch.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "batch of {} with {} targets",
            batch.len(),
            targets.len()
        )));
    }
    for t in targets {
        if t.len() != head.num_classes {
            return Err(Error::ShapeMismatch(format!(
                "target of {} classes, head has {}",
                t.len(),
                head.num_classes
            )));
        }
        let sum: f64 = t.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || t.iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidArgument(
                "soft labels must be normalized and non-negative".into(),
            ));
        }
    }

    let n = batch.len() as f64;
    let mut loss = 0.0f64;
    let mut emb_grad = vec![0.0f32; embedder.param_count()];
    let mut head_grad = vec![0.0f32; head.params.len()];

    for ((payload, source_id), target) in batch.iter().zip(targets) {
        let (emb, cache) = match embedder.kind() {
            EmbedderKind::Table => (embedder.embed(payload, source_id)?, ForwardCache::Identity),
            _ => embedder.forward_cached(payload)?,
        };
        let logits = head.logits(&emb);
        let probs = softmax(&logits);
        loss += cross_entropy(&probs, target) / n;

        // dL/dlogit_k = (p_k − t_k) / n
        let d_logits: Vec<f32> = probs
            .iter()
            .zip(target)
            .map(|(p, t)| ((p - t) / n) as f32)
            .collect();

        // head grads and d_emb
        let mut d_emb = vec![0.0f32; head.in_dim];
        for k in 0..head.num_classes {
            let g = d_logits[k];
            let row = &head.params[k * head.in_dim..(k + 1) * head.in_dim];
            for i in 0..head.in_dim {
                head_grad[k * head.in_dim + i] += g * emb[i];
                d_emb[i] += g * row[i];
            }
            head_grad[head.num_classes * head.in_dim + k] += g;
        }

        if embedder.param_count() > 0 {
            embedder.backward(&cache, &d_emb, &mut emb_grad);
        }
    }

    let tape = GradientTape {
        emb_grad,
        head_grad: Some(head_grad),
        loss,
    };
    tape.check_finite()?;
    Ok((loss, tape))
}

/// Episodic loss `J(φ)` of one episode, with the gradient chained through the
/// prototypes into the embedder for both support and query examples.
pub fn forward_loss_episode(
    embedder: &Embedder,
    support: &[(&Payload, &str, usize)],
    queries: &[(&Payload, &str, usize)],
) -> Result<(f64, GradientTape, Vec<ClassPosterior>)> {
    if support.is_empty() || queries.is_empty() {
        return Err(Error::InvalidArgument(
            "episode requires support and queries".into(),
        ));
    }
    let mut s_embs = Vec::with_capacity(support.len());
    let mut s_caches = Vec::with_capacity(support.len());
    for (payload, _, class) in support {
        let (emb, cache) = embedder.forward_cached(payload)?;
        s_embs.push((emb, *class));
        s_caches.push(cache);
    }
    let mut q_embs = Vec::with_capacity(queries.len());
    let mut q_caches = Vec::with_capacity(queries.len());
    for (payload, _, class) in queries {
        let (emb, cache) = embedder.forward_cached(payload)?;
        q_embs.push((emb, *class));
        q_caches.push(cache);
    }

    let (loss, posteriors, grad) = protonet::episode_loss_with_grad(&s_embs, &q_embs)?;

    let mut emb_grad = vec![0.0f32; embedder.param_count()];
    if embedder.param_count() > 0 {
        for (cache, d) in s_caches.iter().zip(&grad.d_support) {
            embedder.backward(cache, d, &mut emb_grad);
        }
        for (cache, d) in q_caches.iter().zip(&grad.d_query) {
            embedder.backward(cache, d, &mut emb_grad);
        }
    }
    let tape = GradientTape {
        emb_grad,
        head_grad: None,
        loss,
    };
    tape.check_finite()?;
    Ok((loss, tape, posteriors))
}

// ---------------------------------------------------------------------------
// SGD with momentum
// ---------------------------------------------------------------------------

/// `v ← μ·v + g; φ ← φ − lr·v`. One optimizer instance per parameter vector.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: Vec<f32>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Result<Self> {
        if lr <= 0.0 {
            return Err(Error::InvalidArgument(format!("lr must be > 0, got {lr}")));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn step_params(&mut self, params: &mut [f32], grad: &[f32]) -> Result<()> {
        if grad.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "grad of {} for {} params",
                grad.len(),
                params.len()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        if self.velocity.len() != params.len() {
            self.velocity = vec![0.0; params.len()];
        }
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + *g;
            *p -= self.lr * *v;
        }
        Ok(())
    }

    /// Apply one step to an embedder's `φ`; frozen embedders error untouched.
    pub fn step_embedder(&mut self, embedder: &mut Embedder, grad: &[f32]) -> Result<()> {
        if embedder.is_frozen() {
            return Err(Error::Frozen);
        }
        self.step_params(embedder.params_mut(), grad)
    }
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

/// Compare analytic gradients against central finite differences at `±ε`
/// over every parameter of the embedder (skipped when frozen) and the head.
/// Relative error is `|analytic − numeric| / max(1, |numeric|)`.
///
/// The difference quotients are evaluated on an f64 replica of the model so
/// the check measures the backward pass, not f32 rounding of the forward.
pub fn gradient_check(
    embedder: &Embedder,
    head: &LinearHead,
    batch: &[(&Payload, &str)],
    targets: &[Vec<f64>],
    epsilon: f64,
) -> Result<GradCheckReport> {
    let (_, tape) = forward_loss_classifier(embedder, head, batch, targets)?;
    let head_grad = tape.head_grad.as_ref().unwrap();

    let mut emb_params: Vec<f64> = embedder.params().iter().map(|v| *v as f64).collect();
    let mut head_params: Vec<f64> = head.params.iter().map(|v| *v as f64).collect();

    let eval = |emb_p: &[f64], head_p: &[f64]| -> f64 {
        let n = batch.len() as f64;
        let mut loss = 0.0;
        for ((payload, source_id), target) in batch.iter().zip(targets) {
            let emb = match &embedder.model {
                Model::Identity { .. } => {
                    payload.values().iter().map(|v| *v as f64).collect()
                }
                Model::Linear { in_dim, out_dim, .. } => {
                    linear_forward_f64(payload.values(), emb_p, *in_dim, *out_dim)
                }
                Model::ToyCnn { cfg, .. } => conv4_forward_f64(payload.values(), cfg, emb_p),
                Model::Table { map, .. } => map
                    .get(*source_id)
                    .map(|v| v.iter().map(|x| *x as f64).collect())
                    .unwrap_or_default(),
            };
            let logits: Vec<f64> = (0..head.num_classes)
                .map(|k| {
                    let row = &head_p[k * head.in_dim..(k + 1) * head.in_dim];
                    let mut acc = head_p[head.num_classes * head.in_dim + k];
                    for (w, v) in row.iter().zip(&emb) {
                        acc += w * v;
                    }
                    acc
                })
                .collect();
            loss += cross_entropy(&softmax(&logits), target) / n;
        }
        loss
    };

    let mut max_rel = 0.0f64;
    let mut coords = 0usize;

    if !embedder.is_frozen() {
        for i in 0..emb_params.len() {
            let orig = emb_params[i];
            emb_params[i] = orig + epsilon;
            let lp = eval(&emb_params, &head_params);
            emb_params[i] = orig - epsilon;
            let lm = eval(&emb_params, &head_params);
            emb_params[i] = orig;
            let numeric = (lp - lm) / (2.0 * epsilon);
            let rel = (tape.emb_grad[i] as f64 - numeric).abs() / numeric.abs().max(1.0);
            max_rel = max_rel.max(rel);
            coords += 1;
        }
    }

    for i in 0..head_params.len() {
        let orig = head_params[i];
        head_params[i] = orig + epsilon;
        let lp = eval(&emb_params, &head_params);
        head_params[i] = orig - epsilon;
        let lm = eval(&emb_params, &head_params);
        head_params[i] = orig;
        let numeric = (lp - lm) / (2.0 * epsilon);
        let rel = (head_grad[i] as f64 - numeric).abs() / numeric.abs().max(1.0);
        max_rel = max_rel.max(rel);
        coords += 1;
    }

    Ok(GradCheckReport {
        max_rel_error: max_rel,
        coords_checked: coords,
    })
}

fn linear_forward_f64(x: &[f32], params: &[f64], in_dim: usize, out_dim: usize) -> Vec<f64> {
    let bias = &params[out_dim * in_dim..];
    (0..out_dim)
        .map(|o| {
            let row = &params[o * in_dim..(o + 1) * in_dim];
            let mut acc = bias[o];
            for (w, v) in row.iter().zip(x) {
                acc += w * *v as f64;
            }
            acc
        })
        .collect()
}

fn conv4_forward_f64(input: &[f32], cfg: &Conv4Config, params: &[f64]) -> Vec<f64> {
    let mut cur: Vec<f64> = input.iter().map(|v| *v as f64).collect();
    let mut offset = 0;
    for b in 0..4 {
        let (in_c, h, w) = block_dims(cfg, b);
        let out_c = cfg.widths[b];
        let w_len = out_c * in_c * 9;
        let weight = &params[offset..offset + w_len];
        let bias = &params[offset + w_len..offset + w_len + out_c];
        offset += w_len + out_c;

        let mut pre = vec![0.0f64; out_c * h * w];
        for o in 0..out_c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias[o];
                    for i in 0..in_c {
                        for ky in 0..3usize {
                            let yy = y as isize + ky as isize - 1;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for kx in 0..3usize {
                                let xx = x as isize + kx as isize - 1;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                acc += weight[((o * in_c + i) * 3 + ky) * 3 + kx]
                                    * cur[(i * h + yy as usize) * w + xx as usize];
                            }
                        }
                    }
                    pre[(o * h + y) * w + x] = acc;
                }
            }
        }
        let (ph, pw) = (h / 2, w / 2);
        let mut pooled = vec![0.0f64; out_c * ph * pw];
        for o in 0..out_c {
            for py in 0..ph {
                for px in 0..pw {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = pre[(o * h + 2 * py + dy) * w + 2 * px + dx].max(0.0);
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    pooled[(o * ph + py) * pw + px] = best;
                }
            }
        }
        cur = pooled;
    }
    let (fh, fw) = (cfg.in_h / 16, cfg.in_w / 16);
    let m = cfg.widths[3];
    (0..m)
        .map(|o| cur[o * fh * fw..(o + 1) * fh * fw].iter().sum::<f64>() / (fh * fw) as f64)
        .collect()
}

// ---------------------------------------------------------------------------
// Embedding tables and checkpoints
// ---------------------------------------------------------------------------

/// Load a precomputed embedding table (PSHT) as a frozen table embedder.
pub fn load_embedding_table(path: &Path) -> Result<Embedder> {
    let (dim, map) = table::read_table_map(path)?;
    Embedder::table(dim, map)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Checkpoint metadata: embedder kind and shapes plus training provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub kind: String,
    pub embedding_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv: Option<Conv4Config>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table_ids: Option<Vec<String>>,
    pub frozen: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// Training provenance attached to a checkpoint.
#[derive(Debug, Clone, Default)]
pub struct TrainMeta {
    pub regime: Option<String>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
}

/// Write a checkpoint: magic, version, length-prefixed JSON metadata, then
/// the raw little-endian f32 parameter payload. `load(save(e))` reproduces
/// `φ` bit-identically.
pub fn save_checkpoint(embedder: &Embedder, meta: &TrainMeta, path: &Path) -> Result<()> {
    let (kind, in_dim, conv, table_ids, payload): (
        &str,
        Option<usize>,
        Option<Conv4Config>,
        Option<Vec<String>>,
        Vec<f32>,
    ) = match &embedder.model {
        Model::Identity { dim } => ("identity", Some(*dim), None, None, Vec::new()),
        Model::Linear { in_dim, params, .. } => {
            ("linear", Some(*in_dim), None, None, params.clone())
        }
        Model::ToyCnn { cfg, params } => ("toy-cnn", None, Some(*cfg), None, params.clone()),
        Model::Table { map, .. } => {
            let mut ids: Vec<String> = map.keys().cloned().collect();
            ids.sort();
            let mut payload = Vec::new();
            for id in &ids {
                payload.extend_from_slice(&map[id]);
            }
            ("table", None, None, Some(ids), payload)
        }
    };
    let meta = CheckpointMeta {
        kind: kind.to_string(),
        embedding_dim: embedder.embedding_dim(),
        in_dim,
        conv,
        table_ids,
        frozen: embedder.is_frozen(),
        regime: meta.regime.clone(),
        epochs: meta.epochs,
        seed: meta.seed,
        config_hash: meta.config_hash.clone(),
    };
    let json = serde_json::to_vec(&meta)
        .map_err(|e| Error::format(path, format!("metadata encode: {e}")))?;

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for v in &payload {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Embedder, CheckpointMeta)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    fn take<const N: usize>(r: &mut impl Read, path: &Path) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        r.read_exact(&mut buf)
            .map_err(|_| Error::format(path, "truncated file"))?;
        Ok(buf)
    }

    let magic: [u8; 4] = take(&mut r, path)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad magic (expected PSCK)"));
    }
    let version = u32::from_le_bytes(take(&mut r, path)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let json_len = u64::from_le_bytes(take(&mut r, path)?) as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json)
        .map_err(|_| Error::format(path, "truncated metadata"))?;
    let meta: CheckpointMeta = serde_json::from_slice(&json)
        .map_err(|e| Error::format(path, format!("metadata decode: {e}")))?;

    let expected = match meta.kind.as_str() {
        "identity" => 0,
        "linear" => {
            let in_dim = meta
                .in_dim
                .ok_or_else(|| Error::format(path, "linear checkpoint missing in_dim"))?;
            meta.embedding_dim * in_dim + meta.embedding_dim
        }
        "toy-cnn" => meta
            .conv
            .ok_or_else(|| Error::format(path, "toy-cnn checkpoint missing conv config"))?
            .param_count(),
        "table" => {
            meta.embedding_dim
                * meta
                    .table_ids
                    .as_ref()
                    .ok_or_else(|| Error::format(path, "table checkpoint missing ids"))?
                    .len()
        }
        other => return Err(Error::format(path, format!("unknown kind '{other}'"))),
    };
    let mut payload = Vec::with_capacity(expected);
    for _ in 0..expected {
        payload.push(f32::from_le_bytes(take(&mut r, path)?));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(path, "trailing bytes after payload"));
    }

    let model = match meta.kind.as_str() {
        "identity" => Model::Identity {
            dim: meta.embedding_dim,
        },
        "linear" => Model::Linear {
            in_dim: meta.in_dim.unwrap(),
            out_dim: meta.embedding_dim,
            params: payload,
        },
        "toy-cnn" => Model::ToyCnn {
            cfg: meta.conv.unwrap(),
            params: payload,
        },
        "table" => {
            let ids = meta.table_ids.clone().unwrap();
            let dim = meta.embedding_dim;
            let map = ids
                .iter()
                .enumerate()
                .map(|(i, id)| (id.clone(), payload[i * dim..(i + 1) * dim].to_vec()))
                .collect();
            Model::Table { dim, map }
        }
        _ => unreachable!(),
    };
    Ok((
        Embedder {
            model,
            frozen: meta.frozen,
        },
        meta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ImageTensor;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cnn() -> Embedder {
        // ≤10k params, 16×16 single-channel input
        Embedder::toy_cnn(
            Conv4Config {
                in_c: 1,
                in_h: 16,
                in_w: 16,
                widths: [4, 8, 8, 8],
            },
            7,
        )
        .unwrap()
    }

    fn rand_image(seed: u64, c: usize, h: usize, w: usize) -> Payload {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..c * h * w).map(|_| rng.gen::<f32>()).collect();
        Payload::Image(ImageTensor::new(c, h, w, data).unwrap())
    }

    #[test]
    fn identity_embeds_input() {
        let e = Embedder::identity(3);
        let p = Payload::Features(vec![1.0, 2.0, 3.0]);
        assert_eq!(e.embed(&p, "x").unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn linear_scaled_identity() {
        // W = 2I, b = 0
        let e = Embedder::linear_from_weights(2, 2, vec![2.0, 0.0, 0.0, 2.0, 0.0, 0.0]).unwrap();
        let p = Payload::Features(vec![1.0, 0.0]);
        assert_eq!(e.embed(&p, "x").unwrap(), vec![2.0, 0.0]);
    }

    #[test]
    fn cnn_zero_input_zero_biases_gives_zero_embedding() {
        let e = small_cnn();
        let p = Payload::Image(ImageTensor::zeros(1, 16, 16));
        let emb = e.embed(&p, "x").unwrap();
        assert!(emb.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn table_lookup_and_unknown_id() {
        let mut map = HashMap::new();
        map.insert("a".to_string(), vec![1.0f32, 2.0]);
        let e = Embedder::table(2, map).unwrap();
        let p = Payload::Features(vec![0.0]);
        assert_eq!(e.embed(&p, "a").unwrap(), vec![1.0, 2.0]);
        let err = e.embed(&p, "b").unwrap_err();
        assert!(err.to_string().contains("unknown source_id: b"));
    }

    #[test]
    fn cross_entropy_analytic_values() {
        // exact one-hot match → 0
        assert!(cross_entropy(&[1.0, 0.0], &[1.0, 0.0]).abs() < 1e-12);
        // uniform over 5, one-hot target → ln 5
        let uniform = vec![0.2; 5];
        let mut onehot = vec![0.0; 5];
        onehot[2] = 1.0;
        assert!((cross_entropy(&uniform, &onehot) - 5.0f64.ln()).abs() < 1e-12);
        // (0.5,0.5) vs (0.5,0.5) → ln 2
        assert!((cross_entropy(&[0.5, 0.5], &[0.5, 0.5]) - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sgd_arithmetic_and_zero_grad() {
        let mut e = Embedder::linear_from_weights(1, 1, vec![1.0, 0.0]).unwrap();
        let mut opt = Sgd::new(0.1, 0.0).unwrap();
        opt.step_embedder(&mut e, &[2.0, 0.0]).unwrap();
        assert!((e.params()[0] - 0.8).abs() < 1e-7);
        let before = e.params().to_vec();
        opt.step_embedder(&mut e, &[0.0, 0.0]).unwrap();
        assert_eq!(e.params(), &before[..]); // zero grad, zero velocity → fixed point
    }

    #[test]
    fn sgd_frozen_errors_and_leaves_params() {
        let mut e = Embedder::linear(2, 2, 0);
        e.set_frozen(true);
        let before = e.params().to_vec();
        let mut opt = Sgd::new(0.1, 0.9).unwrap();
        assert!(matches!(
            opt.step_embedder(&mut e, &vec![1.0; before.len()]),
            Err(Error::Frozen)
        ));
        assert_eq!(e.params(), &before[..]);
    }

    #[test]
    fn sgd_nan_grad_rejected() {
        let mut e = Embedder::linear(1, 1, 0);
        let mut opt = Sgd::new(0.1, 0.0).unwrap();
        assert!(opt.step_embedder(&mut e, &[f32::NAN, 0.0]).is_err());
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        // minimize (φ−3)² by hand-computed gradient 2(φ−3)
        let mut phi = vec![1.0f32];
        let mut opt = Sgd::new(0.1, 0.0).unwrap();
        for _ in 0..200 {
            let g = 2.0 * (phi[0] - 3.0);
            opt.step_params(&mut phi, &[g]).unwrap();
        }
        assert!((phi[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn gradient_check_linear() {
        let e = Embedder::linear(4, 3, 1);
        let head = LinearHead::new(3, 2, 2);
        let inputs: Vec<Payload> = (0..4)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + i);
                Payload::Features((0..4).map(|_| rng.gen::<f32>() - 0.5).collect())
            })
            .collect();
        let batch: Vec<(&Payload, &str)> = inputs.iter().map(|p| (p, "x")).collect();
        let targets = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5], vec![1.0, 0.0]];
        let report = gradient_check(&e, &head, &batch, &targets, 1e-4).unwrap();
        assert!(report.max_rel_error < 1e-6, "rel err {}", report.max_rel_error);
    }

    #[test]
    fn gradient_check_toy_cnn() {
        let e = small_cnn();
        assert!(e.param_count() <= 10_000);
        let head = LinearHead::new(e.embedding_dim(), 3, 5);
        let inputs: Vec<Payload> = (0..4).map(|i| rand_image(i, 1, 16, 16)).collect();
        let batch: Vec<(&Payload, &str)> = inputs.iter().map(|p| (p, "x")).collect();
        let targets = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.3, 0.3, 0.4],
        ];
        let report = gradient_check(&e, &head, &batch, &targets, 1e-4).unwrap();
        assert!(report.max_rel_error < 1e-3, "rel err {}", report.max_rel_error);
    }

    #[test]
    fn gradient_check_excludes_frozen_embedder() {
        let mut e = Embedder::linear(3, 3, 1);
        e.set_frozen(true);
        let head = LinearHead::new(3, 2, 2);
        let input = Payload::Features(vec![0.5, -0.2, 0.1]);
        let batch = vec![(&input, "x")];
        let targets = vec![vec![1.0, 0.0]];
        let report = gradient_check(&e, &head, &batch, &targets, 1e-4).unwrap();
        assert_eq!(report.coords_checked, head.params.len());
    }

    #[test]
    fn episode_loss_grad_matches_finite_differences_through_embedder() {
        let e = Embedder::linear(3, 2, 9);
        let s1 = Payload::Features(vec![0.5, 0.1, -0.2]);
        let s2 = Payload::Features(vec![-0.4, 0.8, 0.3]);
        let q1 = Payload::Features(vec![0.4, 0.0, -0.1]);
        let support = vec![(&s1, "s1", 0), (&s2, "s2", 1)];
        let queries = vec![(&q1, "q1", 0)];
        let (_, tape, _) = forward_loss_episode(&e, &support, &queries).unwrap();
        let eps = 1e-3f32;
        for i in 0..e.param_count() {
            let mut ep = e.clone();
            ep.params_mut()[i] += eps;
            let (lp, _, _) = forward_loss_episode(&ep, &support, &queries).unwrap();
            let mut em = e.clone();
            em.params_mut()[i] -= eps;
            let (lm, _, _) = forward_loss_episode(&em, &support, &queries).unwrap();
            let numeric = (lp - lm) / (2.0 * eps as f64);
            assert!(
                (tape.emb_grad[i] as f64 - numeric).abs() / numeric.abs().max(1.0) < 1e-3,
                "param {i}"
            );
        }
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for e in [
            Embedder::linear(4, 3, 11),
            small_cnn(),
            Embedder::identity(5),
        ] {
            let path = dir.path().join("ckpt.psck");
            let meta = TrainMeta {
                regime: Some("FEL".into()),
                epochs: Some(3),
                seed: Some(1),
                config_hash: Some("abc".into()),
            };
            save_checkpoint(&e, &meta, &path).unwrap();
            let (back, m) = load_checkpoint(&path).unwrap();
            assert_eq!(back, e);
            assert_eq!(m.regime.as_deref(), Some("FEL"));
        }
    }

    #[test]
    fn checkpoint_table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut map = HashMap::new();
        map.insert("b".to_string(), vec![3.0f32, 4.0]);
        map.insert("a".to_string(), vec![1.0f32, 2.0]);
        let e = Embedder::table(2, map).unwrap();
        let path = dir.path().join("t.psck");
        save_checkpoint(&e, &TrainMeta::default(), &path).unwrap();
        let (back, _) = load_checkpoint(&path).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn checkpoint_truncated_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.psck");
        save_checkpoint(&Embedder::linear(2, 2, 0), &TrainMeta::default(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn embedding_table_loader() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.pst");
        let entries: Vec<(String, Vec<f32>)> = (0..10)
            .map(|i| (format!("id{i}"), (0..8).map(|j| (i * 8 + j) as f32).collect()))
            .collect();
        table::write_table(&path, 8, &entries).unwrap();
        let e = load_embedding_table(&path).unwrap();
        assert_eq!(e.embedding_dim(), 8);
        let p = Payload::Features(vec![0.0]);
        assert_eq!(e.embed(&p, "id3").unwrap(), entries[3].1);
    }

    #[test]
    fn cnn_checkpoint_preserves_embeddings() {
        let dir = tempfile::tempdir().unwrap();
        let e = small_cnn();
        let path = dir.path().join("cnn.psck");
        save_checkpoint(&e, &TrainMeta::default(), &path).unwrap();
        let (back, _) = load_checkpoint(&path).unwrap();
        let probe = rand_image(99, 1, 16, 16);
        assert_eq!(
            e.embed(&probe, "x").unwrap(),
            back.embed(&probe, "x").unwrap()
        );
    }
}

