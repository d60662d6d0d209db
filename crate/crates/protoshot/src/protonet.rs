//! Prototypical-network mathematics: class prototypes as support means,
//! distance-softmax posteriors, and the episodic negative-log-likelihood loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceKind {
    #[default]
    SquaredEuclidean,
    Euclidean,
    Cosine,
}

/// `d(a,b)` for the configured metric. Cosine distance is `1 − cosθ ∈ [0,2]`
/// and rejects zero-norm inputs.
pub fn distance(a: &[f32], b: &[f32], kind: DistanceKind) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "distance over lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d = match kind {
        DistanceKind::SquaredEuclidean | DistanceKind::Euclidean => {
            let sq: f64 = a
                .iter()
                .zip(b)
                .map(|(x, y)| {
                    let d = *x as f64 - *y as f64;
                    d * d
                })
                .sum();
            if kind == DistanceKind::Euclidean {
                sq.sqrt()
            } else {
                sq
            }
        }
        DistanceKind::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
            let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(Error::InvalidArgument(
                    "cosine distance undefined for zero vector".into(),
                ));
            }
            1.0 - dot / (na * nb)
        }
    };
    if !d.is_finite() {
        return Err(Error::NonFinite("distance".into()));
    }
    Ok(d)
}

/// Per-class prototype vectors `c_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    prototypes: BTreeMap<usize, Vec<f32>>,
    pub distance_kind: DistanceKind,
}

impl PrototypeSet {
    pub fn classes(&self) -> Vec<usize> {
        self.prototypes.keys().copied().collect()
    }

    pub fn get(&self, class: usize) -> Option<&Vec<f32>> {
        self.prototypes.get(&class)
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }
}

/// Prototypes are the arithmetic means of each class's support embeddings.
pub fn compute_prototypes(
    support: &[(Vec<f32>, usize)],
    distance_kind: DistanceKind,
) -> Result<PrototypeSet> {
    if support.is_empty() {
        return Err(Error::InvalidArgument("empty support set".into()));
    }
    let dim = support[0].0.len();
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (emb, class) in support {
        if emb.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "support embedding of length {}, expected {}",
                emb.len(),
                dim
            )));
        }
        let entry = sums.entry(*class).or_insert_with(|| (vec![0.0; dim], 0));
        for (s, v) in entry.0.iter_mut().zip(emb) {
            *s += *v as f64;
        }
        entry.1 += 1;
    }
    let prototypes = sums
        .into_iter()
        .map(|(class, (sum, count))| {
            let proto: Vec<f32> = sum.iter().map(|s| (*s / count as f64) as f32).collect();
            (class, proto)
        })
        .collect();
    Ok(PrototypeSet {
        prototypes,
        distance_kind,
    })
}

/// Softmax-of-negative-distances posterior over the episode's classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPosterior {
    pub classes: Vec<usize>,
    pub probs: Vec<f64>,
}

impl ClassPosterior {
    /// Predicted class: argmax probability, lowest class index on exact ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..self.probs.len() {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        self.classes[best]
    }

    pub fn prob_of(&self, class: usize) -> Option<f64> {
        self.classes
            .iter()
            .position(|&c| c == class)
            .map(|i| self.probs[i])
    }
}

/// `p(y=k|x) = softmax_k(−d(x, c_k))`, computed with max-subtraction.
pub fn posterior(query: &[f32], protos: &PrototypeSet) -> Result<ClassPosterior> {
    if protos.len() < 2 {
        return Err(Error::InvalidArgument(
            "posterior requires at least 2 prototypes".into(),
        ));
    }
    let classes = protos.classes();
    let mut neg_dists = Vec::with_capacity(classes.len());
    for &k in &classes {
        let d = distance(query, protos.get(k).unwrap(), protos.distance_kind)?;
        neg_dists.push(-d);
    }
    let max = neg_dists.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = neg_dists.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    Ok(ClassPosterior { classes, probs })
}

/// Episodic loss: mean over queries of `−log p(true class)`.
pub fn episode_loss(
    support: &[(Vec<f32>, usize)],
    queries: &[(Vec<f32>, usize)],
    distance_kind: DistanceKind,
) -> Result<(f64, Vec<ClassPosterior>)> {
    let protos = compute_prototypes(support, distance_kind)?;
    let mut loss = 0.0f64;
    let mut posteriors = Vec::with_capacity(queries.len());
    for (emb, truth) in queries {
        let post = posterior(emb, &protos)?;
        let p = post.prob_of(*truth).ok_or_else(|| {
            Error::InvalidArgument(format!("query class {truth} absent from support"))
        })?;
        loss += -(p.max(f64::MIN_POSITIVE)).ln();
        posteriors.push(post);
    }
    Ok((loss / queries.len() as f64, posteriors))
}

/// Gradients of the episodic loss w.r.t. support and query embeddings
/// (squared-Euclidean metric), aligned with the input orders.
#[derive(Debug, Clone)]
pub struct EpisodeGrad {
    pub d_support: Vec<Vec<f32>>,
    pub d_query: Vec<Vec<f32>>,
}

/// Loss, posteriors, and embedding gradients for one episode. The gradient
/// path is defined for the squared-Euclidean metric used in training.
pub fn episode_loss_with_grad(
    support: &[(Vec<f32>, usize)],
    queries: &[(Vec<f32>, usize)],
) -> Result<(f64, Vec<ClassPosterior>, EpisodeGrad)> {
    let kind = DistanceKind::SquaredEuclidean;
    let protos = compute_prototypes(support, kind)?;
    let classes = protos.classes();
    let dim = support[0].0.len();
    let q_count = queries.len() as f64;

    let mut class_count: BTreeMap<usize, usize> = BTreeMap::new();
    for (_, c) in support {
        *class_count.entry(*c).or_insert(0) += 1;
    }

    let mut loss = 0.0f64;
    let mut posteriors = Vec::with_capacity(queries.len());
    let mut d_query = vec![vec![0.0f32; dim]; queries.len()];
    let mut d_proto: BTreeMap<usize, Vec<f64>> = classes
        .iter()
        .map(|&k| (k, vec![0.0f64; dim]))
        .collect();

    for (qi, (emb, truth)) in queries.iter().enumerate() {
        let post = posterior(emb, &protos)?;
        let p_true = post.prob_of(*truth).ok_or_else(|| {
            Error::InvalidArgument(format!("query class {truth} absent from support"))
        })?;
        loss += -(p_true.max(f64::MIN_POSITIVE)).ln();

        // dL/dlogit_k = (p_k − 1[k=y]) / Q, with logit_k = −‖q − c_k‖²
        for (ki, &k) in post.classes.iter().enumerate() {
            let g = (post.probs[ki] - if k == *truth { 1.0 } else { 0.0 }) / q_count;
            let proto = protos.get(k).unwrap();
            let dp = d_proto.get_mut(&k).unwrap();
            for j in 0..dim {
                let diff = emb[j] as f64 - proto[j] as f64;
                // dlogit/dq_j = −2(q_j − c_kj); dlogit/dc_kj = 2(q_j − c_kj)
                d_query[qi][j] += (g * (-2.0) * diff) as f32;
                dp[j] += g * 2.0 * diff;
            }
        }
        posteriors.push(post);
    }

    // chain prototype gradients back to support embeddings: c_k = mean(S_k)
    let mut d_support = vec![vec![0.0f32; dim]; support.len()];
    for (si, (_, c)) in support.iter().enumerate() {
        let count = class_count[c] as f64;
        let dp = &d_proto[c];
        for j in 0..dim {
            d_support[si][j] = (dp[j] / count) as f32;
        }
    }

    Ok((
        loss / q_count,
        posteriors,
        EpisodeGrad { d_support, d_query },
    ))
}
