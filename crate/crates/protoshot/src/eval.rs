//! Seeded N-way K-shot episodic evaluation over the novel classes, plus
//! metric aggregation (mean accuracy, 95% confidence half-width, macro-F1).
//!
//! Episode `e` is a pure function of `(master_seed, e)`, so the episode
//! sequence is identical across runs and across every model under test, and
//! episodes can be evaluated serially or in parallel with identical results.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LongTailDataset;
use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::protonet::{compute_prototypes, posterior, DistanceKind};
use crate::rng;

/// How the query set is drawn: `PerClass` takes M queries from every selected
/// class (accuracy denominator N·M); `Pooled` takes M queries total from the
/// remaining samples of the N classes (denominator M).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum QueryMode {
    #[default]
    PerClass,
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub episodes: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub query_mode: QueryMode,
    #[serde(default)]
    pub distance_kind: DistanceKind,
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.k_shot < 1 || self.m_query < 1 || self.episodes < 1 {
            return Err(Error::InvalidConfig(format!(
                "episode spec requires N≥2, K≥1, M≥1, E≥1 (got {}w {}s {}q {}e)",
                self.n_way, self.k_shot, self.m_query, self.episodes
            )));
        }
        Ok(())
    }

    /// Queries scored per episode.
    pub fn queries_per_episode(&self) -> usize {
        match self.query_mode {
            QueryMode::PerClass => self.n_way * self.m_query,
            QueryMode::Pooled => self.m_query,
        }
    }
}

/// One sampled N-way K-shot task. Support and query hold example indices
/// into the novel dataset paired with dense episode-class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub index: u64,
    pub classes: Vec<String>,
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

/// Classes large enough to participate: `K+M` examples in per-class mode,
/// `K+1` in pooled mode.
pub fn eligible_classes(novel: &LongTailDataset, spec: &EpisodeSpec) -> Vec<String> {
    let floor = match spec.query_mode {
        QueryMode::PerClass => spec.k_shot + spec.m_query,
        QueryMode::Pooled => spec.k_shot + 1,
    };
    novel
        .class_index()
        .iter()
        .filter(|(_, idxs)| idxs.len() >= floor)
        .map(|(label, _)| label.clone())
        .collect()
}

/// Draw episode `e`: N classes uniformly without replacement, then per class
/// K support and (per mode) query examples, all from the rng stream derived
/// from `(master_seed, e)`.
pub fn sample_episode(novel: &LongTailDataset, spec: &EpisodeSpec, e: u64) -> Result<Episode> {
    spec.validate()?;
    let eligible = eligible_classes(novel, spec);
    if eligible.len() < spec.n_way {
        let sizes: Vec<String> = novel
            .class_index()
            .iter()
            .map(|(label, idxs)| format!("{label}:{}", idxs.len()))
            .collect();
        return Err(Error::InvalidArgument(format!(
            "need {} eligible classes, found {} (class sizes: {})",
            spec.n_way,
            eligible.len(),
            sizes.join(", ")
        )));
    }
    let mut rng = rng::stream(spec.master_seed, "episode", e);
    let chosen: Vec<String> = eligible
        .choose_multiple(&mut rng, spec.n_way)
        .cloned()
        .collect();

    let mut support = Vec::with_capacity(spec.n_way * spec.k_shot);
    let mut query = Vec::new();
    let mut remaining_pool: Vec<(usize, usize)> = Vec::new();
    for (class_idx, label) in chosen.iter().enumerate() {
        let mut members: Vec<usize> = novel.class_index()[label].clone();
        members.sort_by(|&a, &b| novel.get(a).source_id.cmp(&novel.get(b).source_id));
        members.shuffle(&mut rng);
        for &m in &members[..spec.k_shot] {
            support.push((m, class_idx));
        }
        match spec.query_mode {
            QueryMode::PerClass => {
                for &m in &members[spec.k_shot..spec.k_shot + spec.m_query] {
                    query.push((m, class_idx));
                }
            }
            QueryMode::Pooled => {
                for &m in &members[spec.k_shot..] {
                    remaining_pool.push((m, class_idx));
                }
            }
        }
    }
    if spec.query_mode == QueryMode::Pooled {
        if remaining_pool.len() < spec.m_query {
            return Err(Error::InvalidArgument(format!(
                "pooled query needs {} remaining samples, found {}",
                spec.m_query,
                remaining_pool.len()
            )));
        }
        remaining_pool.shuffle(&mut rng);
        query = remaining_pool[..spec.m_query].to_vec();
    }

    Ok(Episode {
        index: e,
        classes: chosen,
        support,
        query,
    })
}

/// Per-episode outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Score one episode: embed the support, build prototypes, classify queries
/// by posterior argmax. No augmentation touches the novel data.
pub fn run_episode(
    embedder: &Embedder,
    novel: &LongTailDataset,
    spec: &EpisodeSpec,
    e: u64,
) -> Result<EpisodeResult> {
    let episode = sample_episode(novel, spec, e)?;
    let mut support_embs = Vec::with_capacity(episode.support.len());
    for &(idx, class) in &episode.support {
        let ex = novel.get(idx);
        let emb = embedder
            .embed(&ex.payload, &ex.source_id)
            .map_err(|err| {
                Error::InvalidArgument(format!(
                    "episode {e}, support '{}': {err}",
                    ex.source_id
                ))
            })?;
        support_embs.push((emb, class));
    }
    let protos = compute_prototypes(&support_embs, spec.distance_kind)?;
    let mut preds = Vec::with_capacity(episode.query.len());
    for &(idx, truth) in &episode.query {
        let ex = novel.get(idx);
        let emb = embedder
            .embed(&ex.payload, &ex.source_id)
            .map_err(|err| {
                Error::InvalidArgument(format!("episode {e}, query '{}': {err}", ex.source_id))
            })?;
        let post = posterior(&emb, &protos)?;
        preds.push((post.argmax(), truth));
    }
    let correct = preds.iter().filter(|(p, t)| p == t).count();
    let accuracy = correct as f64 / preds.len() as f64;
    let macro_f1 = macro_f1(&preds, spec.n_way);
    Ok(EpisodeResult { accuracy, macro_f1 })
}

/// Macro-averaged one-vs-rest F1 over the episode's classes; `0/0 → 0`.
pub fn macro_f1(preds: &[(usize, usize)], n_classes: usize) -> f64 {
    let mut total = 0.0f64;
    for k in 0..n_classes {
        let tp = preds.iter().filter(|(p, t)| *p == k && *t == k).count() as f64;
        let fp = preds.iter().filter(|(p, t)| *p == k && *t != k).count() as f64;
        let fne = preds.iter().filter(|(p, t)| *p != k && *t == k).count() as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fne > 0.0 { tp / (tp + fne) } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        total += f1;
    }
    total / n_classes as f64
}

/// Mean and 95% normal-approximation half-width (`1.96·s/√E`); the
/// half-width is absent for fewer than 2 values.
pub fn aggregate(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, Some(1.96 * var.sqrt() / (n as f64).sqrt()))
}

/// Full evaluation output: per-episode accuracies, aggregates, and
/// provenance. `wall_clock_ms` is excluded from the canonical body so report
/// files are byte-comparable across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub spec: EpisodeSpec,
    #[serde(default)]
    pub regime: Option<String>,
    #[serde(default)]
    pub backbone: Option<String>,
    #[serde(default)]
    pub config_hash: Option<String>,
    pub per_episode_acc: Vec<f64>,
    pub acc_mean: f64,
    /// 95% confidence half-width (not a standard deviation).
    pub acc_half_width: Option<f64>,
    pub per_episode_f1: Vec<f64>,
    pub f1_mean: f64,
    pub f1_half_width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<u64>,
}

impl EvalReport {
    /// Canonical JSON body with timestamps removed.
    pub fn to_json_body(&self) -> Result<String> {
        let mut copy = self.clone();
        copy.wall_clock_ms = None;
        serde_json::to_string_pretty(&copy)
            .map_err(|e| Error::InvalidArgument(format!("report encode: {e}")))
    }

    pub fn to_json_full(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidArgument(format!("report encode: {e}")))
    }

    pub const CSV_HEADER: &'static str =
        "regime,backbone,N,K,M,E,seed,acc_mean,acc_hw,f1_mean,f1_hw";

    pub fn csv_row(&self) -> String {
        let fmt_opt = |v: &Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.regime.as_deref().unwrap_or(""),
            self.backbone.as_deref().unwrap_or(""),
            self.spec.n_way,
            self.spec.k_shot,
            self.spec.m_query,
            self.spec.episodes,
            self.spec.master_seed,
            self.acc_mean,
            fmt_opt(&self.acc_half_width),
            self.f1_mean,
            fmt_opt(&self.f1_half_width),
        )
    }
}

/// Evaluate all episodes. Parallel and serial execution produce identical
/// per-episode results because each episode draws from its own stream.
pub fn evaluate_with_mode(
    embedder: &Embedder,
    novel: &LongTailDataset,
    spec: &EpisodeSpec,
    parallel: bool,
) -> Result<EvalReport> {
    spec.validate()?;
    let start = std::time::Instant::now();
    let results: Result<Vec<EpisodeResult>> = if parallel {
        (0..spec.episodes as u64)
            .into_par_iter()
            .map(|e| run_episode(embedder, novel, spec, e))
            .collect()
    } else {
        (0..spec.episodes as u64)
            .map(|e| run_episode(embedder, novel, spec, e))
            .collect()
    };
    let results = results?;
    let accs: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
    let f1s: Vec<f64> = results.iter().map(|r| r.macro_f1).collect();
    let (acc_mean, acc_hw) = aggregate(&accs);
    let (f1_mean, f1_hw) = aggregate(&f1s);
    Ok(EvalReport {
        spec: *spec,
        regime: None,
        backbone: None,
        config_hash: None,
        per_episode_acc: accs,
        acc_mean,
        acc_half_width: acc_hw,
        per_episode_f1: f1s,
        f1_mean,
        f1_half_width: f1_hw,
        wall_clock_ms: Some(start.elapsed().as_millis() as u64),
    })
}

pub fn evaluate(
    embedder: &Embedder,
    novel: &LongTailDataset,
    spec: &EpisodeSpec,
) -> Result<EvalReport> {
    evaluate_with_mode(embedder, novel, spec, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, LabeledExample, LongTailDataset, MeanStyle, SyntheticSpec};
    use crate::tensor::Payload;

    fn spec(n: usize, k: usize, m: usize, e: usize, seed: u64) -> EpisodeSpec {
        EpisodeSpec {
            n_way: n,
            k_shot: k,
            m_query: m,
            episodes: e,
            master_seed: seed,
            query_mode: QueryMode::PerClass,
            distance_kind: DistanceKind::SquaredEuclidean,
        }
    }

    fn tiny_novel(classes: usize, per_class: usize) -> LongTailDataset {
        let mut examples = Vec::new();
        for c in 0..classes {
            for i in 0..per_class {
                examples.push(LabeledExample {
                    source_id: format!("c{c}_e{i}"),
                    label: format!("n{c:02}"),
                    payload: Payload::Features(vec![c as f32 * 10.0, i as f32 * 0.01]),
                });
            }
        }
        LongTailDataset::from_examples(examples).unwrap()
    }

    #[test]
    fn exhaustion_forces_membership() {
        let novel = tiny_novel(2, 3); // exactly N classes of exactly K+M
        let ep = sample_episode(&novel, &spec(2, 2, 1, 1, 9), 0).unwrap();
        assert_eq!(ep.support.len(), 4);
        assert_eq!(ep.query.len(), 2);
        let mut all: Vec<usize> = ep
            .support
            .iter()
            .chain(&ep.query)
            .map(|(i, _)| *i)
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn episodes_deterministic() {
        let novel = tiny_novel(6, 10);
        let s = spec(3, 2, 2, 1, 77);
        assert_eq!(
            sample_episode(&novel, &s, 5).unwrap(),
            sample_episode(&novel, &s, 5).unwrap()
        );
        assert_ne!(
            sample_episode(&novel, &s, 5).unwrap(),
            sample_episode(&novel, &s, 6).unwrap()
        );
    }

    #[test]
    fn support_query_disjoint() {
        let novel = tiny_novel(8, 12);
        let s = spec(4, 3, 3, 1, 3);
        for e in 0..500 {
            let ep = sample_episode(&novel, &s, e).unwrap();
            for (si, _) in &ep.support {
                assert!(!ep.query.iter().any(|(qi, _)| qi == si));
            }
        }
    }

    #[test]
    fn too_few_classes_lists_sizes() {
        let novel = tiny_novel(3, 2);
        let err = sample_episode(&novel, &spec(3, 2, 1, 1, 0), 0).unwrap_err();
        assert!(err.to_string().contains("n00:2"));
    }

    #[test]
    fn pooled_mode_draws_m_total() {
        let novel = tiny_novel(4, 8);
        let mut s = spec(3, 2, 4, 1, 13);
        s.query_mode = QueryMode::Pooled;
        let ep = sample_episode(&novel, &s, 0).unwrap();
        assert_eq!(ep.query.len(), 4);
    }

    #[test]
    fn identity_on_separated_clusters_is_perfect() {
        let synth = SyntheticSpec {
            num_classes: 5,
            head: 12,
            ratio: 0.99,
            tail_min: 12,
            feature_dim: 5,
            class_separation: 10.0,
            noise_sigma: 0.1,
            seed: 4,
            label_prefix: "novel".into(),
            mean_style: MeanStyle::Axis,
        };
        let novel = generate_synthetic(&synth).unwrap();
        let embedder = crate::embed::Embedder::identity(5);
        let report = evaluate(&embedder, &novel, &spec(5, 5, 5, 100, 21)).unwrap();
        assert_eq!(report.acc_mean, 1.0);
        assert_eq!(report.f1_mean, 1.0);
    }

    #[test]
    fn accuracy_granularity() {
        let novel = tiny_novel(5, 10);
        let embedder = crate::embed::Embedder::identity(2);
        let s = spec(3, 2, 2, 50, 99);
        let report = evaluate(&embedder, &novel, &s).unwrap();
        let unit = 1.0 / (s.n_way * s.m_query) as f64;
        for a in &report.per_episode_acc {
            let steps = a / unit;
            assert!((steps - steps.round()).abs() < 1e-9);
        }
    }

    #[test]
    fn parallel_serial_identical() {
        let novel = tiny_novel(6, 9);
        let embedder = crate::embed::Embedder::identity(2);
        let s = spec(4, 2, 2, 64, 5);
        let par = evaluate_with_mode(&embedder, &novel, &s, true).unwrap();
        let ser = evaluate_with_mode(&embedder, &novel, &s, false).unwrap();
        assert_eq!(par.per_episode_acc, ser.per_episode_acc);
        assert_eq!(par.per_episode_f1, ser.per_episode_f1);
    }

    #[test]
    fn aggregate_examples() {
        let (m, hw) = aggregate(&[0.8, 0.8, 0.8]);
        assert!((m - 0.8).abs() < 1e-12);
        assert!(hw.unwrap() < 1e-12);

        let (m, hw) = aggregate(&[0.0, 1.0]);
        assert_eq!(m, 0.5);
        let expect = 1.96 * (0.5f64).sqrt() / (2.0f64).sqrt();
        assert!((hw.unwrap() - expect).abs() < 1e-12);
        assert!((hw.unwrap() - 0.98).abs() < 1e-3);

        let (_, hw) = aggregate(&[0.7]);
        assert_eq!(hw, None);
    }

    #[test]
    fn macro_f1_hand_oracle() {
        // perfect predictions
        let preds = vec![(0, 0), (1, 1)];
        assert_eq!(macro_f1(&preds, 2), 1.0);

        // all predicted class 0 in a balanced 2-way episode
        let preds = vec![(0, 0), (0, 0), (0, 1), (0, 1)];
        let f1 = macro_f1(&preds, 2);
        assert!((f1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn report_body_excludes_wall_clock() {
        let novel = tiny_novel(4, 6);
        let embedder = crate::embed::Embedder::identity(2);
        let s = spec(2, 2, 2, 4, 1);
        let a = evaluate(&embedder, &novel, &s).unwrap();
        let b = evaluate(&embedder, &novel, &s).unwrap();
        assert_eq!(a.to_json_body().unwrap(), b.to_json_body().unwrap());
        assert!(!a.to_json_body().unwrap().contains("wall_clock_ms"));
    }
}
