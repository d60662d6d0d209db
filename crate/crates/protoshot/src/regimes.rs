//! The four training strategies: FEL (episodic from scratch), FETL (episodic
//! on top of pretrained weights), DTL (conventional fine-tuning), and DL
//! (frozen pretrained baseline), plus the source-domain pretraining that
//! produces the artifact FETL/DTL/DL start from.
//!
//! Novel-class quarantine holds by construction: no operation here takes the
//! novel split as input — training sees only `base_train`/`base_val` (or the
//! disjoint source dataset).

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{apply_policy, AugPolicy, MixKind};
use crate::dataset::{split_fraction, ClassPartition, LongTailDataset};
use crate::embed::{forward_loss_classifier, forward_loss_episode, Embedder, LinearHead, Sgd};
use crate::error::{Error, Result};
use crate::eval::{self, EpisodeSpec, QueryMode};
use crate::rng;
use crate::tensor::Payload;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Regime {
    Fel,
    Fetl,
    Dtl,
    Dl,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Fel => "FEL",
            Regime::Fetl => "FETL",
            Regime::Dtl => "DTL",
            Regime::Dl => "DL",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FEL" => Ok(Regime::Fel),
            "FETL" => Ok(Regime::Fetl),
            "DTL" => Ok(Regime::Dtl),
            "DL" => Ok(Regime::Dl),
            other => Err(Error::InvalidConfig(format!("unknown regime '{other}'"))),
        }
    }
}

/// Where the initial weights come from. FEL requires `Random`; the transfer
/// regimes require `Pretrained`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    #[default]
    Random,
    Pretrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodicCfg {
    pub n_train: usize,
    pub k_train: usize,
    pub m_train: usize,
    pub episodes_per_epoch: usize,
    pub epochs: usize,
    /// Fixed validation episodes scored after every epoch (same episodes each
    /// epoch, so the metric is comparable across epochs).
    pub val_episodes: usize,
}

impl Default for EpisodicCfg {
    fn default() -> Self {
        Self {
            n_train: 5,
            k_train: 5,
            m_train: 5,
            episodes_per_epoch: 100,
            epochs: 20,
            val_episodes: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConventionalCfg {
    pub batch_size: usize,
    pub epochs: usize,
    pub val_fraction: f64,
    /// Early-stop after this many epochs without validation improvement;
    /// 0 disables early stopping.
    pub patience: usize,
}

impl Default for ConventionalCfg {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 10,
            val_fraction: 0.10,
            patience: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerCfg {
    pub lr: f32,
    pub momentum: f32,
}

impl Default for OptimizerCfg {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeConfig {
    pub regime: Regime,
    #[serde(default)]
    pub init: InitKind,
    /// Checkpoint to start from when `init = pretrained`; when absent, the
    /// harness pretrains from the configured source dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_path: Option<std::path::PathBuf>,
    #[serde(default)]
    pub episodic: EpisodicCfg,
    #[serde(default)]
    pub conventional: ConventionalCfg,
    #[serde(default)]
    pub aug_policy: AugPolicy,
    #[serde(default)]
    pub optimizer: OptimizerCfg,
    #[serde(default)]
    pub seed: u64,
}

impl RegimeConfig {
    pub fn new(regime: Regime, seed: u64) -> Self {
        Self {
            regime,
            init: match regime {
                Regime::Fel => InitKind::Random,
                _ => InitKind::Pretrained,
            },
            pretrained_path: None,
            episodic: EpisodicCfg::default(),
            conventional: ConventionalCfg::default(),
            aug_policy: AugPolicy::default(),
            optimizer: OptimizerCfg::default(),
            seed,
        }
    }

    /// Regime/init consistency: FEL never consumes a checkpoint; the
    /// transfer regimes always do. DL additionally takes zero training steps.
    pub fn validate(&self) -> Result<()> {
        match (self.regime, self.init) {
            (Regime::Fel, InitKind::Random) => Ok(()),
            (Regime::Fel, InitKind::Pretrained) => Err(Error::InvalidConfig(
                "FEL requires random initialization".into(),
            )),
            (_, InitKind::Pretrained) => Ok(()),
            (r, InitKind::Random) => Err(Error::InvalidConfig(format!(
                "{} requires pretrained initialization",
                r.as_str()
            ))),
        }?;
        if self.conventional.batch_size < 2 && self.aug_policy.mix != MixKind::None {
            return Err(Error::InvalidConfig(
                "mix augmentation requires batch size ≥ 2".into(),
            ));
        }
        if self.optimizer.lr <= 0.0 || !(0.0..1.0).contains(&self.optimizer.momentum) {
            return Err(Error::InvalidConfig(format!(
                "invalid optimizer settings lr={} momentum={}",
                self.optimizer.lr, self.optimizer.momentum
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub wall_clock_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub regime: Regime,
    pub seed: u64,
    pub records: Vec<EpochRecord>,
    /// Epoch whose checkpoint was returned (best validation metric, ties
    /// toward the earlier epoch); `None` when no epochs ran.
    pub selected_epoch: Option<usize>,
}

impl TrainLog {
    /// One epoch per line, JSON-encoded.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for rec in &self.records {
            let line = serde_json::to_string(rec)
                .map_err(|e| Error::InvalidArgument(format!("log encode: {e}")))?;
            out.push_str(&line);
            out.push('\n');
        }
        Ok(out)
    }

    /// The loss/metric sequences without wall-clock, for determinism checks.
    pub fn metric_sequence(&self) -> Vec<(f64, f64)> {
        self.records
            .iter()
            .map(|r| (r.train_loss, r.val_metric))
            .collect()
    }
}

/// Apply the policy's per-image ops (no mix) to a list of payloads.
fn augment_payloads(
    payloads: Vec<(Payload, usize)>,
    policy: &AugPolicy,
    batch_seed: u64,
) -> Result<Vec<(Payload, usize)>> {
    if policy.ops.is_empty() {
        return Ok(payloads);
    }
    let ops_only = AugPolicy {
        ops: policy.ops.clone(),
        mix: MixKind::None,
        seed: policy.seed,
    };
    // num_classes only shapes soft labels, which are discarded here
    let n_classes = payloads.iter().map(|(_, y)| *y + 1).max().unwrap_or(1);
    let mixed = apply_policy(&payloads, &ops_only, n_classes, batch_seed)?;
    Ok(mixed
        .into_iter()
        .zip(payloads)
        .map(|(m, (_, y))| (m.payload, y))
        .collect())
}

/// Validation episodes for FEL/FETL model selection: drawn from `base_val`
/// when it can host the configured episode shape, otherwise from
/// `base_train` (with a one-time warning).
fn episodic_val_source<'a>(
    base_val: &'a LongTailDataset,
    base_train: &'a LongTailDataset,
    cfg: &RegimeConfig,
) -> (&'a LongTailDataset, EpisodeSpec) {
    let spec = EpisodeSpec {
        n_way: cfg.episodic.n_train,
        k_shot: cfg.episodic.k_train,
        m_query: cfg.episodic.m_train,
        episodes: cfg.episodic.val_episodes,
        master_seed: rng::derive_seed(cfg.seed, "episodic-val", 0),
        query_mode: QueryMode::PerClass,
        distance_kind: Default::default(),
    };
    if eval::eligible_classes(base_val, &spec).len() >= spec.n_way {
        (base_val, spec)
    } else {
        eprintln!(
            "warning: base_val cannot host {}-way {}+{} episodes; validating on base_train",
            spec.n_way, spec.k_shot, spec.m_query
        );
        (base_train, spec)
    }
}

/// Shared FEL/FETL loop: repeated episode sampling from `base_train`,
/// episodic loss backprop, SGD, and per-epoch episodic validation.
fn train_episodic(
    base_train: &LongTailDataset,
    base_val: &LongTailDataset,
    mut embedder: Embedder,
    cfg: &RegimeConfig,
) -> Result<(Embedder, TrainLog)> {
    cfg.validate()?;
    let e_cfg = &cfg.episodic;
    let train_spec = EpisodeSpec {
        n_way: e_cfg.n_train,
        k_shot: e_cfg.k_train,
        m_query: e_cfg.m_train,
        episodes: e_cfg.episodes_per_epoch.max(1),
        master_seed: rng::derive_seed(cfg.seed, "train-episodes", 0),
        query_mode: QueryMode::PerClass,
        distance_kind: Default::default(),
    };
    // fail before any step if base_train cannot host the episode shape
    if eval::eligible_classes(base_train, &train_spec).len() < train_spec.n_way {
        return Err(Error::InvalidArgument(format!(
            "base_train cannot host {}-way {}-shot {}-query training episodes",
            train_spec.n_way, train_spec.k_shot, train_spec.m_query
        )));
    }

    let mut log = TrainLog {
        regime: cfg.regime,
        seed: cfg.seed,
        records: Vec::new(),
        selected_epoch: None,
    };
    let mut optim = Sgd::new(cfg.optimizer.lr, cfg.optimizer.momentum)?;
    let mut best_params: Vec<f32> = embedder.params().to_vec();
    let mut best_metric = f64::NEG_INFINITY;
    let (val_source, val_spec) = episodic_val_source(base_val, base_train, cfg);

    for epoch in 0..e_cfg.epochs {
        let start = Instant::now();
        let mut loss_sum = 0.0f64;
        for i in 0..e_cfg.episodes_per_epoch {
            let e = (epoch * e_cfg.episodes_per_epoch + i) as u64;
            let episode = eval::sample_episode(base_train, &train_spec, e)?;
            let gather = |items: &[(usize, usize)]| -> Vec<(Payload, usize)> {
                items
                    .iter()
                    .map(|&(idx, class)| (base_train.get(idx).payload.clone(), class))
                    .collect()
            };
            let support = augment_payloads(
                gather(&episode.support),
                &cfg.aug_policy,
                rng::derive_seed(cfg.seed, "ep-aug-s", e),
            )?;
            let query = augment_payloads(
                gather(&episode.query),
                &cfg.aug_policy,
                rng::derive_seed(cfg.seed, "ep-aug-q", e),
            )?;
            let s_refs: Vec<(&Payload, &str, usize)> =
                support.iter().map(|(p, y)| (p, "", *y)).collect();
            let q_refs: Vec<(&Payload, &str, usize)> =
                query.iter().map(|(p, y)| (p, "", *y)).collect();
            let (loss, tape, _) = forward_loss_episode(&embedder, &s_refs, &q_refs)?;
            loss_sum += loss;
            if embedder.param_count() > 0 {
                optim.step_embedder(&mut embedder, &tape.emb_grad)?;
            } else if embedder.is_frozen() {
                return Err(Error::Frozen);
            }
        }
        let val_metric = eval::evaluate(&embedder, val_source, &val_spec)?.acc_mean;
        if val_metric > best_metric {
            best_metric = val_metric;
            best_params = embedder.params().to_vec();
            log.selected_epoch = Some(epoch);
        }
        log.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / e_cfg.episodes_per_epoch as f64,
            val_metric,
            wall_clock_ms: start.elapsed().as_millis() as u64,
        });
    }

    embedder.params_mut().copy_from_slice(&best_params);
    Ok((embedder, log))
}

/// FEL: episodic learning from a random initialization. Novel classes are
/// never touched; training samples come from `base_train`, model selection
/// from `base_val`.
pub fn train_fel(
    dataset: &LongTailDataset,
    partition: &ClassPartition,
    init: Embedder,
    cfg: &RegimeConfig,
) -> Result<(Embedder, TrainLog)> {
    if cfg.regime != Regime::Fel {
        return Err(Error::InvalidConfig(format!(
            "train_fel called with regime {}",
            cfg.regime.as_str()
        )));
    }
    let base_train = dataset.restrict(&partition.base_train)?;
    let base_val = dataset.restrict(&partition.base_val).unwrap_or_else(|_| base_train.clone());
    train_episodic(&base_train, &base_val, init, cfg)
}

/// FETL: the same episodic loop as FEL, initialized from pretrained weights
/// with every parameter unfrozen.
pub fn train_fetl(
    dataset: &LongTailDataset,
    partition: &ClassPartition,
    pretrained: Embedder,
    cfg: &RegimeConfig,
) -> Result<(Embedder, TrainLog)> {
    if cfg.regime != Regime::Fetl {
        return Err(Error::InvalidConfig(format!(
            "train_fetl called with regime {}",
            cfg.regime.as_str()
        )));
    }
    let base_train = dataset.restrict(&partition.base_train)?;
    let base_val = dataset.restrict(&partition.base_val).unwrap_or_else(|_| base_train.clone());
    train_episodic(&base_train, &base_val, pretrained, cfg)
}

/// Conventional mini-batch cross-entropy training of `embedder` + a linear
/// head over `classes`, with a stratified held-out fraction for model
/// selection. The head is dropped on return.
fn train_conventional(
    data: &LongTailDataset,
    mut embedder: Embedder,
    cfg: &RegimeConfig,
) -> Result<(Embedder, TrainLog)> {
    cfg.validate()?;
    let c_cfg = &cfg.conventional;
    let classes = data.classes();
    let num_classes = classes.len();
    if num_classes < 2 {
        return Err(Error::InvalidArgument(
            "conventional training needs ≥ 2 classes".into(),
        ));
    }
    let class_of = |label: &str| classes.iter().position(|c| c == label).unwrap();
    let split = split_fraction(data, c_cfg.val_fraction, cfg.seed)?;

    let mut head = LinearHead::new(
        embedder.embedding_dim(),
        num_classes,
        rng::derive_seed(cfg.seed, "head", 0),
    );
    let mut emb_optim = Sgd::new(cfg.optimizer.lr, cfg.optimizer.momentum)?;
    let mut head_optim = Sgd::new(cfg.optimizer.lr, cfg.optimizer.momentum)?;
    let mix_active = cfg.aug_policy.mix != MixKind::None;

    let mut log = TrainLog {
        regime: cfg.regime,
        seed: cfg.seed,
        records: Vec::new(),
        selected_epoch: None,
    };
    let mut best = (embedder.params().to_vec(), f64::NEG_INFINITY);
    let mut since_best = 0usize;

    for epoch in 0..c_cfg.epochs {
        let start = Instant::now();
        let mut order = split.train.clone();
        {
            use rand::seq::SliceRandom;
            let mut rng = rng::stream(cfg.seed, "shuffle", epoch as u64);
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(c_cfg.batch_size).enumerate() {
            // a trailing singleton cannot be mixed; skip it rather than fail
            if mix_active && chunk.len() < 2 {
                continue;
            }
            let raw: Vec<(Payload, usize)> = chunk
                .iter()
                .map(|&i| {
                    let ex = data.get(i);
                    (ex.payload.clone(), class_of(&ex.label))
                })
                .collect();
            let batch_seed =
                rng::derive_seed(cfg.seed, "batch", (epoch * order.len() + b) as u64);
            let mixed = apply_policy(&raw, &cfg.aug_policy, num_classes, batch_seed)?;
            let ids: Vec<&str> = chunk.iter().map(|&i| data.get(i).source_id.as_str()).collect();
            let batch: Vec<(&Payload, &str)> = mixed
                .iter()
                .zip(&ids)
                .map(|(m, id)| (&m.payload, *id))
                .collect();
            let targets: Vec<Vec<f64>> = mixed.iter().map(|m| m.soft_label.clone()).collect();
            let (loss, tape) = forward_loss_classifier(&embedder, &head, &batch, &targets)?;
            loss_sum += loss;
            batches += 1;
            if embedder.param_count() > 0 {
                emb_optim.step_embedder(&mut embedder, &tape.emb_grad)?;
            } else if embedder.is_frozen() {
                return Err(Error::Frozen);
            }
            head_optim.step_params(&mut head.params, tape.head_grad.as_ref().unwrap())?;
        }

        // plain top-1 on the held-out examples
        let mut correct = 0usize;
        for &i in &split.val {
            let ex = data.get(i);
            let emb = embedder.embed(&ex.payload, &ex.source_id)?;
            if head.predict(&emb) == class_of(&ex.label) {
                correct += 1;
            }
        }
        let val_metric = correct as f64 / split.val.len().max(1) as f64;
        if val_metric > best.1 {
            best = (embedder.params().to_vec(), val_metric);
            log.selected_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
        }
        log.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            val_metric,
            wall_clock_ms: start.elapsed().as_millis() as u64,
        });
        if c_cfg.patience > 0 && since_best >= c_cfg.patience {
            break;
        }
    }

    embedder.params_mut().copy_from_slice(&best.0);
    Ok((embedder, log))
}

/// DTL: conventional fine-tuning of pretrained weights over all base-class
/// data (base_train ∪ base_val), with a linear head that is discarded.
pub fn train_dtl(
    dataset: &LongTailDataset,
    partition: &ClassPartition,
    pretrained: Embedder,
    cfg: &RegimeConfig,
) -> Result<(Embedder, TrainLog)> {
    if cfg.regime != Regime::Dtl {
        return Err(Error::InvalidConfig(format!(
            "train_dtl called with regime {}",
            cfg.regime.as_str()
        )));
    }
    let base = dataset.restrict(&partition.base())?;
    train_conventional(&base, pretrained, cfg)
}

/// DL: the pretrained embedder as-is, frozen; zero parameter updates ever
/// occur (any optimizer step on the result errors).
pub fn make_dl(pretrained: &Embedder) -> Embedder {
    pretrained.frozen_copy()
}

/// Source-domain pretraining: conventional classification over a dataset
/// whose classes must be disjoint from every target class (base and novel).
pub fn pretrain_source(
    source: &LongTailDataset,
    target_classes: &BTreeSet<String>,
    init: Embedder,
    cfg: &RegimeConfig,
) -> Result<(Embedder, TrainLog)> {
    let overlap: Vec<String> = source
        .classes()
        .into_iter()
        .filter(|c| target_classes.contains(c))
        .collect();
    if !overlap.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "source classes overlap target domain: {}",
            overlap.join(", ")
        )));
    }
    train_conventional(source, init, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, split_longtail, MeanStyle, SyntheticSpec};

    fn synth(prefix: &str, classes: usize, sep: f64, seed: u64) -> LongTailDataset {
        generate_synthetic(&SyntheticSpec {
            num_classes: classes,
            head: 100,
            ratio: 0.8,
            tail_min: 16,
            feature_dim: 24,
            class_separation: sep,
            noise_sigma: 1.0,
            seed,
            label_prefix: prefix.into(),
            mean_style: MeanStyle::Axis,
        })
        .unwrap()
    }

    fn target_setup() -> (LongTailDataset, ClassPartition) {
        let data = synth("tgt", 12, 6.0, 11);
        let partition = split_longtail(&data, 20, 35, &[]).unwrap();
        assert!(partition.base_train.len() >= 5 && !partition.novel.is_empty());
        (data, partition)
    }

    fn quick_cfg(regime: Regime, seed: u64) -> RegimeConfig {
        let mut cfg = RegimeConfig::new(regime, seed);
        cfg.episodic.epochs = 2;
        cfg.episodic.episodes_per_epoch = 15;
        cfg.episodic.val_episodes = 10;
        cfg.episodic.n_train = 3;
        cfg.episodic.k_train = 3;
        cfg.episodic.m_train = 3;
        cfg.conventional.epochs = 3;
        cfg
    }

    #[test]
    fn regime_init_consistency() {
        let mut cfg = RegimeConfig::new(Regime::Fel, 0);
        cfg.init = InitKind::Pretrained;
        assert!(cfg.validate().is_err());
        let mut cfg = RegimeConfig::new(Regime::Dl, 0);
        cfg.init = InitKind::Random;
        assert!(cfg.validate().is_err());
        assert!(RegimeConfig::new(Regime::Fetl, 0).validate().is_ok());
    }

    #[test]
    fn fel_zero_epochs_is_identity() {
        let (data, partition) = target_setup();
        let init = Embedder::linear(24, 16, 5);
        let before = init.params().to_vec();
        let mut cfg = quick_cfg(Regime::Fel, 1);
        cfg.episodic.epochs = 0;
        let (out, log) = train_fel(&data, &partition, init, &cfg).unwrap();
        assert_eq!(out.params(), &before[..]);
        assert!(log.records.is_empty());
        assert_eq!(log.selected_epoch, None);
    }

    #[test]
    fn fel_learns_separable_data() {
        let (data, partition) = target_setup();
        let init = Embedder::linear(24, 16, 5);
        let mut cfg = quick_cfg(Regime::Fel, 1);
        cfg.episodic.epochs = 6;
        cfg.episodic.episodes_per_epoch = 40;
        cfg.optimizer.lr = 0.001;
        let (_, log) = train_fel(&data, &partition, init, &cfg).unwrap();
        let best = log
            .records
            .iter()
            .map(|r| r.val_metric)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(best > 0.9, "best episodic val acc {best}");
        assert!(log.selected_epoch.is_some());
    }

    #[test]
    fn fel_deterministic() {
        let (data, partition) = target_setup();
        let cfg = quick_cfg(Regime::Fel, 7);
        let run = || {
            train_fel(&data, &partition, Embedder::linear(24, 8, 3), &cfg)
                .unwrap()
                .1
                .metric_sequence()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn fel_insufficient_classes_errors_before_steps() {
        let (data, partition) = target_setup();
        let mut cfg = quick_cfg(Regime::Fel, 1);
        cfg.episodic.n_train = 100;
        let err = train_fel(&data, &partition, Embedder::linear(24, 8, 3), &cfg).unwrap_err();
        assert!(err.to_string().contains("cannot host"));
    }

    #[test]
    fn fetl_zero_epochs_returns_pretrained() {
        let (data, partition) = target_setup();
        let pre = Embedder::linear(24, 16, 42);
        let before = pre.params().to_vec();
        let mut cfg = quick_cfg(Regime::Fetl, 1);
        cfg.episodic.epochs = 0;
        let (out, _) = train_fetl(&data, &partition, pre, &cfg).unwrap();
        assert_eq!(out.params(), &before[..]);
    }

    #[test]
    fn fetl_frozen_init_errors() {
        let (data, partition) = target_setup();
        let pre = Embedder::linear(24, 16, 42).frozen_copy();
        let cfg = quick_cfg(Regime::Fetl, 1);
        let err = train_fetl(&data, &partition, pre, &cfg).unwrap_err();
        assert!(matches!(err, Error::Frozen));
    }

    #[test]
    fn dtl_zero_epochs_returns_pretrained() {
        let (data, partition) = target_setup();
        let pre = Embedder::linear(24, 16, 42);
        let before = pre.params().to_vec();
        let mut cfg = quick_cfg(Regime::Dtl, 1);
        cfg.conventional.epochs = 0;
        let (out, log) = train_dtl(&data, &partition, pre, &cfg).unwrap();
        assert_eq!(out.params(), &before[..]);
        assert!(log.records.is_empty());
    }

    #[test]
    fn dtl_reaches_high_val_accuracy() {
        let (data, partition) = target_setup();
        let pre = Embedder::linear(24, 16, 42);
        let mut cfg = quick_cfg(Regime::Dtl, 1);
        cfg.conventional.epochs = 10;
        let (_, log) = train_dtl(&data, &partition, pre, &cfg).unwrap();
        let best = log
            .records
            .iter()
            .map(|r| r.val_metric)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(best > 0.95, "best val acc {best}");
    }

    #[test]
    fn dtl_mixup_raises_epoch_one_loss() {
        let (data, partition) = target_setup();
        let mut cfg = quick_cfg(Regime::Dtl, 9);
        cfg.conventional.epochs = 1;
        let plain = train_dtl(&data, &partition, Embedder::linear(24, 16, 2), &cfg)
            .unwrap()
            .1;
        cfg.aug_policy.mix = MixKind::Mixup { alpha: 1.0 };
        let mixed = train_dtl(&data, &partition, Embedder::linear(24, 16, 2), &cfg)
            .unwrap()
            .1;
        assert!(mixed.records[0].train_loss >= plain.records[0].train_loss);
    }

    #[test]
    fn dl_is_frozen_and_untrainable() {
        let pre = Embedder::linear(24, 16, 42);
        let before = pre.params().to_vec();
        let mut dl = make_dl(&pre);
        assert!(dl.is_frozen());
        assert_eq!(dl.params(), &before[..]);
        let grad = vec![0.0f32; dl.param_count()];
        let err = Sgd::new(0.01, 0.9).unwrap().step_embedder(&mut dl, &grad);
        assert!(matches!(err, Err(Error::Frozen)));
        assert_eq!(dl.params(), &before[..]);
    }

    #[test]
    fn pretrain_rejects_class_overlap() {
        let (data, partition) = target_setup();
        let targets: BTreeSet<String> = data.classes().into_iter().collect();
        let cfg = quick_cfg(Regime::Dtl, 3);
        let err = pretrain_source(&data, &targets, Embedder::linear(24, 16, 1), &cfg)
            .unwrap_err();
        assert!(err.to_string().contains("overlap"));
        let _ = partition;
    }

    #[test]
    fn pretrain_learns_source_and_roundtrips() {
        let source = synth("src", 8, 6.0, 23);
        let mut cfg = quick_cfg(Regime::Dtl, 3);
        cfg.conventional.epochs = 10;
        let (emb, log) =
            pretrain_source(&source, &BTreeSet::new(), Embedder::linear(24, 16, 1), &cfg)
                .unwrap();
        let best = log
            .records
            .iter()
            .map(|r| r.val_metric)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(best > 0.9, "source val acc {best}");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pre.psck");
        let meta = crate::embed::TrainMeta {
            regime: Some("pretrain".into()),
            epochs: Some(10),
            seed: Some(3),
            config_hash: None,
        };
        crate::embed::save_checkpoint(&emb, &meta, &path).unwrap();
        let (loaded, _) = crate::embed::load_checkpoint(&path).unwrap();
        let probe = Payload::Features(vec![0.3f32; 24]);
        assert_eq!(
            emb.embed(&probe, "x").unwrap(),
            loaded.embed(&probe, "x").unwrap()
        );
    }

    #[test]
    fn selected_epoch_matches_best_metric() {
        let (data, partition) = target_setup();
        let mut cfg = quick_cfg(Regime::Fel, 13);
        cfg.episodic.epochs = 4;
        let (_, log) = train_fel(&data, &partition, Embedder::linear(24, 8, 3), &cfg).unwrap();
        let best = log
            .records
            .iter()
            .map(|r| r.val_metric)
            .fold(f64::NEG_INFINITY, f64::max);
        let sel = log.selected_epoch.unwrap();
        assert_eq!(log.records[sel].val_metric, best);
        // ties resolve to the earliest epoch
        let first_best = log
            .records
            .iter()
            .position(|r| r.val_metric == best)
            .unwrap();
        assert_eq!(sel, first_best);
    }

    #[test]
    fn json_lines_one_record_per_line() {
        let log = TrainLog {
            regime: Regime::Fel,
            seed: 1,
            records: vec![
                EpochRecord {
                    epoch: 0,
                    train_loss: 1.5,
                    val_metric: 0.4,
                    wall_clock_ms: 3,
                },
                EpochRecord {
                    epoch: 1,
                    train_loss: 1.1,
                    val_metric: 0.6,
                    wall_clock_ms: 3,
                },
            ],
            selected_epoch: Some(1),
        };
        let lines = log.to_json_lines().unwrap();
        assert_eq!(lines.lines().count(), 2);
        let first: EpochRecord = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
        assert_eq!(first.epoch, 0);
    }
}
