//! TOML experiment configuration: dataset (synthetic or manifest), optional
//! pretraining source, embedder, one section per regime to run, the eval
//! grid, and output layout.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{load_manifest, LongTailDataset, SyntheticSpec};
use crate::embed::{load_embedding_table, Conv4Config, Embedder, EmbedderKind};
use crate::error::{Error, Result};
use crate::eval::QueryMode;
use crate::protonet::DistanceKind;
use crate::regimes::RegimeConfig;

/// Where examples come from: a manifest on disk or an inline synthetic spec
/// (exactly one of the two).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default = "default_novel_max")]
    pub novel_max: usize,
    #[serde(default = "default_val_max")]
    pub val_max: usize,
    #[serde(default)]
    pub exclude: Vec<String>,
}

fn default_novel_max() -> usize {
    20
}
fn default_val_max() -> usize {
    30
}

impl DatasetSection {
    pub fn validate(&self, base_dir: &Path) -> Result<()> {
        match (&self.manifest, &self.synthetic) {
            (Some(_), Some(_)) => Err(Error::InvalidConfig(
                "dataset: give either a manifest or a synthetic spec, not both".into(),
            )),
            (None, None) => Err(Error::InvalidConfig(
                "dataset: a manifest or a synthetic spec is required".into(),
            )),
            (Some(path), None) => {
                let resolved = resolve(base_dir, path);
                if !resolved.exists() {
                    return Err(Error::InvalidConfig(format!(
                        "dataset: manifest {} not found",
                        resolved.display()
                    )));
                }
                Ok(())
            }
            (None, Some(spec)) => spec.validate(),
        }?;
        if self.novel_max > self.val_max {
            return Err(Error::InvalidConfig(format!(
                "dataset: novel_max {} exceeds val_max {}",
                self.novel_max, self.val_max
            )));
        }
        Ok(())
    }

    pub fn load(&self, base_dir: &Path) -> Result<LongTailDataset> {
        match (&self.manifest, &self.synthetic) {
            (Some(path), None) => load_manifest(&resolve(base_dir, path)),
            (None, Some(spec)) => crate::dataset::generate_synthetic(spec),
            _ => Err(Error::InvalidConfig("dataset: ambiguous source".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderSection {
    pub kind: EmbedderKind,
    /// Identity: payload length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    /// Linear: input / output widths.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dim: Option<usize>,
    /// Toy CNN: input shape and block widths.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv: Option<Conv4Config>,
    /// Table: embedding-table path.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

impl EmbedderSection {
    pub fn validate(&self, base_dir: &Path) -> Result<()> {
        match self.kind {
            EmbedderKind::Identity if self.dim.is_none() => Err(Error::InvalidConfig(
                "embedder: identity requires dim".into(),
            )),
            EmbedderKind::Linear if self.in_dim.is_none() || self.out_dim.is_none() => Err(
                Error::InvalidConfig("embedder: linear requires in_dim and out_dim".into()),
            ),
            EmbedderKind::ToyCnn => match &self.conv {
                None => Err(Error::InvalidConfig(
                    "embedder: toy-cnn requires a [embedder.conv] shape".into(),
                )),
                Some(cfg) => cfg.validate(),
            },
            EmbedderKind::Table => match &self.table {
                None => Err(Error::InvalidConfig(
                    "embedder: table requires a table path".into(),
                )),
                Some(path) => {
                    let resolved = resolve(base_dir, path);
                    if !resolved.exists() {
                        return Err(Error::InvalidConfig(format!(
                            "embedder: table {} not found",
                            resolved.display()
                        )));
                    }
                    Ok(())
                }
            },
            _ => Ok(()),
        }
    }

    /// A freshly initialized embedder of the configured architecture.
    pub fn build(&self, base_dir: &Path) -> Result<Embedder> {
        match self.kind {
            EmbedderKind::Identity => Ok(Embedder::identity(self.dim.ok_or_else(|| {
                Error::InvalidConfig("embedder: identity requires dim".into())
            })?)),
            EmbedderKind::Linear => {
                let (in_dim, out_dim) = match (self.in_dim, self.out_dim) {
                    (Some(i), Some(o)) => (i, o),
                    _ => {
                        return Err(Error::InvalidConfig(
                            "embedder: linear requires in_dim and out_dim".into(),
                        ))
                    }
                };
                Ok(Embedder::linear(in_dim, out_dim, self.seed))
            }
            EmbedderKind::ToyCnn => {
                let cfg = self.conv.ok_or_else(|| {
                    Error::InvalidConfig("embedder: toy-cnn requires a conv shape".into())
                })?;
                Embedder::toy_cnn(cfg, self.seed)
            }
            EmbedderKind::Table => {
                let path = self.table.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("embedder: table requires a table path".into())
                })?;
                load_embedding_table(&resolve(base_dir, path))
            }
        }
    }
}

/// An `(N, K)` grid cell, written `"5w5s"` in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct EvalCell {
    pub n_way: usize,
    pub k_shot: usize,
}

impl EvalCell {
    pub fn parse(text: &str) -> Result<Self> {
        let err = || {
            Error::InvalidConfig(format!(
                "eval cell '{text}' is not of the form <N>w<K>s (e.g. 5w5s)"
            ))
        };
        let body = text.strip_suffix('s').ok_or_else(err)?;
        let (n, k) = body.split_once('w').ok_or_else(err)?;
        Ok(Self {
            n_way: n.parse().map_err(|_| err())?,
            k_shot: k.parse().map_err(|_| err())?,
        })
    }
}

impl std::fmt::Display for EvalCell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}w{}s", self.n_way, self.k_shot)
    }
}

impl Serialize for EvalCell {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for EvalCell {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        EvalCell::parse(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub cells: Vec<EvalCell>,
    #[serde(default = "default_m_query")]
    pub m_query: usize,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub query_mode: QueryMode,
    #[serde(default)]
    pub distance_kind: DistanceKind,
}

fn default_m_query() -> usize {
    5
}
fn default_episodes() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSection {
    pub dir: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<String>,
}

fn default_formats() -> Vec<String> {
    vec!["json".into(), "csv".into(), "md".into()]
}

/// Settings for the source-domain pretraining run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PretrainSection {
    pub conventional: crate::regimes::ConventionalCfg,
    pub optimizer: crate::regimes::OptimizerCfg,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<DatasetSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainSection>,
    pub embedder: EmbedderSection,
    #[serde(rename = "regime")]
    pub regimes: Vec<RegimeConfig>,
    pub eval: EvalSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn validate(&self, base_dir: &Path) -> Result<()> {
        self.dataset.validate(base_dir)?;
        if let Some(source) = &self.source {
            source.validate(base_dir)?;
        }
        self.embedder.validate(base_dir)?;
        if self.regimes.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one [[regime]] section is required".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for r in &self.regimes {
            r.validate()?;
            if !seen.insert(r.regime) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate [[regime]] section for {}",
                    r.regime.as_str()
                )));
            }
        }
        if self.eval.cells.is_empty() {
            return Err(Error::InvalidConfig(
                "eval: at least one cell is required".into(),
            ));
        }
        if self.eval.m_query < 1 || self.eval.episodes < 1 {
            return Err(Error::InvalidConfig(
                "eval: m_query and episodes must be ≥ 1".into(),
            ));
        }
        for f in &self.output.formats {
            if !matches!(f.as_str(), "json" | "csv" | "md") {
                return Err(Error::InvalidConfig(format!(
                    "output: unknown format '{f}' (expected json, csv, or md)"
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization, hex-encoded.
    pub fn hash(&self) -> Result<String> {
        let canon = toml::to_string(self)
            .map_err(|e| Error::InvalidConfig(format!("config serialize: {e}")))?;
        let digest = Sha256::digest(canon.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::InvalidConfig(format!("config serialize: {e}")))
    }
}

fn resolve(base_dir: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base_dir.join(path)
    }
}

/// Parse and validate. `base_dir` anchors relative paths (the config file's
/// directory). Parse errors carry toml's line/column diagnostics.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("config parse: {e}")))?;
    cfg.validate(base_dir)?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base_dir = path.parent().unwrap_or_else(|| Path::new("."));
    parse_config(&text, base_dir)
}
