//! Labeled datasets, long-tail class partitioning, manifest I/O, and the
//! synthetic long-tail generator used for desk-scale verification.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::table;
use crate::tensor::{ImageTensor, Payload};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub source_id: String,
    pub label: String,
    pub payload: Payload,
}

/// Labeled examples grouped by class. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LongTailDataset {
    examples: Vec<LabeledExample>,
    class_index: BTreeMap<String, Vec<usize>>,
}

impl LongTailDataset {
    /// Build a dataset, enforcing unique source ids and uniform payload shape.
    pub fn from_examples(examples: Vec<LabeledExample>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut seen = BTreeSet::new();
        for ex in &examples {
            if !seen.insert(ex.source_id.as_str()) {
                return Err(Error::DuplicateSourceId(ex.source_id.clone()));
            }
        }
        let first = &examples[0].payload;
        for ex in &examples[1..] {
            if !first.same_shape(&ex.payload) {
                return Err(Error::ShapeMismatch(format!(
                    "example '{}' is {} but dataset is {}",
                    ex.source_id,
                    ex.payload.shape_desc(),
                    first.shape_desc()
                )));
            }
        }
        let mut class_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, ex) in examples.iter().enumerate() {
            class_index.entry(ex.label.clone()).or_default().push(i);
        }
        Ok(Self {
            examples,
            class_index,
        })
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn get(&self, i: usize) -> &LabeledExample {
        &self.examples[i]
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Classes in sorted order with their example indices.
    pub fn class_index(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.class_index
    }

    pub fn classes(&self) -> Vec<String> {
        self.class_index.keys().cloned().collect()
    }

    pub fn class_size(&self, label: &str) -> usize {
        self.class_index.get(label).map_or(0, |v| v.len())
    }

    /// The sub-dataset containing only the given classes.
    pub fn restrict(&self, classes: &BTreeSet<String>) -> Result<Self> {
        let kept: Vec<LabeledExample> = self
            .examples
            .iter()
            .filter(|ex| classes.contains(&ex.label))
            .cloned()
            .collect();
        Self::from_examples(kept)
    }

    /// The sub-dataset containing only the given example indices.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let kept: Vec<LabeledExample> =
            indices.iter().map(|&i| self.examples[i].clone()).collect();
        Self::from_examples(kept)
    }

    /// Dimension of the flattened payload.
    pub fn payload_len(&self) -> usize {
        self.examples[0].payload.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thresholds {
    pub novel_max: usize,
    pub val_max: usize,
}

/// Disjoint class partition: base-train / base-val / novel (+ excluded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub base_train: BTreeSet<String>,
    pub base_val: BTreeSet<String>,
    pub novel: BTreeSet<String>,
    pub excluded: BTreeSet<String>,
    pub thresholds: Thresholds,
}

impl ClassPartition {
    /// All base classes (train ∪ val).
    pub fn base(&self) -> BTreeSet<String> {
        self.base_train.union(&self.base_val).cloned().collect()
    }
}

/// Partition classes by example count: `|c| < novel_max` → novel,
/// `novel_max ≤ |c| ≤ val_max` → base-val, `|c| > val_max` → base-train.
/// Classes on the exclusion list are removed before bucketing.
pub fn split_longtail(
    dataset: &LongTailDataset,
    novel_max: usize,
    val_max: usize,
    exclude: &[String],
) -> Result<ClassPartition> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if novel_max >= val_max {
        return Err(Error::InvalidArgument(format!(
            "novel_max ({novel_max}) must be < val_max ({val_max})"
        )));
    }
    let excluded: BTreeSet<String> = exclude.iter().cloned().collect();
    let mut part = ClassPartition {
        base_train: BTreeSet::new(),
        base_val: BTreeSet::new(),
        novel: BTreeSet::new(),
        excluded,
        thresholds: Thresholds { novel_max, val_max },
    };
    for (label, indices) in dataset.class_index() {
        if part.excluded.contains(label) {
            continue;
        }
        let n = indices.len();
        if n < novel_max {
            part.novel.insert(label.clone());
        } else if n <= val_max {
            part.base_val.insert(label.clone());
        } else {
            part.base_train.insert(label.clone());
        }
    }
    for (name, bucket) in [
        ("base_train", &part.base_train),
        ("base_val", &part.base_val),
        ("novel", &part.novel),
    ] {
        if bucket.is_empty() {
            eprintln!("warning: partition bucket '{name}' is empty");
        }
    }
    Ok(part)
}

/// A per-example train/validation split (indices into the source dataset).
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Stratified per-class validation split: `ceil(val_fraction·|c|)` examples of
/// each class go to validation, capped so no class loses all training
/// examples. Selection is a deterministic function of
/// `(seed, class, sorted source_ids)`.
pub fn split_fraction(
    dataset: &LongTailDataset,
    val_fraction: f64,
    seed: u64,
) -> Result<ExampleSplit> {
    if !(0.0..1.0).contains(&val_fraction) || val_fraction <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "val_fraction must be in (0,1), got {val_fraction}"
        )));
    }
    let mut split = ExampleSplit {
        train: Vec::new(),
        val: Vec::new(),
    };
    for (label, indices) in dataset.class_index() {
        let mut by_id: Vec<usize> = indices.clone();
        by_id.sort_by(|&a, &b| {
            dataset.get(a).source_id.cmp(&dataset.get(b).source_id)
        });
        let n = by_id.len();
        let k = ((val_fraction * n as f64).ceil() as usize).min(n.saturating_sub(1));
        let mut rng = rng::stream(seed, &format!("valsplit:{label}"), 0);
        by_id.shuffle(&mut rng);
        split.val.extend(&by_id[..k]);
        split.train.extend(&by_id[k..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    Ok(split)
}

/// Synthetic long-tail dataset spec: class `c` holds
/// `max(floor(head·ratio^c), tail_min)` examples drawn from a Gaussian around
/// a deterministic class mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub head: usize,
    pub ratio: f64,
    pub tail_min: usize,
    pub feature_dim: usize,
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Prefix for class labels and source ids, so multiple synthetic datasets
    /// (e.g. a pretraining source) stay disjoint.
    #[serde(default = "default_label_prefix")]
    pub label_prefix: String,
    #[serde(default)]
    pub mean_style: MeanStyle,
}

fn default_label_prefix() -> String {
    "class".to_string()
}

/// How class means are placed. `Axis` puts class `c` on coordinate axis `c`
/// (means are mutually orthogonal, every pairwise distance exact). `Dense`
/// draws each mean as a random unit direction, so classes share feature
/// coordinates — the geometry where transfer between class sets helps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MeanStyle {
    #[default]
    Axis,
    Dense,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::InvalidConfig("num_classes must be ≥ 1".into()));
        }
        if self.tail_min < 1 || self.head < self.tail_min {
            return Err(Error::InvalidConfig(
                "require head ≥ tail_min ≥ 1".into(),
            ));
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::InvalidConfig("ratio must be in (0,1)".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig(
                "noise_sigma must be finite and ≥ 0".into(),
            ));
        }
        Ok(())
    }

    /// Per-class example counts under the geometric decay law.
    pub fn counts(&self) -> Vec<usize> {
        (0..self.num_classes)
            .map(|c| {
                let decayed = (self.head as f64 * self.ratio.powi(c as i32)).floor() as usize;
                decayed.max(self.tail_min)
            })
            .collect()
    }

    pub fn class_label(&self, c: usize) -> String {
        format!("{}{:03}", self.label_prefix, c)
    }
}

/// Generate a synthetic long-tail dataset. Class means sit on coordinate
/// axes scaled so every pairwise mean distance equals `class_separation`
/// exactly. Regeneration with the same spec is bit-identical.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LongTailDataset> {
    spec.validate()?;
    if spec.mean_style == MeanStyle::Axis && spec.feature_dim < spec.num_classes {
        return Err(Error::InvalidConfig(format!(
            "feature_dim {} too small to place {} class means at separation {}",
            spec.feature_dim, spec.num_classes, spec.class_separation
        )));
    }
    // mean scale s = sep/√2: axis means e_a, e_b are orthogonal, so their
    // distance is s·√2 exactly; dense unit directions are near-orthogonal in
    // high dimension, giving the same distance in expectation
    let scale = (spec.class_separation / std::f64::consts::SQRT_2) as f32;
    let counts = spec.counts();
    let mut examples = Vec::new();
    for (c, &count) in counts.iter().enumerate() {
        let label = spec.class_label(c);
        let mean: Vec<f32> = match spec.mean_style {
            MeanStyle::Axis => {
                let mut m = vec![0.0f32; spec.feature_dim];
                m[c] = scale;
                m
            }
            MeanStyle::Dense => {
                let mut rng = rng::stream(
                    spec.seed,
                    &format!("synth-mean:{}", spec.label_prefix),
                    c as u64,
                );
                let dir: Vec<f64> = (0..spec.feature_dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                dir.iter().map(|v| (v / norm) as f32 * scale).collect()
            }
        };
        let mut rng = rng::stream(spec.seed, &format!("synth:{}", spec.label_prefix), c as u64);
        for i in 0..count {
            let mut features = mean.clone();
            for f in features.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *f += (z * spec.noise_sigma) as f32;
            }
            examples.push(LabeledExample {
                source_id: format!("{}_{:05}", label, i),
                label: label.clone(),
                payload: Payload::Features(features),
            });
        }
    }
    LongTailDataset::from_examples(examples)
}

// ---------------------------------------------------------------------------
// Manifest I/O
// ---------------------------------------------------------------------------

const MANIFEST_HEADER: [&str; 3] = ["source_id", "path", "label"];

/// Load a dataset from a CSV manifest (`source_id,path,label`). Paths are
/// relative to the manifest's directory; `.png` rows decode as images, any
/// other extension is read as a PSHT feature table keyed by source_id.
pub fn load_manifest(path: &Path) -> Result<LongTailDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::format(path, format!("cannot open manifest: {e}")))?;
    {
        let headers = reader
            .headers()
            .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
        let got: Vec<&str> = headers.iter().collect();
        if got != MANIFEST_HEADER {
            return Err(Error::format(
                path,
                format!("expected header source_id,path,label, got {}", got.join(",")),
            ));
        }
    }
    let base_dir = path.parent().unwrap_or(Path::new("."));
    let mut tables: HashMap<PathBuf, HashMap<String, Vec<f32>>> = HashMap::new();
    let mut examples = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for (row_idx, record) in reader.records().enumerate() {
        let row = row_idx + 2; // 1-based, after header
        let record = record.map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            row,
            msg: format!("parse error: {e}"),
        })?;
        if record.len() != 3 {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                row,
                msg: format!("expected 3 fields, got {}", record.len()),
            });
        }
        let (source_id, rel_path, label) = (&record[0], &record[1], &record[2]);
        if !seen.insert(source_id.to_string()) {
            return Err(Error::DuplicateSourceId(source_id.to_string()));
        }
        let full = base_dir.join(rel_path);
        let payload = if full.extension().and_then(|e| e.to_str()) == Some("png") {
            Payload::Image(load_png(&full).map_err(|e| Error::Manifest {
                path: path.to_path_buf(),
                row,
                msg: format!("{e}"),
            })?)
        } else {
            let map = match tables.get(&full) {
                Some(m) => m,
                None => {
                    let (_, m) = table::read_table_map(&full)?;
                    tables.entry(full.clone()).or_insert(m)
                }
            };
            let vec = map.get(source_id).ok_or_else(|| Error::Manifest {
                path: path.to_path_buf(),
                row,
                msg: format!("source_id '{source_id}' not found in table {rel_path}"),
            })?;
            Payload::Features(vec.clone())
        };
        examples.push(LabeledExample {
            source_id: source_id.to_string(),
            label: label.to_string(),
            payload,
        });
    }
    LongTailDataset::from_examples(examples)
}

/// Save a dataset as a manifest plus payload files next to it. Image payloads
/// become `images/<source_id>.png`; feature payloads are pooled into a single
/// `features.pst` table.
pub fn save_manifest(dataset: &LongTailDataset, path: &Path) -> Result<()> {
    let base_dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(base_dir).map_err(|e| Error::io(base_dir, e))?;
    let mut feature_entries: Vec<(String, Vec<f32>)> = Vec::new();
    let mut rows: Vec<[String; 3]> = Vec::new();
    for ex in dataset.examples() {
        match &ex.payload {
            Payload::Image(img) => {
                let rel = format!("images/{}.png", sanitize(&ex.source_id));
                let full = base_dir.join(&rel);
                if let Some(parent) = full.parent() {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                save_png(img, &full)?;
                rows.push([ex.source_id.clone(), rel, ex.label.clone()]);
            }
            Payload::Features(v) => {
                feature_entries.push((ex.source_id.clone(), v.clone()));
                rows.push([
                    ex.source_id.clone(),
                    "features.pst".to_string(),
                    ex.label.clone(),
                ]);
            }
        }
    }
    if !feature_entries.is_empty() {
        let dim = feature_entries[0].1.len();
        table::write_table(&base_dir.join("features.pst"), dim, &feature_entries)?;
    }
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::format(path, format!("cannot write manifest: {e}")))?;
    writer
        .write_record(MANIFEST_HEADER)
        .map_err(|e| Error::format(path, format!("{e}")))?;
    for row in &rows {
        writer
            .write_record(row)
            .map_err(|e| Error::format(path, format!("{e}")))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Build a dataset from a `<root>/<label>/<file>.png` class-folder tree.
pub fn load_class_tree(root: &Path) -> Result<LongTailDataset> {
    let mut examples = Vec::new();
    let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    for dir in class_dirs {
        let label = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::format(&dir, "non-utf8 class directory name"))?
            .to_string();
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("png"))
            .collect();
        files.sort();
        for file in files {
            let stem = file
                .file_stem()
                .and_then(|n| n.to_str())
                .unwrap_or("example");
            examples.push(LabeledExample {
                source_id: format!("{label}/{stem}"),
                label: label.clone(),
                payload: Payload::Image(load_png(&file)?),
            });
        }
    }
    LongTailDataset::from_examples(examples)
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn load_png(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, format!("cannot decode png: {e}")))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, pixel) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = pixel[c] as f32 / 255.0;
        }
    }
    ImageTensor::new(3, h, w, data)
}

pub fn save_png(img: &ImageTensor, path: &Path) -> Result<()> {
    let (c, h, w) = img.shape();
    if c != 3 && c != 1 {
        return Err(Error::InvalidArgument(format!(
            "png export supports 1 or 3 channels, got {c}"
        )));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |ch: usize| (img.get(ch, y, x) * 255.0).round().clamp(0.0, 255.0) as u8;
            let pixel = if c == 3 {
                [px(0), px(1), px(2)]
            } else {
                [px(0), px(0), px(0)]
            };
            buf.put_pixel(x as u32, y as u32, image::Rgb(pixel));
        }
    }
    buf.save(path)
        .map_err(|e| Error::format(path, format!("cannot encode png: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds_with_sizes(sizes: &[usize]) -> LongTailDataset {
        let mut examples = Vec::new();
        for (c, &n) in sizes.iter().enumerate() {
            for i in 0..n {
                examples.push(LabeledExample {
                    source_id: format!("c{c}_e{i}"),
                    label: format!("class{c:03}"),
                    payload: Payload::Features(vec![c as f32, i as f32]),
                });
            }
        }
        LongTailDataset::from_examples(examples).unwrap()
    }

    #[test]
    fn split_longtail_thresholds() {
        let ds = ds_with_sizes(&[19, 25, 20, 40]);
        let part = split_longtail(&ds, 20, 30, &[]).unwrap();
        assert!(part.novel.contains("class000"));
        assert!(part.base_val.contains("class001"));
        assert!(part.base_val.contains("class002")); // boundary: 20 is not fewer than 20
        assert!(part.base_train.contains("class003"));
    }

    #[test]
    fn split_longtail_exclusions_and_errors() {
        let ds = ds_with_sizes(&[19, 40]);
        let part = split_longtail(&ds, 20, 30, &["class000".to_string()]).unwrap();
        assert!(part.novel.is_empty());
        assert!(part.excluded.contains("class000"));
        assert!(split_longtail(&ds, 30, 20, &[]).is_err());
    }

    #[test]
    fn split_longtail_ignores_example_order() {
        let ds = ds_with_sizes(&[19, 25, 40]);
        let mut reversed: Vec<_> = ds.examples().to_vec();
        reversed.reverse();
        let ds2 = LongTailDataset::from_examples(reversed).unwrap();
        assert_eq!(
            split_longtail(&ds, 20, 30, &[]).unwrap(),
            split_longtail(&ds2, 20, 30, &[]).unwrap()
        );
    }

    #[test]
    fn split_fraction_sizes() {
        let ds = ds_with_sizes(&[40, 1]);
        let split = split_fraction(&ds, 0.10, 7).unwrap();
        let val_c0 = split
            .val
            .iter()
            .filter(|&&i| ds.get(i).label == "class000")
            .count();
        let val_c1 = split
            .val
            .iter()
            .filter(|&&i| ds.get(i).label == "class001")
            .count();
        assert_eq!(val_c0, 4);
        assert_eq!(val_c1, 0); // class of 1 never loses its training example
        assert_eq!(split.train.len() + split.val.len(), ds.len());
    }

    #[test]
    fn split_fraction_deterministic() {
        let ds = ds_with_sizes(&[40, 13]);
        assert_eq!(
            split_fraction(&ds, 0.1, 3).unwrap(),
            split_fraction(&ds, 0.1, 3).unwrap()
        );
        assert_ne!(
            split_fraction(&ds, 0.3, 3).unwrap().val,
            split_fraction(&ds, 0.3, 4).unwrap().val
        );
    }

    #[test]
    fn duplicate_source_id_rejected() {
        let ex = LabeledExample {
            source_id: "same".into(),
            label: "a".into(),
            payload: Payload::Features(vec![0.0]),
        };
        let err = LongTailDataset::from_examples(vec![ex.clone(), ex]).unwrap_err();
        assert!(err.to_string().contains("duplicate source_id: same"));
    }

    #[test]
    fn synthetic_counts_follow_decay_law() {
        let spec = SyntheticSpec {
            num_classes: 2,
            head: 50,
            ratio: 0.5,
            tail_min: 5,
            feature_dim: 4,
            class_separation: 3.0,
            noise_sigma: 0.1,
            seed: 1,
            label_prefix: "class".into(),
            mean_style: MeanStyle::Axis,
        };
        assert_eq!(spec.counts(), vec![50, 25]);
        let ds = generate_synthetic(&spec).unwrap();
        assert_eq!(ds.class_size("class000"), 50);
        assert_eq!(ds.class_size("class001"), 25);
    }

    #[test]
    fn synthetic_is_pure_function_of_spec() {
        let spec = SyntheticSpec {
            num_classes: 3,
            head: 10,
            ratio: 0.7,
            tail_min: 2,
            feature_dim: 5,
            class_separation: 4.0,
            noise_sigma: 1.0,
            seed: 42,
            label_prefix: "class".into(),
            mean_style: MeanStyle::Axis,
        };
        assert_eq!(
            generate_synthetic(&spec).unwrap(),
            generate_synthetic(&spec).unwrap()
        );
    }

    #[test]
    fn synthetic_dim_too_small() {
        let spec = SyntheticSpec {
            num_classes: 5,
            head: 10,
            ratio: 0.9,
            tail_min: 2,
            feature_dim: 3,
            class_separation: 4.0,
            noise_sigma: 1.0,
            seed: 0,
            label_prefix: "class".into(),
            mean_style: MeanStyle::Axis,
        };
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn synthetic_mean_separation() {
        let spec = SyntheticSpec {
            num_classes: 4,
            head: 200,
            ratio: 0.9,
            tail_min: 100,
            feature_dim: 6,
            class_separation: 8.0,
            noise_sigma: 0.01,
            seed: 5,
            label_prefix: "class".into(),
            mean_style: MeanStyle::Axis,
        };
        let ds = generate_synthetic(&spec).unwrap();
        // empirical class means must be ≥ separation apart (tiny noise)
        let mut means: Vec<Vec<f64>> = Vec::new();
        for (_, idxs) in ds.class_index() {
            let mut m = vec![0.0f64; spec.feature_dim];
            for &i in idxs {
                for (j, v) in ds.get(i).payload.values().iter().enumerate() {
                    m[j] += *v as f64;
                }
            }
            for v in m.iter_mut() {
                *v /= idxs.len() as f64;
            }
            means.push(m);
        }
        for a in 0..means.len() {
            for b in (a + 1)..means.len() {
                let d2: f64 = means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                assert!(d2.sqrt() > spec.class_separation * 0.95);
            }
        }
    }

    #[test]
    fn manifest_round_trip_features() {
        let ds = ds_with_sizes(&[3, 2]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        save_manifest(&ds, &path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn manifest_round_trip_images() {
        let mut examples = Vec::new();
        for i in 0..3 {
            let data: Vec<f32> = (0..3 * 4 * 4).map(|v| ((v + i) % 255) as f32 / 255.0).collect();
            examples.push(LabeledExample {
                source_id: format!("img{i}"),
                label: format!("cls{}", i % 2),
                payload: Payload::Image(ImageTensor::new(3, 4, 4, data).unwrap()),
            });
        }
        let ds = LongTailDataset::from_examples(examples).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        save_manifest(&ds, &path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back, ds); // exact: intensities are integer/255
        assert_eq!(back.classes(), vec!["cls0".to_string(), "cls1".to_string()]);
    }

    #[test]
    fn manifest_duplicate_id_names_offender() {
        let dir = tempfile::tempdir().unwrap();
        let ds = ds_with_sizes(&[2]);
        let path = dir.path().join("manifest.csv");
        save_manifest(&ds, &path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("c0_e0,features.pst,class000\n");
        std::fs::write(&path, text).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("duplicate source_id: c0_e0"));
    }

    #[test]
    fn manifest_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        std::fs::write(&path, "source_id,path,label\na,missing.png,x\n").unwrap();
        assert!(load_manifest(&path).is_err());
    }
}
