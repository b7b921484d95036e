//! Synthetic multi-label datasets, the label-masking protocol, and
//! dataset file I/O.
//!
//! Labels use the three-letter alphabet {-1, 0, +1} per (image, class)
//! pair: unknown, known-negative, known-positive. Generation plants one
//! unit-normalized prototype vector per class and composes each image from
//! noisy prototype patches plus pure-noise filler patches, so the hidden
//! ground truth is known exactly and recovery quality can be scored.
//!
//! Datasets are stored as JSON lines (one object per line: `id`,
//! `patches`, optional `labels_full`, `labels_observed`), with generation
//! and masking parameters recorded in a `<name>.manifest.json` sidecar.

use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::config::MaskStrategy;
use crate::error::{Error, Result};
use crate::rng::{seeded, SeededRng};

pub const LABEL_UNKNOWN: i8 = -1;
pub const LABEL_NEGATIVE: i8 = 0;
pub const LABEL_POSITIVE: i8 = 1;

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticSpec {
    pub num_images: usize,
    pub num_classes: usize,
    pub patches: usize,
    pub raw_dim: usize,
    /// Poisson rate of distinct object classes per image.
    pub objects_per_image_mean: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// The generator matching a run config: num_train + num_test images
    /// with the configured shape, cardinality, noise, and data seed.
    pub fn from_run_config(cfg: &crate::config::RunConfig) -> Self {
        Self {
            num_images: cfg.num_train + cfg.num_test,
            num_classes: cfg.num_classes,
            patches: cfg.patches,
            raw_dim: cfg.d_raw,
            objects_per_image_mean: cfg.objects_per_image,
            noise_sigma: cfg.noise_sigma,
            seed: cfg.data_seed(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.patches == 0 || self.raw_dim == 0 {
            return Err(Error::Config(
                "num_classes, patches and raw_dim must be >= 1".to_string(),
            ));
        }
        if self.objects_per_image_mean <= 0.0 {
            return Err(Error::Config(format!(
                "objects_per_image_mean must be positive, got {}",
                self.objects_per_image_mean
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// One image: raw patch features plus full and observed label vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Row-major patches x raw_dim.
    pub patches: Vec<f64>,
    /// Ground truth in {0,1} per class; absent for datasets loaded from
    /// files that omit it.
    pub full_labels: Option<Vec<u8>>,
    /// Observed labels in {-1,0,1} per class.
    pub observed: Vec<i8>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub patches_per_image: usize,
    pub raw_dim: usize,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Splits off the first `n` samples as one dataset, leaving the rest in
    /// a second.
    pub fn split_at(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n > self.samples.len() {
            return Err(Error::Data(format!(
                "cannot split {} samples at {n}",
                self.samples.len()
            )));
        }
        let mut head = self.clone();
        let tail_samples = head.samples.split_off(n);
        let mut tail = self.clone();
        tail.samples = tail_samples;
        Ok((head, tail))
    }
}

/// Draws the class prototype matrix: one unit-normalized row per class.
fn prototypes(rng: &mut SeededRng, num_classes: usize, raw_dim: usize) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|_| {
            let mut v: Vec<f64> = (0..raw_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x /= norm);
            v
        })
        .collect()
}

/// Generates a dataset from `spec`. Deterministic given the seed: the same
/// spec always produces bit-identical samples.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = seeded(spec.seed);
    let protos = prototypes(&mut rng, spec.num_classes, spec.raw_dim);
    let poisson = Poisson::new(spec.objects_per_image_mean)
        .map_err(|e| Error::Config(format!("bad Poisson rate: {e}")))?;
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(format!("{e}")))?)
    } else {
        None
    };
    // A class must land on at least one patch, so the object count is
    // additionally capped by the patch count.
    let max_objects = spec.num_classes.min(spec.patches);

    let mut samples = Vec::with_capacity(spec.num_images);
    for img in 0..spec.num_images {
        let drawn = poisson.sample(&mut rng) as usize;
        let k = drawn.min(max_objects);
        let classes: Vec<usize> = index::sample(&mut rng, spec.num_classes, k).into_vec();

        // Deal each present class up to two distinct patches (evidence is
        // spread, so pooling over regions matters), plus an occasional
        // third while spare patches remain.
        let slots: Vec<usize> = index::sample(&mut rng, spec.patches, spec.patches).into_vec();
        let mut assignment: Vec<Option<usize>> = vec![None; spec.patches];
        let mut next_slot = 0usize;
        for _round in 0..2 {
            for &c in &classes {
                if next_slot < spec.patches {
                    assignment[slots[next_slot]] = Some(c);
                    next_slot += 1;
                }
            }
        }
        for &c in &classes {
            if next_slot < spec.patches && rng.random_range(0.0..1.0) < 0.25 {
                assignment[slots[next_slot]] = Some(c);
                next_slot += 1;
            }
        }

        let mut patches = vec![0.0f64; spec.patches * spec.raw_dim];
        for p in 0..spec.patches {
            let row = &mut patches[p * spec.raw_dim..(p + 1) * spec.raw_dim];
            if let Some(c) = assignment[p] {
                row.copy_from_slice(&protos[c]);
            }
            if let Some(n) = &noise {
                row.iter_mut().for_each(|x| *x += n.sample(&mut rng));
            }
        }

        let mut full = vec![0u8; spec.num_classes];
        for &c in &classes {
            full[c] = 1;
        }
        let observed: Vec<i8> = full.iter().map(|&y| y as i8).collect();
        samples.push(Sample {
            id: format!("img-{img:06}"),
            patches,
            full_labels: Some(full),
            observed,
        });
    }

    Ok(Dataset {
        patches_per_image: spec.patches,
        raw_dim: spec.raw_dim,
        num_classes: spec.num_classes,
        samples,
    })
}

/// Hides labels: every (image, class) annotation survives according to the
/// strategy at known-ratio `p`; hidden entries become -1. Known entries
/// copy the ground truth unchanged.
pub fn mask_labels(
    dataset: &Dataset,
    p: f64,
    strategy: MaskStrategy,
    seed: u64,
) -> Result<Dataset> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!(
            "known-label ratio must lie in (0, 1], got {p}"
        )));
    }
    let c = dataset.num_classes;
    let mut out = dataset.clone();
    let mut rng = seeded(seed);
    match strategy {
        MaskStrategy::PerPair => {
            for s in &mut out.samples {
                let full = s.full_labels.as_ref().ok_or_else(|| {
                    Error::Data(format!("sample {} has no full labels to mask", s.id))
                })?;
                s.observed = full
                    .iter()
                    .map(|&y| {
                        if rng.random_range(0.0..1.0) < p {
                            y as i8
                        } else {
                            LABEL_UNKNOWN
                        }
                    })
                    .collect();
            }
        }
        MaskStrategy::PerImage => {
            let keep = ((p * c as f64).round() as usize).clamp(1, c);
            for s in &mut out.samples {
                let full = s.full_labels.as_ref().ok_or_else(|| {
                    Error::Data(format!("sample {} has no full labels to mask", s.id))
                })?;
                let mut observed = vec![LABEL_UNKNOWN; c];
                for idx in index::sample(&mut rng, c, keep) {
                    observed[idx] = full[idx] as i8;
                }
                s.observed = observed;
            }
        }
        MaskStrategy::Global => {
            let total = dataset.samples.len() * c;
            let keep = ((p * total as f64).round() as usize).clamp(1, total);
            let mut known = vec![false; total];
            for idx in index::sample(&mut rng, total, keep) {
                known[idx] = true;
            }
            for (i, s) in out.samples.iter_mut().enumerate() {
                let full = s.full_labels.as_ref().ok_or_else(|| {
                    Error::Data(format!("sample {} has no full labels to mask", s.id))
                })?;
                s.observed = full
                    .iter()
                    .enumerate()
                    .map(|(j, &y)| if known[i * c + j] { y as i8 } else { LABEL_UNKNOWN })
                    .collect();
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleWire {
    id: String,
    patches: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    labels_full: Option<Vec<u8>>,
    labels_observed: Vec<i8>,
}

/// Masking parameters recorded alongside a dataset file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MaskRecord {
    pub known_ratio: f64,
    pub strategy: MaskStrategy,
    pub seed: u64,
}

/// Sidecar manifest: how the dataset file was produced.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator: Option<SyntheticSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masking: Option<MaskRecord>,
}

pub fn manifest_path(dataset_path: &Path) -> PathBuf {
    let mut os = dataset_path.file_stem().unwrap_or_default().to_owned();
    os.push(".manifest.json");
    dataset_path.with_file_name(os)
}

pub fn write_manifest(dataset_path: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    crate::fsio::atomic_write(&manifest_path(dataset_path), text.as_bytes())
}

pub fn read_manifest(dataset_path: &Path) -> Result<Option<Manifest>> {
    let p = manifest_path(dataset_path);
    if !p.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(p)?;
    Ok(Some(serde_json::from_str(&text)?))
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for s in &dataset.samples {
        let wire = SampleWire {
            id: s.id.clone(),
            patches: s
                .patches
                .chunks(dataset.raw_dim)
                .map(|row| row.to_vec())
                .collect(),
            labels_full: s.full_labels.clone(),
            labels_observed: s.observed.clone(),
        };
        serde_json::to_writer(&mut w, &wire)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut dataset = Dataset::default();
    for (lineno, line) in reader.lines().enumerate() {
        let line_index = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: SampleWire = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_index,
            message: format!("{e}"),
        })?;
        let parse_err = |message: String| Error::Parse { line: line_index, message };

        let p = wire.patches.len();
        if p == 0 {
            return Err(parse_err(format!("sample {} has no patches", wire.id)));
        }
        let d = wire.patches[0].len();
        if d == 0 || wire.patches.iter().any(|row| row.len() != d) {
            return Err(parse_err(format!("sample {} has ragged patch rows", wire.id)));
        }
        let c = wire.labels_observed.len();
        for (j, &v) in wire.labels_observed.iter().enumerate() {
            if !(-1..=1).contains(&v) {
                return Err(parse_err(format!(
                    "label value {v} outside {{-1,0,1}} at class {j}"
                )));
            }
        }
        if let Some(full) = &wire.labels_full {
            if full.len() != c {
                return Err(parse_err(format!(
                    "labels_full length {} != labels_observed length {c}",
                    full.len()
                )));
            }
            for (j, (&f, &o)) in full.iter().zip(&wire.labels_observed).enumerate() {
                if f > 1 {
                    return Err(parse_err(format!(
                        "full label value {f} outside {{0,1}} at class {j}"
                    )));
                }
                if o != LABEL_UNKNOWN && o != f as i8 {
                    return Err(parse_err(format!(
                        "observed label {o} contradicts full label {f} at class {j}"
                    )));
                }
            }
        }

        if dataset.samples.is_empty() {
            dataset.patches_per_image = p;
            dataset.raw_dim = d;
            dataset.num_classes = c;
        } else if p != dataset.patches_per_image
            || d != dataset.raw_dim
            || c != dataset.num_classes
        {
            return Err(parse_err(format!(
                "sample {} shape ({p} patches x {d}, {c} classes) differs from first sample \
                 ({} x {}, {})",
                wire.id, dataset.patches_per_image, dataset.raw_dim, dataset.num_classes
            )));
        }

        dataset.samples.push(Sample {
            id: wire.id,
            patches: wire.patches.into_iter().flatten().collect(),
            full_labels: wire.labels_full,
            observed: wire.labels_observed,
        });
    }
    Ok(dataset)
}
