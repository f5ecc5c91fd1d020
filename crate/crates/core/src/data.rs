//! Dataset ingestion, deterministic splits, and the planted teacher task.
//!
//! Sources: two synthetic generators (gaussian class blobs and a planted
//! teacher-student task), IDX image/label file pairs, and labeled CSV files.
//! Splitting shuffles with a seeded generator; optional per-feature
//! standardization derives its parameters from the training split only and
//! applies them unchanged to the other splits.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::model::{LayerRef, Model, ParameterAddress};
use crate::tensor::Tensor;

/// Labeled feature rows. Features are always flattened to `[n, d]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Dataset> {
        if features.ndim() != 2 {
            return Err(Error::data(format!(
                "dataset features must be [rows, width], got {:?}",
                features.shape()
            )));
        }
        if features.shape()[0] != labels.len() {
            return Err(Error::data(format!(
                "{} feature rows but {} labels",
                features.shape()[0],
                labels.len()
            )));
        }
        if n_classes < 2 {
            return Err(Error::data("a labeled dataset needs at least 2 classes"));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= n_classes) {
            return Err(Error::data(format!(
                "label {bad} outside 0..{n_classes}"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn width(&self) -> usize {
        self.features.shape()[1]
    }

    /// Rows at the given indices, in the given order.
    pub fn gather(&self, indices: &[usize]) -> Result<Dataset> {
        let width = self.width();
        let data = self.features.data();
        let mut vals = Vec::with_capacity(indices.len() * width);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::contract(format!("row {i} outside dataset of {}", self.len())));
            }
            vals.extend_from_slice(&data[i * width..(i + 1) * width]);
            labels.push(self.labels[i]);
        }
        Dataset::new(Tensor::new(vals, &[indices.len(), width])?, labels, self.n_classes)
    }
}

/// Train/validation(/test) partition of one ingested source.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Option<Dataset>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    SyntheticGaussianClasses {
        n_classes: usize,
        n_samples: usize,
        n_features: usize,
        #[serde(default = "default_separation")]
        separation: f64,
    },
    SyntheticPlanted {
        plant_fraction: f64,
        shift_magnitude: f64,
        n_samples: usize,
    },
    IdxFilePair {
        images: PathBuf,
        labels: PathBuf,
    },
    CsvFile {
        path: PathBuf,
    },
}

fn default_separation() -> f64 {
    3.0
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_val_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub normalize: bool,
    #[serde(default)]
    pub seed: u64,
}

/// Load a source, split it, and optionally standardize features.
///
/// The planted source derives its labels from a teacher built on top of the
/// given model, so `model` is required there and ignored elsewhere.
pub fn ingest(spec: &DatasetSpec, model: Option<&Model>) -> Result<SplitDataset> {
    let full = match &spec.source {
        DataSource::SyntheticGaussianClasses {
            n_classes,
            n_samples,
            n_features,
            separation,
        } => gaussian_classes(*n_classes, *n_samples, *n_features, *separation, spec.seed)?,
        DataSource::SyntheticPlanted {
            plant_fraction,
            shift_magnitude,
            n_samples,
        } => {
            let student = model.ok_or_else(|| {
                Error::contract("the planted source needs the student model for its teacher")
            })?;
            make_planted_task(student, *plant_fraction, *shift_magnitude, *n_samples, spec.seed)?
                .dataset
        }
        DataSource::IdxFilePair { images, labels } => load_idx_pair(images, labels)?,
        DataSource::CsvFile { path } => load_csv(path)?,
    };
    let mut splits = split(full, spec.train_fraction, spec.val_fraction, spec.seed)?;
    if spec.normalize {
        standardize(&mut splits)?;
    }
    Ok(splits)
}

fn split(full: Dataset, train_fraction: f64, val_fraction: f64, seed: u64) -> Result<SplitDataset> {
    for f in [train_fraction, val_fraction] {
        if !f.is_finite() || f <= 0.0 || f >= 1.0 {
            return Err(Error::contract(format!(
                "split fractions must lie in (0, 1), got {f}"
            )));
        }
    }
    if train_fraction + val_fraction > 1.0 + 1e-12 {
        return Err(Error::contract(format!(
            "split fractions sum to {} > 1",
            train_fraction + val_fraction
        )));
    }
    let n = full.len();
    let n_train = ((train_fraction * n as f64).round() as usize).max(1);
    let n_val = ((val_fraction * n as f64).round() as usize).max(1);
    if n_train + n_val > n {
        return Err(Error::contract(format!(
            "{n} rows cannot cover train {n_train} + val {n_val}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let train = full.gather(&order[..n_train])?;
    let val = full.gather(&order[n_train..n_train + n_val])?;
    let rest = &order[n_train + n_val..];
    let test = if rest.is_empty() {
        None
    } else {
        Some(full.gather(rest)?)
    };
    Ok(SplitDataset { train, val, test })
}

/// Standardize every feature using mean and standard deviation measured on
/// the training split alone.
fn standardize(splits: &mut SplitDataset) -> Result<()> {
    let width = splits.train.width();
    let n = splits.train.len() as f64;
    let data = splits.train.features.data();
    let mut mean = vec![0.0; width];
    for row in data.chunks_exact(width) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; width];
    for row in data.chunks_exact(width) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt().max(1e-8)).collect();

    let apply = |d: &Dataset| -> Result<Dataset> {
        let vals: Vec<f64> = d
            .features
            .data()
            .chunks_exact(width)
            .flat_map(|row| {
                row.iter()
                    .zip(mean.iter().zip(&std))
                    .map(|(v, (m, s))| (v - m) / s)
                    .collect::<Vec<f64>>()
            })
            .collect();
        Dataset::new(
            Tensor::new(vals, &[d.len(), width])?,
            d.labels.clone(),
            d.n_classes,
        )
    };
    splits.train = apply(&splits.train)?;
    splits.val = apply(&splits.val)?;
    if let Some(test) = &splits.test {
        splits.test = Some(apply(test)?);
    }
    Ok(())
}

fn gaussian_classes(
    n_classes: usize,
    n_samples: usize,
    n_features: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_classes < 2 || n_samples < n_classes || n_features == 0 {
        return Err(Error::contract(format!(
            "gaussian source needs ≥2 classes, ≥1 feature, and at least one sample per class \
             (got {n_classes} classes, {n_samples} samples, {n_features} features)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| (0..n_features).map(|_| separation * unit.sample(&mut rng)).collect())
        .collect();
    let mut vals = Vec::with_capacity(n_samples * n_features);
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let c = i % n_classes;
        for j in 0..n_features {
            vals.push(means[c][j] + unit.sample(&mut rng));
        }
        labels.push(c);
    }
    Dataset::new(Tensor::new(vals, &[n_samples, n_features])?, labels, n_classes)
}

/// A teacher built by sparsely shifting the student's weights, with data
/// labeled by the teacher's own predictions.
#[derive(Debug)]
pub struct PlantedTask {
    pub teacher: Model,
    /// The shifted addresses S, sorted canonically.
    pub planted: Vec<ParameterAddress>,
    pub dataset: Dataset,
}

/// Copy the student, shift `round(plant_fraction * eligible weights)` of its
/// non-bias eligible weights by `±shift_magnitude`, and label anisotropic
/// gaussian inputs with the teacher's argmax. Feature scales decay
/// geometrically across the leading half of the columns and then sit at a
/// flat floor, so the label signal lives in a narrow subspace and importance
/// scores have genuine structure to find.
pub fn make_planted_task(
    student: &Model,
    plant_fraction: f64,
    shift_magnitude: f64,
    n_samples: usize,
    data_seed: u64,
) -> Result<PlantedTask> {
    if !(plant_fraction > 0.0 && plant_fraction <= 0.05) {
        return Err(Error::contract(format!(
            "plant fraction must lie in (0, 0.05], got {plant_fraction}"
        )));
    }
    if !shift_magnitude.is_finite() || shift_magnitude < 0.0 {
        return Err(Error::contract(format!(
            "shift magnitude must be a finite non-negative value, got {shift_magnitude}"
        )));
    }
    if n_samples == 0 {
        return Err(Error::contract("planted task needs at least one sample"));
    }
    let weights: Vec<ParameterAddress> = student
        .eligible_addresses()
        .into_iter()
        .filter(|a| !a.is_bias())
        .collect();
    let count = ((plant_fraction * weights.len() as f64).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    let picks = rand::seq::index::sample(&mut rng, weights.len(), count);
    let mut planted: Vec<ParameterAddress> = picks.iter().map(|i| weights[i]).collect();
    planted.sort_unstable();

    let mut params = student.param_set();
    for addr in &planted {
        let (layer_ref, _, idx) = student.locate(*addr)?;
        let layer_index = match layer_ref {
            LayerRef::Linear(i) => i,
            LayerRef::Head => unreachable!("planted set excludes the head"),
        };
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        params.layers[layer_index].0[idx] += sign * shift_magnitude;
    }
    let teacher = Model::from_param_set(student.arch(), params)?;

    let d = student.input_numel();
    let knee = (d / 2).max(2).min(d);
    let scales: Vec<f64> = (0..d)
        .map(|j| {
            let t = (j as f64 / (knee - 1) as f64).min(1.0);
            3.0 * (0.05f64 / 3.0).powf(t)
        })
        .collect();
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut vals = Vec::with_capacity(n_samples * d);
    for _ in 0..n_samples {
        for s in &scales {
            vals.push(s * unit.sample(&mut rng));
        }
    }
    let features = Tensor::new(vals, &[n_samples, d])?;
    let labels = teacher.forward(&features)?.argmax_rows()?;
    let dataset = Dataset::new(features, labels, teacher.n_classes())?;
    Ok(PlantedTask {
        teacher,
        planted,
        dataset,
    })
}

/// Fraction of the planted set covered by the given addresses.
pub fn recovery_rate(selected: &[ParameterAddress], planted: &[ParameterAddress]) -> f64 {
    if planted.is_empty() {
        return 0.0;
    }
    let hit = planted
        .iter()
        .filter(|p| selected.binary_search(p).is_ok())
        .count();
    hit as f64 / planted.len() as f64
}

struct ByteReader {
    bytes: Vec<u8>,
    path: String,
    offset: usize,
}

impl ByteReader {
    fn open(path: &Path) -> Result<ByteReader> {
        Ok(ByteReader {
            bytes: std::fs::read(path)?,
            path: path.display().to_string(),
            offset: 0,
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Parse {
                path: self.path.clone(),
                offset: self.offset as u64,
                msg: format!(
                    "file ended while reading {what} ({} of {n} bytes left)",
                    self.bytes.len() - self.offset
                ),
            });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes(b.try_into().expect("4 bytes")))
    }

    fn bad(&self, back: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            offset: (self.offset - back) as u64,
            msg: msg.into(),
        }
    }
}

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Big-endian IDX image/label pair. Pixels are scaled into [0, 1].
fn load_idx_pair(images: &Path, labels: &Path) -> Result<Dataset> {
    let mut img = ByteReader::open(images)?;
    let magic = img.u32_be("image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(img.bad(4, format!("image magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}")));
    }
    let n = img.u32_be("image count")? as usize;
    let rows = img.u32_be("row count")? as usize;
    let cols = img.u32_be("column count")? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(img.bad(12, format!("degenerate image dimensions {n}x{rows}x{cols}")));
    }
    let pixels = img.take(n * rows * cols, "pixel data")?;
    let vals: Vec<f64> = pixels.iter().map(|p| *p as f64 / 255.0).collect();

    let mut lab = ByteReader::open(labels)?;
    let magic = lab.u32_be("label magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(lab.bad(4, format!("label magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}")));
    }
    let n_labels = lab.u32_be("label count")? as usize;
    if n_labels != n {
        return Err(Error::data(format!(
            "{n} images but {n_labels} labels in the IDX pair"
        )));
    }
    let raw = lab.take(n, "label data")?;
    let labels: Vec<usize> = raw.iter().map(|l| *l as usize).collect();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(Tensor::new(vals, &[n, rows * cols])?, labels, n_classes)
}

/// CSV with a header; the `label` column holds the class, every other
/// column is a numeric feature.
fn load_csv(path: &Path) -> Result<Dataset> {
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: display.clone(),
            offset: 0,
            msg: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: display.clone(),
            offset: 0,
            msg: e.to_string(),
        })?
        .clone();
    let label_col = headers
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| Error::data(format!("{display} has no `label` column")))?;
    let width = headers.len() - 1;
    if width == 0 {
        return Err(Error::data(format!("{display} has no feature columns")));
    }
    let mut vals = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: display.clone(),
            offset: e.position().map_or(0, |p| p.byte()),
            msg: e.to_string(),
        })?;
        let at = record.position().map_or(0, |p| p.byte());
        if record.len() != headers.len() {
            return Err(Error::Parse {
                path: display.clone(),
                offset: at,
                msg: format!("{} fields, expected {}", record.len(), headers.len()),
            });
        }
        for (i, field) in record.iter().enumerate() {
            if i == label_col {
                let label: usize = field.trim().parse().map_err(|_| Error::Parse {
                    path: display.clone(),
                    offset: at,
                    msg: format!("bad label `{field}`"),
                })?;
                labels.push(label);
            } else {
                let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                    path: display.clone(),
                    offset: at,
                    msg: format!("bad number `{field}` in column `{}`", &headers[i]),
                })?;
                vals.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::data(format!("{display} has no data rows")));
    }
    let n = labels.len();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(Tensor::new(vals, &[n, width])?, labels, n_classes)
}
