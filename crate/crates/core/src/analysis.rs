//! Diagnostics: linear probes on frozen features, top-k weight overlap,
//! magnitude histograms, dimension-wise contribution vectors, class
//! activation maps and regularizer sweeps.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Sgd, SgdConfig, Tape, Tensor, TensorError};
use crate::data::{DataError, LabeledDataset, Region, Split};
use crate::models::{LinearHead, Model, ModelError};
use crate::training::{self, argmax_rows, Regularizer, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] Box<TrainError>),
    #[error("class {class} has no samples")]
    ClassAbsent { class: usize },
    #[error("class {class} outside [0, {classes})")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("k = {k} outside [1, {dim}]")]
    KOutOfRange { k: usize, dim: usize },
    #[error("dimension {dim} outside [0, {limit})")]
    DimOutOfRange { dim: usize, limit: usize },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("model has no spatial feature maps")]
    NoSpatialMaps,
    #[error("{path}: {message}")]
    Output { path: PathBuf, message: String },
}

impl From<TrainError> for AnalysisError {
    fn from(e: TrainError) -> Self {
        AnalysisError::Train(Box::new(e))
    }
}

pub type Result<T, E = AnalysisError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.1,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

/// Multinomial logistic regression on frozen features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeClassifier {
    /// `[C, D]`.
    pub weight: Tensor,
    pub bias: Tensor,
    pub split: Split,
    pub train_accuracy: f64,
    pub config: ProbeConfig,
}

impl ProbeClassifier {
    pub fn n_classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        let head = LinearHead::new(self.weight.clone(), self.bias.clone())?;
        let d = self.feature_dim();
        if features.shape().len() != 2 || features.shape()[1] != d {
            return Err(TensorError::ShapeMismatch {
                op: "probe",
                expected: vec![features.shape()[0], d],
                found: features.shape().to_vec(),
            }
            .into());
        }
        let logits: Vec<f64> = features
            .values()
            .chunks(d)
            .flat_map(|f| head.logits(f))
            .collect();
        Ok(argmax_rows(&logits, self.n_classes()))
    }

    pub fn accuracy(&self, features: &Tensor, labels: &[usize]) -> Result<f64> {
        let preds = self.predict(features)?;
        let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(correct as f64 / labels.len().max(1) as f64)
    }

    /// Dimensions sorted by class-averaged absolute weight, largest first;
    /// ties go to the lower index.
    pub fn ranking(&self) -> Vec<usize> {
        let (c, d) = (self.n_classes(), self.feature_dim());
        let w = self.weight.values();
        let importance: Vec<f64> = (0..d)
            .map(|j| (0..c).map(|i| w[i * d + j].abs()).sum::<f64>() / c as f64)
            .collect();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
        order
    }
}

/// Fits a probe by full-batch gradient descent from zero weights.
pub fn linear_probe(
    features: &Tensor,
    labels: &[usize],
    n_classes: usize,
    split: Split,
    config: &ProbeConfig,
) -> Result<ProbeClassifier> {
    let shape = features.shape();
    if shape.len() != 2 {
        return Err(TensorError::Rank {
            op: "linear_probe",
            expected: 2,
            found: shape.to_vec(),
        }
        .into());
    }
    let (n, d) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(AnalysisError::InvalidArgument(format!(
            "{} labels for {n} feature rows",
            labels.len()
        )));
    }
    if n < n_classes {
        return Err(AnalysisError::InvalidArgument(format!(
            "need at least {n_classes} samples, got {n}"
        )));
    }
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        if l >= n_classes {
            return Err(AnalysisError::ClassOutOfRange {
                class: l,
                classes: n_classes,
            });
        }
        counts[l] += 1;
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(AnalysisError::ClassAbsent { class });
    }

    let mut weight = Tensor::zeros(vec![n_classes, d]).with_grad();
    let mut bias = Tensor::zeros(vec![n_classes]).with_grad();
    let mut sgd = Sgd::new(SgdConfig {
        learning_rate: config.learning_rate,
        momentum: 0.0,
        weight_decay: config.weight_decay,
    })?;
    for _ in 0..config.steps {
        let mut tape = Tape::new();
        let x = tape.leaf(features);
        let w = tape.leaf(&weight);
        let b = tape.leaf(&bias);
        let wt = tape.transpose(w)?;
        let z = tape.matmul(x, wt)?;
        let logits = tape.add_row_bias(z, b)?;
        let loss = tape.cross_entropy(logits, labels)?;
        let grads = tape.backward(loss)?;
        grads.write_to(w, &mut weight)?;
        grads.write_to(b, &mut bias)?;
        sgd.step(&mut [&mut weight, &mut bias])?;
    }
    let mut probe = ProbeClassifier {
        weight,
        bias,
        split,
        train_accuracy: 0.0,
        config: *config,
    };
    probe.train_accuracy = probe.accuracy(features, labels)?;
    Ok(probe)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapPoint {
    pub k: usize,
    pub overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapCurve {
    pub points: Vec<OverlapPoint>,
}

impl OverlapCurve {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.points.iter().find(|p| p.k == k).map(|p| p.overlap)
    }
}

/// `|topk(a) ∩ topk(b)| / k` for each `k`.
pub fn topk_overlap(
    a: &ProbeClassifier,
    b: &ProbeClassifier,
    ks: &[usize],
) -> Result<OverlapCurve> {
    let d = a.feature_dim();
    if b.feature_dim() != d {
        return Err(TensorError::ShapeMismatch {
            op: "topk_overlap",
            expected: a.weight.shape().to_vec(),
            found: b.weight.shape().to_vec(),
        }
        .into());
    }
    let (ra, rb) = (a.ranking(), b.ranking());
    let points = ks
        .iter()
        .map(|&k| {
            if k == 0 || k > d {
                return Err(AnalysisError::KOutOfRange { k, dim: d });
            }
            let mut in_a = vec![false; d];
            for &i in &ra[..k] {
                in_a[i] = true;
            }
            let shared = rb[..k].iter().filter(|&&i| in_a[i]).count();
            Ok(OverlapPoint {
                k,
                overlap: shared as f64 / k as f64,
            })
        })
        .collect::<Result<_>>()?;
    Ok(OverlapCurve { points })
}

/// Frozen backbone features for a whole dataset, `[N, D]`.
pub fn extract_features(model: &Model, dataset: &LabeledDataset) -> Result<Tensor> {
    let d = model.feature_dim();
    let mut values = Vec::with_capacity(dataset.len() * d);
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(256) {
        let out = model.forward_values(&dataset.batch_inputs(chunk)?)?;
        values.extend_from_slice(out.features.values());
    }
    Ok(Tensor::new(vec![dataset.len(), d], values, false)?)
}

/// Trains one probe on the train-split features and one on the test-split
/// features of `model`, and compares their rankings. The test-split probe
/// is a diagnostic only.
pub fn backbone_overlap(
    model: &Model,
    train: &LabeledDataset,
    test: &LabeledDataset,
    ks: &[usize],
    config: &ProbeConfig,
) -> Result<OverlapCurve> {
    let c = model.n_classes();
    let tr = extract_features(model, train)?;
    let te = extract_features(model, test)?;
    let p_train = linear_probe(&tr, &train.labels, c, Split::Train, config)?;
    let p_test = linear_probe(&te, &test.labels, c, Split::Test, config)?;
    topk_overlap(&p_train, &p_test, ks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeHistogram {
    pub bins: Vec<HistogramBin>,
    /// Mean `|value|` of each dimension.
    pub dim_magnitudes: Vec<f64>,
    /// Bin index of each dimension.
    pub dim_bins: Vec<usize>,
}

/// Histogram of per-dimension mean absolute value over `n_bins` equal bins
/// spanning `[0, max]`. The maximum falls in the last bin.
pub fn magnitude_histogram(features: &Tensor, n_bins: usize) -> Result<MagnitudeHistogram> {
    let shape = features.shape();
    if shape.len() != 2 {
        return Err(TensorError::Rank {
            op: "magnitude_histogram",
            expected: 2,
            found: shape.to_vec(),
        }
        .into());
    }
    if n_bins == 0 {
        return Err(AnalysisError::InvalidArgument("n_bins must be >= 1".into()));
    }
    let (n, d) = (shape[0], shape[1]);
    let mut mags = vec![0.0; d];
    for row in features.values().chunks(d) {
        for (m, v) in mags.iter_mut().zip(row) {
            *m += v.abs();
        }
    }
    mags.iter_mut().for_each(|m| *m /= n as f64);
    let max = mags.iter().cloned().fold(0.0, f64::max);
    let width = max / n_bins as f64;
    let dim_bins: Vec<usize> = mags
        .iter()
        .map(|&m| {
            if max == 0.0 {
                0
            } else {
                ((m / width) as usize).min(n_bins - 1)
            }
        })
        .collect();
    let mut bins: Vec<HistogramBin> = (0..n_bins)
        .map(|i| HistogramBin {
            bin_lo: i as f64 * width,
            bin_hi: if i + 1 == n_bins {
                max
            } else {
                (i + 1) as f64 * width
            },
            count: 0,
        })
        .collect();
    for &b in &dim_bins {
        bins[b].count += 1;
    }
    Ok(MagnitudeHistogram {
        bins,
        dim_magnitudes: mags,
        dim_bins,
    })
}

/// Dimension-wise contribution of one feature vector to one class logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dcv {
    pub class: usize,
    pub values: Vec<f64>,
}

impl Dcv {
    /// Equals `logit_c - bias_c`.
    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

pub fn dcv(feature: &[f64], head: &LinearHead, class: usize) -> Result<Dcv> {
    check_class(head, class)?;
    if feature.len() != head.feature_dim() {
        return Err(TensorError::ShapeMismatch {
            op: "dcv",
            expected: vec![head.feature_dim()],
            found: vec![feature.len()],
        }
        .into());
    }
    let values = feature
        .iter()
        .zip(head.class_weights(class))
        .map(|(f, w)| f * w)
        .collect();
    Ok(Dcv { class, values })
}

fn check_class(head: &LinearHead, class: usize) -> Result<()> {
    if class >= head.n_classes() {
        return Err(AnalysisError::ClassOutOfRange {
            class,
            classes: head.n_classes(),
        });
    }
    Ok(())
}

/// Top-`k` dimensions of the `k` largest entries of `values`, ties to the
/// lower index.
fn top_dims(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDcvReport {
    pub class: usize,
    /// Mean DCV over the samples labelled `class`.
    pub mean_dcv: Vec<f64>,
    /// The `k` dimensions with the largest mean contribution.
    pub top_dims: Vec<usize>,
    /// Per sample: summed contribution of `top_dims`.
    pub sample_mass: Vec<f64>,
    /// Mean of `sample_mass`.
    pub mean_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcvReport {
    pub k: usize,
    pub classes: Vec<ClassDcvReport>,
}

/// Per-class DCV summary over a dataset. With `k = D` every class mass is
/// the mean `logit_c - bias_c` over that class's samples.
pub fn topk_dcv_report(model: &Model, dataset: &LabeledDataset, k: usize) -> Result<DcvReport> {
    let d = model.feature_dim();
    if k == 0 || k > d {
        return Err(AnalysisError::KOutOfRange { k, dim: d });
    }
    let features = extract_features(model, dataset)?;
    let head = &model.head;
    let mut classes = Vec::new();
    for (class, members) in dataset.class_indices().into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let dcvs: Vec<Dcv> = members
            .iter()
            .map(|&i| dcv(features.row(i), head, class))
            .collect::<Result<_>>()?;
        let mut mean_dcv = vec![0.0; d];
        for v in &dcvs {
            for (m, x) in mean_dcv.iter_mut().zip(&v.values) {
                *m += x;
            }
        }
        mean_dcv.iter_mut().for_each(|m| *m /= dcvs.len() as f64);
        let top = top_dims(&mean_dcv, k);
        let sample_mass: Vec<f64> = dcvs
            .iter()
            .map(|v| top.iter().map(|&j| v.values[j]).sum())
            .collect();
        let mean_mass = sample_mass.iter().sum::<f64>() / sample_mass.len() as f64;
        classes.push(ClassDcvReport {
            class,
            mean_dcv,
            top_dims: top,
            sample_mass,
            mean_mass,
        });
    }
    Ok(DcvReport { k, classes })
}

/// A class activation map over the backbone's last spatial grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl CamMap {
    pub fn spatial_mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Mean positive heat inside and outside `region`, where `region` is
    /// given in pixel coordinates of an `image_size` square input and is
    /// scaled onto the map grid.
    pub fn region_heat(&self, region: &Region, image_size: usize) -> (f64, f64) {
        let sy = self.height as f64 / image_size as f64;
        let sx = self.width as f64 / image_size as f64;
        let y0 = (region.y0 as f64 * sy).floor() as usize;
        let x0 = (region.x0 as f64 * sx).floor() as usize;
        let y1 = ((region.y1 as f64 * sy).ceil() as usize).min(self.height);
        let x1 = ((region.x1 as f64 * sx).ceil() as usize).min(self.width);
        let scaled = Region { y0, x0, y1, x1 };
        let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0usize, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.values[y * self.width + x].max(0.0);
                if scaled.contains(y, x) {
                    inside += v;
                    n_in += 1;
                } else {
                    outside += v;
                    n_out += 1;
                }
            }
        }
        (inside / n_in.max(1) as f64, outside / n_out.max(1) as f64)
    }
}

/// `Σ_{d ∈ dims} W[c][d] · map_d` for one sample's maps `[D, h, w]`.
pub fn cam(
    maps: &Tensor,
    head: &LinearHead,
    class: usize,
    dims: Option<&[usize]>,
) -> Result<CamMap> {
    check_class(head, class)?;
    let shape = maps.shape();
    if shape.len() != 3 || shape[0] != head.feature_dim() {
        return Err(TensorError::ShapeMismatch {
            op: "cam",
            expected: vec![head.feature_dim(), 0, 0],
            found: shape.to_vec(),
        }
        .into());
    }
    let (d, h, w) = (shape[0], shape[1], shape[2]);
    let all: Vec<usize> = (0..d).collect();
    let dims = dims.unwrap_or(&all);
    if let Some(&bad) = dims.iter().find(|&&j| j >= d) {
        return Err(AnalysisError::DimOutOfRange { dim: bad, limit: d });
    }
    let weights = head.class_weights(class);
    let mut values = vec![0.0; h * w];
    for &j in dims {
        let map = &maps.values()[j * h * w..(j + 1) * h * w];
        for (o, m) in values.iter_mut().zip(map) {
            *o += weights[j] * m;
        }
    }
    Ok(CamMap {
        height: h,
        width: w,
        values,
    })
}

/// Spatial maps of one sample, `[D, h, w]`.
pub fn sample_maps(model: &Model, dataset: &LabeledDataset, index: usize) -> Result<Tensor> {
    let out = model.forward_values(&dataset.batch_inputs(&[index])?)?;
    let maps = out.maps.ok_or(AnalysisError::NoSpatialMaps)?;
    let shape = maps.shape()[1..].to_vec();
    Ok(Tensor::new(shape, maps.into_values(), false)?)
}

/// Mean over a dataset of the per-sample `(inside, outside)` glyph-region
/// heat of the true-class CAM restricted to `dims_for(class)`.
pub fn cam_region_heat(
    model: &Model,
    dataset: &LabeledDataset,
    dims_for: impl Fn(usize) -> Option<Vec<usize>>,
) -> Result<(f64, f64)> {
    let regions = dataset
        .regions
        .as_ref()
        .ok_or_else(|| AnalysisError::InvalidArgument("dataset has no glyph regions".into()))?;
    let image_size = *dataset.sample_shape.last().unwrap_or(&1);
    let (mut inside, mut outside) = (0.0, 0.0);
    for (i, region) in regions.iter().enumerate() {
        let class = dataset.labels[i];
        let maps = sample_maps(model, dataset, i)?;
        let dims = dims_for(class);
        let map = cam(&maps, &model.head, class, dims.as_deref())?;
        let (a, b) = map.region_heat(region, image_size);
        inside += a;
        outside += b;
    }
    let n = regions.len() as f64;
    Ok((inside / n, outside / n))
}

/// One row of a sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: String,
    pub coef: f64,
    pub seed: u64,
    pub test_acc: f64,
}

/// Static-coefficient sweep, optionally with the dynamic run as a
/// reference, for every seed. Runs are independent and executed on up to
/// `jobs` threads; rows come back in (lambda, then dynamic) × seed order.
pub fn lambda_sweep(
    base: &TrainConfig,
    lambdas: &[f64],
    seeds: &[u64],
    include_dynamic: Option<f64>,
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() && include_dynamic.is_none() {
        return Err(AnalysisError::InvalidArgument(
            "sweep needs at least one point".into(),
        ));
    }
    if seeds.is_empty() {
        return Err(AnalysisError::InvalidArgument(
            "sweep needs at least one seed".into(),
        ));
    }
    if let Some(&bad) = lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(AnalysisError::InvalidArgument(format!(
            "lambda must be >= 0, got {bad}"
        )));
    }
    let mut modes: Vec<Regularizer> = lambdas
        .iter()
        .map(|&lambda| Regularizer::FmrStatic { lambda })
        .collect();
    if let Some(beta) = include_dynamic {
        modes.push(Regularizer::FmrDynamic { beta });
    }
    let jobs_list: Vec<(Regularizer, u64)> = modes
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();

    let (train, test) = base.data.load()?;
    let run = |&(regularizer, seed): &(Regularizer, u64)| -> Result<SweepRow> {
        let cfg = TrainConfig {
            regularizer,
            seed,
            ..base.clone()
        };
        let result = training::train_on(&cfg, &train, &test)?;
        let (mode, coef) = regularizer.label();
        Ok(SweepRow {
            mode: mode.into(),
            coef,
            seed,
            test_acc: result.test_accuracy,
        })
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| AnalysisError::InvalidArgument(e.to_string()))?;
    pool.install(|| {
        use rayon::prelude::*;
        jobs_list.par_iter().map(run).collect()
    })
}

/// Mean test accuracy per (mode, coef), in first-appearance order.
pub fn sweep_means(rows: &[SweepRow]) -> Vec<(String, f64, f64)> {
    let mut out: Vec<(String, f64, f64, usize)> = Vec::new();
    for r in rows {
        match out
            .iter_mut()
            .find(|(m, c, _, _)| *m == r.mode && *c == r.coef)
        {
            Some(entry) => {
                entry.2 += r.test_acc;
                entry.3 += 1;
            }
            None => out.push((r.mode.clone(), r.coef, r.test_acc, 1)),
        }
    }
    out.into_iter()
        .map(|(m, c, s, n)| (m, c, s / n as f64))
        .collect()
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let err = |e: csv::Error| AnalysisError::Output {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for row in rows {
        w.serialize(row).map_err(err)?;
    }
    w.flush().map_err(|e| err(e.into()))
}

/// `k,overlap`
pub fn write_overlap_csv(curve: &OverlapCurve, path: &Path) -> Result<()> {
    write_rows(path, &curve.points)
}

/// `mode,coef,seed,test_acc`
pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    write_rows(path, rows)
}

/// `bin_lo,bin_hi,count`
pub fn write_histogram_csv(hist: &MagnitudeHistogram, path: &Path) -> Result<()> {
    write_rows(path, &hist.bins)
}

/// Writes a CAM grid, one map row per line.
pub fn write_cam_csv(map: &CamMap, path: &Path) -> Result<()> {
    let err = |e: csv::Error| AnalysisError::Output {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(err)?;
    for row in map.values.chunks(map.width) {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(err)?;
    }
    w.flush().map_err(|e| err(e.into()))
}

/// Pretty-printed JSON summary.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| AnalysisError::Output {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    std::fs::write(path, text + "\n").map_err(|e| AnalysisError::Output {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
