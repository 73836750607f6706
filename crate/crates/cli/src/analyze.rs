use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fmr_core::analysis::{
    backbone_overlap, cam, cam_region_heat, extract_features, linear_probe, magnitude_histogram,
    sample_maps, topk_dcv_report, write_cam_csv, write_histogram_csv, write_overlap_csv,
    AnalysisError, OverlapPoint, ProbeConfig,
};
use fmr_core::data::{load_feature_csv, LabeledDataset, Split};
use fmr_core::models::Model;
use serde::Serialize;
use serde_json::json;

use crate::config::{create_out, data_source, load_checkpoint, load_splits, write_json};
use crate::{AnalyzeCommand, ModelSource, ProbeArgs};

impl ProbeArgs {
    fn config(&self) -> ProbeConfig {
        ProbeConfig {
            steps: self.probe_steps,
            learning_rate: self.probe_lr,
            weight_decay: self.probe_weight_decay,
            ..ProbeConfig::default()
        }
    }
}

/// A checkpoint's model with its train and test splits.
struct Loaded {
    model: Model,
    train: LabeledDataset,
    test: LabeledDataset,
    data: serde_json::Value,
}

impl Loaded {
    fn open(checkpoint: &Path, data: Option<&Path>) -> Result<Self> {
        let ckpt = load_checkpoint(checkpoint)?;
        let source = data_source(&ckpt, data)?;
        let (train, test) = load_splits(&ckpt, &source)?;
        Ok(Self {
            model: ckpt.model()?,
            train,
            test,
            data: serde_json::to_value(&source)?,
        })
    }

    fn split(&self, split: Split) -> &LabeledDataset {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

pub fn run(command: AnalyzeCommand) -> Result<()> {
    match command {
        AnalyzeCommand::Histogram {
            checkpoint,
            csv,
            data,
            split,
            bins,
            out,
        } => histogram(checkpoint, csv, data, split.into(), bins, &out),
        AnalyzeCommand::Probe { source, probe } => probe_report(&source, &probe),
        AnalyzeCommand::Overlap {
            checkpoints,
            data,
            ks,
            probe,
            out,
        } => overlap(&checkpoints, data.as_deref(), &ks, &probe, &out),
        AnalyzeCommand::Dcv { source, k, split } => dcv_report(&source, k, split.into()),
        AnalyzeCommand::Cam {
            source,
            index,
            class,
            top_k,
            split,
        } => cam_report(&source, index, class, top_k, split.into()),
    }
}

fn histogram(
    checkpoint: Option<PathBuf>,
    csv: Option<PathBuf>,
    data: Option<PathBuf>,
    split: Split,
    bins: usize,
    out: &Path,
) -> Result<()> {
    let out = create_out(out)?;
    let (features, source) = match (&checkpoint, &csv) {
        (_, Some(path)) => {
            let ds = load_feature_csv(path, None, split)?;
            (ds.all_inputs()?, json!({ "csv": path }))
        }
        (Some(path), None) => {
            let loaded = Loaded::open(path, data.as_deref())?;
            let features = extract_features(&loaded.model, loaded.split(split))?;
            (features, json!({ "checkpoint": path, "data": loaded.data }))
        }
        (None, None) => bail!("histogram needs --checkpoint or --csv"),
    };
    if features.shape().len() != 2 {
        bail!(
            "histogram needs feature vectors, got samples of shape {:?}",
            &features.shape()[1..]
        );
    }
    let hist = magnitude_histogram(&features, bins)?;
    write_json(
        &json!({ "source": source, "split": split, "bins": bins }),
        &out.join("config.json"),
    )?;
    write_histogram_csv(&hist, &out.join("histogram.csv"))?;
    write_json(&hist, &out.join("histogram.json"))?;
    log::info!("histogram of {} dims in {} bins", hist.dim_bins.len(), bins);
    Ok(())
}

#[derive(Serialize)]
struct ProbeReport {
    train_accuracy: f64,
    test_accuracy: f64,
    ranking: Vec<usize>,
    config: ProbeConfig,
}

fn probe_report(source: &ModelSource, args: &ProbeArgs) -> Result<()> {
    let out = create_out(&source.out)?;
    let loaded = Loaded::open(&source.checkpoint, source.data.as_deref())?;
    let cfg = args.config();
    let tr = extract_features(&loaded.model, &loaded.train)?;
    let te = extract_features(&loaded.model, &loaded.test)?;
    let probe = linear_probe(
        &tr,
        &loaded.train.labels,
        loaded.model.n_classes(),
        Split::Train,
        &cfg,
    )?;
    let report = ProbeReport {
        train_accuracy: probe.train_accuracy,
        test_accuracy: probe.accuracy(&te, &loaded.test.labels)?,
        ranking: probe.ranking(),
        config: cfg,
    };
    write_json(
        &json!({ "checkpoint": source.checkpoint, "data": loaded.data, "probe": cfg }),
        &out.join("config.json"),
    )?;
    write_json(&report, &out.join("probe.json"))?;
    log::info!(
        "probe train accuracy {:.4}, test accuracy {:.4}",
        report.train_accuracy,
        report.test_accuracy
    );
    Ok(())
}

#[derive(Serialize)]
struct OverlapEntry {
    checkpoint: PathBuf,
    csv: String,
    points: Vec<OverlapPoint>,
}

fn overlap(
    checkpoints: &[PathBuf],
    data: Option<&Path>,
    ks: &[usize],
    args: &ProbeArgs,
    out: &Path,
) -> Result<()> {
    let out = create_out(out)?;
    let cfg = args.config();
    let mut entries = Vec::new();
    for (i, path) in checkpoints.iter().enumerate() {
        let loaded = Loaded::open(path, data)?;
        let curve = backbone_overlap(&loaded.model, &loaded.train, &loaded.test, ks, &cfg)
            .with_context(|| format!("overlap for {}", path.display()))?;
        let csv = format!("overlap-{i}.csv");
        write_overlap_csv(&curve, &out.join(&csv))?;
        log::info!(
            "{}: {:?}",
            path.display(),
            curve.points.iter().map(|p| p.overlap).collect::<Vec<_>>()
        );
        entries.push(OverlapEntry {
            checkpoint: path.clone(),
            csv,
            points: curve.points,
        });
    }
    write_json(
        &json!({ "checkpoints": checkpoints, "data": data, "ks": ks, "probe": cfg }),
        &out.join("config.json"),
    )?;
    write_json(&entries, &out.join("overlap.json"))?;
    Ok(())
}

#[derive(Serialize)]
struct DcvRow {
    class: usize,
    rank: usize,
    dim: usize,
    mean_dcv: f64,
}

fn dcv_report(source: &ModelSource, k: usize, split: Split) -> Result<()> {
    let out = create_out(&source.out)?;
    let loaded = Loaded::open(&source.checkpoint, source.data.as_deref())?;
    let report = topk_dcv_report(&loaded.model, loaded.split(split), k)?;
    let path = out.join("dcv.csv");
    let mut w =
        csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    for class in &report.classes {
        for (rank, &dim) in class.top_dims.iter().enumerate() {
            w.serialize(DcvRow {
                class: class.class,
                rank,
                dim,
                mean_dcv: class.mean_dcv[dim],
            })?;
        }
    }
    w.flush()?;
    write_json(
        &json!({ "checkpoint": source.checkpoint, "data": loaded.data, "k": k, "split": split }),
        &out.join("config.json"),
    )?;
    write_json(&report, &out.join("dcv.json"))?;
    Ok(())
}

fn cam_report(
    source: &ModelSource,
    index: usize,
    class: Option<usize>,
    top_k: Option<usize>,
    split: Split,
) -> Result<()> {
    let out = create_out(&source.out)?;
    let loaded = Loaded::open(&source.checkpoint, source.data.as_deref())?;
    if !loaded.model.backbone.has_spatial_maps() {
        return Err(AnalysisError::NoSpatialMaps)
            .with_context(|| format!("cam on {}", source.checkpoint.display()));
    }
    let ds = loaded.split(split);
    if index >= ds.len() {
        bail!(
            "sample index {index} outside the {split} split of {} samples",
            ds.len()
        );
    }
    let label = ds.labels[index];
    let class = class.unwrap_or(label);
    let tops: Option<Vec<Option<Vec<usize>>>> = match top_k {
        Some(k) => {
            let report = topk_dcv_report(&loaded.model, ds, k)?;
            let mut per_class = vec![None; loaded.model.n_classes()];
            for c in report.classes {
                per_class[c.class] = Some(c.top_dims);
            }
            Some(per_class)
        }
        None => None,
    };
    let dims_for = |c: usize| -> Result<Option<Vec<usize>>> {
        match &tops {
            None => Ok(None),
            Some(t) => t
                .get(c)
                .cloned()
                .flatten()
                .map(Some)
                .ok_or_else(|| AnalysisError::ClassAbsent { class: c }.into()),
        }
    };
    let dims = dims_for(class)?;
    let maps = sample_maps(&loaded.model, ds, index)?;
    let map = cam(&maps, &loaded.model.head, class, dims.as_deref())?;
    write_cam_csv(&map, &out.join("cam.csv"))?;

    let image_size = *ds.sample_shape.last().unwrap_or(&1);
    let sample_heat = ds
        .regions
        .as_ref()
        .map(|r| map.region_heat(&r[index], image_size));
    let dataset_heat = match &ds.regions {
        Some(_) => Some(cam_region_heat(&loaded.model, ds, |c| {
            dims_for(c).ok().flatten()
        })?),
        None => None,
    };
    let heat = |h: Option<(f64, f64)>| {
        h.map(|(inside, outside)| json!({ "inside": inside, "outside": outside }))
    };
    write_json(
        &json!({
            "checkpoint": source.checkpoint,
            "data": loaded.data,
            "index": index,
            "class": class,
            "top_k": top_k,
            "split": split,
        }),
        &out.join("config.json"),
    )?;
    write_json(
        &json!({
            "index": index,
            "label": label,
            "class": class,
            "dims": dims,
            "height": map.height,
            "width": map.width,
            "spatial_mean": map.spatial_mean(),
            "sample_region_heat": heat(sample_heat),
            "dataset_region_heat": heat(dataset_heat),
        }),
        &out.join("cam.json"),
    )?;
    Ok(())
}
