use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fmr_core::data::LabeledDataset;
use fmr_core::training::{Checkpoint, DataSource};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Strict JSON parse of a config file; unknown keys are errors.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn create_out(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir.to_path_buf())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// The checkpoint's data source, or an override from `data`.
pub fn data_source(checkpoint: &Checkpoint, data: Option<&Path>) -> Result<DataSource> {
    match data {
        Some(p) => read_json(p),
        None => Ok(checkpoint.config.data.clone()),
    }
}

/// Loads both splits and checks they fit the checkpoint's model input.
pub fn load_splits(
    checkpoint: &Checkpoint,
    source: &DataSource,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let (train, test) = source.load().context("loading data")?;
    let expected = checkpoint.config.model.input_shape();
    if train.sample_shape != expected || test.sample_shape != expected {
        anyhow::bail!(
            "incompatible checkpoint: model expects samples of shape {:?}, data has {:?}",
            expected,
            train.sample_shape
        );
    }
    Ok((train, test))
}

pub fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|e| anyhow::anyhow!("bad {what} `{s}`: {e}"))
        })
        .collect()
}
