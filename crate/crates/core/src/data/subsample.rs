use rand::seq::SliceRandom;

use super::{rng_stream, DataError, LabeledDataset, Result};

/// Per-class stratified subset keeping `ceil(fraction * class_count)`
/// samples of every class. Selected samples keep their original order.
/// `fraction = 1` returns the dataset unchanged.
pub fn subsample_labels(
    dataset: &LabeledDataset,
    fraction: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::Fraction(fraction));
    }
    if fraction == 1.0 {
        return Ok(dataset.clone());
    }
    let mut rng = rng_stream(seed, 0x5ab5);
    let mut keep = Vec::new();
    for mut members in dataset.class_indices() {
        // Guard against 0.15 * 20 landing a hair above 3.
        let k = ((fraction * members.len() as f64) - 1e-9).ceil() as usize;
        members.shuffle(&mut rng);
        keep.extend_from_slice(&members[..k.min(members.len())]);
    }
    keep.sort_unstable();
    Ok(dataset.subset(&keep))
}
