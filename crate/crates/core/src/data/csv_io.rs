use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{DataError, LabeledDataset, Result, Split};

/// Writes `label,f0,...,f{F-1}` followed by one sample per line. Values use
/// the shortest representation that parses back to the same `f64`.
pub fn write_feature_csv(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    let f = dataset.sample_len();
    let mut header = String::from("label");
    for d in 0..f {
        header.push_str(&format!(",f{d}"));
    }
    writeln!(out, "{header}").map_err(io_err)?;
    for i in 0..dataset.len() {
        let mut line = dataset.labels[i].to_string();
        for v in dataset.sample(i) {
            line.push(',');
            line.push_str(&v.to_string());
        }
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Parses a feature CSV. `n_classes` fixes the label range; when `None`
/// it is inferred as `max(label) + 1`.
pub fn load_feature_csv(
    path: &Path,
    n_classes: Option<usize>,
    split: Split,
) -> Result<LabeledDataset> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let parse_err = |line: u64, message: String| DataError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .quoting(false)
        .from_reader(file);

    let header = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if header.get(0) != Some("label") || header.len() < 2 {
        return Err(parse_err(1, "header must be `label,f0,f1,...`".into()));
    }
    for (d, name) in header.iter().skip(1).enumerate() {
        if name != format!("f{d}") {
            return Err(parse_err(
                1,
                format!("column {} should be `f{d}`, found `{name}`", d + 1),
            ));
        }
    }
    let f = header.len() - 1;

    let mut labels = Vec::new();
    let mut inputs = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != f + 1 {
            return Err(parse_err(
                line,
                format!("expected {} columns, found {}", f + 1, record.len()),
            ));
        }
        let label: usize = record[0].trim().parse().map_err(|_| {
            parse_err(
                line,
                format!("label `{}` is not a nonnegative integer", &record[0]),
            )
        })?;
        if let Some(c) = n_classes {
            if label >= c {
                return Err(parse_err(line, format!("label {label} outside [0, {c})")));
            }
        }
        labels.push(label);
        for (d, cell) in record.iter().skip(1).enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("f{d} value `{cell}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(
                    line,
                    format!("f{d} value `{cell}` is not finite"),
                ));
            }
            inputs.push(v);
        }
    }
    if labels.is_empty() {
        return Err(DataError::Empty);
    }
    let n_classes = n_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let ds = LabeledDataset {
        sample_shape: vec![f],
        inputs,
        labels,
        n_classes,
        split,
        provenance: path.display().to_string(),
        seed: 0,
        regions: None,
    };
    ds.validate()?;
    Ok(ds)
}
