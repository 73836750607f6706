use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{rng_stream, DataError, LabeledDataset, Region, Result, Split};

/// Small 3-channel images whose class is a position-jittered binary glyph
/// drawn over a high-contrast grating. In the train split the grating
/// matches the label with probability `background_correlation`; in the
/// test split it is random.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlyphConfig {
    pub n_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub glyph_size: usize,
    /// Maximum offset of the glyph from the image centre, in pixels.
    pub jitter: usize,
    pub background_correlation: f64,
    pub background_contrast: f64,
    pub glyph_intensity: f64,
    pub draw_glyph: bool,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GlyphConfig {
    fn default() -> Self {
        Self {
            n_classes: 10,
            train_per_class: 30,
            test_per_class: 20,
            image_size: 32,
            glyph_size: 6,
            jitter: 6,
            background_correlation: 0.5,
            background_contrast: 1.0,
            glyph_intensity: 2.0,
            draw_glyph: true,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

pub const CHANNELS: usize = 3;

impl GlyphConfig {
    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(DataError::InvalidConfig(m));
        if self.n_classes < 2 {
            return invalid(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return invalid("every class needs at least one sample per split".into());
        }
        if self.glyph_size < 2 || self.glyph_size + 2 * self.jitter > self.image_size {
            return invalid(format!(
                "glyph of size {} with jitter {} does not fit a {}px image",
                self.glyph_size, self.jitter, self.image_size
            ));
        }
        if !(0.0..=1.0).contains(&self.background_correlation) {
            return invalid(format!(
                "background_correlation must be in [0, 1], got {}",
                self.background_correlation
            ));
        }
        for (name, v) in [
            ("background_contrast", self.background_contrast),
            ("glyph_intensity", self.glyph_intensity),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

struct Texture {
    angle: f64,
    period: f64,
    color: [f64; CHANNELS],
}

/// Distinct random binary glyphs, each with at least a third of its cells set.
fn make_glyphs(rng: &mut impl Rng, n: usize, size: usize) -> Vec<Vec<bool>> {
    let mut glyphs: Vec<Vec<bool>> = Vec::with_capacity(n);
    while glyphs.len() < n {
        let g: Vec<bool> = (0..size * size).map(|_| rng.random::<bool>()).collect();
        let on = g.iter().filter(|&&b| b).count();
        if on * 3 >= size * size && !glyphs.contains(&g) {
            glyphs.push(g);
        }
    }
    glyphs
}

fn make_textures(rng: &mut impl Rng, n: usize) -> Vec<Texture> {
    (0..n)
        .map(|k| Texture {
            angle: std::f64::consts::PI * k as f64 / n as f64,
            period: 3.0 + (k % 4) as f64 * 1.5,
            color: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
        })
        .collect()
}

/// Generates the `(train, test)` image pair. Pure in `config`.
pub fn gen_glyph_images(config: &GlyphConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    config.validate()?;
    let mut proto = rng_stream(config.seed, 10);
    let glyphs = make_glyphs(&mut proto, config.n_classes, config.glyph_size);
    let textures = make_textures(&mut proto, config.n_classes);
    let noise = Normal::new(0.0, config.noise_sigma)
        .map_err(|e| DataError::InvalidConfig(e.to_string()))?;
    let provenance = serde_json::to_string(config).expect("config serializes");
    let s = config.image_size;
    let g = config.glyph_size;

    let make = |split: Split| {
        let (stream, per_class, corr) = match split {
            Split::Train => (11, config.train_per_class, config.background_correlation),
            Split::Test => (12, config.test_per_class, 0.0),
        };
        let mut rng = rng_stream(config.seed, stream);
        let n = per_class * config.n_classes;
        let mut inputs = Vec::with_capacity(n * CHANNELS * s * s);
        let mut labels = Vec::with_capacity(n);
        let mut regions = Vec::with_capacity(n);
        for label in 0..config.n_classes {
            for _ in 0..per_class {
                let tex = if rng.random::<f64>() < corr {
                    &textures[label]
                } else {
                    &textures[rng.random_range(0..config.n_classes)]
                };
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let centre = (s - g) / 2;
                let j = config.jitter as i64;
                let dy = rng.random_range(-j..=j);
                let dx = rng.random_range(-j..=j);
                let y0 = (centre as i64 + dy) as usize;
                let x0 = (centre as i64 + dx) as usize;
                let region = Region {
                    y0,
                    x0,
                    y1: y0 + g,
                    x1: x0 + g,
                };
                let (sin, cos) = tex.angle.sin_cos();
                let freq = std::f64::consts::TAU / tex.period;
                for color in tex.color {
                    for y in 0..s {
                        for x in 0..s {
                            let glyph_on = config.draw_glyph
                                && region.contains(y, x)
                                && glyphs[label][(y - y0) * g + (x - x0)];
                            let base = if glyph_on {
                                config.glyph_intensity
                            } else {
                                let t = freq * (x as f64 * cos + y as f64 * sin) + phase;
                                config.background_contrast * color * t.cos()
                            };
                            inputs.push(base + noise.sample(&mut rng));
                        }
                    }
                }
                labels.push(label);
                regions.push(region);
            }
        }
        LabeledDataset {
            sample_shape: vec![CHANNELS, s, s],
            inputs,
            labels,
            n_classes: config.n_classes,
            split,
            provenance: provenance.clone(),
            seed: config.seed,
            regions: Some(regions),
        }
    };
    Ok((make(Split::Train), make(Split::Test)))
}

const ARCHIVE_FORMAT: &str = "fmr-glyph-archive";
const ARCHIVE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GlyphArchive {
    format: String,
    version: u32,
    split: Split,
    n_classes: usize,
    seed: u64,
    provenance: String,
    sample_shape: Vec<usize>,
    labels: Vec<usize>,
    regions: Option<Vec<Region>>,
    pixels: Vec<f64>,
}

/// Writes an image dataset as a single JSON document.
pub fn write_glyph_archive(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let archive = GlyphArchive {
        format: ARCHIVE_FORMAT.into(),
        version: ARCHIVE_VERSION,
        split: dataset.split,
        n_classes: dataset.n_classes,
        seed: dataset.seed,
        provenance: dataset.provenance.clone(),
        sample_shape: dataset.sample_shape.clone(),
        labels: dataset.labels.clone(),
        regions: dataset.regions.clone(),
        pixels: dataset.inputs.clone(),
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    serde_json::to_writer(&mut out, &archive).map_err(|e| io_err(e.into()))?;
    out.flush().map_err(io_err)
}

pub fn load_glyph_archive(path: &Path) -> Result<LabeledDataset> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let archive: GlyphArchive =
        serde_json::from_reader(BufReader::new(file)).map_err(|e| DataError::Parse {
            path: path.to_path_buf(),
            line: e.line() as u64,
            message: e.to_string(),
        })?;
    if archive.format != ARCHIVE_FORMAT || archive.version != ARCHIVE_VERSION {
        return Err(DataError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!(
                "unsupported archive {} v{}",
                archive.format, archive.version
            ),
        });
    }
    let ds = LabeledDataset {
        sample_shape: archive.sample_shape,
        inputs: archive.pixels,
        labels: archive.labels,
        n_classes: archive.n_classes,
        split: archive.split,
        provenance: archive.provenance,
        seed: archive.seed,
        regions: archive.regions,
    };
    ds.validate()?;
    Ok(ds)
}
