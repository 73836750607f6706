use anyhow::{Context, Result};
use fmr_core::data::{
    gen_biased_features, gen_glyph_images, write_feature_csv, write_glyph_archive, BiasGenConfig,
    GlyphConfig,
};
use serde::Serialize;

use crate::config::{create_out, read_json, write_json};
use crate::{DataKind, GenDataArgs};

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum Provenance<'a> {
    Biased {
        config: &'a BiasGenConfig,
        train: &'a str,
        test: &'a str,
    },
    Glyph {
        config: &'a GlyphConfig,
        train: &'a str,
        test: &'a str,
    },
}

pub fn run(args: GenDataArgs) -> Result<()> {
    let out = create_out(&args.out)?;
    match args.kind {
        DataKind::Biased => {
            let mut cfg: BiasGenConfig = match &args.config {
                Some(p) => read_json(p)?,
                None => BiasGenConfig::default(),
            };
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            let (train, test) = gen_biased_features(&cfg).context("generating features")?;
            write_feature_csv(&train, &out.join("train.csv"))?;
            write_feature_csv(&test, &out.join("test.csv"))?;
            write_json(&cfg, &out.join("config.json"))?;
            write_json(
                &Provenance::Biased {
                    config: &cfg,
                    train: "train.csv",
                    test: "test.csv",
                },
                &out.join("provenance.json"),
            )?;
            log::info!(
                "wrote {} train and {} test rows to {}",
                train.len(),
                test.len(),
                out.display()
            );
        }
        DataKind::Glyph => {
            let mut cfg: GlyphConfig = match &args.config {
                Some(p) => read_json(p)?,
                None => GlyphConfig::default(),
            };
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            let (train, test) = gen_glyph_images(&cfg).context("generating images")?;
            write_glyph_archive(&train, &out.join("train.json"))?;
            write_glyph_archive(&test, &out.join("test.json"))?;
            write_json(&cfg, &out.join("config.json"))?;
            write_json(
                &Provenance::Glyph {
                    config: &cfg,
                    train: "train.json",
                    test: "test.json",
                },
                &out.join("provenance.json"),
            )?;
            log::info!(
                "wrote {} train and {} test images to {}",
                train.len(),
                test.len(),
                out.display()
            );
        }
    }
    Ok(())
}
