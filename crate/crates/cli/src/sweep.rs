use anyhow::Result;
use clap::error::ErrorKind;
use clap::CommandFactory;
use fmr_core::analysis::{lambda_sweep, sweep_means, write_sweep_csv};
use fmr_core::training::TrainConfig;
use serde::Serialize;
use serde_json::json;

use crate::config::{create_out, parse_list, read_json, write_json};
use crate::{Cli, SweepArgs};

#[derive(Serialize)]
struct Point {
    mode: String,
    coef: f64,
    mean_test_acc: f64,
}

pub fn run(args: SweepArgs) -> Result<()> {
    let lambdas: Vec<f64> = parse_list(&args.lambdas, "lambda")?;
    if lambdas.is_empty() && args.dynamic.is_none() {
        let mut cmd = Cli::command();
        cmd.build();
        cmd.find_subcommand_mut("sweep")
            .expect("sweep subcommand exists")
            .error(
                ErrorKind::MissingRequiredArgument,
                "sweep needs --lambdas or --dynamic",
            )
            .exit();
    }
    let mut base: TrainConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(e) = args.epochs {
        base.epochs = e;
    }
    base.validate()?;
    let seeds: Vec<u64> = match &args.seeds {
        Some(s) => parse_list(s, "seed")?,
        None => vec![base.seed],
    };
    if seeds.is_empty() {
        anyhow::bail!("--seeds is empty");
    }
    let out = create_out(&args.out)?;
    write_json(
        &json!({
            "base": base,
            "lambdas": lambdas,
            "seeds": seeds,
            "dynamic": args.dynamic,
            "jobs": args.jobs,
        }),
        &out.join("config.json"),
    )?;

    log::info!(
        "sweeping {} static points{} over {} seeds on {} threads",
        lambdas.len(),
        if args.dynamic.is_some() {
            " plus dynamic"
        } else {
            ""
        },
        seeds.len(),
        args.jobs
    );
    let rows = lambda_sweep(&base, &lambdas, &seeds, args.dynamic, args.jobs)?;
    write_sweep_csv(&rows, &out.join("sweep.csv"))?;
    for row in &rows {
        let dir = out
            .join("runs")
            .join(format!("{}-{}", row.mode, row.coef))
            .join(format!("seed-{}", row.seed));
        create_out(&dir)?;
        write_json(row, &dir.join("result.json"))?;
    }

    let means: Vec<Point> = sweep_means(&rows)
        .into_iter()
        .map(|(mode, coef, mean_test_acc)| Point {
            mode,
            coef,
            mean_test_acc,
        })
        .collect();
    let best_static = means
        .iter()
        .filter(|p| p.mode == "fmr-static")
        .max_by(|a, b| a.mean_test_acc.total_cmp(&b.mean_test_acc));
    let dynamic = means.iter().find(|p| p.mode == "fmr-dynamic");
    for p in &means {
        log::info!(
            "{} {}: mean test accuracy {:.4}",
            p.mode,
            p.coef,
            p.mean_test_acc
        );
    }
    write_json(
        &json!({ "means": means, "best_static": best_static, "dynamic": dynamic }),
        &out.join("summary.json"),
    )?;
    Ok(())
}
