//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any criterion fails.

#![allow(clippy::needless_range_loop)]

use fmr_core::analysis::{
    backbone_overlap, cam, dcv, lambda_sweep, sweep_means, topk_overlap, write_sweep_csv,
    OverlapCurve, ProbeConfig,
};
use fmr_core::autodiff::{Sgd, SgdConfig, Tape, Tensor};
use fmr_core::data::{load_feature_csv, write_feature_csv, LabeledDataset, Split};
use fmr_core::fmr::{
    batch_entropy, fmr_loss, max_entropy, normalize_features, EntropySchedule, FeatureBatch,
};
use fmr_core::models::{Model, ModelConfig};
use fmr_core::training::{
    train_on, Checkpoint, MetricsWriter, Regularizer, StepRecord, TrainConfig, TrainRun, Trainer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, bad: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(bad)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn criterion_1() -> Outcome {
    let uniform = Tensor::new(vec![3, 4], vec![0.25; 12], false).unwrap();
    let h = batch_entropy(&uniform).unwrap();
    if (h - 4f64.ln()).abs() > 1e-9 {
        return Err(format!("uniform D=4 entropy {h}"));
    }
    for d in [2usize, 64, 2048] {
        let hm = max_entropy(d).unwrap();
        if hm != (d as f64).ln() {
            return Err(format!("max_entropy({d}) = {hm}"));
        }
    }
    let peaked = Tensor::new(vec![1, 4], vec![1000.0, 0.0, 0.0, 0.0], false).unwrap();
    let p = normalize_features(&FeatureBatch::new(peaked, None).unwrap());
    let hp = batch_entropy(&p).unwrap();
    check(
        hp < 1e-3,
        format!("uniform H=ln4, max_entropy exact, peaked H={hp:.2e}"),
        format!("peaked entropy {hp}"),
    )
}

fn loss_value(model: &Model, x: &Tensor, labels: &[usize], lambda: f64) -> f64 {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false);
    let xv = tape.leaf(x);
    let out = model.forward(&mut tape, &params, xv).unwrap();
    let ce = tape.cross_entropy(out.logits, labels).unwrap();
    let reg = fmr_loss(&mut tape, out.features, lambda).unwrap();
    let total = tape.add(ce, reg).unwrap();
    tape.scalar(total)
}

fn criterion_2() -> Outcome {
    let config = ModelConfig::Mlp {
        input_dim: 6,
        hidden: vec![12],
        feature_dim: 16,
        n_classes: 4,
    };
    let (n, lambda, h) = (8, 3.0, 1e-5);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..3u64 {
        let mut model = Model::init(&config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = Tensor::new(vec![n, 6], gaussian(&mut rng, n * 6), false).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();

        let mut tape = Tape::new();
        let params = model.bind(&mut tape, true);
        let xv = tape.leaf(&x);
        let out = model.forward(&mut tape, &params, xv).unwrap();
        let ce = tape.cross_entropy(out.logits, &labels).unwrap();
        let reg = fmr_loss(&mut tape, out.features, lambda).unwrap();
        let total = tape.add(ce, reg).unwrap();
        let grads = tape.backward(total).unwrap();
        model.store_gradients(&params, &grads).unwrap();
        let analytic: Vec<Vec<f64>> = model
            .parameters()
            .iter()
            .map(|(_, t)| t.grad().expect("trainable").to_vec())
            .collect();

        let n_params = analytic.len();
        for pi in 0..n_params {
            for j in 0..analytic[pi].len() {
                let orig = model.parameters_mut()[pi].values()[j];
                model.parameters_mut()[pi].values_mut()[j] = orig + h;
                let up = loss_value(&model, &x, &labels, lambda);
                model.parameters_mut()[pi].values_mut()[j] = orig - h;
                let down = loss_value(&model, &x, &labels, lambda);
                model.parameters_mut()[pi].values_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[pi][j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    check(
        worst <= 1e-5,
        format!("{checked} parameter gradients, worst relative error {worst:.2e}"),
        format!("worst relative error {worst:.2e} over {checked} gradients"),
    )
}

fn criterion_3() -> Outcome {
    let mut s = EntropySchedule::new(50.0, 64, 0.9).unwrap();
    let h_init = 2.5;
    s.initialize(h_init).unwrap();
    let h_max = 64f64.ln();
    let at = |s: &mut EntropySchedule, h: f64| {
        s.h_ema = h;
        s.lambda().unwrap()
    };
    let l_init = at(&mut s, h_init);
    let l_max = at(&mut s, h_max);
    let l_mid = at(&mut s, (h_init + h_max) / 2.0);
    if (l_init - 50.0).abs() > 1e-12 || l_max.abs() > 1e-12 || (l_mid - 25.0).abs() > 1e-12 {
        return Err(format!("endpoints {l_init}, {l_max}, midpoint {l_mid}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let h = rng.random_range(h_init..h_max);
        let t = (h - h_init) / (h_max - h_init);
        let expected = 50.0 * (1.0 - t);
        worst = worst.max((at(&mut s, h) - expected).abs());
    }
    check(
        worst <= 1e-12,
        format!(
            "lambda 50 / 0 / 25 at endpoints and midpoint, 100 random points max error {worst:.1e}"
        ),
        format!("interpolation error {worst:.2e}"),
    )
}

fn criterion_4() -> Outcome {
    let (n, d) = (8, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut features = Tensor::new(vec![n, d], gaussian(&mut rng, n * d), true).unwrap();
    // The per-entry gradient carries a 1/n factor from the batch mean; a
    // larger step overshoots the dominant dims into the p ~ 0 plateau.
    let mut sgd = Sgd::new(SgdConfig {
        learning_rate: 4.0 * n as f64,
        momentum: 0.0,
        weight_decay: 0.0,
    })
    .unwrap();
    for _ in 0..3000 {
        let mut tape = Tape::new();
        let f = tape.leaf(&features);
        let loss = fmr_loss(&mut tape, f, 1.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        grads.write_to(f, &mut features).unwrap();
        sgd.step(&mut [&mut features]).unwrap();
    }
    let frozen = Tensor::new(vec![n, d], features.values().to_vec(), false).unwrap();
    let p = normalize_features(&FeatureBatch::new(frozen, None).unwrap());
    let worst_p = p
        .values()
        .iter()
        .map(|v| (v - 1.0 / d as f64).abs())
        .fold(0.0, f64::max);
    let gap = (d as f64).ln() - batch_entropy(&p).unwrap();
    check(
        worst_p <= 1e-3 && gap <= 1e-4,
        format!("max |p - 1/D| = {worst_p:.1e}, ln D - H = {gap:.1e}"),
        format!("max |p - 1/D| = {worst_p:.2e}, entropy gap {gap:.2e}"),
    )
}

struct BiasRuns {
    train: LabeledDataset,
    test: LabeledDataset,
    baseline: Vec<TrainRun>,
    dynamic: Vec<TrainRun>,
}

fn bias_runs() -> BiasRuns {
    let base = TrainConfig::default();
    let (train, test) = base.data.load().unwrap();
    let run = |regularizer, seed| {
        let cfg = TrainConfig {
            regularizer,
            seed,
            ..base.clone()
        };
        train_on(&cfg, &train, &test).unwrap()
    };
    let baseline = (0..5).map(|s| run(Regularizer::None, s)).collect();
    let dynamic = (0..5)
        .map(|s| run(Regularizer::FmrDynamic { beta: 50.0 }, s))
        .collect();
    BiasRuns {
        train,
        test,
        baseline,
        dynamic,
    }
}

fn criterion_5(runs: &BiasRuns) -> Outcome {
    let acc = |rs: &[TrainRun]| rs.iter().map(|r| r.test_accuracy).collect::<Vec<_>>();
    let (base, fmr) = (acc(&runs.baseline), acc(&runs.dynamic));
    let wins = base.iter().zip(&fmr).filter(|(b, f)| f > b).count();
    let h = |rs: &[TrainRun]| {
        mean(
            &rs.iter()
                .map(|r| r.final_epoch_entropy())
                .collect::<Vec<_>>(),
        )
    };
    let (hb, hf) = (h(&runs.baseline), h(&runs.dynamic));
    let summary = format!(
        "test acc FMR {:.3} vs baseline {:.3}, paired wins {wins}/5, final entropy {hf:.3} vs {hb:.3}",
        mean(&fmr),
        mean(&base)
    );
    check(
        mean(&fmr) > mean(&base) && wins >= 4 && hf > hb,
        summary.clone(),
        summary,
    )
}

fn criterion_6() -> Outcome {
    let base = TrainConfig::default();
    let rows = lambda_sweep(&base, &[10.0, 100.0, 1000.0], &[0, 1, 2], Some(50.0), 1)
        .map_err(|e| e.to_string())?;
    let means = sweep_means(&rows);
    let dynamic = means
        .iter()
        .find(|(m, _, _)| m == "fmr-dynamic")
        .map(|m| m.2)
        .unwrap();
    let (best_lambda, best_static) = means
        .iter()
        .filter(|(m, _, _)| m == "fmr-static")
        .map(|(_, c, a)| (*c, *a))
        .fold(
            (f64::NAN, f64::NEG_INFINITY),
            |b, x| if x.1 > b.1 { x } else { b },
        );
    let summary = format!(
        "dynamic {dynamic:.4} vs best static {best_static:.4} (lambda={best_lambda}), margin 0.01"
    );
    check(dynamic >= best_static - 0.01, summary.clone(), summary)
}

fn criterion_7(runs: &BiasRuns) -> Outcome {
    let ks = [8, 16, 32, 64];
    let probe = ProbeConfig::default();
    let curves = |rs: &[TrainRun]| -> Vec<OverlapCurve> {
        rs.iter()
            .map(|r| backbone_overlap(&r.model, &runs.train, &runs.test, &ks, &probe).unwrap())
            .collect()
    };
    let (base, fmr) = (curves(&runs.baseline), curves(&runs.dynamic));
    let avg =
        |cs: &[OverlapCurve], k| mean(&cs.iter().map(|c| c.at(k).unwrap()).collect::<Vec<_>>());
    let mut parts = Vec::new();
    let mut ok = true;
    for k in [8, 16, 32] {
        let (f, b) = (avg(&fmr, k), avg(&base, k));
        ok &= f >= b;
        parts.push(format!("k={k}: {f:.3} vs {b:.3}"));
    }
    ok &= base.iter().chain(&fmr).all(|c| c.at(64) == Some(1.0));

    let feats = fmr_core::analysis::extract_features(&runs.dynamic[0].model, &runs.train).unwrap();
    let p = fmr_core::analysis::linear_probe(&feats, &runs.train.labels, 10, Split::Train, &probe)
        .unwrap();
    let all_k: Vec<usize> = (1..=64).collect();
    let self_ok = topk_overlap(&p, &p, &all_k)
        .unwrap()
        .points
        .iter()
        .all(|pt| pt.overlap == 1.0);
    ok &= self_ok;
    let summary = format!(
        "FMR vs baseline overlap {}; k=D is 1; self-overlap 1: {self_ok}",
        parts.join(", ")
    );
    check(ok, summary.clone(), summary)
}

fn criterion_8() -> Outcome {
    let model = Model::init(&ModelConfig::default_cnn(), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_dcv = 0.0f64;
    let mut worst_cam = 0.0f64;
    for batch in 0..5 {
        let n = 20;
        let x = Tensor::new(
            vec![n, 3, 32, 32],
            gaussian(&mut rng, n * 3 * 32 * 32),
            false,
        )
        .unwrap();
        let out = model.forward_values(&x).unwrap();
        let maps = out.maps.unwrap();
        let (d, h, w) = (maps.shape()[1], maps.shape()[2], maps.shape()[3]);
        for i in 0..n {
            let c = (batch * n + i) % 10;
            let target = out.logits.row(i)[c] - model.head.bias.values()[c];
            let v = dcv(out.features.row(i), &model.head, c).unwrap();
            worst_dcv = worst_dcv.max((v.sum() - target).abs());
            let m = Tensor::new(
                vec![d, h, w],
                maps.values()[i * d * h * w..(i + 1) * d * h * w].to_vec(),
                false,
            )
            .unwrap();
            let map = cam(&m, &model.head, c, None).unwrap();
            worst_cam = worst_cam.max((map.spatial_mean() - target).abs());
        }
    }
    check(
        worst_dcv <= 1e-6 && worst_cam <= 1e-6,
        format!("100 CNN samples: DCV error {worst_dcv:.1e}, CAM error {worst_cam:.1e}"),
        format!("DCV error {worst_dcv:.2e}, CAM error {worst_cam:.2e}"),
    )
}

fn metrics_bytes(cfg: &TrainConfig, train: &LabeledDataset) -> Vec<u8> {
    let subset = cfg.training_subset(train).unwrap();
    let mut trainer = Trainer::new(cfg, subset).unwrap();
    let mut w = MetricsWriter::new(Vec::new());
    w.header(&trainer.header()).unwrap();
    trainer.run(|_, r| w.record(r)).unwrap();
    w.into_inner()
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 5,
        regularizer: Regularizer::FmrDynamic { beta: 50.0 },
        seed: 9,
        ..TrainConfig::default()
    };
    let (train, test) = cfg.data.load().unwrap();
    if metrics_bytes(&cfg, &train) != metrics_bytes(&cfg, &train) {
        return Err("metrics logs differ between identical runs".into());
    }

    let sweep = |name: &str| {
        let rows = lambda_sweep(&cfg, &[10.0], &[0, 1], Some(50.0), 1).unwrap();
        let p = dir.path().join(name);
        write_sweep_csv(&rows, &p).unwrap();
        std::fs::read(p).unwrap()
    };
    if sweep("a.csv") != sweep("b.csv") {
        return Err("sweep CSVs differ between identical runs".into());
    }

    let csv_path = dir.path().join("test.csv");
    write_feature_csv(&test, &csv_path).unwrap();
    let back = load_feature_csv(&csv_path, Some(test.n_classes), Split::Test).unwrap();
    if back.inputs != test.inputs || back.labels != test.labels {
        return Err("CSV roundtrip changed values".into());
    }

    let subset = cfg.training_subset(&train).unwrap();
    let mut full = Trainer::new(&cfg, subset.clone()).unwrap();
    let split_at = 37;
    let mut reference: Vec<StepRecord> = Vec::new();
    let ckpt_path = dir.path().join(format!("ckpt-{split_at}"));
    full.run(|t, r| {
        reference.push(r.clone());
        if t.step_index() == split_at {
            t.checkpoint().save(&ckpt_path)?;
        }
        Ok(())
    })
    .unwrap();
    let ckpt = Checkpoint::load(&ckpt_path).unwrap();
    let mut resumed = Trainer::resume(&ckpt, subset).unwrap();
    let mut tail = Vec::new();
    resumed
        .run(|_, r| {
            tail.push(r.clone());
            Ok(())
        })
        .unwrap();
    check(
        tail == reference[split_at..] && resumed.model().checksum() == full.model().checksum(),
        format!(
            "metrics and sweep CSV byte-identical, CSV roundtrip exact, resume reproduces {} records",
            tail.len()
        ),
        "resumed run diverged from the uninterrupted run".into(),
    )
}

fn criterion_10() -> Outcome {
    let base = TrainConfig::default();
    let (train, test) = base.data.load().unwrap();
    let run = |regularizer| {
        let cfg = TrainConfig {
            regularizer,
            ..base.clone()
        };
        train_on(&cfg, &train, &test).unwrap()
    };
    let off = run(Regularizer::None);
    let zero = run(Regularizer::FmrStatic { lambda: 0.0 });
    let worst = off
        .records
        .iter()
        .zip(&zero.records)
        .map(|(a, b)| ((a.loss_cls + a.loss_fmr) - (b.loss_cls + b.loss_fmr)).abs())
        .fold(0.0, f64::max);
    check(
        off.records.len() == zero.records.len() && worst <= 1e-12,
        format!(
            "{} steps, max loss difference {worst:.1e}",
            off.records.len()
        ),
        format!("max loss difference {worst:.2e}"),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n:>2} [{tag}] {name}: {detail}");
    };
    report(1, "entropy analytics", criterion_1());
    report(2, "gradient fidelity", criterion_2());
    report(3, "schedule endpoints", criterion_3());
    report(4, "entropy maximization dynamics", criterion_4());
    let runs = bias_runs();
    report(5, "bias experiment", criterion_5(&runs));
    report(6, "dynamic vs static", criterion_6());
    report(7, "top-k overlap", criterion_7(&runs));
    report(8, "DCV/CAM identities", criterion_8());
    report(9, "determinism and formats", criterion_9());
    report(10, "lambda=0 switch-off", criterion_10());
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
