use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn fmr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fmr"))
        .current_dir(dir)
        .env("FMR_LOG", "error")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = fmr(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: &str = r#"{
    "data": {"kind": "biased", "n_signal_dims": 48, "n_nuisance_dims": 16, "nuisance_scale": 5.0,
             "spurious_strength": 0.9, "n_classes": 10, "train_per_class": 12, "test_per_class": 10,
             "noise_sigma": 1.0, "seed": 0},
    "epochs": 3,
    "learning_rate": 0.01
}"#;

fn small_config(dir: &Path) {
    fs::write(dir.join("small.json"), SMALL).unwrap();
}

#[test]
fn gen_data_is_deterministic_and_strict() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--out", "a"]);
    ok(d, &["gen-data", "--out", "b"]);
    for f in ["train.csv", "test.csv"] {
        assert_eq!(
            fs::read(d.join("a").join(f)).unwrap(),
            fs::read(d.join("b").join(f)).unwrap()
        );
    }
    let prov = json(&d.join("a/provenance.json"));
    assert_eq!(prov["kind"], "biased");
    assert_eq!(prov["config"]["seed"], 0);

    fs::write(d.join("partial.json"), r#"{"n_signal_dims": 8}"#).unwrap();
    let out = fmr(d, &["gen-data", "--config", "partial.json", "--out", "c"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_nuisance_dims"));
}

#[test]
fn train_writes_paired_results_and_honours_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_config(d);
    ok(
        d,
        &[
            "train",
            "--config",
            "small.json",
            "--out",
            "base",
            "--seed",
            "7",
        ],
    );
    ok(
        d,
        &[
            "train",
            "--config",
            "small.json",
            "--out",
            "fmr",
            "--seed",
            "7",
            "--regularizer",
            "fmr-dynamic",
        ],
    );
    let (base, reg) = (
        json(&d.join("base/result.json")),
        json(&d.join("fmr/result.json")),
    );
    assert_eq!(base["mode"], "none");
    assert_eq!(reg["mode"], "fmr-dynamic");
    assert_eq!(reg["coef"], 50.0);
    assert_eq!(json(&d.join("base/config.json"))["seed"], 7);
    assert_eq!(
        json(&d.join("fmr/config.json"))["regularizer"]["mode"],
        "fmr-dynamic"
    );
    let steps = base["steps"].as_u64().unwrap();
    assert!(d.join(format!("base/ckpt-{steps}")).exists());
    let lines = fs::read_to_string(d.join("base/metrics.jsonl"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(lines as u64, steps + 1);
}

#[test]
fn train_reports_bad_config_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = fmr(
        dir.path(),
        &["train", "--config", "missing/cfg.json", "--out", "x"],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing/cfg.json"));
}

#[test]
fn resumed_training_matches_uninterrupted_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_config(d);
    ok(
        d,
        &[
            "train",
            "--config",
            "small.json",
            "--out",
            "full",
            "--checkpoint-every",
            "4",
        ],
    );
    ok(
        d,
        &[
            "train",
            "--config",
            "small.json",
            "--out",
            "part",
            "--checkpoint-every",
            "4",
        ],
    );
    ok(d, &["train", "--resume", "part/ckpt-8", "--out", "part"]);
    let steps = json(&d.join("full/result.json"))["steps"].as_u64().unwrap();
    for f in ["metrics.jsonl".to_string(), format!("ckpt-{steps}")] {
        assert_eq!(
            fs::read(d.join("full").join(&f)).unwrap(),
            fs::read(d.join("part").join(&f)).unwrap(),
            "{f}"
        );
    }
    let out = fmr(
        d,
        &[
            "train",
            "--resume",
            "part/ckpt-8",
            "--seed",
            "3",
            "--out",
            "part",
        ],
    );
    assert!(!out.status.success());
}

#[test]
fn analyze_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_config(d);
    ok(d, &["train", "--config", "small.json", "--out", "base"]);
    ok(
        d,
        &[
            "train",
            "--config",
            "small.json",
            "--out",
            "fmr",
            "--regularizer",
            "fmr-static:5",
        ],
    );
    let steps = json(&d.join("base/result.json"))["steps"].as_u64().unwrap();
    let (b, f) = (format!("base/ckpt-{steps}"), format!("fmr/ckpt-{steps}"));

    ok(
        d,
        &[
            "analyze",
            "overlap",
            "--checkpoint",
            &b,
            "--checkpoint",
            &f,
            "--ks",
            "8,16",
            "--out",
            "ov",
        ],
    );
    for csv in ["ov/overlap-0.csv", "ov/overlap-1.csv"] {
        let text = fs::read_to_string(d.join(csv)).unwrap();
        assert_eq!(text.lines().next(), Some("k,overlap"));
        assert_eq!(text.lines().count(), 3);
    }

    let out = fmr(d, &["analyze", "cam", "--checkpoint", &b, "--out", "cam"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no spatial feature maps"));

    ok(d, &["gen-data", "--out", "raw"]);
    ok(
        d,
        &[
            "analyze",
            "histogram",
            "--csv",
            "raw/train.csv",
            "--out",
            "hist",
        ],
    );
    let hist = fs::read_to_string(d.join("hist/histogram.csv")).unwrap();
    assert_eq!(hist.lines().next(), Some("bin_lo,bin_hi,count"));
    let total: usize = hist
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, 64);

    ok(
        d,
        &[
            "analyze",
            "dcv",
            "--checkpoint",
            &b,
            "--k",
            "3",
            "--out",
            "dcv",
        ],
    );
    assert_eq!(json(&d.join("dcv/dcv.json"))["k"], 3);
    ok(
        d,
        &["analyze", "probe", "--checkpoint", &b, "--out", "probe"],
    );
    assert!(
        json(&d.join("probe/probe.json"))["train_accuracy"]
            .as_f64()
            .unwrap()
            > 0.5
    );
    ok(d, &["eval", "--checkpoint", &b, "--out", "eval"]);
    assert_eq!(
        json(&d.join("eval/eval.json"))["test_accuracy"],
        json(&d.join("base/result.json"))["test_accuracy"]
    );

    // A data source of the wrong width is rejected.
    fs::write(d.join("narrow.json"), SMALL_DATA_NARROW).unwrap();
    let out = fmr(
        d,
        &[
            "analyze",
            "probe",
            "--checkpoint",
            &b,
            "--data",
            "narrow.json",
            "--out",
            "p2",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("incompatible checkpoint"));
}

const SMALL_DATA_NARROW: &str = r#"{"kind": "biased", "n_signal_dims": 8, "n_nuisance_dims": 4, "nuisance_scale": 5.0,
    "spurious_strength": 0.9, "n_classes": 10, "train_per_class": 5, "test_per_class": 5, "noise_sigma": 1.0, "seed": 0}"#;

#[test]
fn sweep_table_shape_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_config(d);
    let args = |out: &'static str, jobs: &'static str| {
        vec![
            "sweep",
            "--config",
            "small.json",
            "--lambdas",
            "10,100,1000",
            "--dynamic",
            "--seeds",
            "1,2,3",
            "--jobs",
            jobs,
            "--out",
            out,
        ]
    };
    ok(d, &args("s1", "2"));
    ok(d, &args("s2", "1"));
    let a = fs::read_to_string(d.join("s1/sweep.csv")).unwrap();
    assert_eq!(a.lines().next(), Some("mode,coef,seed,test_acc"));
    assert_eq!(a.lines().count(), 13);
    assert_eq!(a, fs::read_to_string(d.join("s2/sweep.csv")).unwrap());
    assert!(d.join("s1/runs/fmr-static-10/seed-2/result.json").exists());
    let summary = json(&d.join("s1/summary.json"));
    assert_eq!(summary["dynamic"]["mode"], "fmr-dynamic");
    assert_eq!(summary["best_static"]["mode"], "fmr-static");

    let out = fmr(d, &["sweep", "--lambdas", "", "--out", "s3"]);
    assert_eq!(out.status.code(), Some(2));
    let out = fmr(d, &["sweep", "--lambdas", "10,x", "--out", "s4"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad lambda"));
}
