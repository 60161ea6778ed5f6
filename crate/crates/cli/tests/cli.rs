use std::fs;
use std::path::Path;

use mmfa_cli::{dispatch, usage, FINAL_CHECKPOINT, PROVENANCE_FILE};

const SMALL: &str = "train.epochs = 3\ntrain.checkpoint_every = 2\neval.trials = 2\n";

fn run(args: &[&str]) -> i32 {
    dispatch(args)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_cfg(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn pipeline_writes_checkpoints_metrics_and_reports() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_cfg(t.path(), "run.cfg", SMALL);
    let data = t.path().join("d.mmfa");
    let out = t.path().join("out");
    assert_eq!(run(&["gen-data", s(&cfg), s(&data)]), 0);
    assert_eq!(run(&["train", s(&cfg), s(&data), s(&out)]), 0);
    for f in [
        FINAL_CHECKPOINT,
        "metrics.csv",
        "steps.csv",
        PROVENANCE_FILE,
        "epoch-0002.ckpt",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);

    let ckpt = out.join(FINAL_CHECKPOINT);
    let report = t.path().join("report.json");
    assert_eq!(
        run(&["eval", s(&ckpt), s(&data), s(&report), "--config", s(&cfg)]),
        0
    );
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["cmc"].as_array().unwrap().len(), 10);
    assert!(json["map"].as_f64().unwrap() > 0.0);
    assert!(json["domain_probe_accuracy"].is_number());
    assert!(t.path().join("report.csv").exists());

    let feats = t.path().join("codes.csv");
    assert_eq!(run(&["extract", s(&ckpt), s(&data), s(&feats)]), 0);
    let text = fs::read_to_string(&feats).unwrap();
    assert_eq!(text.lines().count(), 481);
    assert!(text.starts_with("index,identity,domain,h0,"));
}

#[test]
fn provenance_reproduces_training_bit_exactly() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_cfg(t.path(), "run.cfg", "train.epochs = 2\ntrain.seed = 9\n");
    let data = t.path().join("d.mmfa");
    assert_eq!(run(&["gen-data", s(&cfg), s(&data)]), 0);
    let a = t.path().join("a");
    let b = t.path().join("b");
    assert_eq!(run(&["train", s(&cfg), s(&data), s(&a)]), 0);
    let prov = a.join(PROVENANCE_FILE);
    assert_eq!(run(&["train", s(&prov), s(&data), s(&b)]), 0);
    for f in [FINAL_CHECKPOINT, "metrics.csv", "steps.csv"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let text = fs::read_to_string(prov).unwrap();
    assert!(
        text.contains("train.seed = 9")
            && text.contains("MMFA1 v1")
            && text.contains("MMFA-CKPT v1")
    );
}

#[test]
fn mismatched_checkpoint_is_a_validation_error() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_cfg(t.path(), "run.cfg", "train.epochs = 1\n");
    let cfg16 = write_cfg(
        t.path(),
        "small.cfg",
        "data.input_dim = 16\nmodel.input_dim = 16\n",
    );
    let data = t.path().join("d.mmfa");
    let data16 = t.path().join("d16.mmfa");
    let out = t.path().join("out");
    assert_eq!(run(&["gen-data", s(&cfg), s(&data)]), 0);
    assert_eq!(run(&["gen-data", s(&cfg16), s(&data16)]), 0);
    assert_eq!(run(&["train", s(&cfg), s(&data), s(&out)]), 0);
    let ckpt = out.join(FINAL_CHECKPOINT);
    let report = t.path().join("r.json");
    assert_eq!(run(&["eval", s(&ckpt), s(&data16), s(&report)]), 1);
    assert_eq!(run(&["extract", s(&ckpt), s(&data16), s(&report)]), 1);
    assert_eq!(run(&["train", s(&cfg16), s(&data), s(&out)]), 1);
}

#[test]
fn command_line_errors_exit_one() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_cfg(t.path(), "run.cfg", "");
    let bad = write_cfg(t.path(), "bad.cfg", "train.bogus = 1\n");
    let out = t.path().join("x");
    assert_eq!(dispatch::<&str>(&[]), 1);
    assert_eq!(run(&["bogus"]), 1);
    assert_eq!(run(&["gen-data", s(&cfg)]), 1);
    assert_eq!(run(&["gen-data", s(&cfg), s(&out), "--fast"]), 1);
    assert_eq!(run(&["gen-data", s(&cfg), s(&out), "--config", s(&cfg)]), 1);
    assert_eq!(run(&["gen-data", s(&bad), s(&out)]), 1);
    assert!(!out.exists());
}

#[test]
fn io_failures_exit_two() {
    let t = tempfile::tempdir().unwrap();
    let missing = t.path().join("missing.cfg");
    assert_eq!(run(&["grad-check", s(&missing)]), 2);
    let cfg = write_cfg(t.path(), "run.cfg", "");
    let nowhere = t.path().join("no/such/dir/d.mmfa");
    assert_eq!(run(&["gen-data", s(&cfg), s(&nowhere)]), 2);
}

#[test]
fn help_lists_every_default() {
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&["train", "--help"]), 0);
    let text = usage();
    for line in mmfa_core::config::RunConfig::default().to_text().lines() {
        assert!(text.contains(line), "{line}");
    }
}

#[test]
fn grad_check_passes_on_defaults() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_cfg(t.path(), "run.cfg", "");
    assert_eq!(run(&["grad-check", s(&cfg)]), 0);
}

#[test]
fn ablate_writes_one_report_per_row() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_cfg(t.path(), "run.cfg", "train.epochs = 2\neval.trials = 1\n");
    let out = t.path().join("ablation");
    assert_eq!(run(&["ablate", s(&cfg), s(&out)]), 0);
    let rows = ["0-baseline", "1-in", "2-triplet", "3-aae", "4-mmd"];
    for r in rows {
        for f in ["report.json", "report.csv", "metrics.csv", PROVENANCE_FILE] {
            assert!(out.join(r).join(f).exists(), "{r}/{f}");
        }
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 6);
    // The baseline row trains without triplet, reconstruction, MMD or
    // adversarial terms, so those columns stay zero.
    let metrics = fs::read_to_string(out.join("0-baseline/metrics.csv")).unwrap();
    let last: Vec<f64> = metrics
        .lines()
        .last()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(&last[3..8], &[0.0; 5]);
}
