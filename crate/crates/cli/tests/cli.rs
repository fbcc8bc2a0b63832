//! End-to-end runs of the `mdunet` binary against temporary directories.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mdunet"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const SMALL_CONFIG: &str = r#"{
  "model": { "stage_channels": [4, 8], "n_decoders": 3 },
  "schedule": {
    "total_epochs": 6, "warmup_epochs": 2, "cross_enable_epoch": 3,
    "base_lr": 0.003, "seed": 1
  },
  "synth": { "n_cases": 5, "n_raters": 3, "seed": 11, "ambiguity": 0.3,
             "height": 16, "width": 16 },
  "data": "ds",
  "out": "run"
}"#;

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, SMALL_CONFIG).unwrap();
    path
}

/// All file paths and contents under a directory, relative and sorted.
fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                files.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn full_pipeline_produces_all_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path());
    assert_ok(&run_in(tmp.path(), &["synth", "--config", "config.json"]));
    assert_ok(&run_in(tmp.path(), &["train", "--config", "config.json"]));
    assert_ok(&run_in(
        tmp.path(),
        &["evaluate", "--config", "config.json"],
    ));
    assert_ok(&run_in(tmp.path(), &["predict", "--config", "config.json"]));
    assert_ok(&run_in(tmp.path(), &["report", "--config", "config.json"]));

    let run = tmp.path().join("run");
    for f in [
        "model.ckpt",
        "train_log.csv",
        "config.json",
        "report.csv",
        "summary.json",
        "predictions/case_000/pred.f32",
        "predictions/case_000/meta.json",
        "report/report.csv",
        "report/case_000_diff.png",
    ] {
        assert!(run.join(f).exists(), "missing artifact {f}");
    }

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    let mean = summary["ds"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mean));

    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,lr,branch0_ce"));
    assert_eq!(log.lines().count(), 7); // header + 6 epochs
}

#[test]
fn synth_twice_with_same_seed_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path());
    assert_ok(&run_in(
        tmp.path(),
        &["synth", "--config", "config.json", "--data", "a"],
    ));
    assert_ok(&run_in(
        tmp.path(),
        &["synth", "--config", "config.json", "--data", "b"],
    ));
    assert_eq!(tree(&tmp.path().join("a")), tree(&tmp.path().join("b")));
}

#[test]
fn train_twice_writes_identical_logs() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path());
    assert_ok(&run_in(tmp.path(), &["synth", "--config", "config.json"]));
    assert_ok(&run_in(
        tmp.path(),
        &["train", "--config", "config.json", "--out", "r1"],
    ));
    assert_ok(&run_in(
        tmp.path(),
        &["train", "--config", "config.json", "--out", "r2"],
    ));
    let a = fs::read(tmp.path().join("r1/train_log.csv")).unwrap();
    let b = fs::read(tmp.path().join("r2/train_log.csv")).unwrap();
    assert_eq!(a, b);
    let ca = fs::read(tmp.path().join("r1/model.ckpt")).unwrap();
    let cb = fs::read(tmp.path().join("r2/model.ckpt")).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn print_config_roundtrip_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path());
    let out = run_in(
        tmp.path(),
        &[
            "synth",
            "--config",
            "config.json",
            "--seed",
            "77",
            "--print-config",
        ],
    );
    assert_ok(&out);
    let resolved = tmp.path().join("resolved.json");
    fs::write(&resolved, &out.stdout).unwrap();

    // feeding the resolved config back prints it unchanged
    let again = run_in(
        tmp.path(),
        &["synth", "--config", "resolved.json", "--print-config"],
    );
    assert_ok(&again);
    assert_eq!(out.stdout, again.stdout);

    // and produces the same dataset as the flag-driven run
    assert_ok(&run_in(
        tmp.path(),
        &[
            "synth",
            "--config",
            "config.json",
            "--seed",
            "77",
            "--data",
            "d1",
        ],
    ));
    assert_ok(&run_in(
        tmp.path(),
        &["synth", "--config", "resolved.json", "--data", "d2"],
    ));
    assert_eq!(tree(&tmp.path().join("d1")), tree(&tmp.path().join("d2")));
}

#[test]
fn exit_codes_for_config_and_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    // unreadable config -> 2
    let out = run_in(tmp.path(), &["synth", "--config", "missing.json"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error code=2 kind=config"), "{err}");

    // unknown config key -> 2
    fs::write(tmp.path().join("bad.json"), r#"{"modell": {}}"#).unwrap();
    let out = run_in(tmp.path(), &["synth", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));

    // invalid cross-field values -> 2
    fs::write(
        tmp.path().join("neg.json"),
        r#"{"model": {"n_decoders": 0}, "data": "x"}"#,
    )
    .unwrap();
    let out = run_in(tmp.path(), &["synth", "--config", "neg.json"]);
    assert_eq!(out.status.code(), Some(2));

    // missing dataset -> 3
    write_config(tmp.path());
    let out = run_in(
        tmp.path(),
        &["train", "--config", "config.json", "--data", "absent"],
    );
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error code=3 kind=data"), "{err}");
    assert_eq!(err.lines().count(), 1, "error must be one line: {err}");
}

#[test]
fn non_finite_loss_exits_with_divergence_code() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path());
    assert_ok(&run_in(tmp.path(), &["synth", "--config", "config.json"]));
    // an extreme (but finite, hence valid) alpha overflows the total loss
    let out = run_in(
        tmp.path(),
        &["train", "--config", "config.json", "--alpha", "1e308"],
    );
    assert_eq!(out.status.code(), Some(4));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("kind=divergence"), "{err}");
    assert!(err.contains("epoch 0"), "{err}");
}

#[test]
fn ensemble_training_writes_one_directory_per_run() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path());
    assert_ok(&run_in(tmp.path(), &["synth", "--config", "config.json"]));
    assert_ok(&run_in(
        tmp.path(),
        &[
            "train",
            "--config",
            "config.json",
            "--ensemble",
            "2",
            "--epochs",
            "3",
        ],
    ));
    for run in ["run_00", "run_01"] {
        for f in ["model.ckpt", "train_log.csv", "config.json"] {
            assert!(tmp.path().join("run").join(run).join(f).exists());
        }
    }
    // evaluation averages the ensemble members
    assert_ok(&run_in(
        tmp.path(),
        &["evaluate", "--config", "config.json"],
    ));
    assert!(tmp.path().join("run/summary.json").exists());
}

#[test]
fn evaluate_against_own_ground_truth_scores_one() {
    // write predictions equal to the averaged annotations, then report
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path());
    assert_ok(&run_in(tmp.path(), &["synth", "--config", "config.json"]));
    let cases = mdunet::datapipe::load_dataset(&tmp.path().join("ds")).unwrap();
    for case in &cases {
        let gt = mdunet::datapipe::average_annotations(&case.raters).unwrap();
        mdunet::datapipe::save_prediction(
            &tmp.path().join("run/predictions").join(&case.case_id),
            &case.case_id,
            &gt,
        )
        .unwrap();
    }
    assert_ok(&run_in(tmp.path(), &["report", "--config", "config.json"]));
    let csv = fs::read_to_string(tmp.path().join("run/report/report.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let score: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(score, 1.0, "line {line}");
    }
}
