use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn lfads(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfads"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn json(out: &[u8]) -> Value {
    serde_json::from_slice(out).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(out)))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .canonicalize()
        .unwrap()
}

#[test]
fn generate_train_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lfads(
        &[
            "generate-lorenz",
            "--out",
            "toy.lfds",
            "--trials",
            "60",
            "--neurons",
            "12",
            "--held-out",
            "2",
            "--bins",
            "15",
            "--fp-bins",
            "2",
            "--seed",
            "1",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out.stdout)["valid_trials"], 12);

    let toy = configs().join("toy.yaml");
    let out = lfads(
        &[
            "train",
            toy.to_str().unwrap(),
            "trainer.max_epochs=2",
            "datamodule=file",
            "datamodule.path=toy.lfds",
            "--run-dir",
            "run",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out.stdout)["run_dir"], "run");
    for f in [
        "config.resolved",
        "metrics.csv",
        "loss_curve.svg",
        "posterior_means.lfds",
        "ckpt/last.ckpt",
    ] {
        assert!(tmp.path().join("run").join(f).is_file(), "{f}");
    }

    let out = lfads(&["eval", "run", "--data", "toy.lfds"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out.stdout);
    assert!(v["co_bps"].is_f64() && v["fp_bps"].is_f64(), "{v}");
    assert_eq!(v["n_trials"], 12);
}

#[test]
fn search_and_pbt_run_from_the_command_line() {
    let tmp = tempfile::tempdir().unwrap();
    let toy = configs().join("toy.yaml");
    let space = configs().join("search_space.yaml");
    let out = lfads(
        &[
            "search",
            toy.to_str().unwrap(),
            "trainer.max_epochs=1",
            "--space",
            space.to_str().unwrap(),
            "--samples",
            "2",
            "--workers",
            "2",
            "--out",
            "s",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out.stdout)["runs"].as_array().unwrap().len(), 2);
    assert!(tmp.path().join("s/summary.csv").is_file());

    let space = configs().join("pbt_space.yaml");
    let out = lfads(
        &[
            "pbt",
            toy.to_str().unwrap(),
            "--space",
            space.to_str().unwrap(),
            "--population",
            "2",
            "--generations",
            "2",
            "--gen-epochs",
            "1",
            "--quantile",
            "0.5",
            "--out",
            "p",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out.stdout)["best_per_generation"].as_array().unwrap().len(), 2);
}

#[test]
fn failures_exit_nonzero_with_structured_stderr() {
    let tmp = tempfile::tempdir().unwrap();
    let toy = configs().join("toy.yaml");
    let out = lfads(&["train", toy.to_str().unwrap(), "model.nope=1"], tmp.path());
    assert!(!out.status.success());
    let v = json(&out.stderr);
    assert_eq!(v["error"], "config");
    assert!(v["message"].as_str().unwrap().contains("model.nope"));

    let out = lfads(&["eval", "missing", "--data", "none.lfds"], tmp.path());
    assert!(!out.status.success());
    assert_eq!(json(&out.stderr)["error"], "io");
}
