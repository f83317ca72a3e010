mod common;

use std::path::Path;
use std::process::{Command, Output};

use nofrost::objectives::MethodKind;

fn nofrost(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nofrost")).args(args).current_dir(cwd).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn help_and_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&nofrost(&["--help"], tmp.path())), 0);
    assert_eq!(code(&nofrost(&["no-such-command"], tmp.path())), 1);
    assert_eq!(code(&nofrost(&["train", "--set", "train.method=bogus"], tmp.path())), 1);
    assert_eq!(code(&nofrost(&["train", "--config", "missing.toml"], tmp.path())), 1);
}

#[test]
fn train_then_analyse_through_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.toml");
    std::fs::write(&cfg, common::tiny_toml("cli", MethodKind::Mbnat, Path::new("runs"))).unwrap();
    let c = cfg.to_str().unwrap();

    let o = nofrost(&["train", "--config", c, "--dry-run"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = nofrost(&["train", "--config", c, "--seed", "2"], tmp.path());
    assert_eq!(code(&o), 1, "seed changes the identity of an existing run directory");
    let o = nofrost(&["train", "--config", c], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("clean_acc"));

    for args in [
        &["evaluate", "--run", "runs/cli", "--checkpoint", "last"][..],
        &["sweep", "eps", "--run", "runs/cli", "--eps", "2,8", "--steps", "2"],
        &["sweep", "gamma", "--run", "runs/cli", "--points", "3", "--steps", "2", "--strategy", "logits", "--strategy", "random:0.5:1"],
        &["probe-stats", "--run", "runs/cli"],
        &["metrics", "--run", "runs/cli", "--limit", "4"],
    ] {
        let o = nofrost(args, tmp.path());
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in [
        "runs/cli/evaluate-last/eval.csv",
        "runs/cli/sweep-eps-best_robust/eps_sweep.svg",
        "runs/cli/sweep-gamma-best_robust/tradeoff.csv",
        "runs/cli/probe-best_robust/probe.json",
        "runs/cli/metrics-best_robust/metrics.csv",
    ] {
        assert!(tmp.path().join(f).is_file(), "{f}");
        let dir = tmp.path().join(f).parent().unwrap().to_path_buf();
        nofrost_harness::RunManifest::load(&dir).unwrap();
    }

    let o = nofrost(
        &["plot", "--kind", "eps_sweep", "--input", "runs/cli/sweep-eps-best_robust/eps_sweep.csv", "--out", "e.svg"],
        tmp.path(),
    );
    assert_eq!(code(&o), 0);
    let o = nofrost(
        &["plot", "--kind", "scatter", "--input", "runs/cli/sweep-eps-best_robust/eps_sweep.csv", "--out", "e.svg"],
        tmp.path(),
    );
    assert_eq!(code(&o), 1, "schema errors are config errors");
    assert!(String::from_utf8_lossy(&o.stderr).contains("source"));

    // Runtime failures: a missing checkpoint kind is a config error, a
    // locked run directory a runtime error.
    assert_eq!(code(&nofrost(&["evaluate", "--run", "runs/cli", "--checkpoint", "nope"], tmp.path())), 1);
    std::fs::write(tmp.path().join("runs/cli/run.lock"), "1").unwrap();
    assert_eq!(code(&nofrost(&["train", "--config", c], tmp.path())), 2);
}

#[test]
fn missing_dataset_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let o = nofrost(&["train", "--set", "dataset=cifar10", "--set", "data.data_dir=nowhere", "--output-dir", "runs"], tmp.path());
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not found"));
}

#[test]
fn augment_preview_writes_a_png() {
    let tmp = tempfile::tempdir().unwrap();
    let o = nofrost(&["augment-preview", "--set", "data.train_size=8", "--n", "3", "--out", "p"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let img = image::open(tmp.path().join("p/preview.png")).unwrap();
    // 7 rows and 3 columns of 8x8 images at scale 6 with one-block gutters.
    assert_eq!((img.width(), img.height()), (3 * 9 * 6 + 6, 7 * 9 * 6 + 6));
}

#[test]
fn repro_quick_reports_twelve_criteria() {
    let tmp = tempfile::tempdir().unwrap();
    let o = nofrost(&["repro", "--quick", "--out", "rq"], tmp.path());
    let stdout = String::from_utf8_lossy(&o.stdout);
    let lines = stdout.lines().filter(|l| l.starts_with("[PASS]") || l.starts_with("[FAIL]")).count();
    assert_eq!(lines, 12, "{stdout}");
    let failed = stdout.lines().any(|l| l.starts_with("[FAIL]"));
    assert_eq!(code(&o), if failed { 3 } else { 0 });
    nofrost_harness::RunManifest::load(&tmp.path().join("rq")).unwrap();
}
