//! The `dcilab` binary driven as a user would.

use std::path::Path;
use std::process::{Command, Output};

fn dcilab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcilab")).args(args).output().expect("binary runs")
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

#[test]
fn exit_codes() {
    assert_eq!(dcilab(&["gen", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(dcilab(&["nonsense"]).status.code(), Some(2));
    let help = dcilab(&["dataset", "--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8(help.stdout).unwrap();
    assert!(text.contains("--burst-gap") && text.contains("[default: auto]"), "{text}");

    let dir = tempfile::tempdir().unwrap();
    let out = dcilab(&["capture", "--prob", "1.5", &path(dir.path(), "missing"), &path(dir.path(), "x")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn gradcheck_reports_small_error() {
    let out = dcilab(&["gradcheck", "--window", "40", "--max-per-layer", "40"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("max relative error") && text.ends_with("ok\n"), "{text}");
}

#[test]
fn pipeline_from_generation_to_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (app, duration, seed) in [("Telegram", "200", "1"), ("PrimeVideo", "3000", "2")] {
        let tr = path(d, &format!("{app}.trace"));
        let cap = path(d, &format!("{app}.cap"));
        assert!(dcilab(&["gen", "--app", app, "--duration", duration, "--seed", seed, "--out", &tr]).status.success());
        assert!(dcilab(&["capture", "--prob", "0.1", "--seed", seed, &tr, &cap]).status.success());
    }
    let ds = path(d, "train.ds");
    let val = path(d, "val.ds");
    let out = dcilab(&[
        "dataset", "--window", "20", "--val-fraction", "0.1", "--val-out", &val, "--out", &ds,
        &path(d, "Telegram.cap"), &path(d, "PrimeVideo.cap"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let model = path(d, "m.bin");
    assert!(dcilab(&["train", "--dataset", &ds, "--epochs", "10", "--out", &model]).status.success());
    let report = path(d, "report.txt");
    assert!(dcilab(&["eval", "--model", &model, "--dataset", &val, "--report", &report, "--format", "kv"]).status.success());
    let text = std::fs::read_to_string(&report).unwrap();
    let acc: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("accuracy="))
        .expect("accuracy key")
        .parse()
        .unwrap();
    assert!(acc > 0.8, "{text}");

    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(format!("{report}.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "eval");
    assert_eq!(manifest["params"]["format"], "kv");
    assert_eq!(manifest["outputs"][&report].as_str().unwrap().len(), 64);

    // Windows of the wrong size are rejected.
    let ds40 = path(d, "w40.ds");
    assert!(dcilab(&["dataset", "--window", "40", "--out", &ds40, &path(d, "Telegram.cap")]).status.success());
    assert_eq!(dcilab(&["eval", "--model", &model, "--dataset", &ds40, "--report", &report]).status.code(), Some(1));
}

#[test]
fn unsorted_trace_is_accepted_with_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let tr = path(dir.path(), "u.trace");
    std::fs::write(&tr, "# label=Telegram\n20,4601,UL,800,2,F0_0\n10,4601,DL,900,3,F1_0\n").unwrap();
    let out = dcilab(&["capture", "--prob", "1", &tr, &path(dir.path(), "c.trace")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}
