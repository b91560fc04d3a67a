use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_exvideo");

fn exvideo(cwd: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).current_dir(cwd).output().expect("spawn exvideo")
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = exvideo(cwd, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn help_matches_golden_files() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let here = Path::new(".");
    assert_eq!(ok(here, &["--help"]), fs::read_to_string(golden.join("exvideo.txt")).unwrap());
    for cmd in ["build", "pretrain", "surgery", "posttune", "sample", "eval", "inspect", "verify-identity"] {
        let want = fs::read_to_string(golden.join(format!("{cmd}.txt"))).unwrap();
        assert_eq!(ok(here, &[cmd, "--help"]), want, "{cmd}");
    }
}

#[test]
fn normative_defaults_appear_in_help() {
    let here = Path::new(".");
    let post = ok(here, &["posttune", "--help"]);
    for needle in ["[default: 1e-5", "[default: 0.999]", "Clips per step [default: 1]", "[default: true]", "[default: false]"] {
        assert!(post.contains(needle), "posttune help lacks {needle}");
    }
    let surgery = ok(here, &["surgery", "--help"]);
    assert!(surgery.contains("[default: 8]") && surgery.contains("[default: 40]"));
    assert!(ok(here, &["sample", "--help"]).contains("<pgm|ppm>"));
}

#[test]
fn failures_exit_nonzero_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let out = exvideo(dir.path(), &["surgery", "--in", "missing.exvc", "--out", "x.exvc"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: ") && err.contains("missing.exvc"), "{err}");

    let out = exvideo(dir.path(), &["build", "--out", "m", "--frobnicate"]);
    assert!(!out.status.success());
    let out = exvideo(dir.path(), &["sample", "--out", "s", "--model", "m.exvc", "--frames-format", "gif"]);
    assert!(!out.status.success());
}

#[test]
fn pipeline_reports_identity_and_rejects_drift() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["build", "--seed", "1", "--out", "base", "--t-base", "4", "--channels", "8,16", "--height", "8", "--width", "8", "--norm-groups", "4"]);
    let report: serde_json::Value =
        serde_json::from_str(&ok(d, &["surgery", "--in", "base/model.exvc", "--out", "ext.exvc", "--t-base", "4", "--t-ext", "20"])).unwrap();
    assert_eq!(report["shape_changed"].as_array().unwrap().len(), 4);
    assert_eq!(report["shape_changed"][0]["new"], serde_json::json!([20, 8]));

    assert_eq!(ok(d, &["verify-identity", "--base", "base/model.exvc", "--extended", "ext.exvc", "--seed", "7"]).trim(), "0.0");

    let wrong_base = exvideo(d, &["surgery", "--in", "base/model.exvc", "--out", "bad.exvc", "--t-ext", "40"]);
    assert!(!wrong_base.status.success());

    ok(d, &["posttune", "--model", "ext.exvc", "--out", "post", "--steps", "3", "--lr", "1e-2"]);
    let drift = exvideo(d, &["verify-identity", "--base", "base/model.exvc", "--extended", "post/model.exvc"]);
    assert!(!drift.status.success());
    assert!(String::from_utf8_lossy(&drift.stderr).contains("differs from base"));

    let not_extended = exvideo(d, &["posttune", "--model", "base/model.exvc", "--out", "p2", "--steps", "1"]);
    assert!(!not_extended.status.success());
    let inspect: serde_json::Value = serde_json::from_str(&ok(d, &["inspect", "post/ckpt_3.exvc"])).unwrap();
    assert_eq!(inspect["frame_capacity"], 20);
    assert_eq!(inspect["extended"], true);
}
