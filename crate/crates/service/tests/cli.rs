use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use elab_core::packaging::load_package;
use elab_service::tools::default_descriptors;

fn elab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elab")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn sample() -> String {
    elab_testkit::sample_dir().display().to_string()
}

/// Copy of the sample directory with its manifest edited.
fn broken_sample(dir: &Path) -> PathBuf {
    let root = dir.join("broken");
    let src = elab_testkit::sample_dir();
    std::fs::create_dir_all(root.join("content")).unwrap();
    for e in std::fs::read_dir(src.join("content")).unwrap() {
        let e = e.unwrap();
        std::fs::copy(e.path(), root.join("content").join(e.file_name())).unwrap();
    }
    let xml = std::fs::read_to_string(src.join("imsmanifest.xml"))
        .unwrap()
        .replace("activity-ref=\"assess\"", "activity-ref=\"nowhere\"");
    std::fs::write(root.join("imsmanifest.xml"), xml).unwrap();
    root
}

#[test]
fn validate_reports_verdict_through_exit_code() {
    let ok = elab(&["package", "validate", &sample()]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(stdout(&ok).contains("valid (0 errors)"));

    let dir = tempfile::tempdir().unwrap();
    let bad = broken_sample(dir.path());
    let out = elab(&["package", "validate", bad.to_str().unwrap(), "--format", "json"]);
    assert_eq!(code(&out), 1);
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["ok"], false);

    let missing = elab(&["package", "validate", "/definitely/not/here.zip"]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn pack_slice_and_merge_write_loadable_packages() {
    let dir = tempfile::tempdir().unwrap();
    let path = |n: &str| dir.path().join(n).display().to_string();
    assert_eq!(code(&elab(&["package", "pack", &sample(), "-o", &path("full.zip")])), 0);
    let full = load_package(&std::fs::read(path("full.zip")).unwrap()).unwrap();
    assert_eq!(full.unit.manifest, elab_testkit::sample_unit().manifest);
    assert_eq!(code(&elab(&["package", "validate", &path("full.zip")])), 0);

    let out = elab(&["package", "slice", &path("full.zip"), "--activity", "fill", "-o", &path("fill.zip")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let fill = load_package(&std::fs::read(path("fill.zip")).unwrap()).unwrap();
    assert!(fill.unit.manifest.activity("fill").is_some());
    assert!(fill.unit.manifest.activity("assess").is_none());

    assert_eq!(code(&elab(&["package", "slice", &path("full.zip"), "-o", &path("x.zip")])), 2);

    let clash = elab(&["package", "merge", &path("full.zip"), &path("fill.zip"), "-o", &path("m.zip")]);
    assert_eq!(code(&clash), 2);
    let out = elab(&[
        "package", "merge", &path("full.zip"), &path("fill.zip"), "--policy", "rename-right", "--suffix", "-2", "-o",
        &path("m.zip"),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let merged = load_package(&std::fs::read(path("m.zip")).unwrap()).unwrap();
    assert!(merged.unit.manifest.activity("fill-2").is_some());
    let out = elab(&["package", "merge", &path("full.zip"), &path("fill.zip"), "--policy", "prefer-left", "-o", &path("p.zip")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn compat_check_exit_codes() {
    let ok = elab(&["compat", "check", &sample()]);
    assert_eq!(code(&ok), 0);
    assert!(stdout(&ok).contains("compatible against 2 device(s)"));

    let dir = tempfile::tempdir().unwrap();
    let devices = dir.path().join("devices.json");
    let signal_only: Vec<_> = default_descriptors().into_iter().filter(|d| d.device_class != "tank").collect();
    std::fs::write(&devices, serde_json::to_vec(&signal_only).unwrap()).unwrap();
    let dev = devices.display().to_string();
    let out = elab(&["compat", "check", &sample(), "--devices", &dev, "--format", "json"]);
    assert_eq!(code(&out), 1);
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["compatible"], false);
    assert!(!json["violations"].as_array().unwrap().is_empty());

    // The brief needs no device at all.
    assert_eq!(code(&elab(&["compat", "check", &sample(), "--devices", &dev, "--activity", "brief"])), 0);
    std::fs::write(&devices, b"[{").unwrap();
    assert_eq!(code(&elab(&["compat", "check", &sample(), "--devices", &dev])), 2);
}

#[test]
fn sim_tank_prints_a_trajectory() {
    let out = elab(&["sim", "tank", "--q-in", "0.05", "--seconds", "600", "--every", "100"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,level,q_in,outflow"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|f| f.parse().unwrap()).collect()).collect();
    assert_eq!(rows[0], [0.0, 0.0, 0.05, 0.0]);
    let last = rows.last().unwrap();
    assert!((last[0] - 600.0).abs() < 1e-9);
    // Steady state is (q_in / cv)^2 = 1 m.
    assert!((last[1] - 1.0).abs() < 1e-3, "{last:?}");
    assert!(rows.windows(2).all(|w| w[1][1] >= w[0][1]));

    assert_eq!(code(&elab(&["sim", "tank", "--q-in", "9"])), 2);
}
