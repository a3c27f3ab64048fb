use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bohmlab"));
    c.env("RUST_LOG", "error");
    c
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn status(c: &mut Command) -> i32 {
    c.output().unwrap().status.code().unwrap()
}

#[test]
fn missing_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let code = status(bin().args(["groundstate", "--config", "no/such/file.cfg", "--out"]).arg(dir.path()));
    assert_eq!(code, 1);
    assert!(!dir.path().join("report.json").exists());
}

#[test]
fn unknown_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "coupling.mode = protective\ncoupling.bogus = 1\n").unwrap();
    let out = bin().args(["groundstate", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("coupling.bogus"), "{err}");
    assert_eq!(err.trim().lines().count(), 1);
}

#[test]
fn groundstate_writes_report_and_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert_eq!(status(bin().args(["groundstate", "--quiet", "--out"]).arg(&out)), 0);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["experiment"], "groundstate");
    assert_eq!(report["config"]["coupling.mode"]["source"], "default");
    assert!(out.join("energy_curve.dat").exists());

    let before = fs::read(out.join("report.json")).unwrap();
    assert_eq!(status(bin().args(["groundstate", "--quiet", "--set", "coupling.A=0.2", "--out"]).arg(&out)), 1);
    assert_eq!(fs::read(out.join("report.json")).unwrap(), before);
    assert_eq!(status(bin().args(["groundstate", "--quiet", "--force", "--set", "coupling.A=0.2", "--out"]).arg(&out)), 0);
    assert_ne!(fs::read(out.join("report.json")).unwrap(), before);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["groundstate", "scan-epsilon"] {
        let a = dir.path().join(format!("{cmd}-a"));
        let b = dir.path().join(format!("{cmd}-b"));
        assert_eq!(status(bin().args([cmd, "--quiet", "--out"]).arg(&a)), 0);
        assert_eq!(status(bin().args([cmd, "--quiet", "--out"]).arg(&b)), 0);
        for entry in fs::read_dir(&a).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{cmd}: {name:?}");
        }
    }
}

#[test]
fn diabatic_ramp_exits_invalid_with_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let code = status(
        bin().args(["protective", "--quiet", "--config"]).arg(configs().join("diabatic.cfg")).arg("--out").arg(&out),
    );
    assert_eq!(code, 3);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["valid"], false);
    assert!(report["invalid_reason"].as_str().unwrap().contains("adiabatic"));
    assert!(out.join("series.csv").exists());
}

#[test]
fn unresolved_step_is_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let code = status(
        bin()
            .args(["protective", "--quiet", "--config"])
            .arg(configs().join("diabatic.cfg"))
            .args(["--set", "schedule.dt=0.01", "--out"])
            .arg(dir.path().join("run")),
    );
    assert_eq!(code, 1);
    assert!(!dir.path().join("run").exists());
}
