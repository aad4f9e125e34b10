//! End-to-end tests of the `pluris` binary: exit-code contract, output
//! files, and run-log reproducibility.

use std::fs;
use std::path::Path;
use std::process::Command;

fn pluris() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pluris"))
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn preset_run_exits_zero_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "preset = \"poisson2d\"\n");
    let out = dir.path().join("out");
    let status = pluris()
        .args(["--config", cfg.to_str().unwrap()])
        .args(["--out-dir", out.to_str().unwrap()])
        .args(["--grid", "17", "--dump-fields", "u,residual"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&status.stderr));
    assert!(out.join("run_log.json").exists());
    assert!(out.join("u.csv").exists());
    assert!(out.join("residual.csv").exists());

    let (n, values) = pluris::cli::read_field_csv(&out.join("u.csv")).unwrap();
    assert_eq!(n, 2);
    assert_eq!(values.len(), 17 * 17);
}

#[test]
fn invalid_subsolution_exits_two_with_points() {
    let dir = tempfile::tempdir().unwrap();
    // saddle subsolution violates the cone for p = 1
    let cfg = write_config(
        dir.path(),
        r#"
[problem]
n = 2
p = 1
grid = 9
f = "1"
phi = "x1^2 - x2^2"
subsolution = "x1^2 - x2^2"
"#,
    );
    let out = dir.path().join("out");
    let result = pluris()
        .args(["--config", cfg.to_str().unwrap()])
        .args(["--out-dir", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(result.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("cone"), "stderr: {stderr}");
    assert!(stderr.contains("grid point"), "stderr: {stderr}");
    // log still written, with the validation report inside
    let log: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("run_log.json")).unwrap()).unwrap();
    assert_eq!(log["validation"]["pass"], serde_json::Value::Bool(false));
}

#[test]
fn unknown_config_key_exits_four_with_name_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "preset = \"poisson2d\"\nfoo = 1\n");
    let result = pluris()
        .args(["--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(result.status.code(), Some(4));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("foo"), "stderr: {stderr}");
    assert!(stderr.contains("line"), "stderr: {stderr}");
}

#[test]
fn missing_config_file_exits_four() {
    let result = pluris()
        .args(["--config", "/nonexistent/nowhere.toml"])
        .output()
        .unwrap();
    assert_eq!(result.status.code(), Some(4));
}

#[test]
fn exhausted_newton_budget_stalls_with_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    // a zero-iteration Newton budget cannot reach any t > 0
    let cfg = write_config(
        dir.path(),
        r#"
preset = "poisson2d"

[solver]
max_newton = 0
max_bisections = 2
"#,
    );
    let out = dir.path().join("out");
    let result = pluris()
        .args(["--config", cfg.to_str().unwrap()])
        .args(["--out-dir", out.to_str().unwrap(), "--grid", "9"])
        .output()
        .unwrap();
    assert_eq!(result.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("last good t = 0"), "stderr: {stderr}");
}

#[test]
fn run_log_is_reproducible_modulo_timestamps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "preset = \"ma2d\"\n");
    let out = dir.path().join("out");
    let mut logs = Vec::new();
    for _ in 0..2 {
        let status = pluris()
            .args(["--config", cfg.to_str().unwrap()])
            .args(["--out-dir", out.to_str().unwrap()])
            .args(["--grid", "9", "--diagnostics", "full", "--seed", "42"])
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
        let mut log: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("run_log.json")).unwrap()).unwrap();
        log.as_object_mut().unwrap().remove("meta");
        logs.push(serde_json::to_string(&log).unwrap());
    }
    assert_eq!(logs[0], logs[1], "runs with identical config and seed must match");
}

#[test]
fn shipped_config_files_parse_and_build() {
    let configs_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&configs_dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("toml") {
            continue;
        }
        seen += 1;
        let text = fs::read_to_string(&path).unwrap();
        let args = pluris::cli::CliArgs {
            config: path.clone(),
            out_dir: None,
            grid: Some(9),
            p: None,
            continuity_steps: None,
            tol: None,
            max_newton: None,
            diagnostics: None,
            seed: None,
            dump_fields: None,
        };
        let cfg = pluris::cli::resolve_config(&text, &args)
            .unwrap_or_else(|e| panic!("{path:?}: {e}"));
        // n = 4 configs are too heavy to build here; grid-9 builds for n = 2
        if cfg.problem.as_ref().unwrap().n == 2 {
            pluris::cli::build_spec(&cfg).unwrap_or_else(|e| panic!("{path:?}: {e}"));
        }
    }
    assert!(seen >= 6, "expected shipped preset configs, found {seen}");
}
