//! End-to-end checks of the command-line interface and its file outputs.

use std::fs;
use std::path::Path;

use klq::cli::run;
use klq::fixtures::m2_model;

fn write_m2_config(dir: &Path) -> std::path::PathBuf {
    let model_json = m2_model().to_json_string().unwrap();
    fs::write(dir.join("m2_model.json"), model_json).unwrap();
    let config = serde_json::json!({
        "model": {"path": "m2_model.json"},
        "reference": {"constant": 0.7},
        "kappa": 1.0,
        "seed": 7,
        "snapshots": [0, 2],
    });
    let path = dir.join("m2.json");
    fs::write(&path, serde_json::to_vec_pretty(&config).unwrap()).unwrap();
    path
}

fn csv_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

#[test]
fn solve_writes_solution_tracking_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_m2_config(dir.path());
    let out = dir.path().join("out");
    let code = run([
        "klq",
        "solve",
        "--config",
        config.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);

    let solution: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("solution.json")).unwrap()).unwrap();
    assert!(solution["converged"].as_bool().unwrap());
    assert_eq!(solution["lambda"].as_array().unwrap().len(), 2);
    assert_eq!(solution["policies"].as_array().unwrap().len(), 2);

    // one row per step plus header
    let tracking = csv_lines(&out.join("tracking.csv"));
    assert_eq!(tracking.len(), 3);
    assert_eq!(tracking[0], "k,r,achieved,error");

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["artifact_version"], "1");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    for name in manifest["outputs"].as_array().unwrap() {
        assert!(
            out.join(name.as_str().unwrap()).exists(),
            "missing output {name}"
        );
    }
    assert!(out.join("marginals_k0.csv").exists());
    assert!(out.join("marginals_k2.csv").exists());
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_m2_config(dir.path());
    let (out_a, out_b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&out_a, &out_b] {
        let code = run([
            "klq",
            "simulate",
            "--config",
            config.to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
            "--agents",
            "200",
        ]);
        assert_eq!(code, 0);
    }
    for name in ["tracking.csv", "marginals_k0.csv", "marginals_k2.csv", "manifest.json"] {
        assert_eq!(
            fs::read(out_a.join(name)).unwrap(),
            fs::read(out_b.join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }
}

#[test]
fn validate_reports_violations_with_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc: serde_json::Value =
        serde_json::from_str(&m2_model().to_json_string().unwrap()).unwrap();
    doc["kernels"][0][0][0] = serde_json::json!(0.9); // row sums to 0.9
    fs::write(dir.path().join("bad.json"), serde_json::to_vec(&doc).unwrap()).unwrap();
    let config = serde_json::json!({"model": {"path": "bad.json"}});
    let config_path = dir.path().join("bad_config.json");
    fs::write(&config_path, serde_json::to_vec(&config).unwrap()).unwrap();
    assert_eq!(
        run(["klq", "validate", "--config", config_path.to_str().unwrap()]),
        1
    );
}

#[test]
fn validate_accepts_good_model() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_m2_config(dir.path());
    assert_eq!(run(["klq", "validate", "--config", config.to_str().unwrap()]), 0);
}

#[test]
fn coupling_csv_has_all_pairwise_columns() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_m2_config(dir.path());
    let out = dir.path().join("out");
    let code = run([
        "klq",
        "coupling",
        "--config",
        config.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
        "--num-inits",
        "6",
    ]);
    assert_eq!(code, 0);
    let lines = csv_lines(&out.join("coupling.csv"));
    let header: Vec<&str> = lines[0].split(',').collect();
    // k, tv_max, then C(6,2) = 15 pairwise columns
    assert_eq!(header.len(), 2 + 15);
    assert_eq!(header[0], "k");
    assert_eq!(header[1], "tv_max");
    assert!(header[2..].iter().all(|h| h.starts_with("tv_")));
    // K+1 data rows (k = 0..=K)
    assert_eq!(lines.len() - 1, 3);
}

#[test]
fn mpc_runs_on_tcl_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = serde_json::json!({
        "model": {"tcl": {"horizon": 24, "burn_in": 500, "kernel_noise": true}},
        "reference": {"sinusoid": {"amplitude": 0.05, "period": 24.0}},
        "kappa": 50.0,
        "agents": 300,
        "window": 12,
        "step": 6,
        "seed": 11
    });
    let config_path = dir.path().join("tcl.json");
    fs::write(&config_path, serde_json::to_vec(&config).unwrap()).unwrap();
    let out = dir.path().join("out");
    let code = run([
        "klq",
        "mpc",
        "--config",
        config_path.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let lines = csv_lines(&out.join("tracking.csv"));
    assert_eq!(lines.len() - 1, 24);
}

#[test]
fn flag_overrides_take_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_m2_config(dir.path());
    let out = dir.path().join("out");
    let code = run([
        "klq",
        "solve",
        "--config",
        config.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
        "--kappa",
        "123.0",
    ]);
    assert_eq!(code, 0);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["kappa"], 123.0);
}

#[test]
fn binary_reports_usage_errors() {
    let exe = env!("CARGO_BIN_EXE_klq");
    let status = std::process::Command::new(exe)
        .args(["solve", "--frobnicate"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));
    let status = std::process::Command::new(exe)
        .arg("--help")
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0));
}
