//! Behavior tests for the `gradcil` binary: exit codes, artifact layout,
//! flag overrides, and the gen-data -> idx-run round trip. Each test runs
//! the compiled binary against a small, fast configuration.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn gradcil(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradcil"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary should spawn")
}

fn stdout_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

/// A deliberately small experiment so each binary invocation stays fast.
const SMALL_CONFIG: &str = r#"
[dataset]
d_in = 12
rho = 10.0
n_max = 60
separation = 4.0
test_per_class = 10

[train]
epochs_per_phase = 3
"#;

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, SMALL_CONFIG).expect("config should write");
    path
}

#[test]
fn run_writes_artifacts_and_reports_the_summary() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path());
    let out = tmp.path().join("run");

    let result = gradcil(
        &[
            "run",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "77",
            "--trace",
        ],
        tmp.path(),
    );
    assert!(
        result.status.success(),
        "run failed: {}",
        stderr_of(&result)
    );
    let stdout = stdout_of(&result);
    assert!(
        stdout.contains("average accuracy"),
        "summary line missing from: {stdout}"
    );

    let manifest_text = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&manifest_text).unwrap();
    assert_eq!(
        manifest["seed"].as_u64(),
        Some(77),
        "--seed must override the config seed"
    );
    assert!(manifest["summary"]["average_accuracy"].is_number());

    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("phase,metric,key,value\n"));
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("phase,epoch,iteration,quantity,key,value\n"));
}

#[test]
fn invalid_config_values_exit_with_code_2_and_name_the_field() {
    let tmp = TempDir::new().unwrap();
    let config = tmp.path().join("bad.toml");
    std::fs::write(&config, "[dataset]\nrho = 0.5\n").unwrap();

    let result = gradcil(&["run", "--config", config.to_str().unwrap()], tmp.path());
    assert_eq!(result.status.code(), Some(2));
    let stderr = stderr_of(&result);
    assert!(
        stderr.contains("dataset.rho"),
        "error should name the field: {stderr}"
    );
}

#[test]
fn malformed_metrics_csv_exits_with_code_2_and_names_the_row() {
    let tmp = TempDir::new().unwrap();
    let csv = tmp.path().join("metrics.csv");
    std::fs::write(&csv, "phase,metric,key,value\n0,acc_seen,all,0.9\nnot,a,row\n").unwrap();

    let result = gradcil(
        &[
            "plot",
            csv.to_str().unwrap(),
            "--out",
            tmp.path().join("figs").to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(result.status.code(), Some(2));
    let stderr = stderr_of(&result);
    assert!(stderr.contains("row 3"), "error should name the row: {stderr}");
}

#[test]
fn generated_idx_files_feed_an_idx_sourced_run() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path());
    let data = tmp.path().join("data");

    let result = gradcil(
        &[
            "gen-data",
            "--config",
            config.to_str().unwrap(),
            "--out",
            data.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert!(
        result.status.success(),
        "gen-data failed: {}",
        stderr_of(&result)
    );
    for file in [
        "train-images.idx",
        "train-labels.idx",
        "test-images.idx",
        "test-labels.idx",
        "dataset.json",
    ] {
        assert!(data.join(file).exists(), "{file} missing");
    }

    let idx_config = tmp.path().join("idx.toml");
    std::fs::write(
        &idx_config,
        format!(
            r#"
[dataset]
source = "idx"
images = "{data}/train-images.idx"
labels = "{data}/train-labels.idx"
test_images = "{data}/test-images.idx"
test_labels = "{data}/test-labels.idx"

[train]
epochs_per_phase = 3
"#,
            data = data.display()
        ),
    )
    .unwrap();
    let out = tmp.path().join("idx-run");
    let result = gradcil(
        &[
            "run",
            "--config",
            idx_config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert!(
        result.status.success(),
        "idx-sourced run failed: {}",
        stderr_of(&result)
    );
    assert!(out.join("metrics.csv").exists());
}

#[test]
fn ablate_writes_the_full_variant_ladder() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path());
    let out = tmp.path().join("ablation");

    let result = gradcil(
        &[
            "ablate",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert!(
        result.status.success(),
        "ablate failed: {}",
        stderr_of(&result)
    );
    let stdout = stdout_of(&result);
    for variant in ["finetune", "kd_only", "full", "reweight_kd"] {
        assert!(stdout.contains(variant), "table lacks {variant}: {stdout}");
    }

    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(
        rows.len(),
        8,
        "expected a header plus seven variants, got: {csv}"
    );
    assert_eq!(
        rows[0],
        "variant,average_accuracy,forgetting,final_seen_accuracy"
    );
}

#[test]
fn plot_renders_figures_from_a_real_run() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path());
    let out = tmp.path().join("run");
    let result = gradcil(
        &[
            "run",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert!(result.status.success(), "{}", stderr_of(&result));

    let figs = tmp.path().join("figs");
    let result = gradcil(
        &[
            "plot",
            out.join("metrics.csv").to_str().unwrap(),
            "--out",
            figs.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert!(result.status.success(), "plot failed: {}", stderr_of(&result));
    for file in [
        "accuracy_curves.svg",
        "forgetting_curves.svg",
        "weight_norm_bars.svg",
        "gradient_magnitude_bars.svg",
    ] {
        let svg = std::fs::read_to_string(figs.join(file)).unwrap();
        assert!(svg.starts_with("<svg "), "{file} is not an SVG");
    }
}

#[test]
fn identical_invocations_in_fresh_directories_match_byte_for_byte() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path());

    let mut outputs = Vec::new();
    for name in ["first", "second"] {
        let out = tmp.path().join(name);
        let result = gradcil(
            &[
                "run",
                "--config",
                config.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ],
            tmp.path(),
        );
        assert!(result.status.success(), "{}", stderr_of(&result));
        outputs.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(
        outputs[0], outputs[1],
        "reruns must write identical metrics bytes"
    );
}
