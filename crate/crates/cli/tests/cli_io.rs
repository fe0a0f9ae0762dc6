//! Output-file contracts and binary-level behavior.

use std::fs;
use std::path::Path;
use std::process::Command;

use omsi_cli::config::ExperimentConfig;
use omsi_cli::output::{mean_std, write_run_outputs};
use omsi_cli::runner::{execute, load_data};

fn small_config(output_dir: &Path) -> ExperimentConfig {
    let text = format!(
        "dataset = synthetic\nsynthetic_classes = 4\nsynthetic_dims = 6\n\
         synthetic_train_per_class = 30\nsynthetic_test_per_class = 8\n\
         strategy = omsi\nalpha = 10\nbatch_size = 5\nbuffer_capacity = 20\n\
         hidden_sizes = 8\ntrace_weights = true\nrepetitions = 3\nseed = 11\n\
         noise_fraction = 0.4\nnoisy_parity = even\nclean_buffer = true\n\
         output_dir = {}\n",
        output_dir.display()
    );
    ExperimentConfig::parse(&text, Path::new(".")).unwrap()
}

fn run_into(dir: &Path) -> ExperimentConfig {
    let cfg = small_config(dir);
    let data = load_data(&cfg).unwrap();
    let records = execute(&cfg, &data).unwrap();
    write_run_outputs(&cfg.output_dir, &cfg.snapshot(), &records, cfg.trace_weights).unwrap();
    cfg
}

#[test]
fn outputs_are_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let files = ["results.csv", "summary.json", "weights.jsonl", "config.txt"];

    run_into(&dir);
    let first: Vec<Vec<u8>> = files
        .iter()
        .map(|f| fs::read(dir.join(f)).unwrap())
        .collect();
    run_into(&dir);
    for (file, before) in files.iter().zip(&first) {
        let after = fs::read(dir.join(file)).unwrap();
        assert_eq!(&after, before, "{file} differs between identical runs");
    }
}

#[test]
fn summary_recomputes_from_csv_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    run_into(&dir);

    let csv = fs::read_to_string(dir.join("results.csv")).unwrap();
    let mut per_run_la: Vec<Vec<f64>> = Vec::new();
    let mut per_run_ra: Vec<Vec<f64>> = Vec::new();
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let run: usize = cols[0].parse().unwrap();
        if per_run_la.len() <= run {
            per_run_la.resize(run + 1, Vec::new());
            per_run_ra.resize(run + 1, Vec::new());
        }
        per_run_la[run].push(cols[2].parse().unwrap());
        per_run_ra[run].push(cols[3].parse().unwrap());
    }
    let avg_las: Vec<f64> = per_run_la
        .iter()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .collect();
    let final_ras: Vec<f64> = per_run_ra.iter().map(|v| *v.last().unwrap()).collect();
    let (la_mean, la_std) = mean_std(&avg_las);
    let (ra_mean, ra_std) = mean_std(&final_ras);

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["la_mean"].as_f64().unwrap(), la_mean);
    assert_eq!(summary["la_std"].as_f64().unwrap(), la_std);
    assert_eq!(summary["ra_mean"].as_f64().unwrap(), ra_mean);
    assert_eq!(summary["ra_std"].as_f64().unwrap(), ra_std);
}

#[test]
fn config_snapshot_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("orig");
    run_into(&dir);

    // Re-running from the emitted snapshot gives identical results.
    let reparsed =
        ExperimentConfig::load(&dir.join("config.txt")).expect("snapshot parses as a config");
    let data = load_data(&reparsed).unwrap();
    let records = execute(&reparsed, &data).unwrap();
    let dir2 = tmp.path().join("resnap");
    write_run_outputs(&dir2, &reparsed.snapshot(), &records, reparsed.trace_weights).unwrap();
    assert_eq!(
        fs::read(dir.join("results.csv")).unwrap(),
        fs::read(dir2.join("results.csv")).unwrap()
    );
}

fn omsi_binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_omsi"))
}

#[test]
fn binary_verify_pass_and_fault_exit_codes() {
    let ok = omsi_binary()
        .args(["verify", "--instances", "5", "--seed", "3"])
        .output()
        .unwrap();
    assert!(ok.status.success(), "verify failed: {ok:?}");
    let stdout = String::from_utf8_lossy(&ok.stdout);
    assert!(stdout.contains("max relative error"));

    let bad = omsi_binary()
        .args(["verify", "--instances", "5", "--seed", "3", "--inject-fault"])
        .output()
        .unwrap();
    assert!(!bad.status.success(), "fault injection must fail");
}

#[test]
fn binary_reports_missing_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("bad.conf");
    fs::write(
        &config,
        "dataset = idx\ntrain_images = missing\ntrain_labels = missing\n\
         test_images = missing\ntest_labels = missing\n",
    )
    .unwrap();
    let out = omsi_binary()
        .args(["run", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("does not exist"), "stderr: {stderr}");
}

#[test]
fn binary_rejects_bad_sweep_axis() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("c.conf");
    fs::write(
        &config,
        "dataset = synthetic\nstrategy = omsi\nalpha = 1\noutput_dir = out\n",
    )
    .unwrap();
    let out = omsi_binary()
        .args(["sweep", "--config"])
        .arg(&config)
        .args(["--axis", "momentum", "--values", "1,2"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("axis"));
}

#[test]
fn binary_runs_sweep_and_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("sweep.conf");
    fs::write(
        &config,
        format!(
            "dataset = synthetic\nsynthetic_classes = 4\nsynthetic_dims = 6\n\
             synthetic_train_per_class = 20\nsynthetic_test_per_class = 5\n\
             strategy = omsi\nalpha = 5\nbatch_size = 5\nbuffer_capacity = 16\n\
             hidden_sizes = 8\nrepetitions = 2\nseed = 4\n\
             noise_fraction = 0.5\nnoisy_parity = even\nclean_buffer = true\n\
             output_dir = {}\n",
            tmp.path().join("sweep-out").display()
        ),
    )
    .unwrap();
    let out = omsi_binary()
        .args(["sweep", "--config"])
        .arg(&config)
        .args(["--axis", "k_inner", "--values", "0,1,2"])
        .env("OMSI_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success(), "{out:?}");
    let csv = fs::read_to_string(tmp.path().join("sweep-out").join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "k_inner,la_mean,la_std,ra_mean,ra_std");
    assert_eq!(lines.len(), 4);
    for value in ["0", "1", "2"] {
        assert!(tmp
            .path()
            .join("sweep-out")
            .join(format!("k_inner-{value}"))
            .join("summary.json")
            .exists());
    }
}
