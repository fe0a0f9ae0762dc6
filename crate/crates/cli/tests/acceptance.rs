//! Acceptance suite: one test per criterion, each printing a PASS line
//! with the measured values once its assertions hold.
//!
//! The experiment-level criteria load the committed config files and run
//! the same code paths as the binary, writing into temp directories.

use std::path::{Path, PathBuf};
use std::time::Instant;

use omsi_cli::config::ExperimentConfig;
use omsi_cli::output::{results_csv, summarize, weights_jsonl, write_run_outputs};
use omsi_cli::runner::{execute, load_data};

use omsi_core::buffer::ReservoirBuffer;
use omsi_core::nn::{LabeledBatch, MlpParams, SampleSource};
use omsi_core::rng::{mix, seeded};
use omsi_core::strategies::{er_step, omsi_step, NullSink, OmsiConfig, StepInfo, StrategyKind};
use omsi_core::streams::{
    batch_iter, inject_label_noise, load_idx, make_synthetic_blobs, split_by_classes, NoiseSpec,
    NoisyParity, StreamSpec,
};
use omsi_core::verify::{verify_gradients, TOLERANCE};

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn load_config(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs_dir().join(name)).expect("config loads")
}

/// Runs a config and returns (mean avg-LA, mean final-RA) in percent.
fn run_to_stats(cfg: &ExperimentConfig) -> (f64, f64) {
    let data = load_data(cfg).expect("dataset loads");
    let records = execute(cfg, &data).expect("run succeeds");
    let summary = summarize(&records);
    (summary.la_mean, summary.ra_mean)
}

#[test]
fn criterion_1_gradient_oracles() {
    let start = Instant::now();
    let outcome = verify_gradients(7, 100, false).expect("verification runs");
    let elapsed = start.elapsed();
    assert!(
        outcome.backward_max_rel < TOLERANCE,
        "backprop max rel err {}",
        outcome.backward_max_rel
    );
    assert!(
        outcome.meta_max_rel < TOLERANCE,
        "meta-gradient max rel err {}",
        outcome.meta_max_rel
    );
    assert!(elapsed.as_secs() < 30, "took {elapsed:?}");
    println!(
        "[criterion 1] PASS gradient oracles: backprop {:.3e}, meta {:.3e}, {} instances in {:?}",
        outcome.backward_max_rel, outcome.meta_max_rel, outcome.instances, elapsed
    );
}

#[test]
fn criterion_2_er_equivalence() {
    // A 200-step stream, driven step by step so the full parameter
    // trajectories can be compared bitwise.
    let dataset = make_synthetic_blobs(4, 250, 8, 6.0, 77);
    let batch_size = 5;
    let cfg = OmsiConfig::new(0.0, 1, 0.01, batch_size);

    let mut er_params = MlpParams::init(&[8, 16, 4], &mut seeded(101)).unwrap();
    let mut omsi_params = er_params.clone();
    let mut er_buffer = ReservoirBuffer::new(40, 102);
    let mut omsi_buffer = ReservoirBuffer::new(40, 102);
    let mut er_rng = seeded(103);
    let mut omsi_rng = seeded(103);
    let mut meta_rng = seeded(mix(103, 9));

    for step in 0..200 {
        let idx: Vec<usize> = (0..batch_size)
            .map(|k| (step * batch_size + k) % dataset.len())
            .collect();
        let batch = LabeledBatch::new(
            dataset.inputs.gather_rows(&idx),
            idx.iter().map(|&i| dataset.labels[i]).collect(),
            SampleSource::Stream,
        );
        er_params = er_step(
            &er_params,
            &batch,
            &mut er_buffer,
            batch_size,
            0.01,
            false,
            &mut er_rng,
        )
        .unwrap();
        omsi_params = omsi_step(
            &omsi_params,
            &batch,
            &mut omsi_buffer,
            &cfg,
            false,
            &mut omsi_rng,
            &mut meta_rng,
            StepInfo {
                global_batch_index: step,
                experience: 0,
            },
            &mut NullSink,
        )
        .unwrap();
        assert_eq!(er_params, omsi_params, "trajectories split at step {step}");
    }

    // k_inner = 0 rows of the inner-step sweep equal the ER rows exactly.
    let base = "dataset = synthetic\nsynthetic_classes = 4\nsynthetic_dims = 8\n\
                synthetic_train_per_class = 40\nsynthetic_test_per_class = 10\n\
                batch_size = 5\nbuffer_capacity = 30\nhidden_sizes = 12\n\
                repetitions = 2\nseed = 42\nmeta_grad_mode = first_order\n";
    let omsi_cfg = ExperimentConfig::parse(
        &format!("{base}strategy = omsi\nalpha = 40\nk_inner = 0\n"),
        Path::new("."),
    )
    .unwrap();
    let er_cfg =
        ExperimentConfig::parse(&format!("{base}strategy = er\n"), Path::new(".")).unwrap();
    let data = load_data(&omsi_cfg).unwrap();
    let omsi_records = execute(&omsi_cfg, &data).unwrap();
    let er_records = execute(&er_cfg, &data).unwrap();
    assert_eq!(results_csv(&omsi_records), results_csv(&er_records));
    for (a, b) in omsi_records.iter().zip(&er_records) {
        assert_eq!(a.per_experience, b.per_experience);
    }
    println!(
        "[criterion 2] PASS er-equivalence: 200-step trajectories bit-identical; k_inner=0 sweep row equals er"
    );
}

#[test]
fn criterion_3_controlled_alpha_gain() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();

    let mut tuned = load_config("controlled-alpha.conf");
    assert_eq!(tuned.alpha, 150.0);
    tuned.trace_weights = false;
    tuned.output_dir = tmp.path().join("a150");
    let mut baseline = tuned.clone();
    baseline.alpha = 0.0;
    baseline.output_dir = tmp.path().join("a0");

    let (la_tuned, ra_tuned) = run_to_stats(&tuned);
    let (la_base, ra_base) = run_to_stats(&baseline);
    let elapsed = start.elapsed();

    assert!(
        la_tuned - la_base >= 5.0,
        "LA gain {:.1} (alpha=150: {la_tuned:.1}, alpha=0: {la_base:.1})",
        la_tuned - la_base
    );
    assert!(
        ra_tuned - ra_base >= 5.0,
        "RA gain {:.1} (alpha=150: {ra_tuned:.1}, alpha=0: {ra_base:.1})",
        ra_tuned - ra_base
    );
    assert!(elapsed.as_secs() < 600, "took {elapsed:?}");
    println!(
        "[criterion 3] PASS controlled alpha: LA {la_base:.1} -> {la_tuned:.1} (+{:.1}), \
         RA {ra_base:.1} -> {ra_tuned:.1} (+{:.1}) in {elapsed:?}",
        la_tuned - la_base,
        ra_tuned - ra_base
    );
}

#[test]
fn criterion_4_noise_fraction_table() {
    let tmp = tempfile::tempdir().unwrap();

    let mut omsi = load_config("noise-table.conf");
    assert_eq!(omsi.noise_fraction, 0.5);
    omsi.output_dir = tmp.path().join("omsi");
    let mut er = omsi.clone();
    er.strategy = StrategyKind::Er;
    er.output_dir = tmp.path().join("er");

    let (la_omsi, ra_omsi) = run_to_stats(&omsi);
    let (la_er, ra_er) = run_to_stats(&er);

    assert!(
        la_omsi - la_er >= 20.0,
        "LA gap {:.1} (omsi {la_omsi:.1} vs er {la_er:.1})",
        la_omsi - la_er
    );
    assert!(
        ra_omsi - ra_er >= 4.0,
        "RA gap {:.1} (omsi {ra_omsi:.1} vs er {ra_er:.1})",
        ra_omsi - ra_er
    );
    println!(
        "[criterion 4] PASS noise-fraction table at 50%: LA omsi {la_omsi:.1} vs er {la_er:.1} \
         (+{:.1}), RA omsi {ra_omsi:.1} vs er {ra_er:.1} (+{:.1})",
        la_omsi - la_er,
        ra_omsi - ra_er
    );
}

#[test]
fn criterion_5_split_benchmark() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();

    let mut omsi = load_config("split-benchmark.conf");
    assert_eq!(omsi.buffer_capacity, 50);
    assert_eq!(omsi.batch_size, 10);
    assert_eq!(omsi.lr, 0.01);
    omsi.output_dir = tmp.path().join("omsi");
    let mut er = omsi.clone();
    er.strategy = StrategyKind::Er;
    er.output_dir = tmp.path().join("er");

    let (la_omsi, ra_omsi) = run_to_stats(&omsi);
    let (la_er, ra_er) = run_to_stats(&er);
    let elapsed = start.elapsed();

    assert!(
        ra_omsi - ra_er >= 5.0,
        "RA gap {:.1} (omsi {ra_omsi:.1} vs er {ra_er:.1})",
        ra_omsi - ra_er
    );
    assert!(
        la_er - la_omsi <= 3.0,
        "LA degradation {:.1} (omsi {la_omsi:.1} vs er {la_er:.1})",
        la_er - la_omsi
    );
    assert!(elapsed.as_secs() < 1200, "took {elapsed:?}");
    println!(
        "[criterion 5] PASS split benchmark: RA omsi {ra_omsi:.1} vs er {ra_er:.1} (+{:.1}), \
         LA omsi {la_omsi:.1} vs er {la_er:.1} ({:+.1}) in {elapsed:?}",
        ra_omsi - ra_er,
        la_omsi - la_er
    );
}

#[test]
fn criterion_6_weight_separation() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = load_config("controlled-weights.conf");
    assert!(cfg.trace_weights);
    assert_eq!(cfg.noise_fraction, 1.0);
    cfg.output_dir = tmp.path().to_path_buf();

    let data = load_data(&cfg).unwrap();
    let records = execute(&cfg, &data).unwrap();
    write_run_outputs(&cfg.output_dir, &cfg.snapshot(), &records, true).unwrap();

    let jsonl = std::fs::read_to_string(cfg.output_dir.join("weights.jsonl")).unwrap();
    let mut noisy_steps = 0usize;
    let mut separated = 0usize;
    for line in jsonl.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let weights: Vec<f64> = v["weights_after"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_f64().unwrap())
            .collect();
        let noisy: Vec<bool> = v["noisy"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_bool().unwrap())
            .collect();
        let source: Vec<String> = v["source"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_str().unwrap().to_string())
            .collect();

        let noisy_stream: Vec<f64> = weights
            .iter()
            .zip(noisy.iter().zip(&source))
            .filter(|(_, (n, s))| **n && s.as_str() == "stream")
            .map(|(w, _)| *w)
            .collect();
        let clean: Vec<f64> = weights
            .iter()
            .zip(&noisy)
            .filter(|(_, n)| !**n)
            .map(|(w, _)| *w)
            .collect();
        if noisy_stream.is_empty() || clean.is_empty() {
            continue;
        }
        noisy_steps += 1;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        if mean(&noisy_stream) < mean(&clean) {
            separated += 1;
        }
    }
    let rate = 100.0 * separated as f64 / noisy_steps as f64;
    assert!(
        rate >= 80.0,
        "separation in {separated}/{noisy_steps} = {rate:.1}% of noisy steps"
    );
    println!(
        "[criterion 6] PASS weight separation: noisy stream weights below clean in \
         {separated}/{noisy_steps} = {rate:.1}% of noisy steps"
    );
}

#[test]
fn criterion_7_reservoir_inclusion_probability() {
    let start = Instant::now();
    let trials = 10_000u64;
    for &(capacity, offered) in &[(2usize, 6usize), (3, 9), (4, 12)] {
        let mut kept = vec![0usize; offered];
        for trial in 0..trials {
            let mut buffer = ReservoirBuffer::new(capacity, mix(4242, trial * 31 + capacity as u64));
            for item in 0..offered {
                let batch = LabeledBatch::new(
                    omsi_core::Matrix::new(1, 1, vec![item as f64]).unwrap(),
                    vec![0],
                    SampleSource::Stream,
                );
                buffer.update(&batch, false);
            }
            for item in buffer.items() {
                kept[item.input[0] as usize] += 1;
            }
        }
        let expected = capacity as f64 / offered as f64;
        let se = (expected * (1.0 - expected) / trials as f64).sqrt();
        for (item, &count) in kept.iter().enumerate() {
            let p = count as f64 / trials as f64;
            assert!(
                (p - expected).abs() <= 3.0 * se,
                "capacity {capacity}, {offered} offered: item {item} kept at {p:.4}, expected \
                 {expected:.4} +/- {:.4}",
                3.0 * se
            );
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 10, "took {elapsed:?}");
    println!(
        "[criterion 7] PASS reservoir inclusion probability capacity/seen within 3 standard \
         errors over {trials} trials in {elapsed:?}"
    );
}

#[test]
fn criterion_8_stream_properties() {
    // Through the real IDX loader, so the whole data path is covered.
    let train = load_idx(
        &data_dir().join("digits-train-images-idx3-ubyte"),
        &data_dir().join("digits-train-labels-idx1-ubyte"),
    )
    .unwrap();
    let test = load_idx(
        &data_dir().join("digits-test-images-idx3-ubyte"),
        &data_dir().join("digits-test-labels-idx1-ubyte"),
    )
    .unwrap();
    assert_eq!(train.class_count, 10);
    assert_eq!(train.feature_dim(), 64);

    let experiences = split_by_classes(&train, &test, 2, 5).unwrap();
    let spec = StreamSpec::new(experiences, 10, 1, 6).unwrap();
    let noise = NoiseSpec::new(0.37, NoisyParity::Even, 7).unwrap();

    let fingerprint = |rows: &mut Vec<(Vec<i64>, usize)>| {
        rows.sort();
    };

    for exp in 0..spec.experiences.len() {
        let train_set = &spec.experiences[exp].train;
        let mut expected: Vec<(Vec<i64>, usize)> = (0..train_set.len())
            .map(|i| {
                (
                    train_set
                        .inputs
                        .row(i)
                        .iter()
                        .map(|v| (v * 1e9) as i64)
                        .collect(),
                    train_set.labels[i],
                )
            })
            .collect();
        fingerprint(&mut expected);

        let mut seen = Vec::new();
        for (global, batch) in batch_iter(&spec, exp).unwrap() {
            let noisy = inject_label_noise(&batch, global, &noise, train.class_count);
            let clean = noisy.clean_labels.as_ref().unwrap();
            // Exactly round(fraction * n) flips on even batches, none on
            // odd; flips never reproduce the clean label.
            let flips = noisy.noisy_flags().iter().filter(|&&f| f).count();
            let expected_flips = if global % 2 == 0 {
                (0.37 * batch.len() as f64).round() as usize
            } else {
                0
            };
            assert_eq!(flips, expected_flips, "batch {global}");
            for (l, c) in noisy.labels.iter().zip(clean) {
                if l != c {
                    assert!(*l < train.class_count);
                }
            }
            for (r, &clean_label) in clean.iter().enumerate() {
                seen.push((
                    batch
                        .inputs
                        .row(r)
                        .iter()
                        .map(|v| (v * 1e9) as i64)
                        .collect(),
                    clean_label,
                ));
            }
        }
        fingerprint(&mut seen);
        assert_eq!(expected, seen, "experience {exp} multiset mismatch");
    }

    // Byte-for-byte determinism of the noisy stream under fixed seeds.
    let collect = || {
        let exps = split_by_classes(&train, &test, 2, 5).unwrap();
        let spec = StreamSpec::new(exps, 10, 1, 6).unwrap();
        let mut all = Vec::new();
        for exp in 0..spec.experiences.len() {
            for (global, batch) in batch_iter(&spec, exp).unwrap() {
                all.push(inject_label_noise(&batch, global, &noise, train.class_count));
            }
        }
        all
    };
    assert_eq!(collect(), collect());
    println!(
        "[criterion 8] PASS stream properties: exactly-once multisets, exact noise counts, \
         no self-flips, deterministic streams"
    );
}

/// Supporting check for the trace format: weights.jsonl lines carry the
/// documented keys in order.
#[test]
fn weights_jsonl_schema() {
    let text = "dataset = synthetic\nsynthetic_classes = 2\nsynthetic_dims = 4\n\
                synthetic_train_per_class = 20\nsynthetic_test_per_class = 5\n\
                strategy = omsi\nalpha = 5\nbatch_size = 4\nbuffer_capacity = 12\n\
                hidden_sizes = 6\ntrace_weights = true\nrepetitions = 1\nseed = 9\n";
    let cfg = ExperimentConfig::parse(text, Path::new(".")).unwrap();
    let data = load_data(&cfg).unwrap();
    let records = execute(&cfg, &data).unwrap();
    let jsonl = weights_jsonl(&records).unwrap();
    let first = jsonl.lines().next().expect("at least one traced step");
    serde_json::from_str::<serde_json::Value>(first).expect("valid json");
    let expected_keys = [
        "step",
        "experience",
        "weights_before",
        "weights_after",
        "noisy",
        "source",
        "meta_loss",
    ];
    let positions: Vec<usize> = expected_keys
        .iter()
        .map(|k| first.find(&format!("\"{k}\":")).unwrap_or_else(|| panic!("missing key {k}")))
        .collect();
    assert!(
        positions.windows(2).all(|w| w[0] < w[1]),
        "keys out of order in {first}"
    );
}
