use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use krylov_cli::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use krylov_cli::commands::{attention_maps, cmd_ablate, cmd_evaluate, cmd_generate, cmd_moments, cmd_train, generate_dataset, MomentsOutput, CHECKPOINT_FILE, TRAIN_REPORT_FILE};
use krylov_cli::dataset::Dataset;
use krylov_cli::{CliError, ExitCode, Family, RunConfig};
use krylov_core::eval::Split;
use krylov_core::transformer::{forward, MaskPolicy, ModelConfig};
use krylov_core::LanczosSequence64;
use tempfile::TempDir;

fn small_model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        ..ModelConfig::default()
    }
}

fn base_config(dir: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.family = Family::Tfim;
    c.sites = 4;
    c.length = 12;
    c.model = small_model();
    c.train.epochs = 2;
    c.train.batch_size = 16;
    c.train.n_in = 5;
    c.time_points = 11;
    c.output = Some(dir.join("out"));
    c
}

/// Train and test sets plus a trained checkpoint in a temporary directory.
struct Fixture {
    dir: TempDir,
    cfg: RunConfig,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let mut cfg = base_config(dir.path());
        let train = dir.path().join("train.jsonl");
        let test = dir.path().join("test.jsonl");
        let mut g = cfg.clone();
        g.samples = 100;
        g.output = Some(train.clone());
        cmd_generate(&g).unwrap();
        g.samples = 12;
        g.split = Split::Test;
        g.output = Some(test.clone());
        cmd_generate(&g).unwrap();

        cfg.dataset = Some(train);
        cfg.test_dataset = Some(test);
        cfg.output = Some(dir.path().join("run"));
        cmd_train(&cfg).unwrap();
        cfg.checkpoint = Some(dir.path().join("run").join(CHECKPOINT_FILE));
        Self { dir, cfg }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_krylov"))
}

#[test]
fn xyz_generation_count_contract() {
    let dir = TempDir::new().unwrap();
    let mut c = base_config(dir.path());
    c.family = Family::Xyz;
    c.samples = 10;
    c.length = 100;
    c.output = Some(dir.path().join("xyz.jsonl"));
    cmd_generate(&c).unwrap();
    let ds = Dataset::read(&dir.path().join("xyz.jsonl")).unwrap();
    assert_eq!(ds.records.len(), 10);
    assert!(ds.records.iter().all(|r| r.b.len() == 100 && r.sites.is_none()));
    assert_eq!(ds.header.generator_version, env!("CARGO_PKG_VERSION"));
}

#[test]
fn same_seed_gives_byte_identical_files() {
    let dir = TempDir::new().unwrap();
    let mut c = base_config(dir.path());
    c.sites = 6;
    c.length = 30;
    c.samples = 6;
    let mut bytes = Vec::new();
    for name in ["a.jsonl", "b.jsonl"] {
        c.output = Some(dir.path().join(name));
        cmd_generate(&c).unwrap();
        bytes.push(fs::read(dir.path().join(name)).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
    c.seed = 1;
    c.output = Some(dir.path().join("c.jsonl"));
    cmd_generate(&c).unwrap();
    assert_ne!(bytes[0], fs::read(dir.path().join("c.jsonl")).unwrap());

    let ds = Dataset::read(&dir.path().join("a.jsonl")).unwrap();
    assert_eq!(ds.header.sites, Some(6));
    assert!(ds.records.iter().all(|r| r.sites == Some(6) && r.length == 30));
}

#[test]
fn stored_values_round_trip_exactly() {
    let dir = TempDir::new().unwrap();
    let mut c = base_config(dir.path());
    c.samples = 8;
    let ds = generate_dataset(&c).unwrap();
    let path = dir.path().join("d.jsonl");
    ds.write(&path).unwrap();
    assert_eq!(Dataset::read(&path).unwrap(), ds);
}

#[test]
fn train_and_test_streams_are_disjoint() {
    let dir = TempDir::new().unwrap();
    let mut c = base_config(dir.path());
    c.samples = 20;
    let train = generate_dataset(&c).unwrap();
    c.split = Split::Test;
    let test = generate_dataset(&c).unwrap();
    for r in &test.records {
        assert!(train.records.iter().all(|t| t.seed != r.seed && t.b != r.b));
    }
}

#[test]
fn exhausted_resampling_is_reported() {
    let dir = TempDir::new().unwrap();
    let mut c = base_config(dir.path());
    c.max_attempts = 0;
    let err = generate_dataset(&c).unwrap_err();
    assert!(matches!(err, CliError::GenerationExhausted { index: 0, attempts: 0 }));
    assert_eq!(err.exit_code(), ExitCode::Numerical);
}

#[test]
fn training_report_and_checkpoint() {
    let f = Fixture::new();
    let report = fs::read_to_string(f.path("run").join(TRAIN_REPORT_FILE)).unwrap();
    let lines: Vec<serde_json::Value> = report.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let epochs: Vec<u64> = lines
        .iter()
        .filter(|l| l["type"] == "epoch")
        .map(|l| l["epoch"].as_u64().unwrap())
        .collect();
    assert_eq!(epochs, vec![1, 2]);
    assert!(lines.iter().any(|l| l["type"] == "epoch" && l["test_loss"].is_f64()));
    assert_eq!(lines.last().unwrap()["type"], "summary");

    let ckpt = Checkpoint::load(f.cfg.checkpoint.as_ref().unwrap()).unwrap();
    assert_eq!(ckpt.provenance.train_sites, Some(4));
    assert_eq!(ckpt.provenance.dataset_sha256.len(), 64);
    let stored: RunConfig = serde_json::from_value(ckpt.provenance.run_config.clone()).unwrap();
    assert_eq!(stored.train, f.cfg.train);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let f = Fixture::new();
    let path = f.cfg.checkpoint.clone().unwrap();
    let bytes = fs::read(&path).unwrap();
    let ckpt = Checkpoint::load(&path).unwrap();
    assert_eq!(ckpt.to_bytes(), bytes);

    let again = f.path("again.kryf");
    ckpt.save(&again).unwrap();
    let reloaded = Checkpoint::load(&again).unwrap();
    for (a, b) in ckpt.params.tensors().iter().zip(reloaded.params.tensors()) {
        assert!(a.data.iter().zip(b.data).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", a.name);
    }
    let probe = LanczosSequence64::new((1..=10).map(|n| 1.0 + 0.3 * n as f64).collect()).unwrap().to_increments();
    let (p1, _) = forward(&ckpt.params, &probe, MaskPolicy::Full, false, None).unwrap();
    let (p2, _) = forward(&reloaded.params, &probe, MaskPolicy::Full, false, None).unwrap();
    assert_eq!(p1, p2);
}

#[test]
fn checkpoint_guards() {
    let f = Fixture::new();
    let path = f.cfg.checkpoint.clone().unwrap();
    let mut other = small_model();
    other.d_model = 32;
    assert!(matches!(Checkpoint::load_expecting(&path, &other), Err(CliError::VersionMismatch { .. })));
    assert!(Checkpoint::load_expecting(&path, &small_model()).is_ok());

    let bytes = fs::read(&path).unwrap();
    let mut future = bytes.clone();
    future[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    let p = f.path("future.kryf");
    fs::write(&p, &future).unwrap();
    assert!(matches!(Checkpoint::load(&p), Err(CliError::VersionMismatch { .. })));

    let mut corrupt = bytes.clone();
    *corrupt.last_mut().unwrap() ^= 1;
    fs::write(&p, &corrupt).unwrap();
    assert!(matches!(Checkpoint::load(&p), Err(CliError::ChecksumMismatch { .. })));

    fs::write(&p, b"NOPE").unwrap();
    assert!(matches!(Checkpoint::load(&p), Err(CliError::Format { .. })));
}

#[test]
fn future_dataset_version_fails() {
    let f = Fixture::new();
    let text = fs::read_to_string(f.cfg.test_dataset.as_ref().unwrap()).unwrap();
    let p = f.path("future.jsonl");
    fs::write(&p, text.replacen("\"format_version\":1", "\"format_version\":2", 1)).unwrap();
    assert!(matches!(Dataset::read(&p), Err(CliError::VersionMismatch { .. })));
}

#[test]
fn corrupted_record_is_rejected() {
    let f = Fixture::new();
    let text = fs::read_to_string(f.cfg.test_dataset.as_ref().unwrap()).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut record: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
    record["b"][3] = serde_json::json!(-1.0);
    lines[1] = record.to_string();
    let p = f.path("bad.jsonl");
    fs::write(&p, lines.join("\n")).unwrap();
    match Dataset::read(&p) {
        Err(CliError::Format { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn leakage_guards() {
    let f = Fixture::new();
    let mut c = f.cfg.clone();
    c.dataset = c.test_dataset.clone();
    c.output = Some(f.path("leak"));
    let err = cmd_train(&c).unwrap_err();
    assert!(matches!(err, CliError::DataLeak { .. }));
    assert_eq!(err.exit_code(), ExitCode::Data);

    let mut c = f.cfg.clone();
    c.test_dataset = c.dataset.clone();
    c.output = Some(f.path("leak_eval"));
    assert!(matches!(cmd_evaluate(&c), Err(CliError::DataLeak { .. })));
}

#[test]
fn evaluation_is_deterministic_and_uses_n_in() {
    let f = Fixture::new();
    let mut c = f.cfg.clone();
    c.train.n_in = 6;
    let mut outputs = Vec::new();
    for name in ["e1", "e2"] {
        c.output = Some(f.path(name));
        let report = cmd_evaluate(&c).unwrap();
        assert_eq!(report.metadata.n_in, 6);
        assert_eq!(report.transformer_rmse.indices, (7..=12).collect::<Vec<_>>());
        assert_eq!(report.baseline_rmse.indices, report.transformer_rmse.indices);
        assert!(!report.metadata.zero_shot);
        outputs.push(["rmse.csv", "observables.csv", "metadata.json"].map(|n| fs::read(f.path(name).join(n)).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn cross_size_evaluation_is_labelled_zero_shot() {
    let f = Fixture::new();
    let mut g = f.cfg.clone();
    g.sites = 5;
    g.samples = 6;
    g.split = Split::Test;
    g.output = Some(f.path("l5.jsonl"));
    cmd_generate(&g).unwrap();
    let mut c = f.cfg.clone();
    c.test_dataset = Some(f.path("l5.jsonl"));
    c.output = Some(f.path("zs"));
    let report = cmd_evaluate(&c).unwrap();
    assert!(report.metadata.zero_shot);
    assert_eq!(report.metadata.train_system_size, Some(4));
    assert_eq!(report.metadata.eval_system_size, Some(5));
}

#[test]
fn ablation_outputs() {
    let f = Fixture::new();
    let mut c = f.cfg.clone();
    c.output = Some(f.path("ab"));
    let reports = cmd_ablate(&c).unwrap();
    let masks: Vec<_> = reports.iter().map(|(m, _)| *m).collect();
    assert_eq!(masks, vec![MaskPolicy::Full, MaskPolicy::Parity, MaskPolicy::LongRange(3), MaskPolicy::Early(3)]);
    for tag in ["full", "parity", "long_range_3", "early_3"] {
        for h in 0..2 {
            let text = fs::read_to_string(f.path("ab").join(format!("attention_{tag}_head{h}.csv"))).unwrap();
            for (i, row) in text.lines().enumerate() {
                for (j, v) in row.split(',').enumerate() {
                    let v: f64 = v.parse().unwrap();
                    if j > i {
                        assert_eq!(v, 0.0, "{tag} head {h} ({i},{j})");
                    }
                }
            }
        }
    }
    assert_eq!(fs::read_to_string(f.path("ab").join("ablation.csv")).unwrap().lines().count(), 5);

    c.mask = MaskPolicy::LongRange(12);
    c.output = Some(f.path("lr"));
    let wide = cmd_evaluate(&c).unwrap();
    assert_eq!(wide.transformer_rmse, reports[0].1.transformer_rmse);
    assert_eq!(wide.transformer_observables, reports[0].1.transformer_observables);

    let ckpt = Checkpoint::load(c.checkpoint.as_ref().unwrap()).unwrap();
    let seqs = Dataset::read(c.test_dataset.as_ref().unwrap()).unwrap().sequences();
    assert_eq!(attention_maps(&ckpt, &seqs, MaskPolicy::LongRange(12)).unwrap(), attention_maps(&ckpt, &seqs, MaskPolicy::Full).unwrap());
}

#[test]
fn moments_utility_round_trips() {
    let dir = TempDir::new().unwrap();
    let mut c = base_config(dir.path());
    c.output = Some(dir.path().join("mu.csv"));
    c.coefficients = vec![0.8, 1.3, 1.1, 1.9];
    let MomentsOutput::Moments(mu) = cmd_moments(&c).unwrap() else { panic!("expected moments") };
    c.coefficients.clear();
    c.moments = mu;
    let MomentsOutput::Coefficients(b) = cmd_moments(&c).unwrap() else { panic!("expected coefficients") };
    for (x, y) in b.iter().zip([0.8, 1.3, 1.1, 1.9]) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let status = |args: &[&str]| bin().args(args).current_dir(dir.path()).output().unwrap().status.code().unwrap();
    assert_eq!(status(&["--help"]), 0);
    assert_eq!(status(&["frobnicate"]), 1);
    assert_eq!(status(&["generate", "--samples", "many"]), 1);
    assert_eq!(status(&["generate", "--samples", "2"]), 1, "missing --output");
    assert_eq!(status(&["train", "--dataset", "missing.jsonl", "--output", "o"]), 2);
    assert_eq!(status(&["moments", "--moments", "1,1,0.5"]), 3);
    assert_eq!(status(&["generate", "--sites", "40", "--samples", "1", "--output", "big.jsonl"]), 1);
    assert_eq!(status(&["generate", "--sites", "3", "--length", "8", "--samples", "3", "--max-attempts", "0", "--output", "x.jsonl"]), 3);
    assert_eq!(status(&["generate", "--sites", "3", "--length", "8", "--samples", "3", "--output", "x.jsonl"]), 0);
    assert_eq!(status(&["reconstruct", "--dataset", "x.jsonl", "--index", "2", "--output", "kc.csv"]), 0);
    let kc = fs::read_to_string(dir.path().join("kc.csv")).unwrap();
    assert_eq!(kc.lines().count(), 1 + RunConfig::default().time_points);
}

#[test]
fn config_file_with_flag_override() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"family": "tfim", "sites": 3, "length": 9, "samples": 4, "train": {"n_in": 4}}"#).unwrap();
    let out = bin()
        .args(["generate", "--config", cfg.to_str().unwrap(), "--samples", "2", "--print-config"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let resolved: RunConfig = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!((resolved.sites, resolved.length, resolved.samples, resolved.train.n_in), (3, 9, 2, 4));
    assert_eq!(resolved.train.epochs, 300);

    fs::write(&cfg, r#"{"famly": "tfim"}"#).unwrap();
    let out = bin().args(["generate", "--config", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
