//! The pipeline stages behind each subcommand.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use krylov_core::classical::{lanczos_generate_classical, sample_xyz, ClassicalError};
use krylov_core::eval::{compare_methods, EvalReport, EvalSet, Split};
use krylov_core::krylov::{build_tridiagonal, moments_from_tridiagonal, moments_to_lanczos, observables, time_grid, MomentSequence, ObservableSeries};
use krylov_core::lanczos::LanczosError;
use krylov_core::quantum::{sample_tfim, tfim_coefficients, QuantumError, DEFAULT_MAX_SITES};
use krylov_core::seeding::derive_seed;
use krylov_core::trainer::{train_with_observer, EpochRecord, TrainReport};
use krylov_core::transformer::{averaged_attention_map, MaskPolicy};
use krylov_core::{IncrementSequence64, LanczosSequence64};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, Provenance};
use crate::config::{Family, RunConfig};
use crate::dataset::{file_sha256, Dataset, DatasetHeader, DatasetRecord, SystemParams, DATASET_FORMAT, DATASET_VERSION, GENERATOR_VERSION};
use crate::error::{CliError, Result};

const STREAM_TRAIN_RECORDS: u64 = 16;
const STREAM_TEST_RECORDS: u64 = 17;
const STREAM_RESAMPLE: u64 = 18;

pub const CHECKPOINT_FILE: &str = "model.kryf";
pub const TRAIN_REPORT_FILE: &str = "train_report.jsonl";

/// Seed of draw `attempt` for record `index`. Train and test records come
/// from disjoint streams, so one master seed never yields overlapping sets.
pub fn record_seed(master: u64, split: Split, index: u64, attempt: usize) -> u64 {
    let stream = match split {
        Split::Train => STREAM_TRAIN_RECORDS,
        Split::Test => STREAM_TEST_RECORDS,
    };
    let base = derive_seed(master, stream, index);
    match attempt {
        0 => base,
        a => derive_seed(base, STREAM_RESAMPLE, a as u64),
    }
}

/// One instance, or `None` if the recursion broke down before `length`.
fn draw(family: Family, sites: usize, length: usize, seed: u64) -> Result<Option<DatasetRecord>> {
    let (params, b) = match family {
        Family::Tfim => {
            let p = sample_tfim(seed, sites);
            match tfim_coefficients(&p, length) {
                Ok(b) => (SystemParams::Tfim(p), b),
                Err(QuantumError::Lanczos(LanczosError::Breakdown { .. })) => return Ok(None),
                Err(e) => return Err(e.into()),
            }
        }
        Family::Xyz => {
            let p = sample_xyz(seed);
            match lanczos_generate_classical(&p, length) {
                Ok(b) => (SystemParams::Xyz(p), b),
                Err(ClassicalError::Lanczos(LanczosError::Breakdown { .. })) => return Ok(None),
                Err(e) => return Err(e.into()),
            }
        }
    };
    Ok(Some(DatasetRecord {
        family,
        params,
        seed,
        sites: (family == Family::Tfim).then_some(sites),
        length,
        b: b.into_vec(),
    }))
}

/// Generates `cfg.samples` records in parallel. Each record depends only on
/// its index, so the result does not depend on scheduling.
pub fn generate_dataset(cfg: &RunConfig) -> Result<Dataset> {
    if cfg.samples == 0 || cfg.length == 0 {
        return Err(CliError::Usage("samples and length must be positive".into()));
    }
    if cfg.family == Family::Tfim && !(1..=DEFAULT_MAX_SITES).contains(&cfg.sites) {
        return Err(CliError::Usage(format!("sites must be between 1 and {DEFAULT_MAX_SITES}")));
    }
    let drawn: Vec<Result<(DatasetRecord, usize)>> = (0..cfg.samples as u64)
        .into_par_iter()
        .map(|i| {
            for attempt in 0..cfg.max_attempts {
                let seed = record_seed(cfg.seed, cfg.split, i, attempt);
                if let Some(r) = draw(cfg.family, cfg.sites, cfg.length, seed)? {
                    return Ok((r, attempt));
                }
            }
            Err(CliError::GenerationExhausted { index: i, attempts: cfg.max_attempts })
        })
        .collect();
    let mut records = Vec::with_capacity(cfg.samples);
    let mut resampled = 0;
    for d in drawn {
        let (r, retries) = d?;
        resampled += retries;
        records.push(r);
    }
    if resampled > 0 {
        warn!("resampled {resampled} draws after Lanczos breakdown");
    }
    Ok(Dataset {
        header: DatasetHeader {
            format: DATASET_FORMAT.into(),
            format_version: DATASET_VERSION,
            generator_version: GENERATOR_VERSION.into(),
            split: cfg.split,
            family: cfg.family,
            count: records.len(),
            length: cfg.length,
            sites: (cfg.family == Family::Tfim).then_some(cfg.sites),
            master_seed: cfg.seed,
            resampled,
        },
        records,
    })
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<Dataset> {
    let out = cfg.required(&cfg.output, "output")?;
    let ds = generate_dataset(cfg)?;
    ds.write(out)?;
    info!("wrote {} {} records ({}) to {}", ds.records.len(), ds.header.family, ds.header.split, out.display());
    Ok(ds)
}

fn expect_split(ds: &Dataset, path: &Path, split: Split) -> Result<()> {
    if ds.header.split != split {
        return Err(CliError::DataLeak {
            path: path.to_path_buf(),
            found: ds.header.split.to_string(),
            expected: split.to_string(),
        });
    }
    Ok(())
}

fn increments(ds: &Dataset) -> Vec<IncrementSequence64> {
    ds.sequences().iter().map(LanczosSequence64::to_increments).collect()
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ReportLine<'a> {
    Epoch(&'a EpochRecord),
    Summary {
        n_train: usize,
        n_val: usize,
        weight_decay: f64,
        parameter_checksum: &'a str,
    },
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(CliError::io(path))
}

/// Trains on a train-tagged dataset and writes the checkpoint plus the
/// per-epoch report stream into the output directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<(Checkpoint, TrainReport)> {
    let data_path = cfg.required(&cfg.dataset, "dataset")?;
    let out = cfg.required(&cfg.output, "output")?;
    let ds = Dataset::read(data_path)?;
    expect_split(&ds, data_path, Split::Train)?;
    let train_set = increments(&ds);
    let test_set = match &cfg.test_dataset {
        Some(p) => {
            let t = Dataset::read(p)?;
            expect_split(&t, p, Split::Test)?;
            Some(increments(&t))
        }
        None => None,
    };

    create_dir(out)?;
    let report_path = out.join(TRAIN_REPORT_FILE);
    let mut report_file = create(&report_path)?;
    let mut write_error = None;
    let (params, report) = train_with_observer(&train_set, test_set.as_deref(), &cfg.train, &cfg.model, |e| {
        info!("epoch {} train {:.4e} val {:.4e}", e.epoch, e.train_loss, e.val_loss);
        let line = serde_json::to_string(&ReportLine::Epoch(e)).expect("records serialize");
        if let Err(err) = writeln!(report_file, "{line}") {
            write_error.get_or_insert(err);
        }
    })?;
    if let Some(err) = write_error {
        return Err(CliError::Io { path: report_path, source: err });
    }
    let summary = ReportLine::Summary {
        n_train: report.n_train,
        n_val: report.n_val,
        weight_decay: report.weight_decay,
        parameter_checksum: &report.parameter_checksum,
    };
    writeln!(report_file, "{}", serde_json::to_string(&summary).expect("records serialize"))
        .and_then(|_| report_file.flush())
        .map_err(CliError::io(&report_path))?;

    let ckpt = Checkpoint {
        params,
        train: cfg.train.clone(),
        provenance: Provenance {
            dataset_sha256: file_sha256(data_path)?,
            train_sites: ds.header.sites,
            run_config: serde_json::to_value(cfg).expect("run configurations serialize"),
            parameter_checksum: report.parameter_checksum.clone(),
            final_val_loss: report.final_val_loss(),
        },
    };
    ckpt.save(&out.join(CHECKPOINT_FILE))?;
    Ok((ckpt, report))
}

/// Checkpoint and test set shared by `evaluate` and `ablate`.
struct EvalInputs {
    ckpt: Checkpoint,
    ds: Dataset,
    id: String,
    sequences: Vec<LanczosSequence64>,
}

impl EvalInputs {
    fn load(cfg: &RunConfig) -> Result<Self> {
        let ckpt = Checkpoint::load(cfg.required(&cfg.checkpoint, "checkpoint")?)?;
        let path = cfg.required(&cfg.test_dataset, "test-dataset")?;
        let ds = Dataset::read(path)?;
        expect_split(&ds, path, Split::Test)?;
        let id = file_sha256(path)?;
        let sequences = ds.sequences();
        Ok(Self { ckpt, ds, id, sequences })
    }

    fn compare(&self, cfg: &RunConfig, mask: MaskPolicy) -> Result<EvalReport<f64>> {
        let set = EvalSet {
            id: &self.id,
            split: self.ds.header.split,
            system_size: self.ds.header.sites,
            sequences: &self.sequences,
        };
        let form = cfg.fit_form.unwrap_or_else(|| self.ds.header.family.default_fit_form());
        let times = time_grid(cfg.t_max, cfg.time_points);
        Ok(compare_methods(set, &self.ckpt.params, self.ckpt.provenance.train_sites, form, cfg.train.n_in, &times, mask)?)
    }
}

fn write_report(dir: &Path, tag: &str, report: &EvalReport<f64>) -> Result<()> {
    let rmse = dir.join(format!("rmse{tag}.csv"));
    report
        .write_rmse_csv(create(&rmse)?)
        .map_err(CliError::io(&rmse))?;
    let obs = dir.join(format!("observables{tag}.csv"));
    report
        .write_observables_csv(create(&obs)?)
        .map_err(CliError::io(&obs))?;
    let meta = dir.join(format!("metadata{tag}.json"));
    let json = serde_json::to_string_pretty(&serde_json::json!({
        "metadata": report.metadata,
        "fraction_transformer_better": report.fraction_transformer_better(),
        "mean_rmse_transformer": report.transformer_rmse.mean(),
        "mean_rmse_baseline": report.baseline_rmse.mean(),
    }))
    .expect("metadata serializes");
    fs::write(&meta, json + "\n").map_err(CliError::io(&meta))
}

/// Transformer against baseline on a test-tagged dataset. A test set at a
/// different chain length than the training data is labelled zero-shot.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvalReport<f64>> {
    let out = cfg.required(&cfg.output, "output")?;
    let inputs = EvalInputs::load(cfg)?;
    let report = inputs.compare(cfg, cfg.mask)?;
    create_dir(out)?;
    write_report(out, "", &report)?;
    info!(
        "transformer better at {:.0}% of indices{}",
        100.0 * report.fraction_transformer_better(),
        if report.metadata.zero_shot { " (zero-shot)" } else { "" }
    );
    Ok(report)
}

/// File-name form of a mask, e.g. `long_range_3`.
pub fn mask_tag(mask: MaskPolicy) -> String {
    match mask {
        MaskPolicy::Full => "full".into(),
        MaskPolicy::Parity => "parity".into(),
        MaskPolicy::LongRange(k) => format!("long_range_{k}"),
        MaskPolicy::Early(k) => format!("early_{k}"),
    }
}

/// Per-head attention maps averaged over layers and the test set, read with
/// the true increments as context.
pub fn attention_maps(ckpt: &Checkpoint, sequences: &[LanczosSequence64], mask: MaskPolicy) -> Result<Vec<Vec<Vec<f64>>>> {
    let context: Vec<IncrementSequence64> = sequences
        .iter()
        .map(|b| {
            let d = b.to_increments();
            d.prefix(d.len().saturating_sub(1).max(1))
        })
        .collect();
    let maps = averaged_attention_map(&ckpt.params, &context, mask)?;
    Ok(maps
        .iter()
        .map(|m| m.rows().into_iter().map(|r| r.to_vec()).collect())
        .collect())
}

fn write_matrix(path: &Path, m: &[Vec<f64>]) -> Result<()> {
    let mut w = create(path)?;
    (|| -> io::Result<()> {
        for row in m {
            let cells: Vec<String> = row.iter().map(|x| format!("{x:e}")).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        w.flush()
    })()
    .map_err(CliError::io(path))
}

/// Full attention and the three ablation masks: one report per mask, the
/// per-head attention maps, and a summary table `ablation.csv`.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<(MaskPolicy, EvalReport<f64>)>> {
    let out = cfg.required(&cfg.output, "output")?;
    let inputs = EvalInputs::load(cfg)?;
    create_dir(out)?;
    let mut reports = Vec::new();
    for mask in MaskPolicy::ablation_set() {
        let tag = mask_tag(mask);
        let report = inputs.compare(cfg, mask)?;
        write_report(out, &format!("_{tag}"), &report)?;
        for (h, m) in attention_maps(&inputs.ckpt, &inputs.sequences, mask)?.iter().enumerate() {
            write_matrix(&out.join(format!("attention_{tag}_head{h}.csv")), m)?;
        }
        reports.push((mask, report));
    }

    let full = reports[0].1.transformer_rmse.mean();
    let summary = out.join("ablation.csv");
    let mut w = create(&summary)?;
    (|| -> io::Result<()> {
        writeln!(w, "mask,mean_rmse,relative_to_full")?;
        for (mask, r) in &reports {
            let mean = r.transformer_rmse.mean();
            writeln!(w, "{mask},{mean:e},{:e}", mean / full)?;
        }
        w.flush()
    })()
    .map_err(CliError::io(&summary))?;
    Ok(reports)
}

/// Where a single-sequence command takes its coefficients from.
fn single_sequence(cfg: &RunConfig) -> Result<LanczosSequence64> {
    if !cfg.coefficients.is_empty() {
        return Ok(LanczosSequence64::new(cfg.coefficients.clone())?);
    }
    let path = cfg.required(&cfg.dataset, "dataset")?;
    let ds = Dataset::read(path)?;
    let seqs = ds.sequences();
    seqs.get(cfg.index).cloned().ok_or_else(|| {
        CliError::Usage(format!("index {} out of range for {} records", cfg.index, seqs.len()))
    })
}

/// File at `output`, or standard output.
fn sink(cfg: &RunConfig) -> Result<(Box<dyn Write>, PathBuf)> {
    Ok(match &cfg.output {
        Some(p) => (Box::new(create(p)?), p.clone()),
        None => (Box::new(io::stdout().lock()), PathBuf::from("<stdout>")),
    })
}

/// `K(t)` and `C(t)` of one sequence on the configured grid.
pub fn cmd_reconstruct(cfg: &RunConfig) -> Result<ObservableSeries<f64>> {
    let b = single_sequence(cfg)?;
    let series = observables(&build_tridiagonal(&b), &time_grid(cfg.t_max, cfg.time_points));
    let (mut w, path) = sink(cfg)?;
    (|| -> io::Result<()> {
        writeln!(w, "t,complexity,autocorrelation_re,autocorrelation_im")?;
        for ((t, k), c) in series.times.iter().zip(&series.complexity).zip(&series.autocorrelation) {
            writeln!(w, "{t},{k:e},{:e},{:e}", c.re, c.im)?;
        }
        w.flush()
    })()
    .map_err(CliError::io(path))?;
    Ok(series)
}

#[derive(Clone, Debug, PartialEq)]
pub enum MomentsOutput {
    /// `μ_0, μ_2, ..` from given coefficients.
    Moments(Vec<f64>),
    /// `b_1, b_2, ..` from given moments.
    Coefficients(Vec<f64>),
}

/// Coefficients to moments (`μ_0..μ_{2T}`) or moments back to coefficients.
pub fn cmd_moments(cfg: &RunConfig) -> Result<MomentsOutput> {
    let result = match (cfg.coefficients.is_empty(), cfg.moments.is_empty()) {
        (false, true) => {
            let b = LanczosSequence64::new(cfg.coefficients.clone())?;
            MomentsOutput::Moments(moments_from_tridiagonal(&build_tridiagonal(&b), b.len()).values().to_vec())
        }
        (true, false) => {
            let mu = MomentSequence::new(cfg.moments.clone())?;
            MomentsOutput::Coefficients(moments_to_lanczos(&mu)?.into_vec())
        }
        _ => return Err(CliError::Usage("give exactly one of --coefficients or --moments".into())),
    };
    let (mut w, path) = sink(cfg)?;
    (|| -> io::Result<()> {
        match &result {
            MomentsOutput::Moments(mu) => {
                writeln!(w, "k,mu_2k")?;
                for (k, m) in mu.iter().enumerate() {
                    writeln!(w, "{k},{m:e}")?;
                }
            }
            MomentsOutput::Coefficients(b) => {
                writeln!(w, "n,b")?;
                for (n, x) in b.iter().enumerate() {
                    writeln!(w, "{},{x:e}", n + 1)?;
                }
            }
        }
        w.flush()
    })()
    .map_err(CliError::io(path))?;
    Ok(result)
}
