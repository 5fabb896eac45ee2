//! The `gen`, `train`, `eval` and `verify` commands. Each writes its
//! human-readable report to the supplied writer.

use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use mnnh2::io::{
    checkpoint_dtype, load_checkpoint, load_dataset, save_checkpoint, save_dataset, Checkpoint,
};
use mnnh2::model::Network;
use mnnh2::pde::{generate_dataset_with_report, GenerationReport};
use mnnh2::train::{sample_errors, Dataset, EpochRecord, ErrorStats, Trainer};
use mnnh2::verify::{run_suite, Suite, SuiteReport};
use mnnh2::Real;

use crate::config::{Precision, RunConfig};
use crate::CliError;

fn required(path: Option<&PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
    path.cloned()
        .ok_or_else(|| CliError::Usage(format!("missing {flag} (flag or config key)")))
}

fn create(path: &Path) -> Result<File, CliError> {
    File::create(path)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", path.display())))
}

#[derive(Debug, Clone, Default)]
pub struct GenArgs {
    pub out: Option<PathBuf>,
    pub count: Option<usize>,
    pub seed: Option<u64>,
}

/// Samples the configured solution map and writes a float64 dataset.
pub fn cmd_gen(
    cfg: &RunConfig,
    args: &GenArgs,
    log: &mut dyn Write,
) -> Result<GenerationReport, CliError> {
    let out = required(args.out.as_ref().or(cfg.out.as_ref()), "--out")?;
    let count = args.count.unwrap_or(cfg.count);
    let seed = args.seed.unwrap_or(cfg.data_seed);
    let spec = &cfg.problem;
    let (data, report) = generate_dataset_with_report(spec, count, seed)?;
    save_dataset(&out, &data)?;
    writeln!(
        log,
        "{}: {count} samples on {} points, seed {seed} -> {}",
        spec.problem,
        spec.n,
        out.display()
    )?;
    writeln!(
        log,
        "residual max {:.3e}, mean {:.3e} (bound {:.0e}); {} redraws",
        report.max_residual,
        report.mean_residual,
        spec.residual_tolerance(),
        report.redraws
    )?;
    Ok(report)
}

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Writes to a file and echoes to the log.
struct Tee<'a> {
    file: File,
    log: &'a mut dyn Write,
}

impl Write for Tee<'_> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.file.write_all(buf)?;
        self.log.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.file.flush()?;
        self.log.flush()
    }
}

fn check_geometry<T: Real>(
    cfg: &RunConfig,
    data: &Dataset<T>,
    path: &Path,
) -> Result<(), CliError> {
    let arch = &cfg.architecture;
    if data.dim != arch.dim() || data.n != arch.n() {
        return Err(CliError::Usage(format!(
            "geometry mismatch: {} has d={}, N={} but the configuration expects d={}, N={}",
            path.display(),
            data.dim,
            data.n,
            arch.dim(),
            arch.n()
        )));
    }
    Ok(())
}

/// Trains a network, writing the metrics CSV and a resumable checkpoint
/// after every logged epoch.
pub fn cmd_train(
    cfg: &RunConfig,
    args: &TrainArgs,
    log: &mut dyn Write,
) -> Result<TrainOutcome, CliError> {
    match cfg.precision {
        Precision::F32 => train_in::<f32>(cfg, args, log),
        Precision::F64 => train_in::<f64>(cfg, args, log),
    }
}

fn train_in<T: Real>(
    cfg: &RunConfig,
    args: &TrainArgs,
    log: &mut dyn Write,
) -> Result<TrainOutcome, CliError> {
    let data_path = required(args.data.as_ref().or(cfg.data.as_ref()), "--data")?;
    let out = required(args.out.as_ref().or(cfg.out.as_ref()), "--out")?;
    let metrics_path = args
        .metrics
        .clone()
        .or_else(|| cfg.metrics.clone())
        .unwrap_or_else(|| out.with_extension("csv"));
    let resume = args.resume.as_ref().or(cfg.resume.as_ref());

    let (_, data) = load_dataset::<T>(&data_path)?;
    check_geometry(cfg, &data, &data_path)?;
    let test = match args.test_data.as_ref().or(cfg.test_data.as_ref()) {
        Some(p) => {
            let (_, t) = load_dataset::<T>(p)?;
            check_geometry(cfg, &t, p)?;
            Some(t)
        }
        None => None,
    };

    let mut trainer = match resume {
        Some(path) => {
            let ck = load_checkpoint::<T>(path)?;
            if ck.net.architecture() != &cfg.architecture {
                return Err(CliError::Usage(format!(
                    "checkpoint {} was trained with a different architecture",
                    path.display()
                )));
            }
            let optimizer = ck.optimizer.ok_or_else(|| {
                CliError::Usage(format!(
                    "checkpoint {} has no optimizer state",
                    path.display()
                ))
            })?;
            writeln!(
                log,
                "resuming from {} at epoch {}",
                path.display(),
                ck.epoch
            )?;
            Trainer::resume(ck.net, optimizer, ck.epoch)
        }
        None => Trainer::new(
            Network::<T>::random(cfg.architecture.clone(), cfg.init_seed)?,
            cfg.nadam,
        ),
    };
    writeln!(
        log,
        "{} parameters ({} with biases), {} training samples",
        trainer.net.count_params(false),
        trainer.net.count_params(true),
        data.len()
    )?;

    let file = if resume.is_some() && metrics_path.exists() {
        OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(|e| CliError::Usage(format!("cannot open {}: {e}", metrics_path.display())))?
    } else {
        let mut f = create(&metrics_path)?;
        writeln!(f, "{}", EpochRecord::CSV_HEADER)?;
        f
    };
    writeln!(log, "{}", EpochRecord::CSV_HEADER)?;
    let mut metrics = Tee { file, log };
    let every = cfg.train.eval_every.max(1);
    let epochs = cfg.train.epochs;
    let history = trainer.train(&data, test.as_ref(), &cfg.train, Some(&mut metrics), |t| {
        if t.epoch % every == 0 || t.epoch == epochs {
            save_checkpoint(
                &out,
                &Checkpoint {
                    net: t.net.clone(),
                    optimizer: Some(t.optimizer.clone()),
                    epoch: t.epoch,
                },
            )?;
        }
        Ok(())
    })?;
    if history.is_empty() {
        writeln!(
            metrics.log,
            "nothing to do: checkpoint already at epoch {}",
            trainer.epoch
        )?;
    } else {
        writeln!(
            metrics.log,
            "checkpoint {} at epoch {}",
            out.display(),
            trainer.epoch
        )?;
    }
    Ok(TrainOutcome {
        history,
        checkpoint: out,
        metrics: metrics_path,
    })
}

#[derive(Debug, Clone, Default)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    /// CSV of the relative error of every sample.
    pub per_sample: Option<PathBuf>,
    /// CSV of coordinates, reference and prediction for the first
    /// `fields_count` samples.
    pub fields: Option<PathBuf>,
    pub fields_count: usize,
    /// Coordinates per axis; `i / N` when absent.
    pub grid: Option<Vec<f64>>,
}

/// Evaluates a checkpoint on a dataset and returns the error statistics.
pub fn cmd_eval(args: &EvalArgs, log: &mut dyn Write) -> Result<ErrorStats, CliError> {
    match checkpoint_dtype(&args.checkpoint)? {
        4 => eval_in::<f32>(args, log),
        _ => eval_in::<f64>(args, log),
    }
}

fn eval_in<T: Real>(args: &EvalArgs, log: &mut dyn Write) -> Result<ErrorStats, CliError> {
    let ck = load_checkpoint::<T>(&args.checkpoint)?;
    let (_, data) = load_dataset::<T>(&args.data)?;
    let arch = ck.net.architecture();
    if data.dim != arch.dim() || data.n != arch.n() {
        return Err(CliError::Usage(format!(
            "geometry mismatch: dataset has d={}, N={} but the network expects d={}, N={}",
            data.dim,
            data.n,
            arch.dim(),
            arch.n()
        )));
    }
    let errors = sample_errors(&ck.net, &data)?;
    let stats = ErrorStats::from_samples(&errors);
    writeln!(
        log,
        "{} samples: eps {:e}, sigma {:e} (checkpoint epoch {})",
        errors.len(),
        stats.mean,
        stats.std,
        ck.epoch
    )?;
    if let Some(path) = &args.per_sample {
        let mut w = BufWriter::new(create(path)?);
        writeln!(w, "sample,eps")?;
        for (i, e) in errors.iter().enumerate() {
            writeln!(w, "{i},{e:e}")?;
        }
        w.flush()?;
    }
    if let Some(path) = &args.fields {
        let n = data.n;
        let grid = match &args.grid {
            Some(g) if g.len() == n => g.clone(),
            Some(g) => {
                return Err(CliError::Usage(format!(
                    "grid has {} points, dataset has {n}",
                    g.len()
                )));
            }
            None => (0..n).map(|i| i as f64 / n as f64).collect(),
        };
        let mut w = BufWriter::new(create(path)?);
        writeln!(
            w,
            "{}",
            if data.dim == 1 {
                "sample,x,u,u_nn"
            } else {
                "sample,x,y,u,u_nn"
            }
        )?;
        for s in 0..args.fields_count.min(data.len()) {
            let pred = ck.net.forward(&data.inputs[s])?;
            for (p, (u, u_nn)) in data.targets[s].data().iter().zip(pred.data()).enumerate() {
                let (u, u_nn) = (
                    u.to_f64().unwrap_or(f64::NAN),
                    u_nn.to_f64().unwrap_or(f64::NAN),
                );
                if data.dim == 1 {
                    writeln!(w, "{s},{},{u:e},{u_nn:e}", grid[p])?;
                } else {
                    writeln!(w, "{s},{},{},{u:e},{u_nn:e}", grid[p % n], grid[p / n])?;
                }
            }
        }
        w.flush()?;
    }
    Ok(stats)
}

/// Runs one suite, or all of them, and fails if any check fails.
pub fn cmd_verify(suite: Option<Suite>, log: &mut dyn Write) -> Result<Vec<SuiteReport>, CliError> {
    let suites = suite.map_or(Suite::ALL.to_vec(), |s| vec![s]);
    let mut reports = Vec::new();
    for s in suites {
        let report = run_suite(s)?;
        writeln!(log, "{report}")?;
        reports.push(report);
    }
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.suite.to_string())
        .collect();
    if failed.is_empty() {
        Ok(reports)
    } else {
        Err(CliError::Verification(format!(
            "failing suites: {}",
            failed.join(", ")
        )))
    }
}
