use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mnnh2::verify::Suite;
use mnnh2_cli::commands::{cmd_eval, cmd_gen, cmd_train, cmd_verify, EvalArgs, GenArgs, TrainArgs};
use mnnh2_cli::config::RunConfig;
use mnnh2_cli::CliError;

#[derive(Parser)]
#[command(
    name = "mnnh2",
    version,
    about = "Multiscale H2 neural networks for PDE solution maps"
)]
struct Cli {
    /// Cap on worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset by sampling the configured solution map.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a network and write a checkpoint plus a metrics CSV.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        test_data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Report the relative error of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Configuration whose problem grid labels the field output.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write per-sample errors to this CSV.
        #[arg(long)]
        per_sample: Option<PathBuf>,
        /// Write (x, u, u_nn) columns to this CSV.
        #[arg(long)]
        fields: Option<PathBuf>,
        /// Number of samples written to the field CSV.
        #[arg(long, default_value_t = 1)]
        fields_count: usize,
    },
    /// Run a property suite: linear, grad, params or tree (default: all).
    Verify {
        #[arg(long)]
        suite: Option<Suite>,
    },
    /// Print the default configuration file.
    Config,
}

fn load(config: Option<&PathBuf>) -> Result<RunConfig, CliError> {
    config.map_or_else(|| Ok(RunConfig::default()), |p| RunConfig::load(p))
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot set up {n} threads: {e}")))?;
    }
    let stdout = std::io::stdout();
    let mut log = stdout.lock();
    match cli.command {
        Command::Gen {
            config,
            out,
            count,
            seed,
        } => {
            cmd_gen(
                &load(config.as_ref())?,
                &GenArgs { out, count, seed },
                &mut log,
            )?;
        }
        Command::Train {
            config,
            data,
            test_data,
            out,
            metrics,
            resume,
        } => {
            let args = TrainArgs {
                data,
                test_data,
                out,
                metrics,
                resume,
            };
            cmd_train(&load(config.as_ref())?, &args, &mut log)?;
        }
        Command::Eval {
            checkpoint,
            data,
            config,
            per_sample,
            fields,
            fields_count,
        } => {
            let grid = config
                .as_ref()
                .map(|p| RunConfig::load(p))
                .transpose()?
                .map(|c| c.problem.grid());
            let args = EvalArgs {
                checkpoint,
                data,
                per_sample,
                fields,
                fields_count,
                grid,
            };
            cmd_eval(&args, &mut log)?;
        }
        Command::Verify { suite } => {
            cmd_verify(suite, &mut log)?;
        }
        Command::Config => {
            write!(log, "{}", RunConfig::template())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
