use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use depthfed::Precision;

mod bench;
mod commands;
mod manifest;

#[derive(Parser, Debug)]
#[command(name = "depthfed", version, about = "Heterogeneous federated learning simulator")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalOpts {
    /// Override the config's root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = every available core). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Element type of written checkpoints.
    #[arg(long, global = true, value_enum, default_value_t = PrecisionArg::F64)]
    pub precision: PrecisionArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a federated experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the manifest, report streams and checkpoints.
        #[arg(long)]
        out: PathBuf,
    },
    /// Split the configured training set across clients and write the partition.
    Partition {
        #[arg(long)]
        config: PathBuf,
        /// Partition JSON to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_clients: Option<usize>,
        /// Dirichlet concentration; omit for the config's setting.
        #[arg(long)]
        alpha: Option<f64>,
        /// Force an IID split.
        #[arg(long, conflicts_with = "alpha")]
        iid: bool,
    },
    /// Train plain FedAvg at every depth, with and without multi-exit heads, and
    /// write first-segment CKA of shallower against full-depth global models per round.
    Cka {
        #[arg(long)]
        config: PathBuf,
        /// CSV file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Size, speed and fit of the hypernetworks across ranks.
    HypernetBench {
        #[arg(long)]
        config: PathBuf,
        /// CSV file to write.
        #[arg(long)]
        out: PathBuf,
        /// Synthetic parameter samples to generate.
        #[arg(long, default_value_t = 16)]
        samples: usize,
        /// Training epochs per rank; defaults to the config's hypernetwork epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Per-exit test accuracy of a saved checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Manifest (`.json`) of the checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn dispatch(cli: Cli) -> Result<()> {
    let g = cli.global;
    match cli.command {
        Command::Run { config, out } => commands::run(&config, &out, &g),
        Command::Partition {
            config,
            out,
            n_clients,
            alpha,
            iid,
        } => commands::partition(&config, &out, n_clients, alpha, iid, &g),
        Command::Cka { config, out } => commands::cka(&config, &out, &g),
        Command::HypernetBench {
            config,
            out,
            samples,
            epochs,
        } => bench::run(&config, &out, samples, epochs, &g),
        Command::Eval { config, checkpoint } => commands::eval(&config, &checkpoint, &g),
    }
}

/// 2 for configuration and argument problems, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<depthfed::Error>() {
        Some(e) if e.is_validation() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
