//! Command-line entry point.
//!
//! Subcommands: `train` (single- or multi-worker), `gradcheck`,
//! `kernel eval`, and `bench-allreduce`. Machine-readable output goes to
//! stdout (JSON lines, CSV, or snapshot bytes); human summaries go to
//! stderr. Exit codes: 0 success, 1 check or run failure, 2 usage error.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "rungrad", version, about = "Define-by-run training engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier and emit per-epoch JSON-lines records.
    Train(TrainArgs),
    /// Finite-difference checks over the whole op catalog.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Kernel DSL tools.
    Kernel {
        #[command(subcommand)]
        command: KernelCommand,
    },
    /// Measure all-reduce and iteration times; prints CSV.
    BenchAllreduce(BenchArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// key=value config file; explicit flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `synthetic` or `idx:<images>,<labels>`.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    batchsize: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// One of sgd, momentum, adam.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write final parameters to this snapshot file.
    #[arg(long)]
    snapshot: Option<String>,
    #[arg(long)]
    n_in: Option<usize>,
    #[arg(long)]
    n_hid: Option<usize>,
    #[arg(long)]
    n_out: Option<usize>,
    /// Number of data-parallel workers.
    #[arg(long)]
    workers: Option<usize>,
    /// inprocess or tcp.
    #[arg(long)]
    transport: Option<String>,
    /// TCP worker rank; omit to spawn all workers as child processes.
    #[arg(long)]
    rank: Option<usize>,
    /// Comma-separated host:port list, one per rank.
    #[arg(long)]
    endpoints: Option<String>,
}

#[derive(Subcommand)]
enum KernelCommand {
    /// Evaluate an elementwise kernel over snapshot inputs and print the
    /// output in snapshot format.
    Eval {
        /// Input signature, e.g. "float32 x, float32 y".
        #[arg(long)]
        sig: String,
        /// Output signature, e.g. "float32 w".
        #[arg(long)]
        out: String,
        /// Body, e.g. "w = x * y + z".
        #[arg(long)]
        expr: String,
        /// Snapshot file whose record paths name the input parameters.
        #[arg(long)]
        inputs: PathBuf,
    },
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Payload sizes in bytes, with k/m suffixes: "1k,1m".
    #[arg(long)]
    sizes: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    transport: Option<String>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    endpoints: Option<String>,
}

fn train_config(args: &TrainArgs) -> anyhow::Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    config.subcommand = "train".into();
    if let Some(v) = &args.dataset {
        config.dataset = v.clone();
    }
    if let Some(v) = args.batchsize {
        config.batchsize = v;
    }
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = &args.optimizer {
        config.optimizer = v.clone();
    }
    if let Some(v) = args.lr {
        config.lr = v;
    }
    if let Some(v) = args.momentum {
        config.momentum = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = &args.snapshot {
        config.snapshot = Some(v.clone());
    }
    if let Some(v) = args.n_in {
        config.n_in = v;
    }
    if let Some(v) = args.n_hid {
        config.n_hid = v;
    }
    if let Some(v) = args.n_out {
        config.n_out = v;
    }
    if let Some(v) = args.workers {
        config.workers = v;
    }
    if let Some(v) = &args.transport {
        config.transport = v.clone();
    }
    if let Some(v) = args.rank {
        config.rank = Some(v);
    }
    if let Some(v) = &args.endpoints {
        config.endpoints = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    }
    Ok(config)
}

fn bench_config(args: &BenchArgs) -> anyhow::Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    config.subcommand = "bench-allreduce".into();
    if let Some(v) = &args.sizes {
        config.sizes = v.clone();
    }
    if let Some(v) = args.workers {
        config.workers = v;
    }
    if let Some(v) = args.iters {
        config.iters = v;
    }
    if let Some(v) = &args.transport {
        config.transport = v.clone();
    }
    if let Some(v) = args.rank {
        config.rank = Some(v);
    }
    if let Some(v) = &args.endpoints {
        config.endpoints = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    }
    Ok(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(args) => train_config(&args).and_then(run::train),
        Command::Gradcheck { seed } => run::gradcheck(seed),
        Command::Kernel {
            command: KernelCommand::Eval { sig, out, expr, inputs },
        } => run::kernel_eval(&sig, &out, &expr, &inputs),
        Command::BenchAllreduce(args) => bench_config(&args).and_then(run::bench_allreduce),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {:#}", err);
            ExitCode::from(1)
        }
    }
}
