use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use halobit::dataset::save_dataset;
use halobit::experiment::{
    comm_threads_allowed, compare_runs, run_experiment, CompareFormat, DataSource, ExperimentConfig,
};
use halobit::graph::Strategy;
use halobit::sbm::{generate_sbm, SbmSpec};
use halobit::trainer::{ModelKind, Variant};
use halobit::Error;

#[derive(Parser)]
#[command(name = "halobit", version, about = "Distributed GCN training with low-bit halo exchange")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once and write metrics.csv and summary.json
    Run(RunArgs),
    /// Compare summary.json files (or run directories)
    Compare {
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        csv: bool,
    },
    /// Write a synthetic graph in the dataset directory format
    GenSbm {
        spec: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PartitionArg {
    Contiguous,
    Bfs,
    Hash,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Gcn,
    Sage,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sync,
    Async,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["dataset", "synthetic"]))]
struct RunArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// e.g. sbm:k=4,n=125,p_in=0.15,p_out=0.01,d=32,noise=1
    #[arg(long)]
    synthetic: Option<String>,
    #[arg(long, default_value_t = 4)]
    parts: usize,
    #[arg(long, value_enum, default_value = "contiguous")]
    partition: PartitionArg,
    #[arg(long, value_enum, default_value = "gcn")]
    model: ModelArg,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    /// 1..8, 16, or 32 (no quantization)
    #[arg(long, default_value_t = 1)]
    bits: u8,
    #[arg(long, value_enum, default_value = "sync")]
    mode: ModeArg,
    /// Force a synchronous epoch every K epochs (async only, 0 = never)
    #[arg(long, default_value_t = 0)]
    staleness: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Epochs excluded from the averages in summary.json
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    degree_with_self_loops: bool,
    /// Record real wall time per epoch in metrics.csv
    #[arg(long)]
    wall_clock: bool,
}

impl RunArgs {
    fn into_config(self) -> ExperimentConfig {
        let source = match (self.dataset, self.synthetic) {
            (Some(p), _) => DataSource::Dataset(p),
            (None, Some(s)) => DataSource::Synthetic(s),
            (None, None) => unreachable!("clap requires a source"),
        };
        let threads = std::env::var("HALOBIT_THREADS").ok();
        ExperimentConfig {
            source,
            parts: self.parts,
            strategy: match self.partition {
                PartitionArg::Contiguous => Strategy::Contiguous,
                PartitionArg::Bfs => Strategy::BfsBlocks,
                PartitionArg::Hash => Strategy::Hash,
            },
            model: match self.model {
                ModelArg::Gcn => ModelKind::Gcn,
                ModelArg::Sage => ModelKind::Sage,
            },
            layers: self.layers,
            hidden: self.hidden,
            bits: self.bits,
            variant: match self.mode {
                ModeArg::Sync => Variant::Sync,
                ModeArg::Async => Variant::Async,
            },
            staleness: self.staleness,
            epochs: self.epochs,
            lr: self.lr,
            dropout: self.dropout,
            seed: self.seed,
            warmup: self.warmup,
            degree_with_self_loops: self.degree_with_self_loops,
            wall_clock: self.wall_clock,
            comm_threads: comm_threads_allowed(threads.as_deref(), self.parts),
            out: Some(self.out),
            ..Default::default()
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.into_config();
            let res = run_experiment(&cfg)?;
            let out = cfg.out.as_deref().unwrap();
            match &res.summary.final_epoch {
                Some(f) => println!(
                    "{} epochs, test acc {:.4}, main bytes {}, wrote {}",
                    f.epoch,
                    f.test_acc,
                    res.summary.bytes.main_bytes,
                    out.display()
                ),
                None => println!("0 epochs, wrote {}", out.display()),
            }
        }
        Command::Compare { runs, csv } => {
            let format = if csv { CompareFormat::Csv } else { CompareFormat::Table };
            print!("{}", compare_runs(&runs, format)?);
        }
        Command::GenSbm { spec, seed, out } => {
            let mut s: SbmSpec = spec.parse()?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let g = generate_sbm(&s)?;
            save_dataset(&g, &out)?;
            println!("{} nodes, {} directed edges, wrote {}", g.num_nodes, g.edges.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = if e.is_config() { 2 } else { 3 };
            let report = serde_json::json!({ "error": e.kind(), "message": e.to_string(), "exit_code": code });
            eprintln!("{report}");
            ExitCode::from(code)
        }
    }
}
