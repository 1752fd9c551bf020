use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crossdistill::cli::{self, Pipeline};
use crossdistill::config::ExperimentConfig;
use crossdistill::nets::TapDepth;

#[derive(Parser)]
#[command(
    name = "crossdistill",
    about = "Cross-domain multi-teacher distillation on synthetic multi-domain datasets",
    version
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize the experiment's domains as dataset directories.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output root (overrides the config and CROSSDISTILL_OUT).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite existing dataset directories.
        #[arg(long)]
        force: bool,
    },
    /// Train one pipeline stage (or the full pipeline) for all seeds.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        pipeline: Pipeline,
        /// Run a single seed instead of every configured seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Retrain stages even when completion markers exist.
        #[arg(long)]
        force: bool,
    },
    /// Merge run reports and print comparison tables.
    Report {
        /// Run directories containing report.csv.
        run_dirs: Vec<PathBuf>,
        /// Write the aggregate CSV here as well.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export embeddings with labels from a trained checkpoint.
    ExportEmbeddings {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which split of the target domain to export.
        #[arg(long, default_value = "test")]
        split: String,
        /// Tap used for segmentation pixel embeddings.
        #[arg(long, default_value = "bottleneck")]
        tap: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_tap(s: &str) -> crossdistill::Result<TapDepth> {
    Ok(match s {
        "encoder" => TapDepth::Encoder,
        "bottleneck" => TapDepth::Bottleneck,
        "both" => TapDepth::Both,
        other => {
            return Err(crossdistill::Error::validation(
                "tap",
                format!("unknown tap selector {other}"),
            ))
        }
    })
}

fn run() -> crossdistill::Result<()> {
    let args = Args::parse();
    match args.command {
        Command::GenData { config, out, force } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dirs = cli::cmd_gen_data(&cfg, out.as_deref(), force)?;
            for d in dirs {
                println!("{}", d.display());
            }
        }
        Command::Run {
            config,
            pipeline,
            seed,
            out,
            force,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = cli::cmd_run(&cfg, pipeline, seed, out.as_deref(), force)?;
            println!("{}", dir.display());
        }
        Command::Report { run_dirs, out } => {
            let text = cli::cmd_report(&run_dirs, out.as_deref())?;
            print!("{text}");
        }
        Command::ExportEmbeddings {
            config,
            checkpoint,
            split,
            tap,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let tap = parse_tap(&tap)?;
            let n = cli::cmd_export_embeddings(&cfg, &checkpoint, &split, tap, &out)?;
            println!("wrote {n} rows to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
