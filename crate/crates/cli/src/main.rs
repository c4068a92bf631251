use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cmgl::ErrorKind;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "cmgl", version, about = "Confidence-guided multi-omics graph learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand that runs the pipeline.
#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; nothing is written outside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for fold-level parallelism.
    #[arg(long)]
    jobs: Option<usize>,
    /// Dataset directory in the TSV layout, overriding the config.
    #[arg(long)]
    dataset_dir: Option<PathBuf>,
    /// Comma-separated neighbour counts, e.g. `7,11,15`.
    #[arg(long, value_delimiter = ',')]
    k_candidates: Option<Vec<usize>>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic fixture described by `[synthetic]` as TSV files.
    Synth(Common),
    /// Cross-validate the full model.
    Train(Common),
    /// Cross-validate one ablation variant, or all of them.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// full, no_uncertainty, no_cross_fusion or no_two_stage.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Sweep the `[grid]` table of the config, or the two default grids.
    Grid(Common),
    /// Report validation Macro-F1 of every k candidate per fold.
    Kselect(Common),
    /// Frozen-inference embeddings for every sample of a dataset.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// k-means and silhouette over exported embeddings.
    Cluster {
        #[command(flatten)]
        common: Common,
        /// Embedding TSV written by `export`.
        #[arg(long)]
        embeddings: PathBuf,
        /// Candidate cluster counts.
        #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
        clusters: Vec<usize>,
    },
    /// Cross-validate with training sets subsampled per fold.
    Subsample {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1.0,0.5,0.3")]
        fractions: Vec<f64>,
    },
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Training => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CMGL_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
