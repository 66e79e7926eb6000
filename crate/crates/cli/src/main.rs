//! `vreid`: command-line entry point for the re-identification toolkit.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "vreid", version, about = "Multi-source vehicle re-identification toolkit")]
#[command(after_help = "Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Merge per-source manifests into one label space
    Merge {
        /// Manifest files; source ids are assigned 1, 2, ... in order
        #[arg(long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic multi-source dataset
    Synth {
        /// Generator config (JSON); defaults apply to missing fields
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config seed
        #[arg(long)]
        seed: Option<u64>,
        /// Hold out this many classes of source 1 as query/gallery identities
        #[arg(long, default_value_t = 0)]
        holdout: usize,
        /// Output directory for manifests and embedding files
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the embedding head (stage 1: merged sources, stage 2: target fine-tuning)
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Manifest files; source ids are assigned 1, 2, ... in order
        #[arg(long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
        /// Embedding files, one per manifest, row-aligned with it
        #[arg(long = "features", required = true)]
        features: Vec<PathBuf>,
        /// Training config (JSON)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the stage seed
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint to start from; required for stage 2
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch CSV log; defaults to `<out>.log.csv`
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Project features through a trained head into an embedding file
    Embed {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Source id written into the metadata sidecar
        #[arg(long, default_value_t = 1)]
        source_id: u32,
        /// Head checkpoint; without it the input features are only normalized
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Keep only records of this split (train, query, gallery)
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank a gallery for every query by cosine similarity
    Rank {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run post-processing steps and write the final ranking
    Post {
        /// Query embeddings; repeat once per model for ensembling
        #[arg(long = "query", required = true)]
        queries: Vec<PathBuf>,
        /// Gallery embeddings; repeat once per model, same order as --query
        #[arg(long = "gallery", required = true)]
        galleries: Vec<PathBuf>,
        /// Comma-separated steps: aggregate, ensemble, qe, camver, temporal, rerank
        #[arg(long, default_value = "aggregate,ensemble,qe,camver,rerank")]
        steps: String,
        /// Pipeline config (JSON); flags below override it
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dbscan_eps: Option<f64>,
        #[arg(long)]
        min_pts: Option<usize>,
        /// Include each query in its own expansion mean
        #[arg(long)]
        qe_inclusive: bool,
        #[arg(long)]
        tau: Option<i64>,
        #[arg(long)]
        k1: Option<usize>,
        #[arg(long)]
        k2: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Predicted camera clusters, JSON lines of {"image_id", "cluster"}
        #[arg(long)]
        cam_clusters: Option<PathBuf>,
        /// Score every step against identity labels in the metadata
        #[arg(long)]
        evaluate: bool,
        #[arg(long)]
        out: PathBuf,
        /// Report with resolved config and per-step statistics (JSON)
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Score a ranking file
    Eval {
        #[arg(long)]
        ranking: PathBuf,
        /// Manifest whose query and gallery splits (in file order) match the ranking
        #[arg(long, conflicts_with_all = ["query_meta", "gallery_meta"])]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        source_id: u32,
        /// Query metadata sidecar
        #[arg(long, requires = "gallery_meta")]
        query_meta: Option<PathBuf>,
        /// Gallery metadata sidecar
        #[arg(long, requires = "query_meta")]
        gallery_meta: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        k: Vec<usize>,
        /// plain or cross-camera
        #[arg(long, default_value = "plain")]
        protocol: String,
        /// Score only the top-N entries of each list
        #[arg(long)]
        truncate: Option<usize>,
        /// Report JSON; printed to stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-query AP table (CSV)
        #[arg(long)]
        per_query: Option<PathBuf>,
    },
    /// Run an experiment grid and write markdown/CSV reports
    Ablate {
        /// Experiment config (JSON); the default synthetic grid when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; overrides `out_dir` in the config
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print toolchain and format versions
    Version,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
