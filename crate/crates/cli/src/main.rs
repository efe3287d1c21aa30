//! `plasmid-attr`: train and query lab-of-origin attribution models for
//! engineered plasmid sequences.
//!
//! Exit codes: 0 success, 2 input/validation error, 3 runtime failure.
//! Every command is deterministic given `--seed` and its inputs; reports
//! embed the resolved run configuration and the checkpoint hash.

mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

use plasmid_attr::Error;

#[derive(Parser)]
#[command(
    name = "plasmid-attr",
    about = "Lab-of-origin attribution for engineered plasmid DNA",
    version
)]
struct Cli {
    /// Worker thread cap (overrides the PLMA_THREADS environment variable).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a byte-pair-encoding vocabulary from dataset sequences.
    BpeTrain {
        /// Dataset CSV (or FASTA with --sidecar).
        #[arg(long)]
        data: PathBuf,
        /// Sidecar CSV with labels/metadata when --data is FASTA.
        #[arg(long)]
        sidecar: Option<PathBuf>,
        /// Output model file.
        #[arg(long)]
        out: PathBuf,
        /// Target vocabulary size (unknown token included).
        #[arg(long, default_value_t = 1001)]
        vocab: usize,
        /// Split CSV; when given, only train-assigned sequences feed
        /// training.
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// Group sequences by edit distance and emit a leak-free split.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sidecar: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Grouping threshold: fraction of the shorter length (e.g. 0.1)
        /// or an absolute edit distance (e.g. 25).
        #[arg(long, default_value = "0.1")]
        threshold: String,
        #[arg(long, default_value_t = 0.15)]
        val_frac: f64,
        /// Emit k cross-validation folds instead of one split.
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Labs with fewer records fold into the auxiliary class first.
        #[arg(long, default_value_t = 10)]
        min_lab_count: usize,
    },
    /// Train a model and write a checkpoint plus a metrics log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sidecar: Option<PathBuf>,
        #[arg(long)]
        split: PathBuf,
        /// Validate on this fold (requires a split written with --folds).
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        bpe: PathBuf,
        /// Key-value config file; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra overrides, repeatable: --set key=value.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        head: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Metrics CSV (defaults to <out>.metrics.csv).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Rank labs for query sequences (CSV or FASTA).
    Rank {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        sidecar: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        tta: usize,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Top-1/top-10 accuracy on the test (or validation) split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sidecar: Option<PathBuf>,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        tta: usize,
    },
    /// Exemplar-based few-shot protocol over held-out labs.
    Fewshot {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sidecar: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        holdout: usize,
        /// Exemplars per held-out lab.
        #[arg(long, default_value_t = 1)]
        samples: usize,
        /// Fraction of each lab's records as exemplars (overrides
        /// --samples).
        #[arg(long)]
        sample_frac: Option<f64>,
        #[arg(long, default_value_t = 20)]
        repetitions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        tta: usize,
        /// Exemplar aggregation: max or mean.
        #[arg(long, default_value = "max")]
        aggregate: String,
        /// Also write one-shot rank quantiles here.
        #[arg(long)]
        quantiles_out: Option<PathBuf>,
    },
    /// Point-mutation robustness sweep for one sequence.
    Mutate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sidecar: Option<PathBuf>,
        /// Sequence to perturb (defaults to the first record).
        #[arg(long)]
        sequence_id: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Mutation counts, e.g. 1,2,5,10 (default 1..=10).
        #[arg(long)]
        n_list: Option<String>,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        tta: usize,
    },
    /// Token-importance report for a lab or a single sequence.
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sidecar: Option<PathBuf>,
        /// Aggregate over this lab's records.
        #[arg(long)]
        lab: Option<String>,
        /// Or explain one sequence.
        #[arg(long)]
        sequence_id: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Top-token report size.
        #[arg(long, default_value_t = 30)]
        top: usize,
        /// Top-token CSV (defaults to <out>.top.csv).
        #[arg(long)]
        top_out: Option<PathBuf>,
        /// Also write lab-minus-global importance differences here.
        #[arg(long)]
        diff_out: Option<PathBuf>,
    },
    /// K-means over lab embeddings: elbow table and optional assignments.
    Cluster {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        k_min: usize,
        #[arg(long, default_value_t = 30)]
        k_max: usize,
        /// Also write cluster assignments at this k.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        assignments_out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export lab and sequence embeddings for external projection.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        /// Records to embed alongside the lab table.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        sidecar: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        tta: usize,
    },
}

fn main() {
    let cli = Cli::parse();

    let threads = cli
        .threads
        .or_else(|| {
            std::env::var("PLMA_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(0);
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }

    match commands::run(cli.command) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            let code = if e.is_input_error() { 2 } else { 3 };
            std::process::exit(code);
        }
    }
}

/// Maps file-open failures on user-supplied paths to input errors so they
/// exit with code 2 and name the path.
fn input_context(path: &std::path::Path, e: Error) -> Error {
    match e {
        Error::Io(io) => Error::InvalidInput(format!("{}: {io}", path.display())),
        other => other,
    }
}

pub(crate) use input_context as ctx;
