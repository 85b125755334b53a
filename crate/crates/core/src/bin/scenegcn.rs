//! Thin command-line front end over the library: corpus generation, prior
//! counting, training, evaluation, and report comparison.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scenegcn::cli::{
    run_ablate, run_build_prior, run_evaluate, run_gen_data, run_report, run_train, AblateArgs,
    EvaluateArgs, TrainArgs,
};

#[derive(Parser)]
#[command(
    name = "scenegcn",
    about = "Scene-graph relation classification with dual residual graph convolutions",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic long-tailed scene-graph corpus.
    GenData {
        /// Flat key-value generator config (seed required).
        #[arg(long)]
        config: PathBuf,
        /// Output dataset JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Count the once-per-image predicate co-occurrence matrix.
    BuildPrior {
        #[arg(long)]
        data: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint plus history CSV.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        prior: PathBuf,
        /// Flat key-value training config (seed required).
        #[arg(long)]
        config: PathBuf,
        /// predcls, sgcls, or sggen-sim.
        #[arg(long)]
        task: String,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Resume from an earlier checkpoint (other flags are ignored).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        no_object_branch: bool,
        #[arg(long)]
        no_relation_branch: bool,
        #[arg(long)]
        no_prior: bool,
        /// Contextual coefficient heads.
        #[arg(long, default_value_t = 4)]
        heads: usize,
        /// Compute coefficient inner features from the subject alone.
        #[arg(long)]
        single_node_coefficients: bool,
    },
    /// Evaluate a checkpoint (or the frequency baseline) and write R@K /
    /// mR@K CSVs plus a per-predicate breakdown.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate the frequency baseline counted on this training corpus
        /// instead of a checkpoint.
        #[arg(long)]
        freq_from: Option<PathBuf>,
        #[arg(long)]
        task: String,
        /// Output report CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-predicate recall deltas between two evaluation breakdowns.
    Report {
        /// Exactly two per-predicate CSVs: first the model of interest, then
        /// the comparison.
        #[arg(long, num_args = 2)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate a set of ablation variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test_data: PathBuf,
        #[arg(long)]
        prior: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated variants: full, no-object-branch,
        /// no-relation-branch, no-prior, heads-N.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "full,no-object-branch,no-relation-branch,no-prior"
        )]
        variants: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out } => run_gen_data(&config, &out),
        Command::BuildPrior { data, out } => run_build_prior(&data, &out),
        Command::Train {
            data,
            prior,
            config,
            task,
            out,
            resume,
            no_object_branch,
            no_relation_branch,
            no_prior,
            heads,
            single_node_coefficients,
        } => run_train(&TrainArgs {
            data,
            prior,
            config,
            task,
            out,
            resume,
            no_object_branch,
            no_relation_branch,
            no_prior,
            heads,
            single_node_coefficients,
        }),
        Command::Evaluate {
            data,
            checkpoint,
            freq_from,
            task,
            out,
        } => run_evaluate(&EvaluateArgs {
            data,
            checkpoint,
            freq_from,
            task,
            out,
        }),
        Command::Report { reports, out } => run_report(&reports[0], &reports[1], &out),
        Command::Ablate {
            data,
            test_data,
            prior,
            config,
            task,
            out_dir,
            variants,
        } => run_ablate(&AblateArgs {
            data,
            test_data,
            prior,
            config,
            task,
            out_dir,
            variants,
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
