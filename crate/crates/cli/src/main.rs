//! `roiscope`: data generation, training, evaluation, ablations, slide scoring
//! and trace rendering.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use roiscope_core::Error as CoreError;

#[derive(Parser, Debug)]
#[command(name = "roiscope", version, about = "Sequential hard-attention tile scoring")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    /// Experiment config (TOML); defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// full, no_ior, no_sc, no_context, random_uniform or random_stain.
    #[arg(long, global = true)]
    pub ablation: Option<String>,
    /// Glimpses per episode.
    #[arg(long, visible_alias = "rois", global = true)]
    pub steps: Option<usize>,
    /// Glimpse side in pixels.
    #[arg(long, global = true)]
    pub roi_size: Option<usize>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// hybrid or strict.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (and optionally slides).
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Number of synthetic slides to write under `<out>/slides`.
        #[arg(long, default_value_t = 0)]
        slides: usize,
        #[arg(long, default_value_t = 4)]
        slide_rows: usize,
        #[arg(long, default_value_t = 4)]
        slide_cols: usize,
    },
    /// Train a model; writes checkpoints, report, log and resolved config.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory; generated in memory from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train ablation arms over several seeds, or sweep one hyperparameter.
    Ablate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated ablation arms.
        #[arg(long, default_value = "full,no_ior,random_uniform")]
        arms: String,
        /// Comma-separated training seeds; default is three seeds from --seed.
        #[arg(long)]
        seeds: Option<String>,
        /// Sweep `steps` or `roi-size` instead of comparing arms.
        #[arg(long)]
        sweep: Option<String>,
        /// Comma-separated sweep values.
        #[arg(long)]
        values: Option<String>,
    },
    /// Score a slide directory with a checkpoint.
    ScoreSlide {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        slide: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Contest settings (TOML); documented defaults otherwise.
        #[arg(long)]
        contest: Option<PathBuf>,
    },
    /// Draw an attention trace over a tile as a 16-bit PPM.
    Visualize {
        #[arg(long)]
        tile: PathBuf,
        /// Output image path.
        #[arg(long)]
        out: PathBuf,
        /// Run the checkpoint's greedy policy on the tile.
        #[arg(long, conflicts_with = "trace")]
        checkpoint: Option<PathBuf>,
        /// Trace file (TOML with `locations = [[x, y], ...]`).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

/// Error raised for bad flag values; maps to exit code 1.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Numerical { .. } | CoreError::NonFinite(_) => 3,
                CoreError::Config(_) | CoreError::InvalidArgument(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let o = &cli.overrides;
    let result = match cli.command {
        Command::GenData { out, slides, slide_rows, slide_cols } => {
            commands::gen_data(o, &out, slides, slide_rows, slide_cols)
        }
        Command::Train { out, data } => commands::train(o, &out, data.as_deref()),
        Command::Eval { checkpoint, data, split, out } => commands::eval(o, &checkpoint, &data, &split, &out),
        Command::Ablate { out, data, arms, seeds, sweep, values } => commands::ablate(
            o,
            &out,
            data.as_deref(),
            &arms,
            seeds.as_deref(),
            sweep.as_deref(),
            values.as_deref(),
        ),
        Command::ScoreSlide { checkpoint, slide, out, contest } => {
            commands::score_slide(o, &checkpoint, &slide, &out, contest.as_deref())
        }
        Command::Visualize { tile, out, checkpoint, trace } => {
            commands::visualize(o, &tile, &out, checkpoint.as_deref(), trace.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
