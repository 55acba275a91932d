//! `latmap`: build, update, query and summarize latent feature maps.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::commands::Failure;

#[derive(Debug, Parser)]
#[command(
    name = "latmap",
    version,
    about = "Incremental 3D latent feature maps from posed RGB-D embeddings"
)]
#[command(
    after_help = "Environment:\n  LMAP_THREADS  Maximum worker threads (default: all cores)\n\n\
Exit codes: 0 ok, 2 bad usage, 3 bad input data, 4 check failed"
)]
pub struct Cli {
    /// Seed for every random choice; overrides the seeds in --config
    #[arg(long, global = true, help_heading = "Global options")]
    pub seed: Option<u64>,

    /// JSON configuration file (sections: grid, decoder_hidden, train, online, aggregator, synth)
    #[arg(long, global = true, value_name = "PATH", help_heading = "Global options")]
    pub config: Option<PathBuf>,

    /// Print progress to stderr
    #[arg(short, long, global = true, help_heading = "Global options")]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a map to a dataset's training frames
    Build(BuildArgs),
    /// Jointly pre-train one decoder across several datasets
    Pretrain(PretrainArgs),
    /// Run the online update loop over a stream manifest
    Replay(ReplayArgs),
    /// Decode features at query points
    Query(QueryArgs),
    /// Compute the global map token
    Token(TokenArgs),
    /// Write occupied vertices as a PCA-colored PLY point cloud
    Export(ExportArgs),
    /// Render a synthetic dataset with a ground-truth oracle
    Synth(SynthArgs),
    /// Check analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
}

impl Command {
    /// Files and directories the command reads.
    pub fn inputs(&self) -> Vec<&std::path::Path> {
        let mut v: Vec<&std::path::Path> = match self {
            Command::Build(a) => vec![&a.dataset],
            Command::Pretrain(a) => a.scenes.iter().map(PathBuf::as_path).collect(),
            Command::Replay(a) => vec![&a.map, &a.stream],
            Command::Query(a) => vec![&a.map, &a.points],
            Command::Token(a) => vec![&a.map],
            Command::Export(a) => vec![&a.map],
            Command::Synth(_) | Command::Gradcheck(_) => vec![],
        };
        match self {
            Command::Build(BuildArgs { decoder: Some(p), .. }) => v.push(p),
            Command::Query(QueryArgs { reference: Some(p), .. }) => v.push(p),
            Command::Token(TokenArgs { weights: Some(p), .. }) => v.push(p),
            _ => {}
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TokenFormatArg {
    Binary,
    Text,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Dataset manifest or the directory holding dataset.json
    pub dataset: PathBuf,

    /// Output map file
    #[arg(short, long, value_name = "PATH")]
    pub out: PathBuf,

    /// Start from a pre-trained decoder file instead of random weights
    #[arg(long, value_name = "PATH")]
    pub decoder: Option<PathBuf>,

    /// Keep decoder weights fixed and optimize only the grid
    #[arg(long)]
    pub freeze_decoder: bool,

    /// Optimizer steps (overrides train.max_steps)
    #[arg(long)]
    pub steps: Option<usize>,

    /// Float width stored in the map file
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: PrecisionArg,

    /// Write the per-step loss history as CSV
    #[arg(long, value_name = "PATH")]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Dataset manifests or directories, one per scene
    #[arg(required = true)]
    pub scenes: Vec<PathBuf>,

    /// Output decoder file
    #[arg(short, long, value_name = "PATH")]
    pub out: PathBuf,

    /// Optimizer steps across all scenes (overrides train.max_steps)
    #[arg(long)]
    pub steps: Option<usize>,

    /// Float width stored in the decoder file
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: PrecisionArg,

    /// Write the per-step loss history as CSV
    #[arg(long, value_name = "PATH")]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Offline map to start from
    pub map: PathBuf,

    /// Stream manifest (JSON)
    pub stream: PathBuf,

    /// Output map file
    #[arg(short, long, value_name = "PATH")]
    pub out: PathBuf,

    /// Write the per-step report log as CSV
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,

    /// Environment steps between updates (overrides online.t_update)
    #[arg(long)]
    pub t_update: Option<u64>,

    /// Optimizer steps per update (overrides online.k_update)
    #[arg(long)]
    pub k_update: Option<usize>,

    /// Grid learning rate (overrides online.eta)
    #[arg(long)]
    pub eta: Option<f64>,

    /// Float width stored in the map file (default: same as the input map)
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Map file
    pub map: PathBuf,

    /// Text file with one `x y z` point per line
    pub points: PathBuf,

    /// Text file with one reference embedding per line, aligned with the points
    #[arg(long, value_name = "PATH")]
    pub reference: Option<PathBuf>,

    /// Write JSON results here instead of stdout
    #[arg(short, long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TokenArgs {
    /// Map file
    pub map: PathBuf,

    /// Output token file
    #[arg(short, long, value_name = "PATH")]
    pub out: PathBuf,

    /// Aggregator weights file; seeded random weights when absent
    #[arg(long, value_name = "PATH")]
    pub weights: Option<PathBuf>,

    /// Save the aggregator weights that were used
    #[arg(long, value_name = "PATH")]
    pub save_weights: Option<PathBuf>,

    /// Token file encoding
    #[arg(long, value_enum, default_value = "binary")]
    pub format: TokenFormatArg,

    /// Emit a zero token for a map without occupied vertices instead of failing
    #[arg(long)]
    pub allow_empty: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Map file
    pub map: PathBuf,

    /// Output PLY file
    #[arg(short, long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for the dataset, stream manifest and oracle
    #[arg(short, long, value_name = "DIR")]
    pub out: PathBuf,

    /// Number of cube regions, 1 to 8 (overrides synth.num_regions)
    #[arg(long)]
    pub regions: Option<usize>,

    /// Embedding dimension (overrides synth.embedding_dim)
    #[arg(long)]
    pub dim: Option<usize>,

    /// Training frames (overrides synth.train_frames)
    #[arg(long)]
    pub frames: Option<usize>,

    /// Held-out frames (overrides synth.heldout_frames)
    #[arg(long)]
    pub heldout: Option<usize>,

    /// Embedding noise standard deviation (overrides synth.noise)
    #[arg(long)]
    pub noise: Option<f64>,

    /// Move a region to the free slot from a given frame on
    #[arg(long, value_name = "REGION@FRAME")]
    pub relocate: Option<String>,

    /// Add a moving distractor flagged in each frame's dynamic mask
    #[arg(long)]
    pub dynamic_arm: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Number of randomized cases
    #[arg(long, default_value_t = 100)]
    pub cases: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: kind=usage msg={first}");
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.code())
        }
    }
}

impl Failure {
    fn line(&self) -> String {
        let (kind, msg) = match self {
            Failure::Core(e) => (e.kind(), e.to_string()),
            Failure::Usage(m) => ("usage", m.clone()),
            Failure::Check(m) => ("check_failed", m.clone()),
        };
        format!("error: kind={kind} msg={}", msg.replace(['\n', '\r'], " "))
    }

    fn code(&self) -> u8 {
        match self {
            Failure::Core(e) if e.is_usage() => 2,
            Failure::Usage(_) => 2,
            Failure::Core(_) => 3,
            Failure::Check(_) => 4,
        }
    }
}
