//! `hemgs`: compress, decompress, train and inspect anchor scenes.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
//! Failures print one line to stderr:
//! `hemgs-error kind=<usage|data|internal> code=<n> message=<text>`.

mod commands;
mod errors;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use errors::Usage;

#[derive(Debug, Parser)]
#[command(name = "hemgs", version, about = "Hybrid lossy-lossless codec for anchor-based Gaussian splatting scenes")]
pub struct Cli {
    /// Report style on standard output.
    #[arg(long, value_enum, global = true, default_value_t = Format::Text)]
    pub format: Format,
    /// Directory holding the default model (`model.hmgsw`) and an optional
    /// extractor override (`agnostic.hmgsw`).
    #[arg(long, global = true, env = "HEMGS_ASSET_DIR")]
    pub assets: Option<PathBuf>,
    /// Print every default and resolved setting, then exit.
    #[arg(long, global = true)]
    pub show_config: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    /// `key=value` lines.
    Kv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode a scene into a stream.
    Compress(CompressArgs),
    /// Decode a stream back into a scene file.
    Decompress(DecompressArgs),
    /// Fit a model to a scene.
    Train(TrainArgs),
    /// Storage breakdown of a stream.
    Inspect(InspectArgs),
    /// Context-selection statistics of a scene.
    Stats(StatsArgs),
    /// Write a synthetic scene.
    Synth(SynthArgs),
    /// Encode and decode speed.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[arg(long = "in", value_name = "SCENE")]
    pub input: PathBuf,
    #[arg(long = "out", value_name = "STREAM")]
    pub output: PathBuf,
    /// Model file; defaults to `model.hmgsw` in the asset directory.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 2e-3)]
    pub lambda: f64,
    /// Reject scenes with two anchors in one voxel instead of keeping the first.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct DecompressArgs {
    #[arg(long = "in", value_name = "STREAM")]
    pub input: PathBuf,
    /// Scene file; `.txt`, `.tsv` and `.table` write the ascii table format.
    #[arg(long = "out", value_name = "SCENE")]
    pub output: PathBuf,
    /// Decode with this model instead of the copy stored in the stream.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HashPreset {
    /// 8 levels, resolution 16 to 512, 2^15 slots.
    Default,
    /// 6 levels, resolution 4 to 32, 2^12 slots.
    Desk,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long = "in", value_name = "SCENE")]
    pub input: PathBuf,
    #[arg(long = "out", value_name = "MODEL")]
    pub output: PathBuf,
    /// Per-iteration loss log as tab-separated values.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Comma-separated rate points.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub hash_lr: Option<f64>,
    #[arg(long)]
    pub mlp_lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use every rate point on every batch instead of cycling.
    #[arg(long)]
    pub average_lambdas: bool,
    #[arg(long, value_enum, default_value_t = HashPreset::Default)]
    pub hash: HashPreset,
    /// Receptive field edge in voxels (odd).
    #[arg(long)]
    pub rf: Option<u32>,
    /// Neighbours kept in a dense field.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub no_agnostic: bool,
    #[arg(long)]
    pub no_context: bool,
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(value_name = "STREAM")]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(value_name = "SCENE")]
    pub input: PathBuf,
    #[arg(long)]
    pub rf: Option<u32>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Pattern {
    Uniform,
    Clustered,
    Planar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Attributes {
    Iid,
    Correlated,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long = "out", value_name = "SCENE")]
    pub output: PathBuf,
    #[arg(long, default_value_t = 5000)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Pattern::Uniform)]
    pub pattern: Pattern,
    #[arg(long, value_enum, default_value_t = Attributes::Correlated)]
    pub attributes: Attributes,
    #[arg(long, default_value_t = hemgs::scene::DEFAULT_FEATURE_DIM)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = hemgs::scene::DEFAULT_OFFSETS_PER_ANCHOR)]
    pub offsets: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Scene to time; a synthetic scene of `--anchors` anchors otherwise.
    #[arg(long = "in", value_name = "SCENE")]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = 50_000)]
    pub anchors: usize,
    /// Model to time; an untrained model otherwise.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 2e-3)]
    pub lambda: f64,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Earlier report (JSON) to compare against.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Write this run's report as JSON.
    #[arg(long)]
    pub save: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            return report(&anyhow::Error::new(Usage(first_line(&e.to_string()))));
        }
    };
    // panics are reported through the one-line diagnostic below
    std::panic::set_hook(Box::new(|_| {}));
    let outcome = std::panic::catch_unwind(|| commands::run(&cli));
    match outcome {
        Ok(Ok(out)) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Ok(Err(e)) => report(&e),
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            report(&anyhow::Error::new(errors::Internal(msg)))
        }
    }
}

fn first_line(s: &str) -> String {
    let line = s.lines().find(|l| !l.trim().is_empty()).unwrap_or("").trim();
    line.strip_prefix("error: ").unwrap_or(line).to_string()
}

fn report(e: &anyhow::Error) -> ExitCode {
    let kind = errors::classify(e);
    let message = format!("{e:#}").replace(['\n', '\r'], " ");
    eprintln!("hemgs-error kind={} code={} message={message}", kind.name(), kind.code());
    ExitCode::from(kind.code())
}
