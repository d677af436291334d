//! Command-line front end for the `multiorder` pipeline.
//!
//! Subcommands: `synth`, `match`, `sr`, `detect`, `eval` and `fit`. Every
//! command is deterministic given its flags. Exit codes: 0 success, 1 usage
//! (including size mismatches), 2 I/O, 3 numeric failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use multiorder::fusion::config::{DEFAULT_CHANNELS, TINY_MOMA_ITERS};
use multiorder::fusion::{OrderFlags, PipelineConfig};
use multiorder::grid::netpbm::ImageError;
use multiorder::Error as CoreError;
use thiserror::Error;

pub mod commands;
pub mod render;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) => EXIT_IO,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::Image(_) => CliError::Io(msg),
            CoreError::NonFinite(_) | CoreError::EmptyValidSet | CoreError::Divergence { .. } => {
                CliError::Numeric(msg)
            }
            _ => CliError::Usage(msg),
        }
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "multiorder",
    version,
    about = "Alignment-free guided depth super-resolution"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic scene with a known RGB/depth misalignment.
    Synth(SynthArgs),
    /// Match depth features against RGB features and dump the matches.
    Match(MatchArgs),
    /// Super-resolve a low-resolution depth map.
    Sr(SrArgs),
    /// Structure descriptor and gate of an RGB image.
    Detect(DetectArgs),
    /// RMSE and loss terms of a prediction against ground truth.
    Eval(EvalArgs),
    /// Fit the trainable weights on one scene.
    Fit(FitArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

/// Flags shared by every command that runs the pipeline.
#[derive(Clone, Debug, Default, Args)]
pub struct PipelineArgs {
    /// Plain-text `key = value` pipeline configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Upsampling factor (4, 8 or 16).
    #[arg(long)]
    pub scale: Option<usize>,
    /// Matches kept per patch.
    #[arg(long)]
    pub k: Option<usize>,
    /// Aggregation iterations.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Enabled matching orders: any of z, f, s, or `none`.
    #[arg(long)]
    pub orders: Option<String>,
    #[arg(long, value_enum)]
    pub detector: Option<Switch>,
    /// Quarter width and two iterations.
    #[arg(long)]
    pub tiny: bool,
}

impl PipelineArgs {
    /// Config file (or defaults), then flag overrides, then validation.
    pub fn resolve(&self) -> CliResult<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
                PipelineConfig::from_kv_str(&text)?
            }
            None => PipelineConfig::new(self.scale.unwrap_or(4), DEFAULT_CHANNELS),
        };
        if self.tiny {
            let c = (cfg.channels / 4).max(1);
            cfg.reshape(cfg.scale, c);
            cfg.moma_iters = TINY_MOMA_ITERS;
        }
        if let Some(s) = self.scale {
            cfg.reshape(s, cfg.channels);
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(n) = self.iters {
            cfg.moma_iters = n;
        }
        if let Some(o) = &self.orders {
            cfg.orders = OrderFlags::parse(o)?;
        }
        if let Some(d) = self.detector {
            cfg.detector = d == Switch::On;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
    /// High-resolution size; defaults to 16 times the scale.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, default_value = "boxes")]
    pub preset: String,
    /// RGB camera offset in high-resolution pixels.
    #[arg(long, allow_hyphen_values = true)]
    pub dx: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub dy: Option<f64>,
    /// RGB camera rotation in degrees.
    #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
    pub rotation: f64,
    /// Noise level for the extra noisy low-resolution map (0 disables it).
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Low-resolution depth (PFM or 16-bit PGM).
    #[arg(long)]
    pub depth: PathBuf,
    /// High-resolution guidance image (PPM).
    #[arg(
        long,
        required_unless_present = "source_depth",
        conflicts_with = "source_depth"
    )]
    pub rgb: Option<PathBuf>,
    /// Match against a second depth map instead of an image.
    #[arg(long)]
    pub source_depth: Option<PathBuf>,
    /// Matching order: z, f or s.
    #[arg(long, default_value = "z")]
    pub order: char,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
    #[arg(long, default_value_t = DEFAULT_CHANNELS)]
    pub channels: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SrArgs {
    #[arg(long)]
    pub rgb: PathBuf,
    #[arg(long)]
    pub depth: PathBuf,
    /// Ground truth for the error map and report.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub rgb: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub alpha_det: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Detector scales are taken from this config unless overridden.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Scene metadata written by `synth`; for the ridge preset the crest
    /// and background means are reported.
    #[arg(long)]
    pub meta: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub rgb: PathBuf,
    #[arg(long)]
    pub depth: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Directory for the fitted config and the loss log.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Trained groups, comma separated: w_f, w_h, detector.
    #[arg(long, default_value = "w_f,w_h")]
    pub train: String,
    /// Seeds the initial jitter.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub jitter: f64,
    /// Noise added to the input depth before fitting (0 keeps it clean).
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

/// Parses `args` (program name first) and runs the command, writing the
/// human-readable summary to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                write!(out, "{e}")?;
                return Ok(());
            }
            return Err(CliError::Usage(e.to_string()));
        }
    };
    match cli.command {
        Command::Synth(a) => commands::synth(&a, out),
        Command::Match(a) => commands::match_cmd(&a, out),
        Command::Sr(a) => commands::sr(&a, out),
        Command::Detect(a) => commands::detect(&a, out),
        Command::Eval(a) => commands::eval(&a, out),
        Command::Fit(a) => commands::fit(&a, out),
    }
}
