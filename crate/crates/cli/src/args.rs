//! Flag definitions and the `--config` key=value file.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use semlink::channel::{ChannelModel, Snr, DEFAULT_H_FLOOR};
use semlink::harness::{parse_grid, System};
use semlink::training::Profile;

#[derive(Debug, Parser)]
#[command(
    name = "semlink",
    version,
    about = "Learned image transmission over simulated wireless channels, with a 256-QAM baseline",
    args_override_self = true
)]
pub struct Cli {
    /// File of `flag=value` lines used as defaults; command-line flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the codec and write a checkpoint.
    Train(TrainArgs),
    /// Sweep SNR for both systems and write a CSV of SSIM/PSNR.
    Eval(EvalArgs),
    /// Send one image through one system and save the reconstruction.
    Transmit(TransmitArgs),
    /// Render an image at several SNRs for both systems, with a manifest.
    SweepImages(SweepImagesArgs),
    /// Serve the HTTP API (and optionally a static UI directory).
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProfileArg {
    Full,
    Desk,
    Tiny,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Full => Profile::Full,
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Tiny => Profile::Tiny,
        }
    }
}

/// Codec size preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Default,
    Tiny,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid(pub Vec<Snr>);

fn grid_parser(s: &str) -> Result<Grid, String> {
    parse_grid(s).map(Grid)
}

fn snr_parser(s: &str) -> Result<Snr, String> {
    s.parse()
}

fn channel_parser(s: &str) -> Result<ChannelModel, String> {
    s.parse()
}

fn system_parser(s: &str) -> Result<System, String> {
    s.parse()
}

fn positive_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a positive number, got '{s}'")),
    }
}

fn non_negative_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a non-negative number, got '{s}'")),
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// CIFAR-10 binary directory.
    #[arg(long, env = "SEMLINK_DATA", value_name = "DIR")]
    pub data: PathBuf,
    /// Checkpoint path to write.
    #[arg(long, value_name = "CKPT")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ProfileArg::Full)]
    pub profile: ProfileArg,
    #[arg(long, value_enum, default_value_t = ModelArg::Default)]
    pub model: ModelArg,
    #[arg(long, default_value_t = 128, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch: u64,
    #[arg(long, default_value_t = 0.002, value_parser = positive_f64)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fixed reduction order. Every run is single-threaded and already
    /// reproducible; the flag is accepted for explicitness.
    #[arg(long)]
    pub deterministic: bool,
    /// Lower bound on Rayleigh gain magnitude; smaller draws are redrawn.
    #[arg(long, default_value_t = DEFAULT_H_FLOOR, value_parser = non_negative_f64)]
    pub h_floor: f64,
    /// Epochs between periodic checkpoints (0 = phase ends only).
    #[arg(long, default_value_t = 5)]
    pub checkpoint_every: u32,
    /// Use at most this many training images (deterministic subset).
    #[arg(long)]
    pub max_images: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Trained checkpoint (required when the dnn system is evaluated).
    #[arg(long, value_name = "CKPT")]
    pub ckpt: Option<PathBuf>,
    #[arg(long, env = "SEMLINK_DATA", value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, default_value_t = 320, value_parser = clap::value_parser!(u64).range(1..))]
    pub images: u64,
    /// `start:stop:step` in dB, or a comma list that may include `inf`.
    #[arg(long, default_value = "0:40:5", value_parser = grid_parser)]
    pub snr_grid: Grid,
    #[arg(long, value_delimiter = ',', default_value = "awgn,rayleigh", value_parser = channel_parser)]
    pub channels: Vec<ChannelModel>,
    #[arg(long, value_delimiter = ',', default_value = "dnn,qam256", value_parser = system_parser)]
    pub systems: Vec<System>,
    #[arg(long, value_name = "OUT")]
    pub csv: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_H_FLOOR, value_parser = non_negative_f64)]
    pub h_floor: f64,
    /// Accepted for symmetry with `train`; evaluation is always reproducible.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct TransmitArgs {
    /// Input image (PNG).
    #[arg(long = "in", value_name = "IMG")]
    pub input: PathBuf,
    /// SNR in dB, or `inf` for a noiseless link.
    #[arg(long, value_parser = snr_parser, allow_negative_numbers = true)]
    pub snr: Snr,
    #[arg(long, value_parser = channel_parser)]
    pub channel: ChannelModel,
    #[arg(long, value_parser = system_parser)]
    pub system: System,
    #[arg(long, value_name = "CKPT")]
    pub ckpt: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_H_FLOOR, value_parser = non_negative_f64)]
    pub h_floor: f64,
}

#[derive(Debug, Args)]
pub struct SweepImagesArgs {
    #[arg(long, value_name = "CKPT")]
    pub ckpt: Option<PathBuf>,
    #[arg(long = "in", value_name = "IMG")]
    pub input: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value = "0:40:5", value_parser = grid_parser)]
    pub snr_grid: Grid,
    #[arg(long, default_value = "rayleigh", value_parser = channel_parser)]
    pub channel: ChannelModel,
    #[arg(long, value_delimiter = ',', default_value = "dnn,qam256", value_parser = system_parser)]
    pub systems: Vec<System>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1", value_name = "ADDR")]
    pub bind: String,
    /// Directory of static files served at `/`.
    #[arg(long, value_name = "DIR")]
    pub ui: Option<PathBuf>,
}

const SUBCOMMANDS: [&str; 5] = ["train", "eval", "transmit", "sweep-images", "serve"];

/// Flags that take no value; `key=true` enables them, `key=false` omits.
const SWITCHES: [&str; 1] = ["deterministic"];

/// Turns `flag=value` lines into argv tokens. Blank lines and `#` comments
/// are ignored.
pub fn config_tokens(text: &str) -> Result<Vec<OsString>, String> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key=value, got '{line}'", n + 1))?;
        let (key, value) = (key.trim().trim_start_matches("--"), value.trim());
        if key.is_empty() || key == "config" {
            return Err(format!("config line {}: invalid key '{key}'", n + 1));
        }
        if SWITCHES.contains(&key) {
            match value {
                "true" => out.push(format!("--{key}").into()),
                "false" => {}
                _ => return Err(format!("config line {}: {key} must be true or false", n + 1)),
            }
        } else {
            out.push(format!("--{key}={value}").into());
        }
    }
    Ok(out)
}

fn config_path(argv: &[OsString]) -> Option<Result<PathBuf, String>> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            return None;
        }
        if s == "--config" {
            return Some(it.next().map(PathBuf::from).ok_or_else(|| "--config needs a file".to_string()));
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(Ok(PathBuf::from(v)));
        }
    }
    None
}

/// Inserts the config file's flags right after the subcommand so that any
/// flag repeated on the command line overrides it.
pub fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let path = match config_path(&argv) {
        None => return Ok(argv),
        Some(p) => p?,
    };
    let text = std::fs::read_to_string(&path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let tokens = config_tokens(&text)?;
    let Some(pos) = argv.iter().position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref())) else {
        return Ok(argv);
    };
    let mut out = argv[..=pos].to_vec();
    out.extend(tokens);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}
