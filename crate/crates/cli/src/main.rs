//! `evpupil`: event streams to frames, datasets, detections, metrics and trajectories.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use evpupil::event_io::SensorGeometry;

use crate::config::PipelineConfig;

#[derive(Debug, Parser)]
#[command(name = "evpupil", version, about)]
struct Cli {
    /// TOML pipeline configuration. Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice (synthesis, sampling, splits).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Sensor resolution as WxH, e.g. 346x260.
    #[arg(long, global = true)]
    geometry: Option<SensorGeometry>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Accumulate an event file into PNG frames plus a frames.csv sidecar.
    Convert(ConvertArgs),
    /// Build a YOLO dataset from per-subject, per-eye event files.
    Dataset(DatasetArgs),
    /// Produce detections JSON from frames or from an external detector's output.
    Detect(DetectArgs),
    /// Score detections against YOLO label files.
    Eval(EvalArgs),
    /// Turn per-frame detections into a trajectory with speeds and saccade candidates.
    Track(TrackArgs),
    /// Generate a synthetic moving-disc event stream with ground truth.
    Synth(SynthArgs),
    /// Print the effective configuration as TOML.
    ShowConfig,
}

#[derive(Debug, Args)]
struct FramegenFlags {
    /// Accumulation window length in milliseconds.
    #[arg(long)]
    duration_ms: Option<u64>,
    /// A window emits a frame only with more than this many events.
    #[arg(long)]
    threshold: Option<u64>,
    /// Exchange the x and y columns while reading events.
    #[arg(long)]
    swap_xy: bool,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Event file (.csv, or .bin/.raw/.dat for little-endian binary).
    input: PathBuf,
    /// Output directory for frames and frames.csv.
    #[arg(long, short)]
    out: PathBuf,
    /// Ground-truth track CSV; writes YOLO labels to <out>/labels.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[command(flatten)]
    framegen: FramegenFlags,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Event files named <subject>_<left|right>.csv or .bin. A sibling
    /// <subject>_<eye>.truth.csv supplies labels.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long)]
    frames_per_eye: Option<usize>,
    #[command(flatten)]
    framegen: FramegenFlags,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Baseline {
    Centroid,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Built-in detector to run over --frames.
    #[arg(long, value_enum, requires = "frames", conflicts_with = "from_json")]
    baseline: Option<Baseline>,
    /// Directory searched recursively for PNG frames.
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Validate and normalize detections JSON produced elsewhere.
    #[arg(long, required_unless_present = "baseline")]
    from_json: Option<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Detections JSON.
    #[arg(long)]
    detections: PathBuf,
    /// Directory searched recursively for YOLO .txt label files.
    #[arg(long)]
    labels: PathBuf,
    /// Report JSON path.
    #[arg(long, short)]
    out: PathBuf,
    /// PR curve CSV path. Defaults to pr.csv next to the report.
    #[arg(long)]
    pr: Option<PathBuf>,
    #[arg(long)]
    iou: Option<f64>,
    #[arg(long)]
    conf: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    /// Frame directory holding frames.csv.
    #[arg(long, required_unless_present = "sidecar")]
    frames: Option<PathBuf>,
    /// Sidecar CSV, when it is not inside --frames.
    #[arg(long)]
    sidecar: Option<PathBuf>,
    #[arg(long)]
    detections: PathBuf,
    /// Trajectory CSV path.
    #[arg(long, short)]
    out: PathBuf,
    /// Saccade CSV path. Defaults to saccades.csv next to the trajectory.
    #[arg(long)]
    saccades: Option<PathBuf>,
    #[arg(long)]
    max_gap: Option<u64>,
    #[arg(long)]
    px_per_degree: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Event file to write; .bin selects the binary format.
    #[arg(long, short)]
    out: PathBuf,
    /// Ground-truth track CSV to write.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Disc path as JSON, e.g. {"kind":"stationary","center":[173,130]}.
    #[arg(long)]
    path: Option<String>,
    #[arg(long)]
    radius: Option<f64>,
    /// Events per millisecond.
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    duration_ms: Option<u64>,
}

fn effective_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    if let Some(g) = cli.geometry {
        cfg.geometry = g;
    }
    let fg = match &cli.command {
        Command::Convert(a) => Some(&a.framegen),
        Command::Dataset(a) => Some(&a.framegen),
        _ => None,
    };
    if let Some(fg) = fg {
        if let Some(d) = fg.duration_ms {
            cfg.framegen.duration_ms = d;
        }
        if let Some(t) = fg.threshold {
            cfg.framegen.event_threshold = t;
        }
    }
    match &cli.command {
        Command::Dataset(a) => {
            if let Some(n) = a.frames_per_eye {
                cfg.dataset.frames_per_eye = n;
            }
        }
        Command::Eval(a) => {
            if let Some(v) = a.iou {
                cfg.metrics.iou_threshold = v;
            }
            if let Some(v) = a.conf {
                cfg.metrics.confidence_threshold = v;
            }
        }
        Command::Track(a) => {
            if let Some(v) = a.max_gap {
                cfg.track.max_gap_frames = v;
            }
            if a.px_per_degree.is_some() {
                cfg.track.px_per_degree = a.px_per_degree;
            }
        }
        Command::Synth(a) => {
            if let Some(p) = &a.path {
                cfg.synth.path = serde_json::from_str(p).context("parsing --path")?;
            }
            if let Some(v) = a.radius {
                cfg.synth.radius = v;
            }
            if let Some(v) = a.rate {
                cfg.synth.event_rate = v;
            }
            if let Some(v) = a.duration_ms {
                cfg.synth.duration_ms = v;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().context("starting worker pool")?;
    pool.install(|| match &cli.command {
        Command::Convert(a) => commands::convert(a, &cfg),
        Command::Dataset(a) => commands::dataset(a, &cfg),
        Command::Detect(a) => commands::detect(a, &cfg),
        Command::Eval(a) => commands::eval(a, &cfg),
        Command::Track(a) => commands::track(a, &cfg),
        Command::Synth(a) => commands::synth(a, &cfg),
        Command::ShowConfig => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
