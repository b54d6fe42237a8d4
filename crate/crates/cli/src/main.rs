use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ecp_core::config::{annotated_defaults, EventSourceConfig, FrameSourceConfig, PipelineConfig};
use ecp_core::event::EventFormat;
use ecp_core::{ErrorKind, QuerySelection};

mod commands;

#[derive(Debug, Parser)]
#[command(name = "ecp", version, about = "Event-assisted visual token pruning")]
struct Cli {
    /// JSON config file (`//` comment lines allowed).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Final visual-token retention, split geometrically over all stages.
    #[arg(long, global = true)]
    final_ratio: Option<f64>,
    /// Print the default config with every field documented, then exit.
    #[arg(long)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Args, Default)]
struct InputArgs {
    /// Event file (`.bin`/`.evt` packed binary, anything else text).
    #[arg(long)]
    events: Option<PathBuf>,
    #[arg(long, value_parser = parse_format)]
    format: Option<EventFormat>,
    #[arg(long)]
    width: Option<u16>,
    #[arg(long)]
    height: Option<u16>,
    /// Directory of PGM frames; events are simulated from it when no event file is given.
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Frame timestamp sidecar (default `<frames>/timestamps.txt`).
    #[arg(long)]
    timestamps: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert a PGM frame sequence into an event stream.
    SimulateEvents {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        timestamps: Option<PathBuf>,
        #[arg(long)]
        c_pos: Option<f64>,
        #[arg(long)]
        c_neg: Option<f64>,
        /// Refractory period, microseconds.
        #[arg(long)]
        t_ref: Option<u64>,
        #[arg(long, value_parser = parse_format, default_value = "packed-binary")]
        format: EventFormat,
    },
    /// Activity profile and keyframe selection.
    Sample {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        delta_t: Option<u64>,
        #[arg(long)]
        n_target: Option<usize>,
    },
    /// Per-token saliency for each keyframe and top-K retention.
    Saliency {
        #[command(flatten)]
        input: InputArgs,
        /// Keyframe manifest from `sample`; selected afresh when omitted.
        #[arg(long)]
        keyframes: Option<PathBuf>,
        /// Retention ratio; defaults to the saliency stage of the resolved schedule.
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Layer-wise pruning of saliency-retained tokens.
    Prune {
        /// Directory holding `saliency_f*.bin` maps.
        #[arg(long)]
        saliency_dir: PathBuf,
        /// Glob of attention map files; synthetic attention when omitted.
        #[arg(long)]
        attention: Option<String>,
        #[arg(long, value_parser = parse_query)]
        query: Option<QuerySelection>,
    },
    /// Peripheral-bias statistics per layer over attention map files.
    AnalyzeBias {
        #[arg(long)]
        attention: String,
        #[arg(long)]
        margin: Option<f64>,
        /// Baseline ratio for the t statistic.
        #[arg(long, default_value_t = 1.0)]
        mu0: f64,
        /// Correlate the per-layer mean ratio with the built-in reference profile.
        #[arg(long)]
        reference: bool,
        #[arg(long, value_parser = parse_query)]
        query: Option<QuerySelection>,
    },
    /// Write synthetic peripheral-biased attention maps.
    SynthAttn {
        /// Number of layers (maps 0..n).
        #[arg(long)]
        layers: Option<u32>,
        /// Frames per map.
        #[arg(long)]
        frames: Option<u32>,
        /// Noise half-width override.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Analytical attention-term cost of a token schedule.
    Flops {
        /// Comma-separated per-layer token counts; the configured cascade when omitted.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<u64>>,
        /// Baseline tokens per layer for `--counts`.
        #[arg(long)]
        full: Option<u64>,
        /// Frames in the cascade; defaults to the keyframe budget.
        #[arg(long)]
        frames: Option<u64>,
    },
    /// Full cascade: events, keyframes, saliency, pruning, cost report.
    Run {
        #[command(flatten)]
        input: InputArgs,
    },
}

fn parse_format(s: &str) -> Result<EventFormat, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown format `{s}` (text-csv | packed-binary)"))
}

fn parse_query(s: &str) -> Result<QuerySelection, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown query selection `{s}` (all_text | last_token)"))
}

impl InputArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(path) = &self.events {
            let prev = cfg.events.take();
            cfg.events = Some(EventSourceConfig {
                format: self.format.unwrap_or_else(|| EventFormat::from_path(path)),
                width: self.width.or(prev.as_ref().and_then(|p| p.width)),
                height: self.height.or(prev.as_ref().and_then(|p| p.height)),
                path: path.clone(),
            });
        } else if let Some(src) = cfg.events.as_mut() {
            src.format = self.format.unwrap_or(src.format);
            src.width = self.width.or(src.width);
            src.height = self.height.or(src.height);
        }
        if let Some(dir) = &self.frames {
            cfg.frames = Some(FrameSourceConfig {
                dir: dir.clone(),
                timestamps: self.timestamps.clone(),
            });
        } else if let (Some(ts), Some(f)) = (&self.timestamps, cfg.frames.as_mut()) {
            f.timestamps = Some(ts.clone());
        }
    }
}

fn load_config(cli: &Cli) -> ecp_core::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(r) = cli.final_ratio {
        cfg.retention.final_ratio = Some(r);
    }
    Ok(cfg)
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::InputData => 3,
        ErrorKind::Invariant => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.print_config {
        print!("{}", annotated_defaults());
        return ExitCode::SUCCESS;
    }
    let Some(command) = &cli.command else {
        eprintln!("error: no subcommand given (see --help)");
        return ExitCode::from(2);
    };
    let result = load_config(&cli).and_then(|cfg| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = cli.threads {
            if n == 0 {
                return Err(ecp_core::Error::Config(
                    "--threads must be at least 1".into(),
                ));
            }
            builder = builder.num_threads(n);
        }
        let pool = builder
            .build()
            .map_err(|e| ecp_core::Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| commands::dispatch(command, cfg))
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
