mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use samsr_core::config::RunConfig;

/// Semantic-mask guided diffusion super-resolution.
#[derive(Debug, Parser)]
#[command(name = "samsr", version, about)]
struct Cli {
    /// Flat `key = value` config file applied over the defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override a config key; repeatable, applied after `--config`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Write the resolved config to FILE before running.
    #[arg(long, global = true, value_name = "FILE")]
    dump_config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Extract binary masks on the diffusion grid of an LR image.
    Segment(commands::SegmentArgs),
    /// Draw the semantically structured noise field for an LR image.
    Noise(commands::NoiseArgs),
    /// Compute the semantic weight map and optionally dump the schedule.
    Weights(commands::WeightsArgs),
    /// Corrupt an HR image to step t of the forward process.
    Forward(commands::ForwardArgs),
    /// Super-resolve an LR image.
    Sample(commands::SampleArgs),
    /// Distill a one-step student from a teacher.
    Train(commands::TrainArgs),
    /// Fit a toy multi-step teacher on a dataset.
    PretrainTeacher(commands::PretrainArgs),
    /// PSNR and SSIM between two images.
    Metrics(commands::MetricsArgs),
    /// Sample and score over a grid of (m_hyper, p, kappa).
    Sweep(commands::SweepArgs),
}

/// Data source shared by the training and sweep commands.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Directory of `<name>_hr.png` / `<name>_lr.png` pairs.
    #[arg(long, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,

    /// Use N generated image pairs instead of a directory.
    #[arg(long, value_name = "N", conflicts_with = "data_dir")]
    pub synthetic: Option<usize>,

    /// HR side length of generated pairs.
    #[arg(long, default_value_t = 8)]
    pub size: usize,

    /// Channels of generated pairs (1 or 3).
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
}

#[derive(Debug)]
enum Kind {
    Usage,
    Io,
    Numeric,
}

impl Kind {
    fn code(&self) -> u8 {
        match self {
            Kind::Usage => 2,
            Kind::Io => 3,
            Kind::Numeric => 4,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::Io => "io",
            Kind::Numeric => "numeric",
        }
    }
}

fn classify(err: &anyhow::Error) -> Kind {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<samsr_core::Error>() {
            return if e.is_io() {
                Kind::Io
            } else if matches!(e, samsr_core::Error::NonFinite(_)) {
                Kind::Numeric
            } else {
                Kind::Usage
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return Kind::Io;
        }
    }
    Kind::Usage
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| samsr_core::Error::Io {
            path: path.clone(),
            source: e,
        })?;
        cfg.apply_text(&text)
            .with_context(|| format!("in config file {}", path.display()))?;
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| samsr_core::Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v)?;
    }
    Ok(cfg)
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("SAMSR_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .map_err(|_| samsr_core::Error::Config(format!("SAMSR_THREADS must be a positive integer, got `{value}`")))?;
    if n == 0 {
        return Err(samsr_core::Error::Config("SAMSR_THREADS must be at least 1".into()).into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let mut cfg = resolve_config(&cli)?;
    let name = match &cli.command {
        Command::Segment(a) => a.apply(&mut cfg),
        Command::Noise(a) => a.apply(&mut cfg),
        Command::Weights(a) => a.apply(&mut cfg),
        Command::Forward(a) => a.apply(&mut cfg),
        Command::Sample(a) => a.apply(&mut cfg),
        Command::Train(a) => a.apply(&mut cfg),
        Command::PretrainTeacher(a) => a.apply(&mut cfg),
        Command::Metrics(_) => "metrics",
        Command::Sweep(a) => a.apply(&mut cfg),
    };
    cfg.validate()?;
    eprintln!("samsr {name}: resolved config");
    for line in cfg.to_text().lines() {
        eprintln!("  {line}");
    }
    if let Some(path) = &cli.dump_config {
        samsr_core::io::atomic_write(path, cfg.to_text().as_bytes())?;
    }
    match &cli.command {
        Command::Segment(a) => commands::segment(a, &cfg),
        Command::Noise(a) => commands::noise(a, &cfg),
        Command::Weights(a) => commands::weights(a, &cfg),
        Command::Forward(a) => commands::forward(a, &cfg),
        Command::Sample(a) => commands::sample_cmd(a, &cfg),
        Command::Train(a) => commands::train(a, &cfg),
        Command::PretrainTeacher(a) => commands::pretrain(a, &cfg),
        Command::Metrics(a) => commands::metrics(a),
        Command::Sweep(a) => commands::sweep(a, &cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = classify(&err);
            let mut msg = String::new();
            for cause in err.chain() {
                let text = cause.to_string();
                if !msg.contains(&text) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&text);
                }
            }
            let msg = msg.replace('\n', " ");
            eprintln!("error[{}]: {msg}", kind.name());
            ExitCode::from(kind.code())
        }
    }
}
