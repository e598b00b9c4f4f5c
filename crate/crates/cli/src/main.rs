use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use spgi_cli::commands::{self, Outputs};
use spgi_cli::config::{parse_frames, Format, FrameSelection, Method, RunConfig};

#[derive(Parser)]
#[command(name = "spgi", version, about = "Single-pixel ghost imaging of periodic scenes: simulate, demultiplex, reconstruct, analyze")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; defaults to `output.directory` of the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Replace all seeds: diffuser and scan = S, photon noise = S+1, jitter = S+2.
    #[arg(long, global = true, value_name = "U64")]
    seed_override: Option<u64>,
    /// Output formats, comma separated (pgm, gfim, csv).
    #[arg(long, global = true, value_delimiter = ',', value_parser = Format::parse)]
    format: Vec<Format>,
}

#[derive(Args)]
struct Inputs {
    /// Reference stack (GFPS); defaults to `<out>/patterns.gfps`.
    #[arg(long)]
    patterns: Option<PathBuf>,
    /// Measurements (GFMS); defaults to `<out>/frames.gfms`, else `<out>/records.gfms`.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the reference stack and the single-pixel records; writes a rerunnable manifest.
    Simulate,
    /// Regroup records into per-frame measurement vectors.
    Demux {
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Reconstruct frames to numbered images with an index and diagnostics.
    Reconstruct {
        #[command(flatten)]
        inputs: Inputs,
        /// Frames: all, a list `3,7,9` or a range `0..500:5`.
        #[arg(long, value_parser = parse_frames)]
        frames: Option<FrameSelection>,
        #[arg(long, value_parser = ["tv", "correlation"])]
        method: Option<String>,
    },
    /// SNR of one frame against the number of realizations used.
    AnalyzeSnr {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_delimiter = ',')]
        counts: Vec<usize>,
    },
    /// Rerun the pipeline at several flux levels and tabulate the SNR.
    DoseSweep {
        #[arg(long, value_delimiter = ',')]
        flux: Vec<f64>,
    },
    /// 10-90% edge width per frame, from reconstructions or the cycle-averaged model.
    EdgeWidth {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_parser = parse_frames)]
        frames: Option<FrameSelection>,
    },
}

fn resolve(inputs: &Inputs, out: &Path) -> (PathBuf, PathBuf) {
    let patterns = inputs.patterns.clone().unwrap_or_else(|| out.join("patterns.gfps"));
    let records = inputs.records.clone().unwrap_or_else(|| {
        let frames = out.join("frames.gfms");
        if frames.exists() {
            frames
        } else {
            out.join("records.gfms")
        }
    });
    (patterns, records)
}

fn run(cli: Cli) -> Result<()> {
    let common = cli.common;
    if let Some(k) = common.threads {
        rayon::ThreadPoolBuilder::new().num_threads(k).build_global().context("configuring worker threads")?;
    }
    let path = common.config.context("--config is required")?;
    let mut cfg = RunConfig::load(&path)?;
    if let Some(s) = common.seed_override {
        cfg.override_seeds(s);
    }
    if !common.format.is_empty() {
        cfg.output.formats = common.format;
    }
    let out = common.out.unwrap_or_else(|| cfg.output.directory.clone());
    let start = Instant::now();
    let outputs: Outputs = match cli.command {
        Command::Simulate => commands::simulate(&cfg)?,
        Command::Demux { records } => commands::demux(&cfg, &records.unwrap_or_else(|| out.join("records.gfms")))?,
        Command::Reconstruct { inputs, frames, method } => {
            commands::with_frames(&mut cfg, frames);
            match method.as_deref() {
                Some("tv") => cfg.recon.method = Method::Tv,
                Some("correlation") => cfg.recon.method = Method::Correlation,
                _ => {}
            }
            let (p, r) = resolve(&inputs, &out);
            commands::reconstruct(&cfg, &p, &r)?
        }
        Command::AnalyzeSnr { inputs, counts } => {
            let counts = if counts.is_empty() { cfg.metrics.counts.clone() } else { counts };
            let (p, r) = resolve(&inputs, &out);
            commands::analyze_snr(&cfg, &p, &r, &counts)?
        }
        Command::DoseSweep { flux } => {
            let flux = if flux.is_empty() { cfg.metrics.flux.clone() } else { flux };
            commands::dose_sweep(&cfg, &flux)?
        }
        Command::EdgeWidth { inputs, frames } => {
            commands::with_frames(&mut cfg, frames);
            let (p, r) = resolve(&inputs, &out);
            commands::edge_width(&cfg, Some((&p, &r)))?
        }
    };
    for p in outputs.write(&out)? {
        println!("{}", p.display());
    }
    eprintln!("done in {:.2?}", start.elapsed());
    Ok(())
}

fn main() -> Result<()> {
    run(Cli::parse())
}
