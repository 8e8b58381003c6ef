mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::error;
use mosaic_core::generator::{CalibrationConfig, GeneratorSpec};
use mosaic_core::losses::CorrespondenceMap;
use mosaic_core::optimizer::Status;

use config::{JobConfig, JobFile, Overrides};

/// Exit status for a run that stopped without an acceptable step.
const EXIT_STALLED: u8 = 2;
/// Exit status for a NaN or infinite loss or gradient.
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "mosaic-engine", version, about = "Texture mosaics by latent-space optimization of a spatial generator")]
struct Cli {
    /// Worker threads [default: all cores]
    #[arg(long, global = true, env = "MOSAIC_ENGINE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a mosaic of a content image and render it
    Mosaic(JobArgs),
    /// Render a gallery of initialization candidates without optimizing
    Explore(JobArgs),
    /// Render a grid that blends the textures of 1 or 4 seeds
    Morph(MorphArgs),
    /// Compute fixed batch-norm statistics for a weight file
    Calibrate(CalibrateArgs),
    /// Print the architecture and verify the checksum of a weight file
    Inspect {
        #[arg(long)]
        weights: PathBuf,
    },
    /// Write randomly initialized generator weights
    NewWeights(NewWeightsArgs),
    /// Write a synthetic RGB test image
    TestCard {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct JobArgs {
    /// Generator weight file
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Content image (8-bit PNG)
    #[arg(long)]
    content: Option<PathBuf>,
    /// Output PNG (mosaic) or directory (explore)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Correspondence map: identity, downK, luma-downK or features:PATH:LAYER [default: identity]
    #[arg(long)]
    map: Option<CorrespondenceMap>,
    /// Texture prior weight [default: 5]
    #[arg(long = "alpha-l")]
    alpha_l: Option<f64>,
    /// Maximum optimizer iterations [default: 80]
    #[arg(long)]
    iters: Option<usize>,
    /// Random-projection initializations to score (gallery size for explore) [default: 20]
    #[arg(long = "init-samples")]
    init_samples: Option<usize>,
    /// Base seed for initialization and sampling [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Tile size in latent positions [default: 32]
    #[arg(long)]
    chunk: Option<usize>,
    /// JSON job file; flags take precedence over its fields
    #[arg(long)]
    config: Option<PathBuf>,
}

impl JobArgs {
    fn resolve(self) -> Result<JobConfig> {
        let file = self.config.as_deref().map(JobFile::read).transpose()?;
        let gallery_flag = self.init_samples;
        let mut job = JobConfig::resolve(
            file,
            Overrides {
                weights: self.weights,
                content: self.content,
                out: self.out,
                map: self.map,
                alpha_l: self.alpha_l,
                iters: self.iters,
                init_samples: self.init_samples,
                seed: self.seed,
                chunk: self.chunk,
            },
        )?;
        if let Some(n) = gallery_flag {
            job.gallery = n;
        }
        Ok(job)
    }
}

#[derive(Args)]
struct MorphArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// One seed, or four corner seeds (top-left, top-right, bottom-left, bottom-right)
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    /// Lattice size as L or LxM
    #[arg(long, default_value = "30")]
    size: String,
    /// Seed of the local noise field
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Tile size in latent positions
    #[arg(long, default_value_t = mosaic_core::tiler::DEFAULT_CHUNK)]
    chunk: usize,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Prior draws used for the statistics
    #[arg(long, default_value_t = 256)]
    samples: usize,
    /// Side of the latent lattice of each draw
    #[arg(long, default_value_t = 16)]
    lattice: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct NewWeightsArgs {
    #[arg(long)]
    out: PathBuf,
    /// Architecture as JSON (fields of the generator spec) [default: the standard depth-5 generator]
    #[arg(long, conflicts_with = "toy")]
    spec: Option<PathBuf>,
    /// Use the small test architecture with this depth
    #[arg(long)]
    toy: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also compute batch-norm statistics with this many prior draws
    #[arg(long)]
    calibrate: Option<usize>,
}

fn parse_size(text: &str) -> Result<(usize, usize)> {
    let parse = |s: &str| s.trim().parse::<usize>().with_context(|| format!("invalid lattice size {text:?}"));
    let (l, m) = match text.split_once(['x', 'X']) {
        Some((a, b)) => (parse(a)?, parse(b)?),
        None => {
            let n = parse(text)?;
            (n, n)
        }
    };
    if l == 0 || m == 0 {
        bail!("lattice size must be positive, got {text:?}");
    }
    Ok((l, m))
}

fn run(cli: Cli) -> Result<Option<Status>> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Mosaic(args) => return Ok(Some(commands::mosaic(&args.resolve()?)?)),
        Command::Explore(args) => commands::explore(&args.resolve()?)?,
        Command::Morph(a) => commands::morph(&a.weights, &a.seeds, parse_size(&a.size)?, a.chunk, a.seed, &a.out)?,
        Command::Calibrate(a) => {
            let cfg = CalibrationConfig {
                n_samples: a.samples,
                lattice: a.lattice,
                seed: a.seed,
                batch_size: a.batch,
            };
            commands::calibrate(&a.weights, &cfg, &a.out)?
        }
        Command::Inspect { weights } => commands::inspect_file(&weights, std::io::stdout().lock())?,
        Command::NewWeights(a) => {
            let spec = match (a.spec, a.toy) {
                (Some(path), _) => {
                    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str::<GeneratorSpec>(&text).with_context(|| format!("parsing {}", path.display()))?
                }
                (None, Some(depth)) => GeneratorSpec::toy(depth),
                (None, None) => GeneratorSpec::default(),
            };
            let cfg = a.calibrate.map(|n| CalibrationConfig {
                n_samples: n,
                seed: a.seed,
                ..CalibrationConfig::default()
            });
            commands::new_weights(spec, a.seed, cfg.as_ref(), &a.out)?
        }
        Command::TestCard {
            out,
            width,
            height,
            seed,
        } => commands::test_card(width, height, seed, &out)?,
    }
    Ok(None)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<mosaic_core::Error>() {
        Some(mosaic_core::Error::Numeric(_)) => EXIT_NUMERIC,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(Some(status)) => match status {
            Status::Converged | Status::MaxIters => ExitCode::SUCCESS,
            Status::Stalled => {
                error!("optimization stalled: no step decreased the loss");
                ExitCode::from(EXIT_STALLED)
            }
            Status::NumericError => ExitCode::from(EXIT_NUMERIC),
        },
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn sizes() {
        assert_eq!(parse_size("30").unwrap(), (30, 30));
        assert_eq!(parse_size("62x46").unwrap(), (62, 46));
        assert!(parse_size("0x3").is_err());
        assert!(parse_size("big").is_err());
    }

    #[test]
    fn numeric_errors_map_to_their_exit_code() {
        let e = anyhow::Error::from(mosaic_core::Error::Numeric("nan".into()));
        assert_eq!(exit_code(&e), EXIT_NUMERIC);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), 1);
    }
}
