//! Command-line front end: extract a target speaker from a multichannel WAV,
//! render synthetic scenes, score estimates and benchmark the EM variants.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numerical
//! failure. `RCSCME_THREADS` sets the worker thread count.

mod bench;
mod config;
mod evaluate;
mod extract;
mod simulate;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{Config, Overrides};

const THREADS_ENV: &str = "RCSCME_THREADS";

#[derive(Parser)]
#[command(name = "rcscme", version, about = "Blind extraction of a directional speaker from diffuse noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// EM variant: conventional or proposed.
    #[arg(long)]
    variant: Option<String>,
    /// Number of EM iterations.
    #[arg(long)]
    iterations: Option<usize>,
    /// Seed for ILRMA initialization and scene synthesis.
    #[arg(long)]
    seed: Option<u64>,
    /// Inverse-gamma shape parameter.
    #[arg(long)]
    alpha: Option<f64>,
    /// Inverse-gamma scale parameter.
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Extract the target speaker from a multichannel WAV.
    Extract {
        input: PathBuf,
        /// Output WAV (32-bit float).
        #[arg(long, short)]
        output: PathBuf,
        /// JSON run report; defaults to the output path with a .json extension.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Per-iteration diagnostics CSV.
        #[arg(long)]
        diagnostics: Option<PathBuf>,
        /// Write the target image at every microphone.
        #[arg(long)]
        full_image: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Render a synthetic scene into mixture.wav, target_ref.wav and noise_ref.wav.
    Simulate {
        /// Output directory.
        #[arg(long, short)]
        output: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score estimates against references. Directories enable batch mode.
    Evaluate {
        estimate: PathBuf,
        reference: PathBuf,
        /// Unprocessed mixture, for SDR improvement.
        #[arg(long)]
        mixture: Option<PathBuf>,
        /// Reference channel to compare against.
        #[arg(long, default_value_t = 0)]
        channel: usize,
        /// CSV output; defaults to stdout.
        #[arg(long, short)]
        output: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare ILRMA and both EM variants over a seed x direction grid.
    Bench {
        /// Number of seeds, overriding the config.
        #[arg(long)]
        seeds: Option<u64>,
        /// Per-iteration SDR improvement CSV.
        #[arg(long, short)]
        output: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = Config::load(common.config.as_deref())?;
    cfg.apply(&Overrides {
        variant: common.variant.clone(),
        iterations: common.iterations,
        seed: common.seed,
        alpha: common.alpha,
        beta: common.beta,
    });
    Ok(cfg)
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value.parse().with_context(|| format!("{THREADS_ENV}={value:?} is not a thread count"))?;
    if n == 0 {
        bail!("{THREADS_ENV} must be positive");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Extract {
            input,
            output,
            report,
            diagnostics,
            full_image,
            common,
        } => {
            let cfg = load_config(&common)?;
            let args = extract::ExtractArgs {
                input,
                output,
                report,
                diagnostics,
                full_image,
            };
            let r = extract::run(&cfg, &args)?;
            eprintln!(
                "{} -> {} (target output {}, {} {} iterations)",
                r.input, r.output, r.target_index, r.variant, r.iterations
            );
        }
        Command::Simulate { output, common } => {
            let cfg = load_config(&common)?;
            for path in simulate::run(&cfg, &output)? {
                println!("{}", path.display());
            }
        }
        Command::Evaluate {
            estimate,
            reference,
            mixture,
            channel,
            output,
            common,
        } => {
            // Only validates the config; scoring has no tunables.
            load_config(&common)?;
            let rows = evaluate::run(&evaluate::EvaluateArgs {
                estimate,
                reference,
                mixture,
                channel,
            })?;
            let csv = evaluate::to_csv(&rows);
            match output {
                Some(path) => std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{csv}"),
            }
        }
        Command::Bench { seeds, output, common } => {
            let mut cfg = load_config(&common)?;
            if let Some(n) = seeds {
                cfg.grid.seeds = n;
            }
            let results = bench::run(&cfg)?;
            if let Some(path) = &output {
                bench::write_curves(path, &results)?;
            }
            print!("{}", bench::table(&results));
        }
    }
    Ok(())
}

/// 3 when a numerical stage failed, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .filter_map(|e| e.downcast_ref::<rcscme::Error>())
        .any(rcscme::Error::is_numerical);
    if numerical {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
