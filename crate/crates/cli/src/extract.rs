use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use rcscme::pipeline::run_pipeline;
use rcscme::rcscme::{IterationDiagnostics, PriorConfig};
use rcscme::wav::{read_wav, write_wav, Audio, WavEncoding};

use crate::config::Config;

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub input: String,
    pub output: String,
    pub sample_rate: u32,
    pub n_channels: usize,
    pub n_samples: usize,
    /// Index of the ILRMA output selected as the target.
    pub target_index: usize,
    pub reference_channel: usize,
    pub full_image: bool,
    pub variant: String,
    pub alpha: f64,
    pub beta: f64,
    pub iterations: usize,
    pub ilrma: IlrmaSummary,
    pub diagnostics: DiagnosticsSummary,
}

#[derive(Debug, Serialize)]
pub struct IlrmaSummary {
    pub n_bases: usize,
    pub iterations: usize,
    pub seed: u64,
    pub final_cost: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct DiagnosticsSummary {
    pub initial_map_objective: f64,
    pub final_map_objective: f64,
    /// Largest relative decrease of the MAP objective over one iteration.
    pub worst_map_decrease: f64,
    /// Iterations where Q of the update fell below Q of the previous
    /// parameters.
    pub q_decreases: usize,
    pub min_noise_eigenvalue: f64,
}

impl DiagnosticsSummary {
    fn from_diagnostics(d: &[IterationDiagnostics]) -> Self {
        let worst_map_decrease = d
            .windows(2)
            .map(|w| (w[0].map_objective - w[1].map_objective) / w[0].map_objective.abs().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max);
        let q_decreases = d
            .iter()
            .filter(|x| matches!((x.q_value, x.q_previous), (Some(q), Some(p)) if q < p - 1e-9 * p.abs()))
            .count();
        DiagnosticsSummary {
            initial_map_objective: d.first().map_or(f64::NAN, |x| x.map_objective),
            final_map_objective: d.last().map_or(f64::NAN, |x| x.map_objective),
            worst_map_decrease,
            q_decreases,
            min_noise_eigenvalue: d.iter().map(|x| x.min_eigenvalue).fold(f64::INFINITY, f64::min),
        }
    }
}

pub struct ExtractArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    pub report: Option<PathBuf>,
    pub diagnostics: Option<PathBuf>,
    pub full_image: bool,
}

pub fn run(cfg: &Config, args: &ExtractArgs) -> Result<RunReport> {
    let audio = read_wav(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let n_channels = audio.samples.nrows();
    if n_channels < 2 {
        bail!("{} has {n_channels} channel(s); extraction needs at least 2", args.input.display());
    }
    let pipeline = cfg.pipeline(audio.sample_rate)?;
    if pipeline.reference_channel >= n_channels {
        bail!("reference channel {} out of range for {n_channels} channels", pipeline.reference_channel);
    }
    let out = run_pipeline(audio.samples.view(), &pipeline)?;

    let full_image = args.full_image || cfg.em.full_image;
    let samples = if full_image {
        out.target_image.clone()
    } else {
        out.target_image.select(ndarray::Axis(0), &[pipeline.reference_channel])
    };
    write_wav(
        &args.output,
        &Audio {
            samples,
            sample_rate: audio.sample_rate,
        },
        WavEncoding::Float32,
    )?;

    if let Some(path) = &args.diagnostics {
        write_diagnostics(path, &out.run.diagnostics)?;
    }
    let report = report(cfg, args, &audio, &pipeline.prior, &out, full_image);
    let report_path = args.report.clone().unwrap_or_else(|| args.output.with_extension("json"));
    fs::write(&report_path, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", report_path.display()))?;
    Ok(report)
}

fn report(
    cfg: &Config,
    args: &ExtractArgs,
    audio: &Audio,
    prior: &PriorConfig,
    out: &rcscme::pipeline::PipelineOutput,
    full_image: bool,
) -> RunReport {
    let pre = &out.preprocessed;
    RunReport {
        input: args.input.display().to_string(),
        output: args.output.display().to_string(),
        sample_rate: audio.sample_rate,
        n_channels: audio.samples.nrows(),
        n_samples: audio.samples.ncols(),
        target_index: pre.target,
        reference_channel: cfg.em.reference_channel,
        full_image,
        variant: prior.variant.name().into(),
        alpha: prior.alpha,
        beta: prior.beta,
        iterations: prior.n_iterations,
        ilrma: IlrmaSummary {
            n_bases: cfg.ilrma.n_bases,
            iterations: cfg.ilrma.iterations,
            seed: cfg.ilrma.seed,
            final_cost: pre.ilrma.cost_history.last().copied(),
        },
        diagnostics: DiagnosticsSummary::from_diagnostics(&out.run.diagnostics),
    }
}

fn write_diagnostics(path: &Path, diagnostics: &[IterationDiagnostics]) -> Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(f, "{}", IterationDiagnostics::CSV_HEADER)?;
    for d in diagnostics {
        writeln!(f, "{}", d.csv_row())?;
    }
    Ok(())
}
