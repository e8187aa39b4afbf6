use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use rcscme::harness::sdr;
use rcscme::wav::{read_wav, Audio};

pub const CSV_HEADER: &str = "name,sdr_db,input_sdr_db,sdr_improvement_db";

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub name: String,
    pub sdr_db: f64,
    /// Present when the unprocessed mixture was given.
    pub input_sdr_db: Option<f64>,
}

impl Row {
    pub fn improvement_db(&self) -> Option<f64> {
        self.input_sdr_db.map(|i| self.sdr_db - i)
    }

    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.4}"));
        format!("{},{:.4},{},{}", self.name, self.sdr_db, opt(self.input_sdr_db), opt(self.improvement_db()))
    }
}

pub struct EvaluateArgs {
    pub estimate: PathBuf,
    pub reference: PathBuf,
    pub mixture: Option<PathBuf>,
    /// Channel of the reference (and mixture) the estimate is compared with.
    pub channel: usize,
}

/// One row per pair, plus a mean row when the inputs are directories.
pub fn run(args: &EvaluateArgs) -> Result<Vec<Row>> {
    if args.estimate.is_dir() {
        if !args.reference.is_dir() || args.mixture.as_ref().is_some_and(|m| !m.is_dir()) {
            bail!("batch mode needs directories for every input");
        }
        let names = wav_names(&args.estimate)?;
        if names.is_empty() {
            bail!("no .wav files in {}", args.estimate.display());
        }
        let mut rows = Vec::with_capacity(names.len() + 1);
        for name in names {
            let mixture = args.mixture.as_ref().map(|d| d.join(&name));
            rows.push(score(&name, &args.estimate.join(&name), &args.reference.join(&name), mixture.as_deref(), args.channel)?);
        }
        let mean = mean_row(&rows);
        rows.push(mean);
        Ok(rows)
    } else {
        let name = args.estimate.file_name().map_or_else(|| "estimate".into(), |n| n.to_string_lossy().into_owned());
        Ok(vec![score(&name, &args.estimate, &args.reference, args.mixture.as_deref(), args.channel)?])
    }
}

fn wav_names(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".wav"))
        .collect();
    names.sort();
    Ok(names)
}

fn channel(audio: &Audio, ch: usize, path: &Path) -> Result<Vec<f64>> {
    if ch >= audio.samples.nrows() {
        bail!("{} has no channel {ch}", path.display());
    }
    Ok(audio.samples.row(ch).to_vec())
}

fn load(path: &Path) -> Result<Audio> {
    Ok(read_wav(path).with_context(|| format!("reading {}", path.display()))?)
}

fn score(name: &str, estimate: &Path, reference: &Path, mixture: Option<&Path>, ch: usize) -> Result<Row> {
    let est = load(estimate)?;
    let reference_audio = load(reference)?;
    if est.sample_rate != reference_audio.sample_rate {
        bail!("{name}: sample rates differ ({} vs {})", est.sample_rate, reference_audio.sample_rate);
    }
    let est_ch = if est.samples.nrows() == 1 { 0 } else { ch };
    let e = channel(&est, est_ch, estimate)?;
    let r = channel(&reference_audio, ch, reference)?;
    if e.len() != r.len() {
        bail!("{name}: lengths differ ({} vs {} samples)", e.len(), r.len());
    }
    let input_sdr_db = match mixture {
        Some(path) => {
            let mix = load(path)?;
            let m = channel(&mix, ch, path)?;
            if m.len() != r.len() || mix.sample_rate != reference_audio.sample_rate {
                bail!("{name}: mixture does not match the reference");
            }
            Some(sdr(&m, &r)?)
        }
        None => None,
    };
    Ok(Row {
        name: name.into(),
        sdr_db: sdr(&e, &r)?,
        input_sdr_db,
    })
}

fn mean_row(rows: &[Row]) -> Row {
    let n = rows.len() as f64;
    let input = rows.iter().map(|r| r.input_sdr_db).collect::<Option<Vec<f64>>>();
    Row {
        name: "mean".into(),
        sdr_db: rows.iter().map(|r| r.sdr_db).sum::<f64>() / n,
        input_sdr_db: input.map(|v| v.iter().sum::<f64>() / n),
    }
}

pub fn to_csv(rows: &[Row]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}
