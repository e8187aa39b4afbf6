//! Synthetic diffuse-noise scenes and extraction-quality metrics.
//!
//! A scene places one speech-like target and `n_noise_directions` noise
//! sources around a circular microphone array. Every source reaches every
//! microphone through a short synthetic impulse response: a fractional-delay
//! direct path plus an exponentially decaying random tail that is independent
//! per microphone. Many noise directions with decorrelated tails give a
//! full-rank noise SCM in every bin.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{Error, Result, Stage};
use crate::pipeline::{preprocess, PipelineConfig};
use crate::rank1::Rank1Model;
use crate::rcscme::{PosteriorStats, PriorConfig, Variant};
use crate::stft::{FrameConfig, Spectrogram, StftEngine};

const SPEED_OF_SOUND: f64 = 343.0;
const IR_TAPS: usize = 64;
const DIRECT_OFFSET: f64 = 12.0;
const SDR_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Gaussian,
    Laplacian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub n_mics: usize,
    pub n_noise_directions: usize,
    pub target_direction_deg: f64,
    pub snr_db: f64,
    pub seed: u64,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub array_radius_m: f64,
    /// Gain of the reverberant tail relative to the direct path.
    pub target_tail_gain: f64,
    pub noise_tail_gain: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_mics: 3,
            n_noise_directions: 19,
            target_direction_deg: 0.0,
            snr_db: 0.0,
            seed: 0,
            duration_s: 3.0,
            sample_rate: 16_000,
            array_radius_m: 0.05,
            target_tail_gain: 0.05,
            noise_tail_gain: 0.3,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mics < 1 {
            return Err(Error::invalid(Stage::Harness, "need at least one microphone"));
        }
        if self.n_noise_directions < 1 {
            return Err(Error::invalid(Stage::Harness, "need at least one noise direction"));
        }
        if !(self.duration_s > 0.0) || self.sample_rate == 0 {
            return Err(Error::invalid(Stage::Harness, "duration and sample rate must be positive"));
        }
        if !self.snr_db.is_finite() || !(self.array_radius_m >= 0.0) {
            return Err(Error::invalid(Stage::Harness, "invalid SNR or array radius"));
        }
        Ok(())
    }

    /// The diffuse condition: at least as many noise directions as
    /// microphones.
    pub fn is_diffuse(&self) -> bool {
        self.n_noise_directions >= self.n_mics
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }

    pub fn noise_direction_deg(&self, k: usize) -> f64 {
        let step = 360.0 / self.n_noise_directions as f64;
        step * (k as f64 + 0.5)
    }
}

/// Mixture plus ground-truth images, all `(mics, samples)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub mixture: Array2<f64>,
    pub target_image: Array2<f64>,
    pub noise_image: Array2<f64>,
    pub sample_rate: u32,
}

/// Windowed-sinc fractional delay plus a decaying random tail.
fn impulse_response(delay: f64, tail_gain: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut ir = vec![0.0; IR_TAPS];
    let half = 8.0;
    for (k, h) in ir.iter_mut().enumerate() {
        let t = k as f64 - delay;
        if t.abs() < half {
            let sinc = if t.abs() < 1e-12 { 1.0 } else { (PI * t).sin() / (PI * t) };
            let win = 0.5 * (1.0 + (PI * t / half).cos());
            *h = sinc * win;
        }
    }
    let start = (delay.ceil() as usize + 1).min(IR_TAPS);
    let decay = 10.0;
    for (k, h) in ir.iter_mut().enumerate().skip(start) {
        let n: f64 = StandardNormal.sample(rng);
        *h += tail_gain * n * (-((k - start) as f64) / decay).exp();
    }
    ir
}

fn convolve_into(out: &mut [f64], signal: &[f64], ir: &[f64]) {
    for (t, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (k, &h) in ir.iter().enumerate() {
            if k > t {
                break;
            }
            if let Some(&s) = signal.get(t - k) {
                acc += h * s;
            }
        }
        *o += acc;
    }
}

/// Renders one far-field source through the array into `image`.
fn render(image: &mut Array2<f64>, source: &[f64], direction_deg: f64, tail_gain: f64, cfg: &SceneConfig, rng: &mut ChaCha8Rng) {
    let theta = direction_deg.to_radians();
    let n_mics = cfg.n_mics;
    let mut buf = vec![0.0; image.ncols()];
    for m in 0..n_mics {
        let phi = 2.0 * PI * m as f64 / n_mics as f64;
        let lead = cfg.array_radius_m * (theta - phi).cos() / SPEED_OF_SOUND * cfg.sample_rate as f64;
        let ir = impulse_response(DIRECT_OFFSET - lead, tail_gain, rng);
        buf.iter_mut().for_each(|v| *v = 0.0);
        convolve_into(&mut buf, source, &ir);
        for (o, b) in image.row_mut(m).iter_mut().zip(&buf) {
            *o += b;
        }
    }
}

fn power(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>() / a.len().max(1) as f64
}

/// Renders the target and the noise sources (reused cyclically when fewer
/// than `n_noise_directions` are given) and scales the noise image to the
/// configured SNR.
pub fn make_mixture(cfg: &SceneConfig, target: &[f64], noises: &[Vec<f64>]) -> Result<Mixture> {
    cfg.validate()?;
    if target.is_empty() || noises.is_empty() || noises.iter().any(Vec::is_empty) {
        return Err(Error::invalid(Stage::Harness, "target and noise signals must be nonempty"));
    }
    let len = target.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_1a5e);
    let mut target_image = Array2::zeros((cfg.n_mics, len));
    render(&mut target_image, target, cfg.target_direction_deg, cfg.target_tail_gain, cfg, &mut rng);
    let mut noise_image = Array2::zeros((cfg.n_mics, len));
    for k in 0..cfg.n_noise_directions {
        let src = &noises[k % noises.len()];
        render(&mut noise_image, src, cfg.noise_direction_deg(k), cfg.noise_tail_gain, cfg, &mut rng);
    }
    let (pt, pn) = (power(&target_image), power(&noise_image));
    if !(pt > 0.0) || !(pn > 0.0) {
        return Err(Error::invalid(Stage::Harness, "target or noise image has zero power"));
    }
    let gain = (pt / pn / 10f64.powf(cfg.snr_db / 10.0)).sqrt();
    noise_image.mapv_inplace(|v| v * gain);
    let mixture = &target_image + &noise_image;
    Ok(Mixture {
        mixture,
        target_image,
        noise_image,
        sample_rate: cfg.sample_rate,
    })
}

/// Voiced syllables with drifting pitch and random formants, separated by
/// pauses, with occasional fricative bursts.
pub fn speech_like(len: usize, sample_rate: u32, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = sample_rate as f64;
    let mut out = vec![0.0; len];
    let mut t = (rng.random_range(0.02..0.1) * fs) as usize;
    while t < len {
        let dur = (rng.random_range(0.12..0.35) * fs) as usize;
        let end = (t + dur).min(len);
        let f0 = rng.random_range(100.0..240.0);
        let drift = rng.random_range(-0.4..0.4);
        let formants = [rng.random_range(300.0..900.0), rng.random_range(900.0..2500.0), rng.random_range(2400.0..3500.0)];
        let amp = rng.random_range(0.3..1.0);
        let voiced = rng.random::<f64>() < 0.8;
        let n_harm = (0.45 * fs / f0) as usize;
        let mut phase = 0.0;
        let mut lp = 0.0;
        for k in t..end {
            let pos = (k - t) as f64 / (end - t).max(1) as f64;
            let env = (PI * pos).sin().powi(2) * amp;
            if voiced {
                let f = f0 * (1.0 + drift * pos);
                phase += 2.0 * PI * f / fs;
                let mut s = 0.0;
                for h in 1..=n_harm {
                    let fh = f * h as f64;
                    let g: f64 = formants
                        .iter()
                        .map(|&fm| 1.0 / (1.0 + ((fh - fm) / 120.0).powi(2)))
                        .sum::<f64>()
                        / h as f64;
                    s += g * (phase * h as f64).sin();
                }
                out[k] += env * s;
            } else {
                let n: f64 = StandardNormal.sample(&mut rng);
                lp = 0.3 * lp + n;
                out[k] += env * 0.3 * (n - lp * 0.5);
            }
        }
        t = end + (rng.random_range(0.05..0.25) * fs) as usize;
    }
    out
}

/// White Gaussian or Laplacian noise through a random one-pole lowpass.
pub fn noise_source(kind: NoiseKind, len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pole = rng.random_range(0.0..0.8);
    let mut state = 0.0;
    (0..len)
        .map(|_| {
            let w: f64 = match kind {
                NoiseKind::Gaussian => StandardNormal.sample(&mut rng),
                NoiseKind::Laplacian => {
                    let e: f64 = Exp1.sample(&mut rng);
                    if rng.random::<bool>() { e } else { -e }
                }
            };
            state = pole * state + (1.0 - pole) * w;
            state
        })
        .collect()
}

/// Builds the default synthetic scene: one speech-like target and
/// alternating Gaussian/Laplacian noise sources.
pub fn synthesize_scene(cfg: &SceneConfig) -> Result<Mixture> {
    cfg.validate()?;
    let len = cfg.n_samples();
    let target = speech_like(len, cfg.sample_rate, cfg.seed.wrapping_mul(7919).wrapping_add(1));
    let noises: Vec<Vec<f64>> = (0..cfg.n_noise_directions)
        .map(|k| {
            let kind = if k % 2 == 0 { NoiseKind::Gaussian } else { NoiseKind::Laplacian };
            noise_source(kind, len, cfg.seed.wrapping_mul(104_729).wrapping_add(k as u64 + 2))
        })
        .collect();
    make_mixture(cfg, &target, &noises)
}

/// Scale-invariant SDR in dB, capped to +-100 dB.
pub fn sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::invalid(
            Stage::Harness,
            format!("length mismatch: {} vs {}", estimate.len(), reference.len()),
        ));
    }
    let ref_energy: f64 = reference.iter().map(|v| v * v).sum();
    if !(ref_energy > 0.0) {
        return Err(Error::invalid(Stage::Harness, "reference has zero energy"));
    }
    let alpha = estimate.iter().zip(reference).map(|(e, r)| e * r).sum::<f64>() / ref_energy;
    let signal = alpha * alpha * ref_energy;
    let distortion: f64 = estimate.iter().zip(reference).map(|(e, r)| (alpha * r - e).powi(2)).sum();
    let db = if distortion <= signal * 1e-10 {
        SDR_CAP_DB
    } else if signal <= 0.0 {
        -SDR_CAP_DB
    } else {
        10.0 * (signal / distortion).log10()
    };
    Ok(db.clamp(-SDR_CAP_DB, SDR_CAP_DB))
}

/// SDR improvement trajectory of one extraction run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub input_sdr_db: f64,
    /// SDR of the final estimate.
    pub sdr_db: f64,
    pub sdr_improvement_db: f64,
    /// `(iteration, improvement)`, starting with the initial state.
    pub per_iteration: Vec<(usize, f64)>,
}

impl MetricReport {
    pub fn from_series(input_sdr_db: f64, series: &[(usize, f64)]) -> Result<Self> {
        let &(_, last) = series
            .last()
            .ok_or_else(|| Error::invalid(Stage::Harness, "empty SDR series"))?;
        Ok(MetricReport {
            input_sdr_db,
            sdr_db: last,
            sdr_improvement_db: last - input_sdr_db,
            per_iteration: series.iter().map(|&(k, s)| (k, s - input_sdr_db)).collect(),
        })
    }

    pub fn peak_improvement_db(&self) -> f64 {
        self.per_iteration.iter().map(|&(_, v)| v).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn peak_iteration(&self) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for &(k, v) in &self.per_iteration {
            if v > best.1 {
                best = (k, v);
            }
        }
        best.0
    }

    pub fn final_improvement_db(&self) -> f64 {
        self.sdr_improvement_db
    }
}

/// Observer for EM runs that scores the Wiener estimate after every
/// iteration.
pub struct SdrTracker<'a> {
    engine: StftEngine,
    n_samples: usize,
    reference: &'a [f64],
    channel: usize,
    pub series: Vec<(usize, f64)>,
}

impl<'a> SdrTracker<'a> {
    pub fn new(observation: &Spectrogram, reference: &'a [f64], channel: usize) -> Result<Self> {
        if channel >= observation.n_channels() {
            return Err(Error::invalid(Stage::Harness, format!("channel {channel} out of range")));
        }
        Ok(SdrTracker {
            engine: StftEngine::new(observation.config)?,
            n_samples: observation.n_samples,
            reference,
            channel,
            series: Vec::new(),
        })
    }

    pub fn observe(&mut self, iteration: usize, stats: &PosteriorStats) -> Result<()> {
        let spec = stats.target_channel(self.channel)?;
        let signal = self.engine.synthesize_channel(spec.view(), self.n_samples)?;
        self.series.push((iteration, sdr(&signal, self.reference)?));
        Ok(())
    }
}

/// Scores of one scene: the rank-1 baseline and one report per EM variant.
#[derive(Debug, Clone)]
pub struct SceneEvaluation {
    pub scene: SceneConfig,
    pub target_channel: usize,
    pub input_sdr_db: f64,
    pub ilrma_improvement_db: f64,
    pub variants: Vec<(Variant, MetricReport)>,
    /// Smallest eigenvalue of any noise SCM seen in any iteration.
    pub min_noise_eigenvalue: f64,
    /// Largest relative decrease of the MAP objective over one iteration.
    pub worst_map_decrease: f64,
}

impl SceneEvaluation {
    pub fn report(&self, variant: Variant) -> Option<&MetricReport> {
        self.variants.iter().find(|(v, _)| *v == variant).map(|(_, r)| r)
    }
}

/// Runs preprocessing once and every requested EM variant on one mixture,
/// tracking SDR improvement on the reference channel after each iteration.
pub fn evaluate_run(mixture: &Mixture, scene: &SceneConfig, config: &PipelineConfig, priors: &[PriorConfig]) -> Result<SceneEvaluation> {
    let ch = config.reference_channel;
    let reference = mixture.target_image.row(ch).to_vec();
    let observed = mixture.mixture.row(ch).to_vec();
    let input_sdr_db = sdr(&observed, &reference)?;

    let pre = preprocess(mixture.mixture.view(), config)?;
    let ilrma_sig = pre.rank1_target_signal(ch)?;
    let ilrma_improvement_db = sdr(&ilrma_sig, &reference)? - input_sdr_db;

    let mut variants = Vec::with_capacity(priors.len());
    let mut min_eig = f64::INFINITY;
    let mut worst = 0.0f64;
    for prior in priors {
        let mut tracker = SdrTracker::new(&pre.observation, &reference, ch)?;
        let run = pre.extract(prior, |k, _, stats| tracker.observe(k, stats))?;
        for d in &run.diagnostics {
            min_eig = min_eig.min(d.min_eigenvalue);
        }
        for w in run.diagnostics.windows(2) {
            let drop = (w[0].map_objective - w[1].map_objective) / w[0].map_objective.abs().max(1e-300);
            worst = worst.max(drop);
        }
        variants.push((prior.variant, MetricReport::from_series(input_sdr_db, &tracker.series)?));
    }
    Ok(SceneEvaluation {
        scene: scene.clone(),
        target_channel: pre.target,
        input_sdr_db,
        ilrma_improvement_db,
        variants,
        min_noise_eigenvalue: min_eig,
        worst_map_decrease: worst,
    })
}

/// Seed x target-direction grid over a base scene.
#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub base: SceneConfig,
    pub seeds: Vec<u64>,
    pub target_directions_deg: Vec<f64>,
    pub ilrma: Rank1Model,
    pub n_iterations: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            base: SceneConfig::default(),
            seeds: (0..10).collect(),
            target_directions_deg: vec![0.0, 40.0, 90.0, 135.0],
            ilrma: Rank1Model::default(),
            n_iterations: 200,
        }
    }
}

impl GridConfig {
    pub fn scenes(&self) -> Vec<SceneConfig> {
        let mut out = Vec::new();
        for &seed in &self.seeds {
            for &dir in &self.target_directions_deg {
                out.push(SceneConfig {
                    seed,
                    target_direction_deg: dir,
                    ..self.base.clone()
                });
            }
        }
        out
    }

    pub fn priors(&self) -> [PriorConfig; 2] {
        [Variant::Conventional, Variant::Proposed].map(|v| PriorConfig {
            n_iterations: self.n_iterations,
            ..PriorConfig::for_variant(v)
        })
    }
}

pub fn evaluate_scene(scene: &SceneConfig, grid: &GridConfig) -> Result<SceneEvaluation> {
    let mixture = synthesize_scene(scene)?;
    let priors = grid.priors();
    let config = PipelineConfig {
        stft: FrameConfig::for_sample_rate(scene.sample_rate),
        ilrma: Rank1Model {
            seed: scene.seed,
            ..grid.ilrma
        },
        prior: priors[0],
        reference_channel: 0,
    };
    evaluate_run(&mixture, scene, &config, &priors)
}

/// Mean peak and final SDR improvement per method.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: String,
    pub peak_db: f64,
    /// `None` for non-iterative methods.
    pub final_db: Option<f64>,
}

pub fn summarize(results: &[SceneEvaluation]) -> Vec<BenchRow> {
    let n = results.len().max(1) as f64;
    let mut rows = vec![BenchRow {
        method: "ILRMA".into(),
        peak_db: results.iter().map(|r| r.ilrma_improvement_db).sum::<f64>() / n,
        final_db: None,
    }];
    for variant in [Variant::Conventional, Variant::Proposed] {
        let reports: Vec<&MetricReport> = results.iter().filter_map(|r| r.report(variant)).collect();
        if reports.is_empty() {
            continue;
        }
        let k = reports.len() as f64;
        rows.push(BenchRow {
            method: format!("{} RCSCME", capitalize(variant.name())),
            peak_db: reports.iter().map(|r| r.peak_improvement_db()).sum::<f64>() / k,
            final_db: Some(reports.iter().map(|r| r.final_improvement_db()).sum::<f64>() / k),
        });
    }
    rows
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next().map_or(String::new(), |f| f.to_uppercase().chain(c).collect())
}

/// Table of "peak / final" SDR improvements; non-iterative rows show "-".
pub fn format_table(rows: &[BenchRow]) -> String {
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:<width$} | SDR improvement [dB] (peak / final)\n", "Method");
    out.push_str(&format!("{}-+-{}\n", "-".repeat(width), "-".repeat(36)));
    for r in rows {
        let fin = r.final_db.map_or("-".to_string(), |f| format!("{f:.2}"));
        out.push_str(&format!("{:<width$} | {:.2} / {}\n", r.method, r.peak_db, fin));
    }
    out
}
