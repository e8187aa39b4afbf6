//! End-to-end extraction: STFT, ILRMA, target selection, noise SCM, EM and
//! Wiener filtering, inverse STFT.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result, Stage};
use crate::rank1::{project_to_reference, run_ilrma, select_target_channel, IlrmaOutput, Rank1Model};
use crate::rcscme::{run_with_observer, EmRun, EmState, PosteriorStats, PriorConfig};
use crate::scm::{noise_scm, NoiseScmBundle};
use crate::stft::{FrameConfig, Spectrogram, StftEngine};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub stft: FrameConfig,
    pub ilrma: Rank1Model,
    pub prior: PriorConfig,
    /// Microphone the single-channel outputs refer to.
    pub reference_channel: usize,
}

impl PipelineConfig {
    pub fn new(sample_rate: u32, prior: PriorConfig) -> Self {
        PipelineConfig {
            stft: FrameConfig::for_sample_rate(sample_rate),
            ilrma: Rank1Model::default(),
            prior,
            reference_channel: 0,
        }
    }
}

/// Everything before the EM stage. Shared by both variants.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub observation: Spectrogram,
    pub ilrma: IlrmaOutput,
    /// Index n_t of the target among the ILRMA estimates.
    pub target: usize,
    pub bundle: NoiseScmBundle,
}

pub fn preprocess(signal: ArrayView2<f64>, config: &PipelineConfig) -> Result<Preprocessed> {
    let n_ch = signal.nrows();
    if n_ch < 2 {
        return Err(Error::invalid(Stage::Rank1, format!("need a multichannel input, got {n_ch} channel(s)")));
    }
    if config.reference_channel >= n_ch {
        return Err(Error::invalid(Stage::Rank1, "reference channel out of range"));
    }
    let engine = StftEngine::new(config.stft)?;
    let observation = engine.analyze(signal)?;
    let ilrma = run_ilrma(&observation, &config.ilrma)?;
    let projected = project_to_reference(&ilrma.estimates, &ilrma.demix, config.reference_channel)?;
    let target = select_target_channel(&projected)?;
    let bundle = noise_scm(&observation, &ilrma.demix, target)?;
    Ok(Preprocessed {
        observation,
        ilrma,
        target,
        bundle,
    })
}

impl Preprocessed {
    /// Target estimate of the rank-1 stage alone, back-projected to
    /// `channel` and resynthesized.
    pub fn rank1_target_signal(&self, channel: usize) -> Result<Vec<f64>> {
        let est = &self.ilrma.estimates;
        let spec = Array2::from_shape_fn((est.n_bins(), est.n_frames()), |(i, j)| {
            self.ilrma.demix.mixing[i][(channel, self.target)] * est.data[[i, j, self.target]]
        });
        StftEngine::new(est.config)?.synthesize_channel(spec.view(), est.n_samples)
    }

    pub fn extract(&self, prior: &PriorConfig, observer: impl FnMut(usize, &EmState, &PosteriorStats) -> Result<()>) -> Result<EmRun> {
        run_with_observer(&self.observation, &self.ilrma.demix, self.target, &self.bundle, prior, observer)
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub preprocessed: Preprocessed,
    pub run: EmRun,
    /// Extracted target image, `(channels, samples)`.
    pub target_image: Array2<f64>,
}

pub fn run_pipeline(signal: ArrayView2<f64>, config: &PipelineConfig) -> Result<PipelineOutput> {
    let preprocessed = preprocess(signal, config)?;
    let run = preprocessed.extract(&config.prior, |_, _, _| Ok(()))?;
    let target_image = StftEngine::new(config.stft)?.synthesize(&run.extracted)?;
    Ok(PipelineOutput {
        preprocessed,
        run,
        target_image,
    })
}
