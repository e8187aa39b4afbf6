//! Multichannel STFT analysis and weighted overlap-add synthesis.

use std::f64::consts::PI;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result, Stage};
use crate::linalg::C64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    Hamming,
}

impl FromStr for WindowKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hamming" => Ok(WindowKind::Hamming),
            other => Err(Error::invalid(
                Stage::Stft,
                format!("unsupported window kind {other:?}"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameConfig {
    pub window_length: usize,
    pub hop: usize,
    pub window_kind: WindowKind,
    pub sample_rate: u32,
}

impl FrameConfig {
    /// 64 ms Hamming window with a 32 ms shift.
    pub fn for_sample_rate(sample_rate: u32) -> Self {
        let window_length = (sample_rate as usize * 64 / 1000) & !1;
        FrameConfig {
            window_length,
            hop: window_length / 2,
            window_kind: WindowKind::Hamming,
            sample_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 {
            return Err(Error::invalid(Stage::Stft, "hop must be positive"));
        }
        if self.window_length < 2 || self.window_length != 2 * self.hop {
            return Err(Error::invalid(
                Stage::Stft,
                format!(
                    "window length {} must be twice the hop {}",
                    self.window_length, self.hop
                ),
            ));
        }
        if self.sample_rate == 0 {
            return Err(Error::invalid(Stage::Stft, "sample rate must be positive"));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.window_length / 2 + 1
    }

    /// Frame count for a signal of `n_samples`, with the last partial frame
    /// zero-padded.
    pub fn n_frames(&self, n_samples: usize) -> usize {
        if n_samples <= self.window_length {
            1
        } else {
            1 + (n_samples - self.window_length).div_ceil(self.hop)
        }
    }

    /// Periodic analysis window.
    pub fn window(&self) -> Vec<f64> {
        let n = self.window_length as f64;
        match self.window_kind {
            WindowKind::Hamming => (0..self.window_length)
                .map(|k| 0.54 - 0.46 * (2.0 * PI * k as f64 / n).cos())
                .collect(),
        }
    }
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self::for_sample_rate(16_000)
    }
}

/// One-sided multichannel spectrogram, indexed `(bin, frame, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub data: Array3<C64>,
    pub config: FrameConfig,
    /// Length of the time-domain signal the spectrogram came from.
    pub n_samples: usize,
}

impl Spectrogram {
    pub fn n_bins(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn n_frames(&self) -> usize {
        self.data.len_of(Axis(1))
    }

    pub fn n_channels(&self) -> usize {
        self.data.len_of(Axis(2))
    }

    /// Observation vector x_ij.
    pub fn vector(&self, bin: usize, frame: usize) -> crate::linalg::CVec {
        self.data
            .slice(ndarray::s![bin, frame, ..])
            .iter()
            .copied()
            .collect()
    }

    pub fn with_data(&self, data: Array3<C64>) -> Spectrogram {
        Spectrogram {
            data,
            config: self.config,
            n_samples: self.n_samples,
        }
    }
}

/// Reusable FFT plans and window for one frame configuration.
pub struct StftEngine {
    config: FrameConfig,
    window: Vec<f64>,
    norm: Vec<f64>,
    norm_len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl StftEngine {
    pub fn new(config: FrameConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(StftEngine {
            window: config.window(),
            forward: planner.plan_fft_forward(config.window_length),
            inverse: planner.plan_fft_inverse(config.window_length),
            config,
            norm: Vec::new(),
            norm_len: 0,
        })
    }

    pub fn config(&self) -> &FrameConfig {
        &self.config
    }

    /// `signal` is `(channels, samples)`.
    pub fn analyze(&self, signal: ArrayView2<f64>) -> Result<Spectrogram> {
        let (n_ch, n_samples) = signal.dim();
        if n_ch == 0 || n_samples == 0 {
            return Err(Error::invalid(Stage::Stft, "empty signal"));
        }
        let n = self.config.window_length;
        if n_samples < n {
            return Err(Error::invalid(
                Stage::Stft,
                format!("signal of {n_samples} samples is shorter than one window ({n})"),
            ));
        }
        let n_frames = self.config.n_frames(n_samples);
        let n_bins = self.config.n_bins();
        let mut data = Array3::zeros((n_bins, n_frames, n_ch));
        let mut buf = vec![C64::new(0.0, 0.0); n];
        let mut scratch = vec![C64::new(0.0, 0.0); self.forward.get_inplace_scratch_len()];
        for ch in 0..n_ch {
            let row = signal.row(ch);
            for frame in 0..n_frames {
                let start = frame * self.config.hop;
                for (k, b) in buf.iter_mut().enumerate() {
                    let x = row.get(start + k).copied().unwrap_or(0.0);
                    *b = C64::new(x * self.window[k], 0.0);
                }
                self.forward.process_with_scratch(&mut buf, &mut scratch);
                for bin in 0..n_bins {
                    data[[bin, frame, ch]] = buf[bin];
                }
            }
        }
        if data.iter().any(|v: &C64| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::invalid(Stage::Stft, "signal contains non-finite samples"));
        }
        Ok(Spectrogram {
            data,
            config: self.config,
            n_samples,
        })
    }

    fn normalizer(&mut self, n_frames: usize) -> &[f64] {
        let n = self.config.window_length;
        let len = (n_frames - 1) * self.config.hop + n;
        if self.norm_len != len {
            let mut norm = vec![0.0; len];
            for frame in 0..n_frames {
                let start = frame * self.config.hop;
                for k in 0..n {
                    norm[start + k] += self.window[k] * self.window[k];
                }
            }
            self.norm = norm;
            self.norm_len = len;
        }
        &self.norm
    }

    /// Inverse of a single channel given as `(bin, frame)`.
    pub fn synthesize_channel(&mut self, spec: ArrayView2<C64>, n_samples: usize) -> Result<Vec<f64>> {
        let n = self.config.window_length;
        let (n_bins, n_frames) = spec.dim();
        if n_bins != self.config.n_bins() {
            return Err(Error::invalid(
                Stage::Stft,
                format!("expected {} bins, got {n_bins}", self.config.n_bins()),
            ));
        }
        if n_frames == 0 {
            return Err(Error::invalid(Stage::Stft, "spectrogram has no frames"));
        }
        let hop = self.config.hop;
        let total = (n_frames - 1) * hop + n;
        if n_samples > total {
            return Err(Error::invalid(
                Stage::Stft,
                format!("{n_frames} frames cannot cover {n_samples} samples"),
            ));
        }
        let mut out = vec![0.0; total];
        let mut buf = vec![C64::new(0.0, 0.0); n];
        let mut scratch = vec![C64::new(0.0, 0.0); self.inverse.get_inplace_scratch_len()];
        for frame in 0..n_frames {
            for bin in 0..n_bins {
                buf[bin] = spec[[bin, frame]];
            }
            // imaginary parts of DC and Nyquist carry no information for real input
            buf[0].im = 0.0;
            buf[n / 2].im = 0.0;
            for bin in 1..n / 2 {
                buf[n - bin] = buf[bin].conj();
            }
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let start = frame * hop;
            for k in 0..n {
                out[start + k] += buf[k].re / n as f64 * self.window[k];
            }
        }
        let norm = self.normalizer(n_frames);
        for (o, &w) in out.iter_mut().zip(norm) {
            *o = if w > 1e-12 { *o / w } else { 0.0 };
        }
        out.truncate(n_samples);
        Ok(out)
    }

    pub fn synthesize(&mut self, spec: &Spectrogram) -> Result<Array2<f64>> {
        if spec.config != self.config {
            return Err(Error::invalid(Stage::Stft, "frame configuration mismatch"));
        }
        let n_ch = spec.n_channels();
        let mut out = Array2::zeros((n_ch, spec.n_samples));
        for ch in 0..n_ch {
            let chan = spec.data.index_axis(Axis(2), ch);
            let samples = self.synthesize_channel(chan, spec.n_samples)?;
            out.row_mut(ch).assign(&ndarray::ArrayView1::from(&samples));
        }
        Ok(out)
    }
}

pub fn analyze(signal: ArrayView2<f64>, config: FrameConfig) -> Result<Spectrogram> {
    StftEngine::new(config)?.analyze(signal)
}

pub fn synthesize(spec: &Spectrogram) -> Result<Array2<f64>> {
    StftEngine::new(spec.config)?.synthesize(spec)
}
