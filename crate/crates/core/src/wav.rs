//! Multichannel RIFF WAV reading and writing (16-bit PCM and 32-bit float).

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use ndarray::Array2;

use crate::error::{Error, Result, Stage};

/// Decoded audio: `samples` is `(channels, frames)`, scaled to [-1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Audio {
    pub samples: Array2<f64>,
    pub sample_rate: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

fn wav_err(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::invalid(Stage::Wav, other.to_string()),
    }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Audio> {
    let reader = WavReader::open(path.as_ref()).map_err(wav_err)?;
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (fmt, bits) => {
            return Err(Error::invalid(
                Stage::Wav,
                format!("unsupported sample format {fmt:?} with {bits} bits"),
            ))
        }
    };
    if n_ch == 0 {
        return Err(Error::invalid(Stage::Wav, "file declares zero channels"));
    }
    let n_frames = interleaved.len() / n_ch;
    let samples = Array2::from_shape_fn((n_ch, n_frames), |(c, t)| interleaved[t * n_ch + c]);
    Ok(Audio {
        samples,
        sample_rate: spec.sample_rate,
    })
}

pub fn write_wav(path: impl AsRef<Path>, audio: &Audio, encoding: WavEncoding) -> Result<()> {
    let (n_ch, n_frames) = audio.samples.dim();
    if n_ch == 0 || n_ch > u16::MAX as usize {
        return Err(Error::invalid(Stage::Wav, format!("cannot write {n_ch} channels")));
    }
    let spec = WavSpec {
        channels: n_ch as u16,
        sample_rate: audio.sample_rate,
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => SampleFormat::Int,
            WavEncoding::Float32 => SampleFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path.as_ref(), spec).map_err(wav_err)?;
    for t in 0..n_frames {
        for c in 0..n_ch {
            let v = audio.samples[[c, t]];
            match encoding {
                WavEncoding::Pcm16 => {
                    let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(q).map_err(wav_err)?;
                }
                WavEncoding::Float32 => writer.write_sample(v as f32).map_err(wav_err)?,
            }
        }
    }
    writer.finalize().map_err(wav_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone() -> Audio {
        let samples = Array2::from_shape_fn((3, 50), |(c, t)| ((c + 1) as f64 * t as f64 * 0.1).sin() * 0.5);
        Audio {
            samples,
            sample_rate: 8000,
        }
    }

    #[test]
    fn float_roundtrip_keeps_channel_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let a = tone();
        write_wav(&path, &a, WavEncoding::Float32).unwrap();
        let b = read_wav(&path).unwrap();
        assert_eq!(b.sample_rate, 8000);
        assert_eq!(b.samples.dim(), (3, 50));
        for (x, y) in a.samples.iter().zip(b.samples.iter()) {
            assert!((x - y).abs() < 1e-7);
        }
    }

    #[test]
    fn pcm16_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let a = tone();
        write_wav(&path, &a, WavEncoding::Pcm16).unwrap();
        let b = read_wav(&path).unwrap();
        for (x, y) in a.samples.iter().zip(b.samples.iter()) {
            assert!((x - y).abs() <= 0.5 / 32768.0 + 1e-12);
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(read_wav("/nonexistent/x.wav"), Err(Error::Io(_))));
    }
}
