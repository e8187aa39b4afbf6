use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ndarray::Array2;

use rcscme::harness::synthesize_scene;
use rcscme::wav::{write_wav, Audio, WavEncoding};

use crate::config::Config;

pub const MIXTURE: &str = "mixture.wav";
pub const TARGET_REF: &str = "target_ref.wav";
pub const NOISE_REF: &str = "noise_ref.wav";

/// Renders the configured scene and writes the mixture and both reference
/// images. Returns the written paths.
pub fn run(cfg: &Config, dir: &Path) -> Result<Vec<PathBuf>> {
    let scene = cfg.scene()?;
    let mix = synthesize_scene(&scene)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    for (name, samples) in [(MIXTURE, &mix.mixture), (TARGET_REF, &mix.target_image), (NOISE_REF, &mix.noise_image)] {
        let path = dir.join(name);
        write(&path, samples, mix.sample_rate)?;
        written.push(path);
    }
    Ok(written)
}

fn write(path: &Path, samples: &Array2<f64>, sample_rate: u32) -> Result<()> {
    let audio = Audio {
        samples: samples.clone(),
        sample_rate,
    };
    write_wav(path, &audio, WavEncoding::Float32).with_context(|| format!("writing {}", path.display()))
}
