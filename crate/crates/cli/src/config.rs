//! TOML run configuration. Every key is optional; missing keys take the
//! defaults of the extraction protocol (64 ms / 32 ms STFT, 10 NMF bases,
//! 50 ILRMA iterations, 200 EM iterations, variant-specific prior).

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use rcscme::harness::{GridConfig, SceneConfig};
use rcscme::pipeline::PipelineConfig;
use rcscme::rank1::Rank1Model;
use rcscme::rcscme::{PriorConfig, Variant};
use rcscme::stft::{FrameConfig, WindowKind};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub stft: StftSection,
    pub ilrma: IlrmaSection,
    pub em: EmSection,
    pub scene: SceneSection,
    pub grid: GridSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftSection {
    pub window_ms: f64,
    pub window: String,
}

impl Default for StftSection {
    fn default() -> Self {
        StftSection {
            window_ms: 64.0,
            window: "hamming".into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IlrmaSection {
    pub n_bases: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for IlrmaSection {
    fn default() -> Self {
        let m = Rank1Model::default();
        IlrmaSection {
            n_bases: m.n_bases,
            iterations: m.n_iterations,
            seed: m.seed,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmSection {
    pub variant: String,
    pub iterations: usize,
    /// Defaults depend on the variant.
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub reference_channel: usize,
    /// Write every channel of the target image instead of the reference one.
    pub full_image: bool,
}

impl Default for EmSection {
    fn default() -> Self {
        EmSection {
            variant: Variant::Proposed.name().into(),
            iterations: PriorConfig::for_variant(Variant::Proposed).n_iterations,
            alpha: None,
            beta: None,
            reference_channel: 0,
            full_image: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    pub n_mics: usize,
    pub n_noise_directions: usize,
    pub target_direction_deg: f64,
    pub snr_db: f64,
    pub seed: u64,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub array_radius_m: f64,
    pub target_tail_gain: f64,
    pub noise_tail_gain: f64,
}

impl Default for SceneSection {
    fn default() -> Self {
        let s = SceneConfig::default();
        SceneSection {
            n_mics: s.n_mics,
            n_noise_directions: s.n_noise_directions,
            target_direction_deg: s.target_direction_deg,
            snr_db: s.snr_db,
            seed: s.seed,
            duration_s: s.duration_s,
            sample_rate: s.sample_rate,
            array_radius_m: s.array_radius_m,
            target_tail_gain: s.target_tail_gain,
            noise_tail_gain: s.noise_tail_gain,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// Seeds 0..seeds.
    pub seeds: u64,
    pub directions_deg: Vec<f64>,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = GridConfig::default();
        GridSection {
            seeds: g.seeds.len() as u64,
            directions_deg: g.target_directions_deg,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub variant: Option<String>,
    pub iterations: Option<usize>,
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.variant {
            self.em.variant = v.clone();
        }
        if let Some(n) = o.iterations {
            self.em.iterations = n;
        }
        if let Some(s) = o.seed {
            self.ilrma.seed = s;
            self.scene.seed = s;
        }
        if o.alpha.is_some() {
            self.em.alpha = o.alpha;
        }
        if o.beta.is_some() {
            self.em.beta = o.beta;
        }
    }

    pub fn variant(&self) -> Result<Variant> {
        Ok(self.em.variant.parse()?)
    }

    /// Prior for `variant`: its defaults with the configured alpha, beta and
    /// iteration count.
    pub fn prior_for(&self, variant: Variant) -> Result<PriorConfig> {
        let base = PriorConfig::for_variant(variant);
        let prior = PriorConfig {
            alpha: self.em.alpha.unwrap_or(base.alpha),
            beta: self.em.beta.unwrap_or(base.beta),
            n_iterations: self.em.iterations,
            variant,
        };
        prior.validate()?;
        Ok(prior)
    }

    pub fn frame_config(&self, sample_rate: u32) -> Result<FrameConfig> {
        let window_kind: WindowKind = self.stft.window.parse()?;
        if !(self.stft.window_ms > 0.0) {
            bail!("stft.window_ms must be positive");
        }
        let window_length = ((sample_rate as f64 * self.stft.window_ms / 1000.0).floor() as usize) & !1;
        let cfg = FrameConfig {
            window_length,
            hop: window_length / 2,
            window_kind,
            sample_rate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn rank1_model(&self) -> Result<Rank1Model> {
        if self.ilrma.n_bases == 0 {
            bail!("ilrma.n_bases must be positive");
        }
        Ok(Rank1Model {
            n_bases: self.ilrma.n_bases,
            n_iterations: self.ilrma.iterations,
            seed: self.ilrma.seed,
        })
    }

    pub fn pipeline(&self, sample_rate: u32) -> Result<PipelineConfig> {
        Ok(PipelineConfig {
            stft: self.frame_config(sample_rate)?,
            ilrma: self.rank1_model()?,
            prior: self.prior_for(self.variant()?)?,
            reference_channel: self.em.reference_channel,
        })
    }

    pub fn scene(&self) -> Result<SceneConfig> {
        let s = &self.scene;
        let scene = SceneConfig {
            n_mics: s.n_mics,
            n_noise_directions: s.n_noise_directions,
            target_direction_deg: s.target_direction_deg,
            snr_db: s.snr_db,
            seed: s.seed,
            duration_s: s.duration_s,
            sample_rate: s.sample_rate,
            array_radius_m: s.array_radius_m,
            target_tail_gain: s.target_tail_gain,
            noise_tail_gain: s.noise_tail_gain,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn grid(&self) -> Result<GridConfig> {
        if self.grid.seeds == 0 || self.grid.directions_deg.is_empty() {
            bail!("grid needs at least one seed and one direction");
        }
        Ok(GridConfig {
            base: self.scene()?,
            seeds: (0..self.grid.seeds).collect(),
            target_directions_deg: self.grid.directions_deg.clone(),
            ilrma: self.rank1_model()?,
            n_iterations: self.em.iterations,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_protocol_defaults() {
        let cfg: Config = toml::from_str("").unwrap();
        let p = cfg.pipeline(16_000).unwrap();
        assert_eq!(p.stft.window_length, 1024);
        assert_eq!(p.stft.hop, 512);
        assert_eq!(p.ilrma.n_bases, 10);
        assert_eq!(p.ilrma.n_iterations, 50);
        assert_eq!(p.prior.n_iterations, 200);
        assert_eq!(p.prior.variant, Variant::Proposed);
        assert_eq!(p.prior.alpha, 0.1);
        assert_eq!(p.prior.beta, 1e-16);
        assert_eq!(cfg.prior_for(Variant::Conventional).unwrap().alpha, 2.5);
    }

    #[test]
    fn overrides_take_precedence() {
        let mut cfg: Config = toml::from_str("[em]\nvariant = \"proposed\"\nalpha = 1.0\n").unwrap();
        cfg.apply(&Overrides {
            variant: Some("conventional".into()),
            iterations: Some(5),
            seed: Some(9),
            alpha: None,
            beta: Some(1e-10),
        });
        let p = cfg.pipeline(8_000).unwrap();
        assert_eq!(p.prior.variant, Variant::Conventional);
        assert_eq!(p.prior.alpha, 1.0);
        assert_eq!(p.prior.beta, 1e-10);
        assert_eq!(p.prior.n_iterations, 5);
        assert_eq!(p.ilrma.seed, 9);
        assert_eq!(cfg.scene().unwrap().seed, 9);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(toml::from_str::<Config>("[em]\nalpah = 1.0\n").is_err());
        let cfg: Config = toml::from_str("[em]\nvariant = \"other\"\n").unwrap();
        assert!(cfg.variant().is_err());
        let cfg: Config = toml::from_str("[em]\nalpha = -1.0\n").unwrap();
        assert!(cfg.pipeline(16_000).is_err());
        let cfg: Config = toml::from_str("[stft]\nwindow = \"hann\"\n").unwrap();
        assert!(cfg.frame_config(16_000).is_err());
    }
}
