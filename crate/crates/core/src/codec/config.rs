use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which signal the acoustic quantizer levels see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AcousticInput {
    /// The full latent, in parallel with the semantic VQ.
    #[default]
    Parallel,
    /// The residual left after the semantic VQ (ablation).
    SemanticResidual,
}

/// Which semantic tensor is aligned with the teacher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DistillTarget {
    /// Semantic VQ output with straight-through gradient.
    #[default]
    Quantized,
    /// Encoder output before quantization.
    PreQuantized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub sample_rate: u32,
    pub encoder_strides: Vec<usize>,
    pub decoder_strides: Vec<usize>,
    pub latent_dim: usize,
    /// Width of the first encoder conv; doubles after every downsampling block.
    pub encoder_channels: usize,
    /// Width of the first decoder conv; halves after every upsampling block.
    pub decoder_channels: usize,
    pub n_codebooks: usize,
    pub codebook_size: usize,
    pub acoustic_input: AcousticInput,
    pub distill_target: DistillTarget,
    /// Teacher embedding width.
    pub teacher_dim: usize,
    /// Unused steps after which a codebook entry is reseeded.
    pub dead_after: u32,
    pub kmeans_iters: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl CodecConfig {
    /// Desk-scale preset used by the tests.
    pub fn tiny() -> Self {
        Self {
            sample_rate: 16000,
            encoder_strides: vec![2, 2, 2],
            decoder_strides: vec![2, 2, 2],
            latent_dim: 32,
            encoder_channels: 4,
            decoder_channels: 32,
            n_codebooks: 4,
            codebook_size: 64,
            acoustic_input: AcousticInput::Parallel,
            distill_target: DistillTarget::Quantized,
            teacher_dim: 16,
            dead_after: 200,
            kmeans_iters: 20,
        }
    }

    /// Reference 24 kHz configuration (constructible, not trained here).
    pub fn paper_24k() -> Self {
        Self {
            sample_rate: 24000,
            encoder_strides: vec![2, 4, 5, 6, 8],
            decoder_strides: vec![8, 6, 5, 4, 2],
            latent_dim: 1024,
            encoder_channels: 64,
            decoder_channels: 2048,
            n_codebooks: 8,
            codebook_size: 4096,
            teacher_dim: 1280,
            ..Self::tiny()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "paper-24k" => Ok(Self::paper_24k()),
            _ => Err(Error::Config(alloc::format!("unknown codec preset {name:?}"))),
        }
    }

    pub fn hop(&self) -> usize {
        self.encoder_strides.iter().product()
    }

    pub fn frame_rate(&self) -> f64 {
        frame_rate(self.sample_rate as f64, &self.encoder_strides)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.encoder_strides.is_empty() || self.encoder_strides.contains(&0) {
            return bad("encoder strides must be non-empty and positive".into());
        }
        if self.decoder_strides.len() != self.encoder_strides.len() {
            return bad("encoder and decoder need the same number of blocks".into());
        }
        let pd: usize = self.decoder_strides.iter().product();
        if pd != self.hop() {
            return bad(alloc::format!("stride products differ: encoder {} vs decoder {pd}", self.hop()));
        }
        if self.n_codebooks < 2 {
            return bad("need at least 2 codebooks (semantic + one acoustic level)".into());
        }
        if self.codebook_size < 2 || self.codebook_size >= u16::MAX as usize {
            return bad(alloc::format!("codebook size {} out of range", self.codebook_size));
        }
        if self.latent_dim == 0 || self.encoder_channels == 0 || self.teacher_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.decoder_channels >> self.decoder_strides.len() == 0 {
            return bad("decoder channels halve to zero".into());
        }
        Ok(())
    }
}

/// Latent frames per second.
pub fn frame_rate(sample_rate: f64, strides: &[usize]) -> f64 {
    sample_rate / strides.iter().product::<usize>() as f64
}

/// Token bitrate in bits per second.
pub fn bitrate(n_codebooks: usize, codebook_size: usize, frame_rate: f64) -> f64 {
    n_codebooks as f64 * num_traits::Float::log2(codebook_size as f64) * frame_rate
}

/// Weights of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub time: f64,
    pub mel: f64,
    pub adv: f64,
    pub feat: f64,
    pub commit: f64,
    pub distill: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { time: 0.0, mel: 15.0, adv: 1.0, feat: 2.0, commit: 1.0, distill: 0.1 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self { time: 0.0, mel: 0.0, adv: 0.0, feat: 0.0, commit: 0.0, distill: 0.0 }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.time, self.mel, self.adv, self.feat, self.commit, self.distill]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(alloc::format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelLossConfig {
    pub windows: Vec<usize>,
    pub n_mels: Vec<usize>,
}

impl Default for MelLossConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl MelLossConfig {
    pub fn tiny() -> Self {
        Self { windows: vec![32, 64, 128, 256], n_mels: vec![5, 10, 20, 40] }
    }

    pub fn paper() -> Self {
        Self { windows: vec![32, 64, 128, 256, 512, 1024, 2048], n_mels: vec![5, 10, 20, 40, 80, 160, 320] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.windows.is_empty() || self.windows.len() != self.n_mels.len() {
            return Err(Error::Config("mel windows and band counts must be non-empty and equal length".into()));
        }
        if self.windows.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("mel windows must be strictly increasing".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscConfig {
    pub periods: Vec<usize>,
    pub stft_windows: Vec<usize>,
    pub bands: Vec<f64>,
    pub channels: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl DiscConfig {
    pub fn tiny() -> Self {
        Self { periods: vec![2, 3], stft_windows: vec![256], bands: vec![0.0, 0.1, 0.25, 0.5, 0.75, 1.0], channels: 8 }
    }

    pub fn paper() -> Self {
        Self { periods: vec![2, 3, 5, 7, 11], stft_windows: vec![2048, 1024, 512], channels: 32, ..Self::tiny() }
    }

    pub fn count(&self) -> usize {
        self.periods.len() + self.stft_windows.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.count() == 0 || self.channels == 0 {
            return Err(Error::Config("need at least one discriminator".into()));
        }
        if self.bands.len() < 2 || self.bands[0] != 0.0 || *self.bands.last().unwrap() != 1.0 {
            return Err(Error::Config("band splits must run from 0 to 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_rates() {
        assert_eq!(frame_rate(24000.0, &[2, 4, 5, 6, 8]), 12.5);
        assert_eq!(frame_rate(24000.0, &[8, 6, 5, 4, 2]), 12.5);
        assert_eq!(frame_rate(16000.0, &[2, 2, 2, 2]), 1000.0);
        assert_eq!(CodecConfig::paper_24k().frame_rate(), 12.5);
    }

    #[test]
    fn bitrates() {
        assert_eq!(bitrate(8, 4096, 12.5), 1200.0);
        assert_eq!(bitrate(8, 1024, 75.0), 6000.0);
        assert_eq!(bitrate(1, 8192, 80.0), 1040.0);
    }

    #[test]
    fn presets_validate() {
        CodecConfig::tiny().validate().unwrap();
        CodecConfig::paper_24k().validate().unwrap();
        let mut c = CodecConfig::tiny();
        c.decoder_strides = vec![2, 2, 4];
        assert!(c.validate().is_err());
        c = CodecConfig::tiny();
        c.n_codebooks = 1;
        assert!(c.validate().is_err());
        assert!(MelLossConfig::paper().validate().is_ok());
        let w = LossWeights { mel: -1.0, ..Default::default() };
        assert!(w.validate().is_err());
    }
}
