use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub text_vocab: usize,
    pub n_codebooks: usize,
    /// Real codes per codebook; codebook 0 has one extra end-of-speech code.
    pub codebook_size: usize,
    pub semantic_layers: usize,
    pub semantic_dim: usize,
    pub semantic_heads: usize,
    pub acoustic_layers: usize,
    pub acoustic_dim: usize,
    pub acoustic_heads: usize,
    pub mlp_ratio: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl LmConfig {
    pub fn tiny() -> Self {
        Self {
            text_vocab: 256,
            n_codebooks: 4,
            codebook_size: 64,
            semantic_layers: 2,
            semantic_dim: 64,
            semantic_heads: 4,
            acoustic_layers: 2,
            acoustic_dim: 64,
            acoustic_heads: 4,
            mlp_ratio: 4,
            max_seq_len: 512,
            rope_base: 10000.0,
        }
    }

    pub fn paper() -> Self {
        Self {
            text_vocab: 50260,
            n_codebooks: 8,
            codebook_size: 4096,
            semantic_layers: 12,
            semantic_dim: 1536,
            semantic_heads: 16,
            acoustic_layers: 8,
            acoustic_dim: 1024,
            acoustic_heads: 16,
            max_seq_len: 4096,
            ..Self::tiny()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "paper-24k" => Ok(Self::paper()),
            _ => Err(Error::Config(alloc::format!("unknown LM preset {name:?}"))),
        }
    }

    /// Index of the end-of-speech code in codebook 0.
    pub fn eos(&self) -> usize {
        self.codebook_size
    }

    /// Output width of acoustic head `level`.
    pub fn level_size(&self, level: usize) -> usize {
        if level == 0 {
            self.codebook_size + 1
        } else {
            self.codebook_size
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.n_codebooks < 1 || self.codebook_size < 2 || self.text_vocab == 0 || self.text_vocab > 50260 {
            return bad("invalid vocabulary or codebook sizes");
        }
        for (d, h) in [(self.semantic_dim, self.semantic_heads), (self.acoustic_dim, self.acoustic_heads)] {
            if h == 0 || d % h != 0 || (d / h) % 2 != 0 {
                return bad("model dims must split into heads of even width");
            }
        }
        if self.semantic_layers == 0 || self.acoustic_layers == 0 || self.mlp_ratio == 0 {
            return bad("need at least one layer");
        }
        Ok(())
    }
}

/// Acoustic code sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub greedy: bool,
    pub temperature: f64,
    pub top_k: usize,
    pub max_frames: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { greedy: false, temperature: 0.8, top_k: 50, max_frames: 256, seed: 0 }
    }
}

impl SamplingConfig {
    pub fn greedy(max_frames: usize) -> Self {
        Self { greedy: true, max_frames, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.greedy && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("sampling temperature must be positive".into()));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top-k must be at least 1".into()));
        }
        Ok(())
    }
}
