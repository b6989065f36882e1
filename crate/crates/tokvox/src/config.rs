//! Versioned TOML run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tokvox_core::codec::train::CodecTrainConfig;
use tokvox_core::codec::{CodecConfig, DiscConfig, LossWeights, MelLossConfig};
use tokvox_core::lm::{LmConfig, LmTrainConfig};
use tokvox_core::mapi::MaskSite;

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub codec_steps: u64,
    pub lm_steps: u64,
    /// Aggregation-head steps after LM training; 0 leaves the head untrained.
    pub head_steps: u64,
    pub head_lr: f64,
    /// Clips per codec step; clips in one batch must share a length.
    pub batch_size: usize,
    /// Journal every n-th step (the last step is always written).
    pub log_every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapiConfig {
    /// Streams used when training the aggregation head.
    pub streams: usize,
    pub mask_prob: f64,
    pub seed: u64,
    pub site: MaskSite,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    /// NDJSON utterance manifest; relative paths inside resolve against its directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub preset: String,
    pub seed: u64,
    pub schedule: Schedule,
    pub data: DataPaths,
    pub codec: CodecConfig,
    pub loss_weights: LossWeights,
    pub mel: MelLossConfig,
    pub disc: DiscConfig,
    pub codec_train: CodecTrainConfig,
    pub lm: LmConfig,
    pub lm_train: LmTrainConfig,
    pub mapi: MapiConfig,
}

impl RunConfig {
    pub fn tiny() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            preset: "tiny".into(),
            seed: 0,
            schedule: Schedule { codec_steps: 200, lm_steps: 300, head_steps: 0, head_lr: 1e-2, batch_size: 4, log_every: 10 },
            data: DataPaths::default(),
            codec: CodecConfig::tiny(),
            loss_weights: LossWeights::default(),
            mel: MelLossConfig::tiny(),
            disc: DiscConfig::tiny(),
            codec_train: CodecTrainConfig::default(),
            lm: LmConfig::tiny(),
            lm_train: LmTrainConfig::tiny(),
            mapi: MapiConfig { streams: 4, mask_prob: 0.1, seed: 0, site: MaskSite::Attention },
        }
    }

    pub fn paper_24k() -> Self {
        let t = Self::tiny();
        Self {
            preset: "paper-24k".into(),
            schedule: Schedule { codec_steps: 900_000, lm_steps: 1_000_000, batch_size: 16, log_every: 100, ..t.schedule },
            codec: CodecConfig::paper_24k(),
            mel: MelLossConfig::paper(),
            disc: DiscConfig::paper(),
            lm: LmConfig::paper(),
            lm_train: LmTrainConfig::paper(),
            ..t
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "paper-24k" => Ok(Self::paper_24k()),
            _ => Err(Error::Config(format!("unknown preset {name:?} (expected \"tiny\" or \"paper-24k\")"))),
        }
    }

    /// Checks every sub-config, cross-config agreement and that referenced paths exist.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema version {} not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.codec.validate()?;
        self.loss_weights.validate()?;
        self.mel.validate()?;
        self.disc.validate()?;
        self.lm.validate()?;
        if self.lm.n_codebooks != self.codec.n_codebooks || self.lm.codebook_size != self.codec.codebook_size {
            return Err(Error::Config(format!(
                "LM expects {}x{} codes but the codec produces {}x{}",
                self.lm.n_codebooks, self.lm.codebook_size, self.codec.n_codebooks, self.codec.codebook_size
            )));
        }
        if self.schedule.batch_size == 0 || self.schedule.log_every == 0 {
            return Err(Error::Config("batch_size and log_every must be positive".into()));
        }
        if self.mapi.streams == 0 || !(0.0..=1.0).contains(&self.mapi.mask_prob) {
            return Err(Error::Config("mapi needs streams >= 1 and mask_prob in [0, 1]".into()));
        }
        if let Some(m) = &self.data.manifest {
            if !m.exists() {
                return Err(Error::Config(format!("manifest {} does not exist", m.display())));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses and validates; a relative manifest path resolves against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(Error::io(path))?;
        let mut cfg = Self::from_toml(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let (Some(m), Some(dir)) = (&cfg.data.manifest, path.parent()) {
            if m.is_relative() {
                cfg.data.manifest = Some(dir.join(m));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(Error::io(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_and_validate() {
        for name in ["tiny", "paper-24k"] {
            let c = RunConfig::preset(name).unwrap();
            c.validate().unwrap();
            assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        }
        assert!(RunConfig::preset("huge").is_err());
    }

    #[test]
    fn rejects_unknown_keys_and_versions() {
        let s = RunConfig::tiny().to_toml().unwrap();
        assert!(RunConfig::from_toml(&s.replace("schema_version = 1", "schema_version = 1\nbogus = 3")).is_err());
        let c = RunConfig::from_toml(&s.replace("schema_version = 1", "schema_version = 9")).unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("schema version"));
    }

    #[test]
    fn missing_manifest_fails_validation() {
        let mut c = RunConfig::tiny();
        c.data.manifest = Some("/nonexistent/manifest.jsonl".into());
        assert!(c.validate().is_err());
    }

    #[test]
    fn codec_and_lm_must_agree() {
        let mut c = RunConfig::tiny();
        c.lm.codebook_size = 32;
        assert!(c.validate().is_err());
    }
}
