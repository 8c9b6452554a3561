//! Declarative run configuration.
//!
//! A config file names a `profile` (`paper` or `toy`) that supplies every
//! default; the keys present in the file are merged over it. Unknown keys are
//! rejected and every embedded config is re-validated after loading.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio_repr::{AmplitudeTransform, StftParams};
use crate::codec::CodecConfig;
use crate::dataio::DataConfig;
use crate::network::ModelConfig;
use crate::schedule::ScheduleConfig;
use crate::training::{OptimizerConfig, TrainingConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Toy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AudioConfig {
    pub sample_rate: u32,
    pub hop: usize,
    pub window_len: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl AudioConfig {
    pub fn stft(&self) -> StftParams {
        StftParams { hop: self.hop, window_len: self.window_len }
    }

    pub fn amplitude(&self) -> AmplitudeTransform {
        AmplitudeTransform { alpha: self.alpha, beta: self.beta }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub audio: AudioConfig,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub training: TrainingConfig,
    pub data: DataConfig,
    pub codec: CodecConfig,
}

impl RunConfig {
    pub fn paper() -> Self {
        Self {
            profile: Profile::Paper,
            audio: AudioConfig { sample_rate: 44_100, hop: 512, window_len: 2048, alpha: 0.65, beta: 0.35 },
            schedule: ScheduleConfig::default(),
            model: ModelConfig::paper(),
            optimizer: OptimizerConfig::default(),
            training: TrainingConfig::default(),
            data: DataConfig::default(),
            codec: CodecConfig::default(),
        }
    }

    /// Small settings for tests and smoke runs: 608-sample chunks at 16 kHz.
    pub fn toy() -> Self {
        Self {
            profile: Profile::Toy,
            audio: AudioConfig { sample_rate: 16_000, hop: 32, window_len: 128, alpha: 0.65, beta: 0.35 },
            schedule: ScheduleConfig { total_iters: 2000, ..ScheduleConfig::default() },
            model: ModelConfig::toy(),
            optimizer: OptimizerConfig { lr0: 1e-3, ..OptimizerConfig::default() },
            training: TrainingConfig { batch_size: 4, ema_momentum: 0.99, checkpoint_every: 500, ..TrainingConfig::default() },
            data: DataConfig::default(),
            codec: CodecConfig::default(),
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self::paper(),
            Profile::Toy => Self::toy(),
        }
    }

    /// Parses a TOML document over its profile defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let profile = match file.get("profile") {
            None => Profile::Paper,
            Some(v) => Profile::deserialize(v.clone()).map_err(|e| Error::Config(format!("profile: {e}")))?,
        };
        let defaults = toml::Table::try_from(Self::for_profile(profile)).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = toml::Value::Table(defaults);
        merge(&mut merged, toml::Value::Table(file));
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Schema(format!("stored config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let stft = self.audio.stft();
        stft.validate()?;
        self.audio.amplitude().validate()?;
        if self.audio.sample_rate == 0 {
            return Err(Error::Config("audio.sample_rate must be positive".into()));
        }
        self.schedule.validate()?;
        self.model.validate()?;
        if self.model.freq_bins != stft.freq_bins() {
            return Err(Error::Config(format!(
                "model.freq_bins {} does not match window_len / 2 = {}",
                self.model.freq_bins,
                stft.freq_bins()
            )));
        }
        self.optimizer.validate()?;
        self.training.validate()?;
        self.data.validate()?;
        self.codec.validate()
    }
}

/// Recursively overlays `patch` onto `base`; tables merge, everything else
/// replaces.
fn merge(base: &mut toml::Value, patch: toml::Value) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
