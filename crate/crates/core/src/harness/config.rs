use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ablation::AblationConfig;
use super::optim::AdamConfig;
use crate::backbone::NetConfig;
use crate::codec::CodecSpec;
use crate::error::{Error, Result};
use crate::flows::{Conditioning, FlowVariant, TimeSchedule};
use crate::scenes::{SceneConfig, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub params: u64,
    pub data_order: u64,
    pub noise: u64,
}

impl Seeds {
    /// All three streams from one replicate seed.
    pub fn from_replicate(seed: u64) -> Self {
        Self {
            params: seed,
            data_order: seed.wrapping_add(0x5eed_0001),
            noise: seed.wrapping_add(0x5eed_0002),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: FlowVariant,
    pub schedule: TimeSchedule,
    pub net: NetConfig,
    pub codec: CodecSpec,
    pub task: Task,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub seeds: Seeds,
    /// Loss is recorded every `log_every` steps (0 disables).
    pub log_every: u64,
    /// Intermediate checkpoints every `checkpoint_every` steps (0 disables).
    pub checkpoint_every: u64,
    /// Fraction of the training split used, taken as a prefix.
    pub data_fraction: f64,
    pub dataset: Option<PathBuf>,
}

impl TrainConfig {
    /// Config for `variant` with a consistent schedule and network input.
    pub fn for_variant(variant: FlowVariant, train_steps: usize) -> Result<Self> {
        let schedule = match variant.required_train_steps() {
            Some(t) => TimeSchedule::new(t)?,
            None => TimeSchedule::capped(train_steps)?,
        };
        Ok(Self {
            variant,
            schedule,
            net: NetConfig {
                conditioned: variant.conditioning() == Conditioning::ImageConcat,
                ..NetConfig::default()
            },
            codec: CodecSpec::IDENTITY,
            task: Task::Depth,
            optimizer: AdamConfig::default(),
            batch_size: 4,
            steps: 1000,
            seeds: Seeds::from_replicate(0),
            log_every: 10,
            checkpoint_every: 0,
            data_fraction: 1.0,
            dataset: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.variant.check_schedule(&self.schedule)?;
        self.net.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let wants = self.variant.conditioning() == Conditioning::ImageConcat;
        if self.net.conditioned != wants {
            return Err(Error::Config(format!(
                "{} needs net.conditioned = {wants}",
                self.variant.label()
            )));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "data_fraction must be in (0, 1], got {}",
                self.data_fraction
            )));
        }
        Ok(())
    }
}

/// Everything the CLI reads from one config file. Sections that a command
/// does not use may be omitted.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scenes: Option<SceneConfig>,
    pub train: Option<TrainConfig>,
    pub sharpener: Option<TrainConfig>,
    pub infer: Option<InferConfig>,
    pub ablation: Option<AblationConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferConfig {
    /// Euler steps of the refinement stage; 0 skips it.
    pub sharpener_steps: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            sharpener_steps: 10,
        }
    }
}

impl RunConfig {
    /// Parses TOML, or JSON when the file ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        if path.extension().is_some_and(|e| e == "json") {
            Ok(serde_json::from_str(&text)?)
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_defaults_are_consistent() {
        for v in [
            FlowVariant::STOCHASTIC_DA,
            FlowVariant::DETERMINISTIC_DA,
            FlowVariant::CORE_PREDICTOR,
            FlowVariant::SHARPENER,
        ] {
            TrainConfig::for_variant(v, 50).unwrap().validate().unwrap();
        }
        let sharp = TrainConfig::for_variant(FlowVariant::SHARPENER, 50).unwrap();
        assert_eq!(sharp.schedule.train_steps, 10);
        let mut bad = TrainConfig::for_variant(FlowVariant::STOCHASTIC_DA, 50).unwrap();
        bad.net.conditioned = false;
        assert!(bad.validate().is_err());
        bad = TrainConfig::for_variant(FlowVariant::CORE_PREDICTOR, 1).unwrap();
        bad.batch_size = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig {
            train: Some(TrainConfig::for_variant(FlowVariant::CORE_PREDICTOR, 1).unwrap()),
            scenes: Some(SceneConfig::default()),
            ..RunConfig::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
