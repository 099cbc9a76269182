//! Experiment configuration: one point on every ablation axis plus the
//! optimizer, protocol and data locations.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::PipelineSpec;
use crate::data::Charset;
use crate::decoders::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::seqclr::{MappingChoice, DEFAULT_TAU};
use crate::training::{OptimizerSpec, Phase, ProtocolSpec};

/// Relative data paths are resolved against this directory when it is set.
pub const DATA_ROOT_ENV: &str = "SEQCLR_DATA_ROOT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub encoder: EncoderConfig,
    pub mapping: MappingChoice,
    pub tau: f64,
    pub pipeline: PipelineSpec,
    pub decoder: DecoderConfig,
    pub optimizer: OptimizerSpec,
    pub protocol: ProtocolSpec,
    pub seed: u64,
    pub charset: Charset,
    pub data: DataPaths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::full_scale(),
            mapping: MappingChoice::default(),
            tau: DEFAULT_TAU,
            pipeline: PipelineSpec::default(),
            decoder: DecoderConfig::attention(),
            optimizer: OptimizerSpec::default(),
            protocol: ProtocolSpec::pretrain(),
            seed: 0,
            charset: Charset::printable_ascii(),
            data: DataPaths::default(),
        }
    }
}

impl ExperimentConfig {
    /// Toy encoder and short runs for a single CPU core.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            decoder: DecoderConfig::Ctc,
            protocol: ProtocolSpec {
                iterations: 300,
                batch_size: 32,
                eval_every: 100,
                ..ProtocolSpec::pretrain()
            },
            charset: Charset::alphanumeric(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.mapping.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        self.pipeline.validate()?;
        self.decoder.validate()?;
        self.optimizer.validate()?;
        self.protocol.validate()
    }

    /// Parses and validates; parse errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Copy with the protocol switched to `phase`.
    pub fn for_phase(&self, phase: Phase) -> Self {
        let mut c = self.clone();
        c.protocol = self.protocol.for_phase(phase);
        c
    }
}

/// Resolves a relative data path against `SEQCLR_DATA_ROOT` when set.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) if path.is_relative() => Path::new(&root).join(path),
        _ => path.to_path_buf(),
    }
}
