//! The three protocols: contrastive pretraining, decoder evaluation on a
//! frozen encoder, and fine-tuning on a labeled fraction.

mod checkpoint;
mod optimizer;
mod pretrain;
mod supervised;

pub use checkpoint::{Checkpoint, RngState, MAGIC};
pub use optimizer::{clip_global_norm, step_optimizer, OptimizerKind, OptimizerSpec, OptimizerState, StepInfo};
pub use pretrain::{chance_level, pretrain, PretrainOutcome};
pub use supervised::{decoder_eval, evaluate_checkpoint, finetune, predict, ProtocolReport, SupervisedOutcome};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    DecoderEval,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSpec {
    pub phase: Phase,
    pub iterations: usize,
    pub batch_size: usize,
    /// Fraction of labeled data used for fine-tuning.
    pub label_fraction: f64,
    pub freeze_encoder: bool,
    /// Batch size ceiling when every frame is an instance.
    pub frame_batch_cap: usize,
    /// Held out from the training data for model selection.
    pub validation_fraction: f64,
    /// Validation interval in iterations; 0 validates only at the end.
    pub eval_every: usize,
    /// Light augmentation during supervised training.
    pub augment: bool,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl ProtocolSpec {
    pub fn pretrain() -> Self {
        Self {
            phase: Phase::Pretrain,
            iterations: 200_000,
            batch_size: 1024,
            label_fraction: 1.0,
            freeze_encoder: false,
            frame_batch_cap: 256,
            validation_fraction: 0.1,
            eval_every: 0,
            augment: false,
        }
    }

    pub fn decoder_eval() -> Self {
        Self {
            phase: Phase::DecoderEval,
            iterations: 50_000,
            batch_size: 256,
            freeze_encoder: true,
            eval_every: 2_000,
            augment: true,
            ..Self::pretrain()
        }
    }

    pub fn finetune(label_fraction: f64) -> Self {
        Self {
            phase: Phase::Finetune,
            label_fraction,
            freeze_encoder: false,
            ..Self::decoder_eval()
        }
    }

    /// Same settings with the phase switched, keeping the freeze rule.
    pub fn for_phase(&self, phase: Phase) -> Self {
        let mut p = self.clone();
        p.phase = phase;
        match phase {
            Phase::DecoderEval => p.freeze_encoder = true,
            Phase::Finetune | Phase::Pretrain => p.freeze_encoder = false,
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("protocol: {m}")));
        if self.iterations == 0 || self.batch_size == 0 || self.frame_batch_cap == 0 {
            return bad("iterations, batch_size and frame_batch_cap must be positive");
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return bad("label_fraction must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        if self.phase == Phase::DecoderEval && !self.freeze_encoder {
            return bad("decoder_eval requires freeze_encoder");
        }
        if self.phase != Phase::DecoderEval && self.freeze_encoder {
            return bad("only decoder_eval freezes the encoder");
        }
        Ok(())
    }

    pub(crate) fn require_phase(&self, phase: Phase) -> Result<()> {
        self.validate()?;
        if self.phase != phase {
            return Err(Error::Config(format!(
                "protocol phase is {:?} but {:?} was requested",
                self.phase, phase
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub iteration: usize,
    pub acc: f64,
    pub ed1: f64,
}

/// Per-run log, written as `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub phase: Phase,
    pub config: ExperimentConfig,
    pub steps: Vec<StepRecord>,
    pub validation: Vec<ValidationRecord>,
    pub notes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chance_level: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
    pub encoder_digest_before: String,
    pub encoder_digest_after: String,
}

impl RunLog {
    pub(crate) fn new(phase: Phase, config: &ExperimentConfig, digest: String) -> Self {
        Self {
            phase,
            config: config.clone(),
            steps: Vec::new(),
            validation: Vec::new(),
            notes: Vec::new(),
            chance_level: None,
            metrics: None,
            encoder_digest_before: digest.clone(),
            encoder_digest_after: digest,
        }
    }

    pub(crate) fn note(&mut self, msg: String) {
        log::info!("{msg}");
        self.notes.push(msg);
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// Mean of the last `k` step losses.
    pub fn final_loss(&self, k: usize) -> Option<f64> {
        let tail = &self.steps[self.steps.len().saturating_sub(k)..];
        (!tail.is_empty()).then(|| tail.iter().map(|s| s.loss).sum::<f64>() / tail.len() as f64)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
