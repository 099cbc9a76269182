use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, RngState};
use super::optimizer::{step_optimizer, OptimizerState};
use super::{Phase, RunLog, StepRecord, ValidationRecord};
use crate::augment::{augment_one, PipelineSpec};
use crate::autograd::{Graph, Var};
use crate::config::ExperimentConfig;
use crate::data::{split_validation, stack, subset_labels, BatchSampler, Charset, Dataset, Manifest, SubsetRecord};
use crate::decoders::{self, DecoderConfig, HEAD_PREFIX};
use crate::encoder::{self, EncoderConfig, ENCODER_PREFIX, PROJECTION_PREFIX};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::nn::{apply_bn_updates, Forward, ParamStore, Trainable};
use crate::rng;
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 64;

/// Metrics on held-out data plus what is needed to reproduce the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    #[serde(flatten)]
    pub metrics: MetricsReport,
    pub phase: Phase,
    pub decoder: DecoderConfig,
    pub seed: u64,
    pub label_fraction: f64,
    /// Digest of the drawn label subset.
    pub subset_digest: Option<String>,
    pub train_samples: usize,
    pub validation_samples: usize,
    /// `test` or `validation`.
    pub evaluated_on: String,
    pub best_iteration: usize,
    /// `None` without a validation split.
    pub best_validation_acc: Option<f64>,
    /// Digest of the starting encoder; `None` for a randomly initialized one.
    pub encoder_source: Option<String>,
    pub encoder_digest_before: String,
    pub encoder_digest_after: String,
}

pub struct SupervisedOutcome {
    pub report: ProtocolReport,
    /// Encoder plus the trained decoder.
    pub checkpoint: Checkpoint,
    pub log: RunLog,
    /// The drawn label subset when fine-tuning.
    pub subset: Option<SubsetRecord>,
}

/// Encoder output for every image, inference mode, `[N, T, F]`.
fn encode_all(params: &ParamStore, cfg: &EncoderConfig, data: &Dataset, idx: &[usize]) -> Result<Tensor> {
    let mut parts = Vec::new();
    for chunk in idx.chunks(EVAL_BATCH) {
        parts.push(encoder::features(params, cfg, &stack(chunk.iter().map(|&i| data.image(i))))?);
    }
    let (t, f) = (parts[0].dim(1), parts[0].dim(2));
    let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
    Ok(Tensor::new(vec![idx.len(), t, f], data))
}

fn gather(features: &Tensor, rows: &[usize]) -> Tensor {
    let per = features.numel() / features.dim(0);
    let mut out = Vec::with_capacity(rows.len() * per);
    for &r in rows {
        out.extend_from_slice(&features.data()[r * per..(r + 1) * per]);
    }
    let mut shape = features.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(shape, out)
}

fn decode_features(params: &ParamStore, dec: &DecoderConfig, symbols: usize, feats: Tensor) -> Vec<Vec<usize>> {
    let g = Graph::new();
    let fw = Forward::inference(&g, params);
    decoders::decode(&fw, dec, symbols, g.constant(feats))
}

/// Greedy transcriptions for every image of `data`.
pub fn predict(
    params: &ParamStore,
    enc: &EncoderConfig,
    dec: &DecoderConfig,
    charset: &Charset,
    data: &Dataset,
) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let feats = encode_all(params, enc, data, chunk)?;
        out.extend(
            decode_features(params, dec, charset.len(), feats)
                .iter()
                .map(|ids| charset.decode(ids)),
        );
    }
    Ok(out)
}

fn references(data: &Dataset) -> Result<Vec<String>> {
    data.texts()
        .map(<[String]>::to_vec)
        .ok_or_else(|| Error::Argument("evaluation needs a labeled dataset".into()))
}

/// Predictions and metrics of a checkpoint that carries a decoder.
pub fn evaluate_checkpoint(ck: &Checkpoint, data: &Dataset) -> Result<(Vec<String>, MetricsReport)> {
    let (Some(dec), Some(charset)) = (&ck.decoder, &ck.charset) else {
        return Err(Error::Incompatible("checkpoint has no trained decoder".into()));
    };
    let preds = predict(&ck.params, &ck.encoder, dec, charset, data)?;
    let report = evaluate(&preds, &references(data)?, false)?;
    Ok((preds, report))
}

struct Trained {
    params: ParamStore,
    best_iteration: usize,
    best_acc: f64,
}

/// Decoder training with model selection on `val`. When `freeze` is set only
/// `head.` parameters change and the encoder runs in inference mode.
fn train_supervised(
    cfg: &ExperimentConfig,
    mut params: ParamStore,
    train: &Dataset,
    val: &Dataset,
    freeze: bool,
    log: &mut RunLog,
) -> Result<Trained> {
    let labels = train
        .labels()
        .ok_or_else(|| Error::Argument("supervised training needs labels".into()))?;
    let symbols = cfg.charset.len();
    let p = &cfg.protocol;
    let total = p.iterations;
    let light = PipelineSpec::light();
    let trainable = if freeze {
        Trainable::Prefixes(vec![HEAD_PREFIX.to_string()])
    } else {
        Trainable::All
    };
    // a frozen encoder without augmentation sees every image once
    let cached = if freeze && !p.augment {
        let all: Vec<usize> = (0..train.len()).collect();
        Some(encode_all(&params, &cfg.encoder, train, &all)?)
    } else {
        None
    };
    let val_all: Vec<usize> = (0..val.len()).collect();
    let val_cache = if freeze && !val.is_empty() {
        Some(encode_all(&params, &cfg.encoder, val, &val_all)?)
    } else {
        None
    };
    let val_refs = if val.is_empty() { Vec::new() } else { references(val)? };

    let validate = |params: &ParamStore| -> Result<Option<MetricsReport>> {
        if val.is_empty() {
            return Ok(None);
        }
        let preds = match &val_cache {
            Some(f) => decode_features(params, &cfg.decoder, symbols, f.clone())
                .iter()
                .map(|ids| cfg.charset.decode(ids))
                .collect(),
            None => predict(params, &cfg.encoder, &cfg.decoder, &cfg.charset, val)?,
        };
        Ok(Some(evaluate(&preds, &val_refs, false)?))
    };

    let sampler = BatchSampler::new(train.len(), p.batch_size.min(train.len()), rng::mix(cfg.seed, 7))?;
    let mut state = OptimizerState::default();
    let mut best = Trained {
        params: params.clone(),
        best_iteration: 0,
        best_acc: f64::NEG_INFINITY,
    };
    let mut skipped_total = 0;
    for it in 0..total {
        let idx = sampler.step(it);
        let targets: Vec<Vec<usize>> = idx.iter().map(|&i| labels[i].clone()).collect();
        let g = Graph::new();
        let fw = Forward::new(&g, &params, trainable.clone(), !freeze);
        let feats: Var = match &cached {
            Some(c) => g.constant(gather(c, &idx)),
            None => {
                let step_seed = rng::mix(cfg.seed, it as u64);
                let images = if p.augment {
                    let views: Vec<_> = idx
                        .iter()
                        .map(|&i| augment_one(&light, train.image(i), step_seed, i))
                        .collect();
                    stack(views.iter())
                } else {
                    stack(idx.iter().map(|&i| train.image(i)))
                };
                encoder::encode(&fw, &cfg.encoder, g.constant(images))?
            }
        };
        let dl = decoders::decoder_loss(&fw, &cfg.decoder, symbols, feats, &targets);
        skipped_total += dl.skipped.len();
        if it == 0 && g.param_names().iter().any(|n| n.starts_with(PROJECTION_PREFIX)) {
            return Err(Error::Incompatible("projection head reached the evaluation graph".into()));
        }
        if dl.used == 0 {
            continue;
        }
        let value = dl.loss.item();
        if !value.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                message: format!("loss is {value}"),
            });
        }
        let grads = g.backward(dl.loss).named();
        if freeze && grads.keys().any(|k| !k.starts_with(HEAD_PREFIX)) {
            return Err(Error::Config("frozen encoder received gradients".into()));
        }
        let bn = fw.take_bn_updates();
        drop(fw);
        if !freeze {
            apply_bn_updates(&mut params, bn);
        }
        let info = step_optimizer(&mut params, grads, &cfg.optimizer, &mut state, it, total)?;
        log.steps.push(StepRecord {
            iteration: it,
            loss: value,
            lr: info.lr,
            grad_norm: info.grad_norm,
        });
        let last = it + 1 == total;
        if last || (p.eval_every > 0 && (it + 1) % p.eval_every == 0) {
            match validate(&params)? {
                Some(r) => {
                    log::info!("step {}: loss {value:.4} val acc {:.4}", it + 1, r.acc);
                    log.validation.push(ValidationRecord {
                        iteration: it + 1,
                        acc: r.acc,
                        ed1: r.ed1,
                    });
                    if r.acc > best.best_acc {
                        best = Trained {
                            params: params.clone(),
                            best_iteration: it + 1,
                            best_acc: r.acc,
                        };
                    }
                }
                None if last => {
                    best = Trained {
                        params: params.clone(),
                        best_iteration: it + 1,
                        best_acc: f64::NAN,
                    }
                }
                None => {}
            }
        }
    }
    if skipped_total > 0 {
        log.note(format!("{skipped_total} sample draws skipped: target longer than the CTC frame budget"));
    }
    Ok(best)
}

struct Split {
    train: Dataset,
    val: Dataset,
}

fn split(cfg: &ExperimentConfig, data: &Dataset) -> Split {
    let (tr, va) = split_validation(data.len(), cfg.protocol.validation_fraction, rng::mix(cfg.seed, 8));
    if cfg.protocol.validation_fraction == 0.0 {
        return Split {
            train: data.clone(),
            val: data.subset(&[]),
        };
    }
    Split {
        train: data.subset(&tr),
        val: data.subset(&va),
    }
}

fn run(
    cfg: &ExperimentConfig,
    mut params: ParamStore,
    encoder_source: Option<String>,
    data: &Dataset,
    test: Option<&Dataset>,
    subset_digest: Option<String>,
) -> Result<SupervisedOutcome> {
    let phase = cfg.protocol.phase;
    let freeze = cfg.protocol.freeze_encoder;
    if data.channels() != cfg.encoder.input_channels {
        return Err(Error::Config(format!(
            "dataset has {} channel(s), encoder expects {}",
            data.channels(),
            cfg.encoder.input_channels
        )));
    }
    params.remove_prefix(PROJECTION_PREFIX);
    params.remove_prefix(HEAD_PREFIX);
    decoders::init_decoder(
        &mut params,
        &cfg.decoder,
        cfg.encoder.output_dim(),
        cfg.charset.len(),
        cfg.seed,
    );
    let before = params.digest(ENCODER_PREFIX);
    let mut log = RunLog::new(phase, cfg, before.clone());
    let parts = split(cfg, data);
    log.note(format!(
        "{} training and {} validation samples",
        parts.train.len(),
        parts.val.len()
    ));
    let trained = train_supervised(cfg, params, &parts.train, &parts.val, freeze, &mut log)?;
    let after = trained.params.digest(ENCODER_PREFIX);
    log.encoder_digest_after = after.clone();
    if freeze {
        if before != after {
            return Err(Error::Config(format!("frozen encoder changed: {before} -> {after}")));
        }
        log.note(format!("encoder digest unchanged: {after}"));
    }

    let checkpoint = Checkpoint {
        encoder: cfg.encoder.clone(),
        optimizer: cfg.optimizer.clone(),
        iteration: cfg.protocol.iterations,
        total_iterations: cfg.protocol.iterations,
        rng: RngState {
            seed: cfg.seed,
            position: cfg.protocol.iterations as u64,
        },
        charset: Some(cfg.charset.clone()),
        decoder: Some(cfg.decoder),
        params: trained.params,
        opt_state: OptimizerState::default(),
    };
    let (eval_set, evaluated_on) = match test {
        Some(t) => (t, "test"),
        None if !parts.val.is_empty() => (&parts.val, "validation"),
        None => (&parts.train, "train"),
    };
    let (_, metrics) = evaluate_checkpoint(&checkpoint, eval_set)?;
    log.metrics = Some(metrics.clone());
    let report = ProtocolReport {
        metrics,
        phase,
        decoder: cfg.decoder,
        seed: cfg.seed,
        label_fraction: if phase == Phase::Finetune { cfg.protocol.label_fraction } else { 1.0 },
        subset_digest,
        train_samples: parts.train.len(),
        validation_samples: parts.val.len(),
        evaluated_on: evaluated_on.to_string(),
        best_iteration: trained.best_iteration,
        best_validation_acc: trained.best_acc.is_finite().then_some(trained.best_acc),
        encoder_source,
        encoder_digest_before: before,
        encoder_digest_after: after,
    };
    Ok(SupervisedOutcome {
        report,
        checkpoint,
        log,
        subset: None,
    })
}

/// Trains a decoder on top of a frozen pretrained encoder. The projection
/// head is dropped and encoder weights stay bit-identical.
pub fn decoder_eval(
    cfg: &ExperimentConfig,
    encoder_ckpt: &Checkpoint,
    data: &Dataset,
    test: Option<&Dataset>,
) -> Result<SupervisedOutcome> {
    cfg.validate()?;
    cfg.protocol.require_phase(Phase::DecoderEval)?;
    encoder_ckpt.require_encoder(&cfg.encoder)?;
    let source = encoder_ckpt.encoder_digest();
    run(cfg, encoder_ckpt.encoder_only().params, Some(source), data, test, None)
}

/// Trains encoder and decoder on a seeded `label_fraction` of `manifest`.
/// `data` must be `manifest` loaded in order. Without a checkpoint the
/// encoder starts from random weights (the supervised baseline).
pub fn finetune(
    cfg: &ExperimentConfig,
    encoder_ckpt: Option<&Checkpoint>,
    manifest: &Manifest,
    data: &Dataset,
    test: Option<&Dataset>,
) -> Result<SupervisedOutcome> {
    cfg.validate()?;
    cfg.protocol.require_phase(Phase::Finetune)?;
    if manifest.len() != data.len() {
        return Err(Error::Argument(format!(
            "manifest has {} entries but the dataset has {}",
            manifest.len(),
            data.len()
        )));
    }
    let (params, source) = match encoder_ckpt {
        Some(ck) => {
            ck.require_encoder(&cfg.encoder)?;
            (ck.encoder_only().params, Some(ck.encoder_digest()))
        }
        None => (encoder::init_encoder(&cfg.encoder, cfg.seed)?, None),
    };
    let subset = subset_labels(manifest, cfg.protocol.label_fraction, cfg.seed)?;
    let part = data.subset(&subset.record.indices);
    let mut out = run(cfg, params, source, &part, test, Some(subset.record.digest.clone()))?;
    out.log.note(format!(
        "label fraction {} with seed {}: {} of {} samples, digest {}",
        subset.record.fraction,
        subset.record.seed,
        subset.record.indices.len(),
        subset.record.total,
        subset.record.digest
    ));
    out.subset = Some(subset.record);
    Ok(out)
}
