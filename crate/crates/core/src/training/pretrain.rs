use std::path::Path;

use super::checkpoint::{Checkpoint, RngState};
use super::optimizer::{step_optimizer, OptimizerState};
use super::{Phase, RunLog, StepRecord};
use crate::augment::augment_pair_with;
use crate::autograd::Graph;
use crate::config::ExperimentConfig;
use crate::data::{stack, BatchSampler, Dataset};
use crate::encoder::{self, ProjectionHead, PROJECTION_PREFIX};
use crate::error::{Error, Result};
use crate::nn::{apply_bn_updates, Forward, Trainable};
use crate::rng;
use crate::seqclr::{contrastive_loss_var, MappingChoice};

/// Per-term loss of a model that cannot tell instances apart: `log(2M − 1)`
/// for `M` aligned pairs.
pub fn chance_level(pairs: usize) -> f64 {
    ((2 * pairs - 1) as f64).ln()
}

pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: RunLog,
}

fn save_if(dir: Option<&Path>, name: &str, ck: &Checkpoint, log: &mut RunLog) -> Result<()> {
    if let Some(dir) = dir {
        let path = dir.join(name);
        ck.save(&path)?;
        log.note(format!("wrote {}", path.display()));
    }
    Ok(())
}

/// Contrastive pretraining on images only. The dataset's labels, if any,
/// are never read. With `out_dir`, checkpoints are written at the schedule
/// milestones and a diagnostic checkpoint when the loss diverges.
pub fn pretrain(
    cfg: &ExperimentConfig,
    data: &Dataset,
    resume: Option<Checkpoint>,
    out_dir: Option<&Path>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    cfg.protocol.require_phase(Phase::Pretrain)?;
    if data.is_empty() {
        return Err(Error::Argument("pretraining needs at least one image".into()));
    }
    if data.channels() != cfg.encoder.input_channels {
        return Err(Error::Config(format!(
            "dataset has {} channel(s), encoder expects {}",
            data.channels(),
            cfg.encoder.input_channels
        )));
    }
    let total = cfg.protocol.iterations;
    let mut ck = match resume {
        Some(ck) => {
            ck.require_encoder(&cfg.encoder)?;
            let has_head = ck.params.names().any(|n| n.starts_with(PROJECTION_PREFIX));
            if has_head != (cfg.encoder.projection_head != ProjectionHead::None) {
                return Err(Error::Incompatible("checkpoint projection head does not match the config".into()));
            }
            if ck.rng.seed != cfg.seed || ck.total_iterations != total || ck.decoder.is_some() {
                return Err(Error::Incompatible(format!(
                    "cannot resume: checkpoint is seed {} of a {}-iteration run, config is seed {} of {}",
                    ck.rng.seed, ck.total_iterations, cfg.seed, total
                )));
            }
            ck
        }
        None => {
            let mut ck = Checkpoint::untrained(&cfg.encoder, cfg.seed)?;
            encoder::init_projection(&mut ck.params, &cfg.encoder, cfg.seed);
            ck.optimizer = cfg.optimizer.clone();
            ck.total_iterations = total;
            ck
        }
    };
    let mut log = RunLog::new(Phase::Pretrain, cfg, ck.encoder_digest());

    let mut batch = cfg.protocol.batch_size.min(data.len());
    if cfg.mapping == MappingChoice::FrameToInstance && batch > cfg.protocol.frame_batch_cap {
        log.note(format!(
            "frame_to_instance: batch size reduced from {batch} to {}",
            cfg.protocol.frame_batch_cap
        ));
        batch = cfg.protocol.frame_batch_cap;
    }
    let sampler = BatchSampler::new(data.len(), batch, cfg.seed)?;
    let frames = cfg.encoder.frames(data.image(0).width())?;
    log.chance_level = Some(chance_level(batch * cfg.mapping.instance_count(frames)));
    if ck.iteration > 0 {
        log.note(format!("resuming at iteration {}", ck.iteration));
    }
    let milestones = cfg.optimizer.milestone_iterations(total);

    for it in ck.iteration..total {
        let idx = sampler.step(it);
        let step_seed = rng::mix(cfg.seed, it as u64);
        let pairs: Vec<_> = idx
            .iter()
            .map(|&i| augment_pair_with(&cfg.pipeline, data.image(i), step_seed, i))
            .collect();
        let images = stack(pairs.iter().map(|p| &p.view_a).chain(pairs.iter().map(|p| &p.view_b)));

        let g = Graph::new();
        let fw = Forward::new(&g, &ck.params, Trainable::All, true);
        let r = encoder::encode(&fw, &cfg.encoder, g.constant(images))?;
        let z = crate::seqclr::map_instances_var(encoder::project(&fw, &cfg.encoder, r), cfg.mapping)?;
        let m = z.shape()[0] / 2;
        let sum = contrastive_loss_var(z.narrow(0, 0, m), z.narrow(0, m, m), cfg.tau)?;
        let loss = sum.scale(1.0 / (2 * m) as f64);
        let value = loss.item();

        let diverged = |msg: String, ck: &Checkpoint, log: &mut RunLog| -> Result<PretrainOutcome> {
            save_if(out_dir, "diverged.ckpt", ck, log)?;
            Err(Error::Divergence { iteration: it, message: msg })
        };
        if !value.is_finite() {
            return diverged(format!("loss is {value}"), &ck, &mut log);
        }
        let grads = g.backward(loss).named();
        let bn = fw.take_bn_updates();
        drop(fw);
        let mut next = ck.params.clone();
        let mut state: OptimizerState = ck.opt_state.clone();
        let info = match step_optimizer(&mut next, grads, &cfg.optimizer, &mut state, it, total) {
            Ok(info) => info,
            Err(e) => return diverged(e.to_string(), &ck, &mut log),
        };
        apply_bn_updates(&mut next, bn);
        ck.params = next;
        ck.opt_state = state;
        ck.iteration = it + 1;
        ck.rng = RngState {
            seed: cfg.seed,
            position: ck.iteration as u64,
        };
        log.steps.push(StepRecord {
            iteration: it,
            loss: value,
            lr: info.lr,
            grad_norm: info.grad_norm,
        });
        if it % 25 == 0 || it + 1 == total {
            log::info!("pretrain step {it}/{total}: loss {value:.4} lr {:.3} |g| {:.3}", info.lr, info.grad_norm);
        }
        if milestones.contains(&ck.iteration) && ck.iteration < total {
            save_if(out_dir, &format!("milestone-{}.ckpt", ck.iteration), &ck, &mut log)?;
        }
    }
    log.encoder_digest_after = ck.encoder_digest();
    Ok(PretrainOutcome { checkpoint: ck, log })
}
