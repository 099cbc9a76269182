//! Text decoders on top of a sequential feature map `[N, T, F]`: CTC with
//! best-path decoding, and an attention decoder with an LSTM cell. Decoder
//! parameters live under the `head.` prefix.

pub mod attention;
mod ctc;

pub use attention::AttentionDims;
pub use ctc::{argmax, ctc_collapse, ctc_greedy, ctc_loss, ctc_loss_var, min_frames};

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{self, Forward, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

pub const HEAD_PREFIX: &str = "head.";
const CTC: &str = "head.ctc";
const ATT: &str = "head.att";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecoderConfig {
    Ctc,
    Attention { hidden: usize, max_len: usize },
}

impl DecoderConfig {
    pub fn attention() -> Self {
        DecoderConfig::Attention {
            hidden: 256,
            max_len: 25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DecoderConfig::Attention { hidden: 0, .. } => Err(Error::Config("attention hidden size must be positive".into())),
            DecoderConfig::Attention { max_len: 0, .. } => Err(Error::Config("max_len must be at least 1".into())),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DecoderConfig::Ctc => "ctc",
            DecoderConfig::Attention { .. } => "attention",
        }
    }
}

/// Adds freshly initialized decoder weights for `symbols` charset symbols.
pub fn init_decoder(store: &mut ParamStore, cfg: &DecoderConfig, feature_dim: usize, symbols: usize, seed: u64) {
    let mut r = rng::stream(rng::mix(seed, 2), rng::purpose::INIT);
    match *cfg {
        DecoderConfig::Ctc => nn::init_linear(store, CTC, feature_dim, symbols + 1, &mut r),
        DecoderConfig::Attention { hidden, .. } => attention::init(
            store,
            ATT,
            AttentionDims {
                symbols,
                feature: feature_dim,
                hidden,
            },
            &mut r,
        ),
    }
}

fn dims(features: &Var<'_>, symbols: usize, hidden: usize) -> AttentionDims {
    AttentionDims {
        symbols,
        feature: features.shape()[2],
        hidden,
    }
}

/// Mean per-sample training loss.
pub struct DecoderLoss<'g> {
    pub loss: Var<'g>,
    /// Samples that contributed.
    pub used: usize,
    /// Samples whose target cannot be emitted by CTC in `T` frames.
    pub skipped: Vec<usize>,
}

pub fn decoder_loss<'g>(
    fw: &Forward<'g, '_>,
    cfg: &DecoderConfig,
    symbols: usize,
    features: Var<'g>,
    targets: &[Vec<usize>],
) -> DecoderLoss<'g> {
    let n = targets.len();
    match *cfg {
        DecoderConfig::Ctc => {
            let logp = nn::linear(fw, CTC, features).log_softmax();
            let (sum, skipped) = ctc_loss_var(logp, targets, symbols);
            let used = n - skipped.len();
            DecoderLoss {
                loss: sum.scale(1.0 / used.max(1) as f64),
                used,
                skipped,
            }
        }
        DecoderConfig::Attention { hidden, .. } => {
            let d = dims(&features, symbols, hidden);
            DecoderLoss {
                loss: attention::loss(fw, ATT, d, features, targets).scale(1.0 / n.max(1) as f64),
                used: n,
                skipped: Vec::new(),
            }
        }
    }
}

/// Greedy transcription ids for every sample.
pub fn decode<'g>(fw: &Forward<'g, '_>, cfg: &DecoderConfig, symbols: usize, features: Var<'g>) -> Vec<Vec<usize>> {
    match *cfg {
        DecoderConfig::Ctc => {
            let logits = nn::linear(fw, CTC, features).value();
            let (n, t, k) = (logits.dim(0), logits.dim(1), logits.dim(2));
            (0..n)
                .map(|i| {
                    let per = Tensor::new(vec![t, k], logits.data()[i * t * k..(i + 1) * t * k].to_vec());
                    ctc_greedy(&per, symbols)
                })
                .collect()
        }
        DecoderConfig::Attention { hidden, max_len } => {
            let d = dims(&features, symbols, hidden);
            attention::decode(fw, ATT, d, features, max_len)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::nn::Trainable;
    use rand::Rng;

    /// Plain gradient descent on the decoder alone, fitting fixed features.
    fn overfit(cfg: DecoderConfig) -> (ParamStore, Tensor, Vec<Vec<usize>>, Vec<f64>) {
        let symbols = 4;
        let mut r = rng::stream(11, 0);
        let feats = Tensor::from_fn(&[3, 8, 6], |_| r.random_range(-1.0..1.0));
        let targets = vec![vec![0, 1, 2], vec![3, 3], vec![2, 0]];
        let mut store = ParamStore::new();
        init_decoder(&mut store, &cfg, 6, symbols, 1);
        let mut losses = Vec::new();
        for _ in 0..400 {
            let g = Graph::new();
            let fw = Forward::new(&g, &store, Trainable::All, true);
            let l = decoder_loss(&fw, &cfg, symbols, g.constant(feats.clone()), &targets);
            losses.push(l.loss.item());
            let grads = g.backward(l.loss).named();
            for (name, gr) in grads {
                let p = store.get_mut(&name).unwrap();
                for (w, d) in p.data_mut().iter_mut().zip(gr.data()) {
                    *w -= 0.5 * d;
                }
            }
        }
        (store, feats, targets, losses)
    }

    #[test]
    fn ctc_overfits_fixed_features() {
        let cfg = DecoderConfig::Ctc;
        let (store, feats, targets, losses) = overfit(cfg);
        assert!(losses.last().unwrap() < &(0.2 * losses[0]), "{:?}", (losses[0], losses.last()));
        let g = Graph::new();
        let fw = Forward::inference(&g, &store);
        assert_eq!(decode(&fw, &cfg, 4, g.constant(feats)), targets);
    }

    #[test]
    fn attention_overfits_fixed_features() {
        let cfg = DecoderConfig::Attention { hidden: 16, max_len: 25 };
        let (store, feats, targets, losses) = overfit(cfg);
        assert!(losses.last().unwrap() < &(0.2 * losses[0]), "{:?}", (losses[0], losses.last()));
        let g = Graph::new();
        let fw = Forward::inference(&g, &store);
        assert_eq!(decode(&fw, &cfg, 4, g.constant(feats)), targets);
    }
}
