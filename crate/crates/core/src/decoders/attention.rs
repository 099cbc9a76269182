use rand::Rng;

use crate::autograd::Var;
use crate::nn::{self, Forward, ParamStore};
use crate::tensor::Tensor;

use super::ctc::argmax;

/// Symbol ids `0..n` are charset symbols; `n` is end-of-word and `n + 1`
/// the start token (input side only).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionDims {
    pub symbols: usize,
    pub feature: usize,
    pub hidden: usize,
}

impl AttentionDims {
    pub fn eow(&self) -> usize {
        self.symbols
    }

    pub fn start(&self) -> usize {
        self.symbols + 1
    }

    /// Output classes: symbols plus end-of-word.
    pub fn classes(&self) -> usize {
        self.symbols + 1
    }

    /// One-hot width of the previous-symbol input: symbols, end-of-word, start.
    pub fn embedding(&self) -> usize {
        self.symbols + 2
    }
}

pub fn init(store: &mut ParamStore, prefix: &str, dims: AttentionDims, rng: &mut impl Rng) {
    let h = dims.hidden;
    let bound = 1.0 / (h as f64).sqrt();
    // energy: aᵀ tanh(W s + V f + b)
    store.insert(
        format!("{prefix}.w"),
        Tensor::from_fn(&[h, h], |_| rng.random_range(-bound..=bound)),
    );
    nn::init_linear(store, &format!("{prefix}.v"), dims.feature, h, rng);
    store.insert(
        format!("{prefix}.a"),
        Tensor::from_fn(&[h, 1], |_| rng.random_range(-bound..=bound)),
    );
    nn::init_lstm(store, &format!("{prefix}.cell"), dims.feature + dims.embedding(), h, rng);
    nn::init_linear(store, &format!("{prefix}.out"), h, dims.classes(), rng);
}

/// Per-sequence state carried between decoding steps.
pub struct Context<'g> {
    features: Var<'g>,
    /// `V f_t + b`, computed once per sequence.
    keys: Var<'g>,
}

pub fn context<'g>(fw: &Forward<'g, '_>, prefix: &str, features: Var<'g>) -> Context<'g> {
    Context {
        features,
        keys: nn::linear(fw, &format!("{prefix}.v"), features),
    }
}

fn one_hot(ids: &[usize], width: usize) -> Tensor {
    Tensor::from_fn(&[ids.len(), width], |i| if ids[i / width] == i % width { 1.0 } else { 0.0 })
}

/// One decoding step. Returns output logits `[N, classes]`, the attention
/// weights `[N, T]` and the new `(h, c)`.
pub fn step<'g>(
    fw: &Forward<'g, '_>,
    prefix: &str,
    dims: AttentionDims,
    ctx: &Context<'g>,
    state: (Var<'g>, Var<'g>),
    prev: &[usize],
) -> (Var<'g>, Var<'g>, (Var<'g>, Var<'g>)) {
    let s = ctx.features.shape();
    let (n, t, f) = (s[0], s[1], s[2]);
    let h = dims.hidden;
    let query = state.0.matmul(fw.p(&format!("{prefix}.w")));
    let energy = ctx
        .keys
        .add_bcast_mid(query)
        .tanh()
        .reshape(&[n * t, h])
        .matmul(fw.p(&format!("{prefix}.a")))
        .reshape(&[n, t]);
    let alpha = energy.softmax();
    let glimpse = alpha.reshape(&[n, 1, t]).bmm(ctx.features).reshape(&[n, f]);
    let embed = fw.graph.constant(one_hot(prev, dims.embedding()));
    let input = Var::cat(&[glimpse, embed], 1);
    let xw = input
        .matmul(fw.p(&format!("{prefix}.cell.w_ih")))
        .add_bias(fw.p(&format!("{prefix}.cell.bias")));
    let state = nn::lstm_step(fw, &format!("{prefix}.cell"), xw, state);
    let logits = nn::linear(fw, &format!("{prefix}.out"), state.0);
    (logits, alpha, state)
}

fn zero_state<'g>(fw: &Forward<'g, '_>, n: usize, h: usize) -> (Var<'g>, Var<'g>) {
    let z = fw.graph.constant(Tensor::zeros(&[n, h]));
    (z, z)
}

/// Teacher-forced negative log-likelihood of every target followed by
/// end-of-word, summed over steps and over the batch.
pub fn loss<'g>(
    fw: &Forward<'g, '_>,
    prefix: &str,
    dims: AttentionDims,
    features: Var<'g>,
    targets: &[Vec<usize>],
) -> Var<'g> {
    let n = features.shape()[0];
    assert_eq!(targets.len(), n, "one target per sample");
    let steps = targets.iter().map(Vec::len).max().unwrap_or(0) + 1;
    let ctx = context(fw, prefix, features);
    let mut state = zero_state(fw, n, dims.hidden);
    let mut prev = vec![dims.start(); n];
    let mut total: Option<Var> = None;
    for s in 0..steps {
        let (logits, _, next) = step(fw, prefix, dims, &ctx, state, &prev);
        state = next;
        let gold: Vec<usize> = targets
            .iter()
            .map(|t| if s < t.len() { t[s] } else { dims.eow() })
            .collect();
        let mask = Tensor::new(vec![n], targets.iter().map(|t| if s <= t.len() { 1.0 } else { 0.0 }).collect());
        let nll = logits
            .log_softmax()
            .pick(&gold)
            .mul(fw.graph.constant(mask))
            .sum()
            .neg();
        total = Some(match total {
            Some(acc) => acc.add(nll),
            None => nll,
        });
        prev = gold;
    }
    total.expect("at least one step")
}

/// Greedy decoding from the start token until end-of-word or `max_len` symbols.
pub fn decode<'g>(
    fw: &Forward<'g, '_>,
    prefix: &str,
    dims: AttentionDims,
    features: Var<'g>,
    max_len: usize,
) -> Vec<Vec<usize>> {
    let n = features.shape()[0];
    let ctx = context(fw, prefix, features);
    let mut state = zero_state(fw, n, dims.hidden);
    let mut prev = vec![dims.start(); n];
    let mut out = vec![Vec::new(); n];
    let mut done = vec![false; n];
    for _ in 0..max_len {
        let (logits, _, next) = step(fw, prefix, dims, &ctx, state, &prev);
        state = next;
        let v = logits.value();
        for i in 0..n {
            let best = argmax(v.row(i));
            prev[i] = best;
            if done[i] {
                continue;
            }
            if best == dims.eow() {
                done[i] = true;
            } else {
                out[i].push(best);
            }
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    out
}
