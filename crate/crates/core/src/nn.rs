//! Parameter storage and the layer building blocks shared by the encoder and
//! the decoders.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{Conv2dSpec, Graph, Var};
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Named parameters plus non-trainable buffers (batch-norm running stats).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Rc<Tensor>>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Rc::new(value));
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|t| t.as_ref())
    }

    pub fn get_rc(&self, name: &str) -> Option<Rc<Tensor>> {
        self.params.get(name).cloned()
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(Rc::make_mut)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.buffers.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Removes every parameter and buffer whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|k, _| !k.starts_with(prefix));
        self.buffers.retain(|k, _| !k.starts_with(prefix));
    }

    /// Keeps only entries whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Copies every entry of `other` into `self`, replacing duplicates.
    pub fn merge(&mut self, other: &ParamStore) {
        for (k, v) in &other.params {
            self.params.insert(k.clone(), v.clone());
        }
        for (k, v) in &other.buffers {
            self.buffers.insert(k.clone(), v.clone());
        }
    }

    /// SHA-256 over names, shapes and the exact bits of every value whose
    /// name starts with `prefix`.
    pub fn digest(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        let entries = self
            .params
            .iter()
            .map(|(k, v)| (k, v.as_ref()))
            .chain(self.buffers.iter())
            .filter(|(k, _)| k.starts_with(prefix));
        for (name, t) in entries {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Which parameters receive gradients during a forward pass.
#[derive(Clone, Debug)]
pub enum Trainable {
    All,
    Nothing,
    Prefixes(Vec<String>),
}

impl Trainable {
    pub fn allows(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Nothing => false,
            Trainable::Prefixes(p) => p.iter().any(|p| name.starts_with(p)),
        }
    }
}

/// One forward pass: the graph being recorded, the parameters it reads, and
/// whether layers with train/eval behavior run in training mode.
pub struct Forward<'g, 'p> {
    pub graph: &'g Graph,
    params: &'p ParamStore,
    trainable: Trainable,
    training: bool,
    vars: RefCell<HashMap<String, Var<'g>>>,
    bn_updates: RefCell<Vec<(String, Vec<f64>, Vec<f64>)>>,
}

impl<'g, 'p> Forward<'g, 'p> {
    pub fn new(graph: &'g Graph, params: &'p ParamStore, trainable: Trainable, training: bool) -> Self {
        Self {
            graph,
            params,
            trainable,
            training,
            vars: RefCell::default(),
            bn_updates: RefCell::default(),
        }
    }

    /// Inference: nothing trainable, eval-mode layers.
    pub fn inference(graph: &'g Graph, params: &'p ParamStore) -> Self {
        Self::new(graph, params, Trainable::Nothing, false)
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// The graph leaf for parameter `name`; repeated lookups share one leaf.
    pub fn p(&self, name: &str) -> Var<'g> {
        if let Some(v) = self.vars.borrow().get(name) {
            return *v;
        }
        let value = self
            .params
            .get_rc(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not initialized"));
        let var = self.graph.param(name, value, self.trainable.allows(name));
        self.vars.borrow_mut().insert(name.to_string(), var);
        var
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.get(name).is_some()
    }

    /// Running-statistics updates collected from batch-norm layers.
    pub fn take_bn_updates(&self) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }
}

/// Folds batch statistics into the running buffers.
pub fn apply_bn_updates(store: &mut ParamStore, updates: Vec<(String, Vec<f64>, Vec<f64>)>) {
    for (prefix, mean, var) in updates {
        for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
            let buf = store
                .buffer_mut(&format!("{prefix}.{suffix}"))
                .expect("batch-norm buffer missing");
            for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

pub fn init_linear(store: &mut ParamStore, prefix: &str, input: usize, output: usize, rng: &mut impl Rng) {
    let bound = 1.0 / (input as f64).sqrt();
    store.insert(format!("{prefix}.weight"), uniform(rng, &[input, output], bound));
    store.insert(format!("{prefix}.bias"), uniform(rng, &[output], bound));
}

/// Affine map over the last axis of any-rank input.
pub fn linear<'g>(fw: &Forward<'g, '_>, prefix: &str, x: Var<'g>) -> Var<'g> {
    let w = fw.p(&format!("{prefix}.weight"));
    let b = fw.p(&format!("{prefix}.bias"));
    let shape = x.shape();
    let (input, output) = {
        let ws = w.shape();
        (ws[0], ws[1])
    };
    let rows = shape.iter().product::<usize>() / input;
    let y = x.reshape(&[rows, input]).matmul(w).add_bias(b);
    let mut out_shape = shape.clone();
    *out_shape.last_mut().unwrap() = output;
    y.reshape(&out_shape)
}

/// He-normal weights (fan-in, ReLU gain) and zero bias.
pub fn init_conv(
    store: &mut ParamStore,
    prefix: &str,
    input: usize,
    output: usize,
    kernel: (usize, usize),
    bias: bool,
    rng: &mut impl Rng,
) {
    let fan_in = input * kernel.0 * kernel.1;
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    store.insert(
        format!("{prefix}.weight"),
        Tensor::from_fn(&[output, input, kernel.0, kernel.1], |_| normal.sample(rng)),
    );
    if bias {
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[output]));
    }
}

pub fn conv2d<'g>(fw: &Forward<'g, '_>, prefix: &str, x: Var<'g>, spec: Conv2dSpec) -> Var<'g> {
    let bias_name = format!("{prefix}.bias");
    let bias = fw.has(&bias_name).then(|| fw.p(&bias_name));
    x.conv2d(fw.p(&format!("{prefix}.weight")), bias, spec)
}

pub fn init_batch_norm(store: &mut ParamStore, prefix: &str, channels: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::full(&[channels], 1.0));
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]));
    store.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]));
    store.insert_buffer(format!("{prefix}.running_var"), Tensor::full(&[channels], 1.0));
}

pub fn batch_norm<'g>(fw: &Forward<'g, '_>, prefix: &str, x: Var<'g>) -> Var<'g> {
    let gamma = fw.p(&format!("{prefix}.gamma"));
    let beta = fw.p(&format!("{prefix}.beta"));
    if fw.training() {
        let (y, stats) = x.batch_norm2d(gamma, beta, None, BN_EPS);
        if let Some((m, v)) = stats {
            fw.bn_updates.borrow_mut().push((prefix.to_string(), m, v));
        }
        y
    } else {
        let store = fw.params();
        let rm = store
            .buffer(&format!("{prefix}.running_mean"))
            .expect("running mean missing");
        let rv = store
            .buffer(&format!("{prefix}.running_var"))
            .expect("running var missing");
        x.batch_norm2d(gamma, beta, Some((rm.data(), rv.data())), BN_EPS).0
    }
}

pub fn init_lstm(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) {
    let bound = 1.0 / (hidden as f64).sqrt();
    store.insert(format!("{prefix}.w_ih"), uniform(rng, &[input, 4 * hidden], bound));
    store.insert(format!("{prefix}.w_hh"), uniform(rng, &[hidden, 4 * hidden], bound));
    store.insert(format!("{prefix}.bias"), uniform(rng, &[4 * hidden], bound));
}

/// One LSTM step on a precomputed input projection `xw = x·W_ih + b`.
/// Gate order is input, forget, cell, output.
pub fn lstm_step<'g>(
    fw: &Forward<'g, '_>,
    prefix: &str,
    xw: Var<'g>,
    state: (Var<'g>, Var<'g>),
) -> (Var<'g>, Var<'g>) {
    let (h, c) = state;
    let hidden = h.shape()[1];
    let gates = xw.add(h.matmul(fw.p(&format!("{prefix}.w_hh"))));
    let i = gates.narrow(1, 0, hidden).sigmoid();
    let f = gates.narrow(1, hidden, hidden).sigmoid();
    let g = gates.narrow(1, 2 * hidden, hidden).tanh();
    let o = gates.narrow(1, 3 * hidden, hidden).sigmoid();
    let c = f.mul(c).add(i.mul(g));
    let h = o.mul(c.tanh());
    (h, c)
}

/// Unidirectional LSTM over `[B, T, D]`, returning `[B, T, H]`.
pub fn lstm<'g>(fw: &Forward<'g, '_>, prefix: &str, x: Var<'g>, reverse: bool) -> Var<'g> {
    let shape = x.shape();
    let (b, t) = (shape[0], shape[1]);
    let hidden = fw.p(&format!("{prefix}.w_hh")).shape()[0];
    let xw = x
        .reshape(&[b * t, shape[2]])
        .matmul(fw.p(&format!("{prefix}.w_ih")))
        .add_bias(fw.p(&format!("{prefix}.bias")))
        .reshape(&[b, t, 4 * hidden]);
    let zeros = fw.graph.constant(Tensor::zeros(&[b, hidden]));
    let mut state = (zeros, zeros);
    let mut outputs = vec![None; t];
    let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
    for step in order {
        let xs = xw.narrow(1, step, 1).reshape(&[b, 4 * hidden]);
        state = lstm_step(fw, prefix, xs, state);
        outputs[step] = Some(state.0.reshape(&[b, 1, hidden]));
    }
    let outputs: Vec<Var> = outputs.into_iter().map(Option::unwrap).collect();
    Var::cat(&outputs, 1)
}

pub fn init_bilstm(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) {
    init_lstm(store, &format!("{prefix}.fwd"), input, hidden, rng);
    init_lstm(store, &format!("{prefix}.bwd"), input, hidden, rng);
}

/// Bidirectional LSTM: forward and backward outputs concatenated per frame.
pub fn bilstm<'g>(fw: &Forward<'g, '_>, prefix: &str, x: Var<'g>) -> Var<'g> {
    let f = lstm(fw, &format!("{prefix}.fwd"), x, false);
    let b = lstm(fw, &format!("{prefix}.bwd"), x, true);
    Var::cat(&[f, b], 2)
}
