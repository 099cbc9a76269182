use crate::autograd::Var;
use crate::tensor::Tensor;

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Removes consecutive repeats, then blanks.
pub fn ctc_collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Best-path decoding of per-frame scores `[T, K]`.
pub fn ctc_greedy(scores: &Tensor, blank: usize) -> Vec<usize> {
    let k = scores.dim(1);
    let path: Vec<usize> = scores.data().chunks(k).map(argmax).collect();
    ctc_collapse(&path, blank)
}

/// Smallest frame count that can emit `target`: one frame per symbol plus a
/// blank between equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn extended(target: &[usize], blank: usize) -> Vec<usize> {
    let mut l = Vec::with_capacity(2 * target.len() + 1);
    l.push(blank);
    for &c in target {
        l.push(c);
        l.push(blank);
    }
    l
}

struct Lattice {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    log_z: f64,
    ext: Vec<usize>,
}

/// Log-space forward-backward over log-probabilities `logp` (`[T, K]`, row-major).
fn lattice(logp: &[f64], t_len: usize, k: usize, target: &[usize], blank: usize) -> Lattice {
    let ext = extended(target, blank);
    let s_len = ext.len();
    let ninf = f64::NEG_INFINITY;
    let lp = |t: usize, s: usize| logp[t * k + ext[s]];
    let skip = |s: usize, d: isize| {
        let o = s as isize + d;
        ext[s] != blank && o >= 0 && (o as usize) < s_len && ext[o as usize] != ext[s]
    };
    let mut alpha = vec![ninf; t_len * s_len];
    let mut beta = vec![ninf; t_len * s_len];
    if t_len == 0 {
        return Lattice {
            alpha,
            beta,
            log_z: if target.is_empty() { 0.0 } else { ninf },
            ext,
        };
    }
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = lse2(acc, prev[s - 1]);
            }
            if s >= 2 && skip(s, -2) {
                acc = lse2(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc == ninf { ninf } else { acc + lp(t, s) };
        }
    }
    let last = t_len - 1;
    beta[last * s_len + s_len - 1] = lp(last, s_len - 1);
    if s_len > 1 {
        beta[last * s_len + s_len - 2] = lp(last, s_len - 2);
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = lse2(acc, next[s + 1]);
            }
            if skip(s, 2) {
                acc = lse2(acc, next[s + 2]);
            }
            beta[t * s_len + s] = if acc == ninf { ninf } else { acc + lp(t, s) };
        }
    }
    let mut log_z = alpha[last * s_len + s_len - 1];
    if s_len > 1 {
        log_z = lse2(log_z, alpha[last * s_len + s_len - 2]);
    }
    Lattice { alpha, beta, log_z, ext }
}

/// `−log p(target | logp)` for per-frame log-probabilities `[T, K]`;
/// `+∞` when the target cannot be emitted in `T` frames.
pub fn ctc_loss(logp: &Tensor, target: &[usize], blank: usize) -> f64 {
    -lattice(logp.data(), logp.dim(0), logp.dim(1), target, blank).log_z
}

/// Batched CTC loss on log-probabilities `[N, T, K]`. Returns the summed
/// loss over samples whose target fits, and which samples were skipped.
pub fn ctc_loss_var<'g>(logp: Var<'g>, targets: &[Vec<usize>], blank: usize) -> (Var<'g>, Vec<usize>) {
    let v = logp.value();
    let (n, t_len, k) = (v.dim(0), v.dim(1), v.dim(2));
    assert_eq!(targets.len(), n, "one target per sample");
    let mut total = 0.0;
    let mut grad = vec![0.0; v.numel()];
    let mut skipped = Vec::new();
    for (i, target) in targets.iter().enumerate() {
        let block = &v.data()[i * t_len * k..(i + 1) * t_len * k];
        let lat = lattice(block, t_len, k, target, blank);
        if !lat.log_z.is_finite() {
            log::warn!("CTC target of length {} does not fit {} frames; sample skipped", target.len(), t_len);
            skipped.push(i);
            continue;
        }
        total -= lat.log_z;
        let s_len = lat.ext.len();
        for t in 0..t_len {
            let mut occupancy = vec![f64::NEG_INFINITY; k];
            for s in 0..s_len {
                let c = lat.ext[s];
                occupancy[c] = lse2(occupancy[c], lat.alpha[t * s_len + s] + lat.beta[t * s_len + s]);
            }
            for (c, occ) in occupancy.into_iter().enumerate() {
                if occ > f64::NEG_INFINITY {
                    grad[(i * t_len + t) * k + c] = -(occ - block[t * k + c] - lat.log_z).exp();
                }
            }
        }
    }
    let shape = v.shape().to_vec();
    let loss = logp.graph().custom_op(Tensor::scalar(total), &[logp], move |g, _| {
        let s = g.item();
        vec![Some(Tensor::new(shape.clone(), grad.iter().map(|x| x * s).collect()))]
    });
    (loss, skipped)
}
