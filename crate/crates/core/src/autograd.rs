//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of that scalar with respect to every node that requires one.
//! Nodes whose inputs are all constants never store a backward closure, so a
//! forward pass over constants costs no more than plain evaluation.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::tensor::{gemm, Tensor};

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(String, usize)>>,
}

#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradients of the named parameter leaves that influenced the output.
    pub fn named(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, id) in &self.params {
            if let Some(g) = &self.grads[*id] {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            parents: vec![],
            backward: None,
            requires_grad: false,
        })
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.leaf_rc(Rc::new(value), true)
    }

    pub(crate) fn leaf_rc(&self, value: Rc<Tensor>, requires_grad: bool) -> Var<'_> {
        self.push(Node {
            value,
            parents: vec![],
            backward: None,
            requires_grad,
        })
    }

    /// A named parameter leaf. Frozen parameters enter as constants.
    pub fn param(&self, name: &str, value: Rc<Tensor>, trainable: bool) -> Var<'_> {
        let var = self.leaf_rc(value, trainable);
        self.params.borrow_mut().push((name.to_string(), var.id));
        var
    }

    /// Names of every parameter that entered this graph, trainable or not.
    pub fn param_names(&self) -> Vec<String> {
        self.params.borrow().iter().map(|(n, _)| n.clone()).collect()
    }

    /// Records an operation. `backward` maps the output gradient to one
    /// optional gradient per parent; the flags say which parents need one.
    pub fn custom_op<'g>(
        &'g self,
        value: Tensor,
        parents: &[Var<'g>],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'g> {
        let nodes = self.nodes.borrow();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        drop(nodes);
        self.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
            requires_grad,
        })
    }

    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.numel(), 1, "backward() needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), 1.0));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &needs);
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(pg), true) = (pg, *need) else {
                    continue;
                };
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients {
            grads,
            params: self.params.borrow().clone(),
        }
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = t.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(t.numel());
    let mut idx = vec![0usize; rank];
    let src = t.data();
    for _ in 0..t.numel() {
        let off: usize = idx.iter().zip(&mapped).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

fn matmul_values(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (m, k) = if ta { (a.dim(1), a.dim(0)) } else { (a.dim(0), a.dim(1)) };
    let (k2, n) = if tb { (b.dim(1), b.dim(0)) } else { (b.dim(0), b.dim(1)) };
    assert_eq!(k, k2, "matmul inner dimension mismatch {:?} x {:?}", a.shape(), b.shape());
    let sa = if ta { (1, a.dim(1)) } else { (a.dim(1), 1) };
    let sb = if tb { (1, b.dim(1)) } else { (b.dim(1), 1) };
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a.data(), sa, b.data(), sb, 0.0, &mut out, (n, 1));
    Tensor::new(vec![m, n], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pool2dSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

pub fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(size + 2 * pad >= kernel, "kernel {kernel} larger than padded input {size}+2*{pad}");
    (size + 2 * pad - kernel) / stride + 1
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: Conv2dSpec,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.padding;
        let p = self.cols();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let y = (oy * sh + ki) as isize - ph as isize;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if y < 0 || y >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &img[(c * self.h + y as usize) * self.w..][..self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let x = (ox * sw + kj) as isize - pw as isize;
                            *v = if x < 0 || x >= self.w as isize { 0.0 } else { src[x as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.padding;
        let p = self.cols();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let y = (oy * sh + ki) as isize - ph as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let dst = &mut img[(c * self.h + y as usize) * self.w..][..self.w];
                        for ox in 0..self.ow {
                            let x = (ox * sw + kj) as isize - pw as isize;
                            if x >= 0 && x < self.w as isize {
                                dst[x as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'g> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let y_saved = y.clone();
        self.graph.custom_op((*y).clone(), &[self], move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y_saved.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(g.shape().to_vec(), data))]
        })
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.graph
            .custom_op(v, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.graph.custom_op(v, &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        })
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let a = self.value();
        let b = other.value();
        let v = a.zip_map(&b, |x, y| x * y);
        self.graph.custom_op(v, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |g, y| g * y)),
                needs[1].then(|| g.zip_map(&a, |g, x| g * x)),
            ]
        })
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        let v = self.value().map(|x| x * c);
        self.graph
            .custom_op(v, &[self], move |g, _| vec![Some(g.map(|v| v * c))])
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        let v = self.value().map(|x| x + c);
        self.graph.custom_op(v, &[self], |g, _| vec![Some(g.clone())])
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(|x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    /// Adds `bias` (length = last dim) to every row.
    pub fn add_bias(self, bias: Var<'g>) -> Var<'g> {
        let x = self.value();
        let b = bias.value();
        let n = *x.shape().last().expect("add_bias on scalar");
        assert_eq!(b.shape(), &[n], "bias shape mismatch");
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (v, bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        self.graph.custom_op(out, &[self, bias], move |g, needs| {
            let gb = needs[1].then(|| {
                let mut acc = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                Tensor::new(vec![n], acc)
            });
            vec![Some(g.clone()), gb]
        })
    }

    /// `x[b, t, :] + y[b, :]` for `x: [B, T, D]`, `y: [B, D]`.
    pub fn add_bcast_mid(self, y: Var<'g>) -> Var<'g> {
        let xv = self.value();
        let yv = y.value();
        let (b, t, d) = (xv.dim(0), xv.dim(1), xv.dim(2));
        assert_eq!(yv.shape(), &[b, d], "add_bcast_mid shape mismatch");
        let mut out = (*xv).clone();
        for bi in 0..b {
            let yrow = &yv.data()[bi * d..(bi + 1) * d];
            for ti in 0..t {
                let o = &mut out.data_mut()[(bi * t + ti) * d..][..d];
                for (v, w) in o.iter_mut().zip(yrow) {
                    *v += w;
                }
            }
        }
        self.graph.custom_op(out, &[self, y], move |g, needs| {
            let gy = needs[1].then(|| {
                let mut acc = vec![0.0; b * d];
                for bi in 0..b {
                    for ti in 0..t {
                        let src = &g.data()[(bi * t + ti) * d..][..d];
                        for (a, v) in acc[bi * d..(bi + 1) * d].iter_mut().zip(src) {
                            *a += v;
                        }
                    }
                }
                Tensor::new(vec![b, d], acc)
            });
            vec![Some(g.clone()), gy]
        })
    }

    /// Adds a constant tensor of the same shape.
    pub fn add_const(self, c: &Tensor) -> Var<'g> {
        let v = self.value().zip_map(c, |a, b| a + b);
        self.graph.custom_op(v, &[self], |g, _| vec![Some(g.clone())])
    }

    /// Rank-2 matrix product.
    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        let a = self.value();
        let b = other.value();
        assert!(a.rank() == 2 && b.rank() == 2, "matmul needs rank-2 operands");
        let v = matmul_values(&a, &b, false, false);
        self.graph.custom_op(v, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| matmul_values(g, &b, false, true)),
                needs[1].then(|| matmul_values(&a, g, true, false)),
            ]
        })
    }

    /// Batched product `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(self, other: Var<'g>) -> Var<'g> {
        let a = self.value();
        let b = other.value();
        let (bs, m, k) = (a.dim(0), a.dim(1), a.dim(2));
        let n = b.dim(2);
        assert_eq!(b.shape(), &[bs, k, n], "bmm shape mismatch");
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                1.0,
                &a.data()[i * m * k..],
                (k, 1),
                &b.data()[i * k * n..],
                (n, 1),
                0.0,
                &mut out[i * m * n..],
                (n, 1),
            );
        }
        self.graph
            .custom_op(Tensor::new(vec![bs, m, n], out), &[self, other], move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut ga = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            1.0,
                            &g.data()[i * m * n..],
                            (n, 1),
                            &b.data()[i * k * n..],
                            (1, n),
                            0.0,
                            &mut ga[i * m * k..],
                            (k, 1),
                        );
                    }
                    Tensor::new(vec![bs, m, k], ga)
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            1.0,
                            &a.data()[i * m * k..],
                            (1, k),
                            &g.data()[i * m * n..],
                            (n, 1),
                            0.0,
                            &mut gb[i * k * n..],
                            (n, 1),
                        );
                    }
                    Tensor::new(vec![bs, k, n], gb)
                });
                vec![ga, gb]
            })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let x = self.value();
        let old = x.shape().to_vec();
        let v = (*x).clone().reshape(shape);
        self.graph
            .custom_op(v, &[self], move |g, _| vec![Some(g.clone().reshape(&old))])
    }

    pub fn permute(self, perm: &[usize]) -> Var<'g> {
        let x = self.value();
        assert_eq!(perm.len(), x.rank());
        let v = permute_tensor(&x, perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.graph
            .custom_op(v, &[self], move |g, _| vec![Some(permute_tensor(g, &inverse))])
    }

    pub fn transpose(self) -> Var<'g> {
        self.permute(&[1, 0])
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (outer, size, inner) = outer_inner(&shape, axis);
        assert!(start + len <= size, "narrow out of range");
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x.data()[(o * size + start) * inner..(o * size + start + len) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.graph
            .custom_op(Tensor::new(out_shape, out), &[self], move |g, _| {
                let mut gx = Tensor::zeros(&shape);
                for o in 0..outer {
                    gx.data_mut()[(o * size + start) * inner..(o * size + start + len) * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            })
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn cat(parts: &[Var<'g>], axis: usize) -> Var<'g> {
        assert!(!parts.is_empty(), "cat of nothing");
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let mut shape = values[0].shape().to_vec();
        let sizes: Vec<usize> = values.iter().map(|v| v.dim(axis)).collect();
        for v in &values {
            let mut s = v.shape().to_vec();
            s[axis] = shape[axis];
            assert_eq!(s, shape, "cat shape mismatch");
        }
        shape[axis] = sizes.iter().sum();
        let (outer, total, inner) = outer_inner(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &s) in values.iter().zip(&sizes) {
                out.extend_from_slice(&v.data()[o * s * inner..(o + 1) * s * inner]);
            }
        }
        let graph = parts[0].graph;
        graph.custom_op(Tensor::new(shape.clone(), out), parts, move |g, needs| {
            let mut offset = 0;
            let mut grads = Vec::with_capacity(sizes.len());
            for (&s, &need) in sizes.iter().zip(needs) {
                if need {
                    let mut part = Vec::with_capacity(outer * s * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        part.extend_from_slice(&g.data()[base..base + s * inner]);
                    }
                    let mut ps = shape.clone();
                    ps[axis] = s;
                    grads.push(Some(Tensor::new(ps, part)));
                } else {
                    grads.push(None);
                }
                offset += s;
            }
            grads
        })
    }

    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.graph.custom_op(Tensor::scalar(x.sum()), &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums out `axis`.
    pub fn sum_dim(self, axis: usize) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (outer, size, inner) = outer_inner(&shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for s in 0..size {
                let src = &x.data()[(o * size + s) * inner..][..inner];
                for (a, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *a += v;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        self.graph
            .custom_op(Tensor::new(out_shape, out), &[self], move |g, _| {
                let mut gx = Vec::with_capacity(outer * size * inner);
                for o in 0..outer {
                    for _ in 0..size {
                        gx.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(Tensor::new(shape.clone(), gx))]
            })
    }

    pub fn mean_dim(self, axis: usize) -> Var<'g> {
        let n = self.value().dim(axis) as f64;
        self.sum_dim(axis).scale(1.0 / n)
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'g> {
        let x = self.value();
        let n = *x.shape().last().expect("softmax on scalar");
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let ys = y.clone();
        self.graph.custom_op(y, &[self], move |g, _| {
            let mut gx = g.clone();
            for (grow, srow) in gx.data_mut().chunks_mut(n).zip(ys.data().chunks(n)) {
                let dot: f64 = grow.iter().zip(srow).map(|(a, b)| a * b).sum();
                for (gv, s) in grow.iter_mut().zip(srow) {
                    *gv = s * (*gv - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Var<'g> {
        let x = self.value();
        let n = *x.shape().last().expect("log_softmax on scalar");
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let ys = y.clone();
        self.graph.custom_op(y, &[self], move |g, _| {
            let mut gx = g.clone();
            for (grow, lrow) in gx.data_mut().chunks_mut(n).zip(ys.data().chunks(n)) {
                let total: f64 = grow.iter().sum();
                for (gv, l) in grow.iter_mut().zip(lrow) {
                    *gv -= l.exp() * total;
                }
            }
            vec![Some(gx)]
        })
    }

    /// `out[r] = x[r, index[r]]` for rank-2 `x`.
    pub fn pick(self, index: &[usize]) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.rank(), 2);
        let (rows, cols) = (x.dim(0), x.dim(1));
        assert_eq!(index.len(), rows, "pick index length mismatch");
        let out: Vec<f64> = index
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                assert!(c < cols, "pick index {c} out of range {cols}");
                x.data()[r * cols + c]
            })
            .collect();
        let index = index.to_vec();
        self.graph
            .custom_op(Tensor::new(vec![rows], out), &[self], move |g, _| {
                let mut gx = Tensor::zeros(&[rows, cols]);
                for (r, &c) in index.iter().enumerate() {
                    gx.data_mut()[r * cols + c] = g.data()[r];
                }
                vec![Some(gx)]
            })
    }

    /// Divides each row by `max(‖row‖, eps)`.
    pub fn l2_normalize_rows(self, eps: f64) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.rank(), 2);
        let d = x.dim(1);
        let norms: Vec<f64> = x
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        if cfg!(debug_assertions) && norms.iter().any(|&n| n <= eps) {
            log::debug!("l2_normalize_rows: zero-norm row guarded by eps={eps}");
        }
        let mut y = (*x).clone();
        for (row, &n) in y.data_mut().chunks_mut(d).zip(&norms) {
            let denom = n.max(eps);
            for v in row.iter_mut() {
                *v /= denom;
            }
        }
        let ys = y.clone();
        self.graph.custom_op(y, &[self], move |g, _| {
            let mut gx = g.clone();
            for ((grow, yrow), &n) in gx.data_mut().chunks_mut(d).zip(ys.data().chunks(d)).zip(&norms) {
                if n > eps {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (gv, yv) in grow.iter_mut().zip(yrow) {
                        *gv = (*gv - yv * dot) / n;
                    }
                } else {
                    for gv in grow.iter_mut() {
                        *gv /= eps;
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// 2-D convolution: `x: [N, C, H, W]`, `weight: [O, C, KH, KW]`, `bias: [O]`.
    pub fn conv2d(self, weight: Var<'g>, bias: Option<Var<'g>>, spec: Conv2dSpec) -> Var<'g> {
        let x = self.value();
        let w = weight.value();
        assert_eq!(x.rank(), 4, "conv2d input must be [N, C, H, W]");
        let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (o, wc, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        assert_eq!(c, wc, "conv2d channel mismatch");
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            oh: conv_out(h, kh, spec.stride.0, spec.padding.0),
            ow: conv_out(wd, kw, spec.stride.1, spec.padding.1),
            spec,
        };
        let (rows, p) = (geom.rows(), geom.cols());
        let mut cols = vec![0.0; rows * p];
        let mut out = vec![0.0; n * o * p];
        let img_len = c * h * wd;
        for i in 0..n {
            geom.im2col(&x.data()[i * img_len..(i + 1) * img_len], &mut cols);
            gemm(o, rows, p, 1.0, w.data(), (rows, 1), &cols, (p, 1), 0.0, &mut out[i * o * p..], (p, 1));
        }
        if let Some(b) = bias {
            let bv = b.value();
            for i in 0..n {
                for oc in 0..o {
                    let bb = bv.data()[oc];
                    for v in &mut out[(i * o + oc) * p..(i * o + oc + 1) * p] {
                        *v += bb;
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, o, geom.oh, geom.ow], out);
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.graph.custom_op(out, &parents, move |g, needs| {
            let mut gx = needs[0].then(|| vec![0.0; n * img_len]);
            let mut gw = needs[1].then(|| vec![0.0; o * rows]);
            let mut cols = vec![0.0; rows * p];
            let mut gcols = vec![0.0; rows * p];
            for i in 0..n {
                let gout = &g.data()[i * o * p..(i + 1) * o * p];
                if let Some(gw) = gw.as_mut() {
                    geom.im2col(&x.data()[i * img_len..(i + 1) * img_len], &mut cols);
                    gemm(o, p, rows, 1.0, gout, (p, 1), &cols, (1, p), 1.0, gw, (rows, 1));
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(rows, o, p, 1.0, w.data(), (1, rows), gout, (p, 1), 0.0, &mut gcols, (p, 1));
                    geom.col2im(&gcols, &mut gx[i * img_len..(i + 1) * img_len]);
                }
            }
            let mut grads = vec![
                gx.map(|d| Tensor::new(vec![n, c, h, wd], d)),
                gw.map(|d| Tensor::new(vec![o, c, kh, kw], d)),
            ];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| {
                    let mut gb = vec![0.0; o];
                    for i in 0..n {
                        for (oc, acc) in gb.iter_mut().enumerate() {
                            *acc += g.data()[(i * o + oc) * p..(i * o + oc + 1) * p].iter().sum::<f64>();
                        }
                    }
                    Tensor::new(vec![o], gb)
                }));
            }
            grads
        })
    }

    /// Max pooling over `[N, C, H, W]`; padded cells never win.
    pub fn max_pool2d(self, spec: Pool2dSpec) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (kh, kw) = spec.kernel;
        let (sh, sw) = spec.stride;
        let (ph, pw) = spec.padding;
        let oh = conv_out(h, kh, sh, ph);
        let ow = conv_out(w, kw, sw, pw);
        let mut out = vec![0.0; n * c * oh * ow];
        let mut arg = vec![0usize; out.len()];
        for plane in 0..n * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for ki in 0..kh {
                        let y = (oy * sh + ki) as isize - ph as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kj in 0..kw {
                            let xx = (ox * sw + kj) as isize - pw as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let idx = y as usize * w + xx as usize;
                            if best_i == usize::MAX || src[idx] > best {
                                best = src[idx];
                                best_i = idx;
                            }
                        }
                    }
                    let o = (plane * oh + oy) * ow + ox;
                    out[o] = best;
                    arg[o] = plane * h * w + best_i;
                }
            }
        }
        let shape = vec![n, c, h, w];
        self.graph
            .custom_op(Tensor::new(vec![n, c, oh, ow], out), &[self], move |g, _| {
                let mut gx = Tensor::zeros(&shape);
                for (gv, &i) in g.data().iter().zip(&arg) {
                    gx.data_mut()[i] += gv;
                }
                vec![Some(gx)]
            })
    }

    /// Mean over the height axis of `[N, C, H, W]`, giving `[N, C, W]`.
    pub fn mean_height(self) -> Var<'g> {
        let s = self.shape();
        self.permute(&[0, 1, 3, 2]).mean_dim(3).reshape(&[s[0], s[1], s[3]])
    }

    /// Batch normalization over `[N, C, H, W]`. In training mode the batch
    /// statistics are used and returned as `(mean, unbiased variance)`.
    pub fn batch_norm2d(
        self,
        gamma: Var<'g>,
        beta: Var<'g>,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> (Var<'g>, Option<(Vec<f64>, Vec<f64>)>) {
        let x = self.value();
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let hw = h * w;
        let count = (n * hw) as f64;
        let (mean, var, stats) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), None),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        mean[ch] += x.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                }
                for m in &mut mean {
                    *m /= count;
                }
                for i in 0..n {
                    for ch in 0..c {
                        var[ch] += x.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                            .iter()
                            .map(|v| (v - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                let unbiased: Vec<f64> = var.iter().map(|v| v / (count - 1.0).max(1.0)).collect();
                for v in &mut var {
                    *v /= count;
                }
                (mean.clone(), var, Some((mean, unbiased)))
            }
        };
        let training = running.is_none();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = gamma.value();
        let bv = beta.value();
        let mut xhat = vec![0.0; x.numel()];
        let mut y = vec![0.0; x.numel()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for k in base..base + hw {
                    xhat[k] = (x.data()[k] - mean[ch]) * inv_std[ch];
                    y[k] = gv.data()[ch] * xhat[k] + bv.data()[ch];
                }
            }
        }
        let out = self.graph.custom_op(
            Tensor::new(vec![n, c, h, w], y),
            &[self, gamma, beta],
            move |g, needs| {
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for k in base..base + hw {
                            sum_g[ch] += g.data()[k];
                            sum_gx[ch] += g.data()[k] * xhat[k];
                        }
                    }
                }
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; n * c * hw];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            let scale = gv.data()[ch] * inv_std[ch];
                            for k in base..base + hw {
                                gx[k] = if training {
                                    scale * (g.data()[k] - sum_g[ch] / count - xhat[k] * sum_gx[ch] / count)
                                } else {
                                    scale * g.data()[k]
                                };
                            }
                        }
                    }
                    Tensor::new(vec![n, c, h, w], gx)
                });
                vec![
                    gx,
                    needs[1].then(|| Tensor::new(vec![c], sum_gx.clone())),
                    needs[2].then(|| Tensor::new(vec![c], sum_g.clone())),
                ]
            },
        );
        (out, stats)
    }
}

pub mod gradcheck {
    use super::*;

    /// Compares autograd gradients of `f` with central differences at every
    /// coordinate of every input. Returns the worst relative error.
    pub fn max_rel_error(
        inputs: &[Tensor],
        f: impl for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
        h: f64,
    ) -> f64 {
        let graph = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
        let out = f(&graph, &vars);
        let grads = graph.backward(out);
        let eval = |ins: &[Tensor]| {
            let g = Graph::new();
            let vs: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
            f(&g, &vs).item()
        };
        let mut worst: f64 = 0.0;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            for i in 0..t.numel() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                worst = worst.max(err);
            }
        }
        worst
    }
}
