//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records one forward pass. Parameters enter as borrowed leaves
//! tagged with a [`ParamKey`]; frozen parameters and constants never request
//! gradients, so their weight-gradient products are skipped entirely.

use std::collections::HashMap;
use std::ops::Deref;

use crate::scalar::{lit, Scalar};
use crate::tensor::{gemm_into, gemm_strided, Tensor};

/// Identifies one parameter tensor across the whole model bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub group: u8,
    pub index: u32,
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value<'p, S> {
    Owned(Tensor<S>),
    Borrowed(&'p Tensor<S>),
}

impl<S> Deref for Value<'_, S> {
    type Target = Tensor<S>;
    fn deref(&self) -> &Tensor<S> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op<S> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale(Var, S),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, rstd: Vec<S> },
    Gelu { x: Var, tanh: Vec<S> },
    Softmax(Var),
    Embedding { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<S> },
    Sum(Var),
    Nll { logits: Var, targets: Vec<usize>, probs: Vec<S> },
    SoftTarget { logits: Var, target: Vec<S>, probs: Vec<S> },
}

struct Node<'p, S> {
    value: Value<'p, S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Graph<'p, S: Scalar> {
    nodes: Vec<Node<'p, S>>,
    params: HashMap<ParamKey, Var>,
}

impl<S: Scalar> Default for Graph<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, S: Scalar> Graph<'p, S> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256), params: HashMap::new() }
    }

    fn push(&mut self, value: Value<'p, S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> S {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(Value::Owned(t), Op::Leaf, false)
    }

    /// Input leaf that does receive a gradient (used by probes and tests).
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(Value::Owned(t), Op::Leaf, true)
    }

    /// Parameter leaf. Each key maps to a single node per graph.
    pub fn param(&mut self, key: ParamKey, t: &'p Tensor<S>, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(Value::Borrowed(t), Op::Param, trainable);
        self.params.insert(key, v);
        v
    }

    /// Copies a node's value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let n = if trans_b { bv.rows() } else { bv.cols() };
        let mut out = Tensor::zeros(av.rows(), n);
        gemm_into(av, false, bv, trans_b, &mut out, S::one(), S::zero());
        let rg = self.rg(a) || self.rg(b);
        self.push(Value::Owned(out), Op::MatMul { a, b, trans_b }, rg)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.rows(), av.cols(), data).expect("shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Value::Owned(out), Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Value::Owned(out), Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Value::Owned(out), Op::Mul(a, b), rg)
    }

    /// Adds a `1 x c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        assert_eq!(bv.shape(), (1, xv.cols()), "bias shape");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(Value::Owned(out), Op::AddRow { x, bias }, rg)
    }

    pub fn scale(&mut self, x: Var, s: S) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(Value::Owned(out), Op::Scale(x, s), rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of shape `1 x c`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps: S = lit(1e-5);
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut out = Tensor::zeros(n, c);
        let mut xhat = vec![S::zero(); n * c];
        let mut rstd = vec![S::zero(); n];
        let cs = S::from_usize_lossy(c);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<S>() / cs;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / cs;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out.set(r, j, h * gv.data()[j] + bv.data()[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(Value::Owned(out), Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let tanh: Vec<S> = xv.data().iter().map(|&v| gelu_tanh(v)).collect();
        let half: S = lit(0.5);
        let data = xv.data().iter().zip(&tanh).map(|(&v, &t)| half * v * (S::one() + t)).collect();
        let out = Tensor::from_vec(xv.rows(), xv.cols(), data).expect("shape");
        let rg = self.rg(x);
        self.push(Value::Owned(out), Op::Gelu { x, tanh }, rg)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(x);
        self.push(Value::Owned(out), Op::Softmax(x), rg)
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let d = tv.cols();
        let mut out = Tensor::zeros(ids.len(), d);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        let rg = self.rg(table);
        self.push(Value::Owned(out), Op::Embedding { table, ids: ids.to_vec() }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat column mismatch");
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let out = Tensor::from_vec(rows, cols, data).expect("shape");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Value::Owned(out), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let out = Tensor::from_vec(len, c, xv.data()[start * c..(start + len) * c].to_vec())
            .expect("slice in range");
        let rg = self.rg(x);
        self.push(Value::Owned(out), Op::SliceRows { x, start }, rg)
    }

    /// Multi-head scaled dot-product attention over pre-projected `q`, `k`, `v`.
    /// `causal` masks key `j > i` and requires equal query and key lengths.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, dm) = qv.shape();
        let m = kv.rows();
        assert_eq!(kv.cols(), dm);
        assert_eq!(vv.shape(), (m, dm));
        assert!(dm % heads == 0, "model width must divide into heads");
        if causal {
            assert_eq!(n, m, "causal attention needs square scores");
        }
        let dh = dm / heads;
        let scale: S = S::one() / S::from_usize_lossy(dh).sqrt();
        let mut out = Tensor::zeros(n, dm);
        let mut probs = vec![S::zero(); heads * n * m];
        for h in 0..heads {
            let p = &mut probs[h * n * m..(h + 1) * n * m];
            gemm_strided(
                n, dh, m, scale,
                &qv.data()[h * dh..], dm as isize, 1,
                &kv.data()[h * dh..], 1, dm as isize,
                S::zero(), p, m as isize,
            );
            for i in 0..n {
                let row = &mut p[i * m..(i + 1) * m];
                if causal {
                    row[i + 1..].iter_mut().for_each(|x| *x = S::neg_infinity());
                }
                softmax_in_place(row);
            }
            gemm_strided(
                n, m, dh, S::one(),
                p, m as isize, 1,
                &vv.data()[h * dh..], dm as isize, 1,
                S::zero(), &mut out.data_mut()[h * dh..], dm as isize,
            );
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(Value::Owned(out), Op::Attention { q, k, v, heads, probs }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: S = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Value::Owned(Tensor::scalar(s)), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, S::one() / S::from_usize_lossy(n))
    }

    /// Summed negative log-likelihood of `targets[r]` under `softmax(logits[r])`.
    pub fn nll(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target per row");
        let mut probs = lv.data().to_vec();
        let c = lv.cols();
        let mut total = S::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &mut probs[r * c..(r + 1) * c];
            let lse = log_sum_exp(row);
            total += lse - row[t];
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let rg = self.rg(logits);
        self.push(
            Value::Owned(Tensor::scalar(total)),
            Op::Nll { logits, targets: targets.to_vec(), probs },
            rg,
        )
    }

    /// `sum_k t_k (ln t_k - log_softmax(logits)_k)` for a constant row `target`:
    /// the KL divergence from the target to the logits' distribution.
    pub fn kl_from_target(&mut self, logits: Var, target: &[S]) -> Var {
        let entropy_term: S = target
            .iter()
            .filter(|&&t| t > S::zero())
            .map(|&t| t * t.ln())
            .sum();
        self.soft_target(logits, target, entropy_term)
    }

    /// Soft-label cross-entropy `-sum_k t_k log_softmax(logits)_k`.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: &[S]) -> Var {
        self.soft_target(logits, target, S::zero())
    }

    fn soft_target(&mut self, logits: Var, target: &[S], offset: S) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), (1, target.len()), "soft target length");
        let mut probs = lv.data().to_vec();
        let lse = log_sum_exp(&probs);
        let mut total = offset;
        for (p, &t) in probs.iter_mut().zip(target) {
            total -= t * (*p - lse);
            *p = (*p - lse).exp();
        }
        let rg = self.rg(logits);
        self.push(
            Value::Owned(Tensor::scalar(total)),
            Op::SoftTarget { logits, target: target.to_vec(), probs },
            rg,
        )
    }

    /// Runs reverse accumulation from a scalar `root` and returns gradients of
    /// every trainable parameter that the root depends on.
    pub fn backward(&self, root: Var) -> Gradients<S> {
        let mut grads = self.backward_all(root);
        let mut out = Gradients::default();
        for (&key, &v) in &self.params {
            if let Some(g) = grads[v.0].take() {
                out.insert(key, g);
            }
        }
        out
    }

    /// Gradient with respect to an arbitrary node, typically an [`Graph::input`].
    pub fn grad_of(&self, root: Var, wrt: Var) -> Option<Tensor<S>> {
        let mut grads = self.backward_all(root);
        grads[wrt.0].take()
    }

    fn backward_all(&self, root: Var) -> Vec<Option<Tensor<S>>> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(root) {
            return grads;
        }
        grads[root.0] = Some(Tensor::scalar(S::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    // dA = G * op(B)^T
                    gemm_into(g, false, bv, !*trans_b, &mut ga, S::one(), S::zero());
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    if *trans_b {
                        gemm_into(g, true, av, false, &mut gb, S::one(), S::zero());
                    } else {
                        gemm_into(av, true, g, false, &mut gb, S::one(), S::zero());
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let ga = elementwise(g, bv, |x, y| x * y);
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = elementwise(g, av, |x, y| x * y);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddRow { x, bias } => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*bias) {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (n, c) = g.shape();
                let gv = self.value(*gamma);
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut gg = Tensor::zeros(1, c);
                    let mut gbeta = Tensor::zeros(1, c);
                    for r in 0..n {
                        for j in 0..c {
                            let d = g.get(r, j);
                            gg.data_mut()[j] += d * xhat[r * c + j];
                            gbeta.data_mut()[j] += d;
                        }
                    }
                    self.accumulate(grads, *gamma, gg);
                    self.accumulate(grads, *beta, gbeta);
                }
                if self.rg(*x) {
                    let cs = S::from_usize_lossy(c);
                    let mut gx = Tensor::zeros(n, c);
                    for r in 0..n {
                        let mut mean_d = S::zero();
                        let mut mean_dx = S::zero();
                        for j in 0..c {
                            let d = g.get(r, j) * gv.data()[j];
                            mean_d += d;
                            mean_dx += d * xhat[r * c + j];
                        }
                        mean_d /= cs;
                        mean_dx /= cs;
                        for j in 0..c {
                            let d = g.get(r, j) * gv.data()[j];
                            gx.set(r, j, rstd[r] * (d - mean_d - xhat[r * c + j] * mean_dx));
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Gelu { x, tanh } => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data().iter().zip(tanh))
                    .map(|(&d, (&v, &t))| d * gelu_grad(v, t))
                    .collect();
                let gx = Tensor::from_vec(xv.rows(), xv.cols(), data).expect("shape");
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: S = g.row(r).iter().zip(y.row(r)).map(|(&a, &b)| a * b).sum();
                    for j in 0..y.cols() {
                        gx.set(r, j, y.get(r, j) * (g.get(r, j) - dot));
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Embedding { table, ids } => {
                if self.rg(*table) {
                    let tv = self.value(*table);
                    let mut gt = Tensor::zeros(tv.rows(), tv.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *table, gt);
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.rg(p) {
                        let part = Tensor::from_vec(
                            rows,
                            c,
                            g.data()[offset * c..(offset + rows) * c].to_vec(),
                        )
                        .expect("shape");
                        self.accumulate(grads, p, part);
                    }
                    offset += rows;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                let c = xv.cols();
                gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, gx);
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(g, *q, *k, *v, *heads, probs, grads);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                let s = g.item();
                self.accumulate(grads, *x, Tensor::filled(xv.rows(), xv.cols(), s));
            }
            Op::Nll { logits, targets, probs } => {
                let s = g.item();
                let (n, c) = self.value(*logits).shape();
                let mut gl = Tensor::from_vec(n, c, probs.clone()).expect("shape");
                for (r, &t) in targets.iter().enumerate() {
                    let cell = gl.get(r, t);
                    gl.set(r, t, cell - S::one());
                }
                gl.scale_assign(s);
                self.accumulate(grads, *logits, gl);
            }
            Op::SoftTarget { logits, target, probs } => {
                let s = g.item();
                let mass: S = target.iter().copied().sum();
                let data = probs.iter().zip(target).map(|(&p, &t)| s * (p * mass - t)).collect();
                self.accumulate(grads, *logits, Tensor::from_vec(1, probs.len(), data).expect("shape"));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor<S>,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[S],
        grads: &mut [Option<Tensor<S>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, dm) = qv.shape();
        let m = kv.rows();
        let dh = dm / heads;
        let scale: S = S::one() / S::from_usize_lossy(dh).sqrt();
        let need_q = self.rg(q);
        let need_k = self.rg(k);
        let need_v = self.rg(v);
        let mut gq = Tensor::zeros(n, dm);
        let mut gk = Tensor::zeros(m, dm);
        let mut gv = Tensor::zeros(m, dm);
        let mut dp = vec![S::zero(); n * m];
        for h in 0..heads {
            let p = &probs[h * n * m..(h + 1) * n * m];
            if need_v {
                // dV_h = P^T dO_h
                gemm_strided(
                    m, n, dh, S::one(),
                    p, 1, m as isize,
                    &g.data()[h * dh..], dm as isize, 1,
                    S::zero(), &mut gv.data_mut()[h * dh..], dm as isize,
                );
            }
            if !(need_q || need_k) {
                continue;
            }
            // dP = dO_h V_h^T
            gemm_strided(
                n, dh, m, S::one(),
                &g.data()[h * dh..], dm as isize, 1,
                &vv.data()[h * dh..], 1, dm as isize,
                S::zero(), &mut dp, m as isize,
            );
            for i in 0..n {
                let prow = &p[i * m..(i + 1) * m];
                let drow = &mut dp[i * m..(i + 1) * m];
                let dot: S = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                for (d, &pp) in drow.iter_mut().zip(prow) {
                    *d = pp * (*d - dot) * scale;
                }
            }
            if need_q {
                gemm_strided(
                    n, m, dh, S::one(),
                    &dp, m as isize, 1,
                    &kv.data()[h * dh..], dm as isize, 1,
                    S::zero(), &mut gq.data_mut()[h * dh..], dm as isize,
                );
            }
            if need_k {
                gemm_strided(
                    m, n, dh, S::one(),
                    &dp, 1, m as isize,
                    &qv.data()[h * dh..], dm as isize, 1,
                    S::zero(), &mut gk.data_mut()[h * dh..], dm as isize,
                );
            }
        }
        self.accumulate(grads, q, gq);
        self.accumulate(grads, k, gk);
        self.accumulate(grads, v, gv);
    }
}

/// Parameter gradients produced by one or more backward passes.
#[derive(Clone, Debug, Default)]
pub struct Gradients<S> {
    map: HashMap<ParamKey, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn insert(&mut self, key: ParamKey, g: Tensor<S>) {
        match self.map.get_mut(&key) {
            Some(existing) => existing.add_assign(&g),
            None => {
                self.map.insert(key, g);
            }
        }
    }

    pub fn merge(&mut self, other: Gradients<S>) {
        for (k, g) in other.map {
            self.insert(k, g);
        }
    }

    pub fn get(&self, key: &ParamKey) -> Option<&Tensor<S>> {
        self.map.get(key)
    }

    pub fn scale(&mut self, s: S) {
        self.map.values_mut().for_each(|g| g.scale_assign(s));
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Tensor<S>)> {
        self.map.iter()
    }
}

fn elementwise<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("shape")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_tanh<S: Scalar>(x: S) -> S {
    let c: S = lit(GELU_C);
    let a: S = lit(0.044715);
    (c * (x + a * x * x * x)).tanh()
}

/// Derivative of GELU at `x` given the cached inner tanh `t`.
fn gelu_grad<S: Scalar>(x: S, t: S) -> S {
    let c: S = lit(GELU_C);
    let a: S = lit(0.044715);
    let half: S = lit(0.5);
    let three: S = lit(3.0);
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x)
}

pub(crate) fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    if max == S::neg_infinity() {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln()
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of a scalar function of one input tensor.
    fn numeric_grad(x: &Tensor<f64>, f: &dyn Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
        let h = 1e-5;
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn check(x: Tensor<f64>, build: &dyn Fn(&mut Graph<f64>, Var) -> Var) {
        let f = |t: &Tensor<f64>| {
            let mut g = Graph::new();
            let v = g.input(t.clone());
            let out = build(&mut g, v);
            g.scalar(out)
        };
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let out = build(&mut g, v);
        let analytic = g.grad_of(out, v).expect("gradient reaches input");
        let numeric = numeric_grad(&x, &f);
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let denom = a.abs().max(n.abs()).max(1e-6);
            assert!((a - n).abs() / denom < 1e-5, "analytic {a} vs numeric {n}");
        }
    }

    fn rand_t(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(rows, cols, 1.0, &mut rng)
    }

    #[test]
    fn matmul_and_transpose_gradients() {
        let w = rand_t(4, 3, 1);
        check(rand_t(2, 4, 2), &|g, x| {
            let wv = g.constant(w.clone());
            let y = g.matmul(x, wv);
            let y2 = g.mul(y, y);
            g.sum(y2)
        });
        let w = rand_t(5, 4, 3);
        check(rand_t(2, 4, 4), &|g, x| {
            let wv = g.constant(w.clone());
            let y = g.matmul_t(x, wv);
            let y = g.gelu(y);
            g.sum(y)
        });
        let a = rand_t(3, 4, 5);
        check(rand_t(2, 4, 6), &|g, x| {
            let av = g.constant(a.clone());
            let y = g.matmul_t(av, x);
            let y2 = g.mul(y, y);
            g.sum(y2)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let gamma = rand_t(1, 6, 7);
        let beta = rand_t(1, 6, 8);
        let w = rand_t(3, 6, 9);
        check(rand_t(3, 6, 10), &|g, x| {
            let gm = g.constant(gamma.clone());
            let bt = g.constant(beta.clone());
            let wv = g.constant(w.clone());
            let y = g.layer_norm(x, gm, bt);
            let y = g.mul(y, wv);
            g.sum(y)
        });
        let x = rand_t(3, 6, 11);
        check(rand_t(1, 6, 12), &|g, gm| {
            let xv = g.constant(x.clone());
            let bt = g.constant(beta.clone());
            let wv = g.constant(w.clone());
            let y = g.layer_norm(xv, gm, bt);
            let y = g.mul(y, wv);
            g.sum(y)
        });
    }

    #[test]
    fn attention_gradients_all_inputs() {
        for causal in [false, true] {
            let k = rand_t(4, 8, 13);
            let v = rand_t(4, 8, 14);
            let w = rand_t(4, 8, 15);
            check(rand_t(4, 8, 16), &|g, x| {
                let kv = g.constant(k.clone());
                let vv = g.constant(v.clone());
                let wv = g.constant(w.clone());
                let y = g.attention(x, kv, vv, 2, causal);
                let y = g.mul(y, wv);
                g.sum(y)
            });
            let q = rand_t(4, 8, 17);
            check(rand_t(4, 8, 18), &|g, x| {
                let qv = g.constant(q.clone());
                let vv = g.constant(v.clone());
                let wv = g.constant(w.clone());
                let y = g.attention(qv, x, vv, 2, causal);
                let y = g.mul(y, wv);
                g.sum(y)
            });
            check(rand_t(4, 8, 19), &|g, x| {
                let qv = g.constant(q.clone());
                let kv = g.constant(k.clone());
                let wv = g.constant(w.clone());
                let y = g.attention(qv, kv, x, 2, causal);
                let y = g.mul(y, wv);
                g.sum(y)
            });
        }
    }

    #[test]
    fn losses_and_structural_ops() {
        check(rand_t(3, 5, 20), &|g, x| g.nll(x, &[0, 4, 2]));
        let t = [0.1, 0.2, 0.3, 0.4];
        check(rand_t(1, 4, 21), &|g, x| g.kl_from_target(x, &t));
        check(rand_t(1, 4, 22), &|g, x| g.soft_cross_entropy(x, &t));
        let w = rand_t(2, 4, 23);
        check(rand_t(2, 4, 24), &|g, x| {
            let y = g.softmax(x);
            let wv = g.constant(w.clone());
            let y = g.mul(y, wv);
            g.sum(y)
        });
        let table_w = rand_t(3, 4, 25);
        check(rand_t(5, 4, 26), &|g, table| {
            let e = g.embedding(table, &[1, 1, 4, 0]);
            let top = g.slice_rows(e, 1, 3);
            let wv = g.constant(table_w.clone());
            let both = g.concat_rows(&[top, wv]);
            let y = g.mul(both, both);
            g.mean(y)
        });
        let bias_w = rand_t(3, 4, 27);
        check(rand_t(1, 4, 28), &|g, b| {
            let x = g.constant(bias_w.clone());
            let y = g.add_row(x, b);
            let y = g.sub(y, x);
            let y = g.scale(y, 3.0);
            let y = g.mul(y, y);
            g.sum(y)
        });
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let logits = Tensor::row_vector(vec![0.3_f64, -1.2, 0.7]);
        let mut g = Graph::new();
        let x = g.constant(logits.clone());
        let p = g.softmax(x);
        let target = g.value(p).data().to_vec();
        let kl = g.kl_from_target(x, &target);
        assert!(g.scalar(kl).abs() < 1e-12);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let w = rand_t(3, 3, 30);
        let mut g = Graph::new();
        let x = g.input(rand_t(2, 3, 31));
        let frozen = g.param(ParamKey { group: 0, index: 0 }, &w, false);
        let y = g.matmul(x, frozen);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert!(grads.is_empty());
        assert!(g.grad_of(s, x).is_some());
    }
}
