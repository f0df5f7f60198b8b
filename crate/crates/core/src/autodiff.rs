//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! the graph through [`Graph::param`]; frozen parameters and constants do not
//! require gradients, so backward never touches them. [`Graph::backward`]
//! accumulates gradients into the owning [`ParamStore`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Norms at or below this are treated as degenerate.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    /// `relu'(0)` is 0.
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Identity => T::one(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

/// How a run of per-token rows is reduced to one row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    #[default]
    Mean,
    LastToken,
}

impl Pooling {
    pub fn name(self) -> &'static str {
        match self {
            Pooling::Mean => "mean",
            Pooling::LastToken => "last_token",
        }
    }
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "last_token" => Ok(Pooling::LastToken),
            other => Err(Error::Config(format!("unknown pooling {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Activation(Var, Activation),
    GatherRows(Var, Vec<usize>),
    SegmentPool {
        input: Var,
        segments: Vec<(usize, usize)>,
        pooling: Pooling,
    },
    /// Row-wise cosine similarity; keeps the row norms for backward.
    CosineRows {
        a: Var,
        b: Var,
        norms: Vec<(T, T)>,
    },
    Sum(Var),
    Mean(Var),
    /// Mean softmax cross-entropy; keeps the softmax rows for backward.
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
}

fn dim_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Dimension {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First element of `v`; meant for scalar losses.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value.without_grad(), Op::Leaf, false)
    }

    /// Binds a parameter. Binding the same id twice returns the same node, so
    /// shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.tensor.without_grad(), Op::Param(id), !p.frozen);
        self.bound.insert(id, v);
        v
    }

    /// Copies the current value of `v` into a constant: the stop-gradient.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, Op::Leaf, false)
    }

    /// `[n×k] · [k×m] → [n×m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        let (k2, m) = self.value(b).dims2()?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for (kk, &aik) in av[i * k..(i + 1) * k].iter().enumerate() {
                if aik.is_zero() {
                    continue;
                }
                for (o, &bkj) in orow.iter_mut().zip(&bv[kk * m..(kk + 1) * m]) {
                    *o += aik * bkj;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Adds a `[m]` bias to every row of an `[n×m]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.value(a).dims2()?;
        if self.shape(bias) != [m] {
            return Err(dim_err("add_bias", self.shape(a), self.shape(bias)));
        }
        let bv = self.value(bias).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(m.max(1)).take(n) {
            row.iter_mut().zip(&bv).for_each(|(x, &b)| *x += b);
        }
        let rg = self.rg(a) || self.rg(bias);
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::AddBias(a, bias), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let value = self.value(a).map(|x| kind.apply(x));
        let rg = self.rg(a);
        self.push(value, Op::Activation(a, kind), rg)
    }

    /// Selects rows of a `[V×d]` table: `[ids.len()×d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.value(table).dims2()?;
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::contract(format!("row {id} out of range for table of {vocab} rows")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(value, Op::GatherRows(table, ids.to_vec()), rg))
    }

    /// Reduces each `(start, len)` run of rows to one row.
    pub fn segment_pool(&mut self, input: Var, segments: &[(usize, usize)], pooling: Pooling) -> Result<Var> {
        let (n, d) = self.value(input).dims2()?;
        let iv = self.value(input);
        let mut out = Vec::with_capacity(segments.len() * d);
        for &(start, len) in segments {
            if len == 0 || start + len > n {
                return Err(Error::EmptyInput("segment_pool: empty or out-of-range segment"));
            }
            match pooling {
                Pooling::Mean => {
                    let inv = T::one() / T::lit(len as f64);
                    let mut acc = vec![T::zero(); d];
                    for r in start..start + len {
                        acc.iter_mut().zip(iv.row(r)).for_each(|(a, &x)| *a += x);
                    }
                    out.extend(acc.into_iter().map(|a| a * inv));
                }
                Pooling::LastToken => out.extend_from_slice(iv.row(start + len - 1)),
            }
        }
        let value = Tensor::new(vec![segments.len(), d], out)?;
        let rg = self.rg(input);
        Ok(self.push(
            value,
            Op::SegmentPool {
                input,
                segments: segments.to_vec(),
                pooling,
            },
            rg,
        ))
    }

    /// Cosine similarity of matching rows of two `[n×d]` matrices: `[n]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_rows", a, b)?;
        let (n, _) = self.value(a).dims2()?;
        let eps = T::lit(NORM_EPS);
        let mut out = Vec::with_capacity(n);
        let mut norms = Vec::with_capacity(n);
        for (ra, rb) in self.value(a).rows().zip(self.value(b).rows()).take(n) {
            let na = ra.iter().map(|&x| x * x).sum::<T>().sqrt();
            let nb = rb.iter().map(|&x| x * x).sum::<T>().sqrt();
            for nrm in [na, nb] {
                if !(nrm > eps) {
                    return Err(Error::DegenerateVector {
                        context: "cosine similarity",
                        norm: nrm.to_f64_lossy(),
                    });
                }
            }
            let dot: T = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
            out.push(dot / (na * nb));
            norms.push((na, nb));
        }
        let value = Tensor::vector(out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::CosineRows { a, b, norms }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::lit(v.len() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Mean cross-entropy of `[N×K]` logits against class labels, computed
    /// with a shifted log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(dim_err("softmax_cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if n == 0 {
            return Err(Error::EmptyInput("softmax_cross_entropy"));
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(n * k);
        let mut total = T::zero();
        for (row, &y) in lv.rows().zip(labels) {
            if y >= k {
                return Err(Error::contract(format!("label {y} out of range for {k} classes")));
            }
            let (lse, p) = log_softmax_parts(row);
            total += lse - row[y];
            probs.extend(p);
        }
        let loss = total / T::lit(n as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Backpropagates from the scalar `loss`, adding gradients into every
    /// non-frozen parameter of `store` that took part in the pass.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(dim_err("backward", self.shape(loss), &[]));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut send = |target: Var, delta: Vec<T>| {
                if !self.nodes[target.0].requires_grad {
                    return;
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    if p.frozen {
                        continue;
                    }
                    if p.tensor.len() != g.len() {
                        return Err(Error::contract(format!(
                            "parameter {:?} changed shape during the pass",
                            p.name
                        )));
                    }
                    p.tensor.accumulate_grad(&g);
                }
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (n, k) = av.dims2()?;
                    let (_, m) = bv.dims2()?;
                    if self.rg(*a) {
                        // dA = G · Bᵀ
                        let mut da = vec![T::zero(); n * k];
                        for i in 0..n {
                            let grow = &g[i * m..(i + 1) * m];
                            for kk in 0..k {
                                let brow = &bv.data()[kk * m..(kk + 1) * m];
                                da[i * k + kk] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                            }
                        }
                        send(*a, da);
                    }
                    if self.rg(*b) {
                        // dB = Aᵀ · G
                        let mut db = vec![T::zero(); k * m];
                        for i in 0..n {
                            let grow = &g[i * m..(i + 1) * m];
                            for (kk, &aik) in av.data()[i * k..(i + 1) * k].iter().enumerate() {
                                if aik.is_zero() {
                                    continue;
                                }
                                for (d, &gij) in db[kk * m..(kk + 1) * m].iter_mut().zip(grow) {
                                    *d += aik * gij;
                                }
                            }
                        }
                        send(*b, db);
                    }
                }
                Op::AddBias(a, bias) => {
                    let m = *self.shape(*bias).first().unwrap_or(&0);
                    if self.rg(*bias) {
                        let mut db = vec![T::zero(); m];
                        for row in g.chunks(m.max(1)) {
                            db.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
                        }
                        send(*bias, db);
                    }
                    send(*a, g);
                }
                Op::Add(a, b) => {
                    send(*b, g.clone());
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    send(*a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect());
                    send(*b, g.iter().zip(av).map(|(&x, &y)| x * y).collect());
                }
                Op::Scale(a, c) => send(*a, g.iter().map(|&x| x * *c).collect()),
                Op::Activation(a, kind) => {
                    let x = self.value(*a).data();
                    let y = node.value.data();
                    let d = g
                        .iter()
                        .zip(x.iter().zip(y))
                        .map(|(&gi, (&xi, &yi))| gi * kind.derivative(xi, yi))
                        .collect();
                    send(*a, d);
                }
                Op::GatherRows(table, ids) => {
                    let (vocab, d) = self.value(*table).dims2()?;
                    let mut dt = vec![T::zero(); vocab * d];
                    for (r, &id) in ids.iter().enumerate() {
                        dt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(t, &x)| *t += x);
                    }
                    send(*table, dt);
                }
                Op::SegmentPool {
                    input,
                    segments,
                    pooling,
                } => {
                    let (n, d) = self.value(*input).dims2()?;
                    let mut di = vec![T::zero(); n * d];
                    for (s, &(start, len)) in segments.iter().enumerate() {
                        let gs = &g[s * d..(s + 1) * d];
                        match pooling {
                            Pooling::Mean => {
                                let inv = T::one() / T::lit(len as f64);
                                for r in start..start + len {
                                    di[r * d..(r + 1) * d]
                                        .iter_mut()
                                        .zip(gs)
                                        .for_each(|(t, &x)| *t += x * inv);
                                }
                            }
                            Pooling::LastToken => {
                                let r = start + len - 1;
                                di[r * d..(r + 1) * d]
                                    .iter_mut()
                                    .zip(gs)
                                    .for_each(|(t, &x)| *t += x);
                            }
                        }
                    }
                    send(*input, di);
                }
                Op::CosineRows { a, b, norms } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (n, d) = av.dims2()?;
                    let cos = node.value.data();
                    let mut da = vec![T::zero(); n * d];
                    let mut db = vec![T::zero(); n * d];
                    for i in 0..n {
                        let (na, nb) = norms[i];
                        let (ra, rb) = (av.row(i), bv.row(i));
                        let gi = g[i];
                        let inv_ab = T::one() / (na * nb);
                        let ca = cos[i] / (na * na);
                        let cb = cos[i] / (nb * nb);
                        for j in 0..d {
                            da[i * d + j] = gi * (rb[j] * inv_ab - ca * ra[j]);
                            db[i * d + j] = gi * (ra[j] * inv_ab - cb * rb[j]);
                        }
                    }
                    send(*a, da);
                    send(*b, db);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    send(*a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len();
                    send(*a, vec![g[0] / T::lit(n as f64); n]);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let (n, k) = self.value(*logits).dims2()?;
                    let scale = g[0] / T::lit(n as f64);
                    let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (i, &y) in labels.iter().enumerate() {
                        dl[i * k + y] -= scale;
                    }
                    send(*logits, dl);
                }
            }
        }
        Ok(())
    }
}

/// Returns `(log Σ exp(row), softmax(row))` using the max-shift.
pub fn log_softmax_parts<T: Scalar>(row: &[T]) -> (T, Vec<T>) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&x| (x - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    let lse = max + total.ln();
    let probs = exps.into_iter().map(|e| e / total).collect();
    (lse, probs)
}
