//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is a tape: every operation evaluates eagerly, appends a node
//! holding its output and whatever it needs for the backward rule, and
//! returns a [`Var`] handle. Nodes are appended in execution order, so the
//! tape order is already topological and [`Graph::backward`] walks it in
//! reverse exactly once. A graph is meant to live for one training step.

mod gradcheck;
mod kernels;

pub use gradcheck::{grad_check, GradCheckReport, ParamCheck};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Row layout of a padded batch flattened to `[sentences * max_len, d]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub sentences: usize,
    pub max_len: usize,
    pub lengths: Vec<usize>,
}

impl SeqLayout {
    pub fn rows(&self) -> usize {
        self.sentences * self.max_len
    }

    fn check(&self, rows: usize) -> Result<()> {
        if self.lengths.len() != self.sentences || self.rows() != rows {
            return Err(Error::dim(
                "seq_layout",
                &[self.sentences, self.max_len],
                &[rows],
            ));
        }
        if let Some(s) = self.lengths.iter().position(|&l| l == 0) {
            return Err(Error::Data(format!("sentence {s} has zero length")));
        }
        if self.lengths.iter().any(|&l| l > self.max_len) {
            return Err(Error::Data("sentence length exceeds padded width".into()));
        }
        Ok(())
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Product with a constant multiplier (dropout mask times scale).
    MulConst(Var, Vec<T>),
    Scale(Var, T),
    Gelu(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: SeqLayout,
        heads: usize,
        probs: Vec<T>,
    },
    MeanPool(Var, SeqLayout),
    FirstToken(Var, SeqLayout),
    L2NormalizeRows(Var, Vec<T>),
    RowDot(Var, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    StopGradient,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
    backward_visits: usize,
    gelu_grad_scale: T,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `b` broadcasts onto `a` when it equals `a` or a trailing block of `a`.
fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    a == b || (b.len() < a.len() && a.ends_with(b))
}

const GELU_COEF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            backward_visits: 0,
            gelu_grad_scale: T::one(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, requires_grad)
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; receives a gradient on [`backward`](Self::backward).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass, if `v` was reached by it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads[v.0].as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Number of nodes processed by the last backward pass.
    pub fn backward_visits(&self) -> usize {
        self.backward_visits
    }

    /// Clears gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
        self.backward_visits = 0;
    }

    /// Test fixture: multiplies the GELU derivative by `factor`, producing a
    /// wrong gradient rule that gradient checks must catch.
    #[doc(hidden)]
    pub fn corrupt_gelu_grad(&mut self, factor: f64) {
        self.gelu_grad_scale = T::of(factor);
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [m, n] => Ok((m, n)),
            ref s => Err(Error::Contract(format!(
                "{op} expects a matrix, got shape {s:?}"
            ))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "transpose")?;
        let out = kernels::transpose(self.value(a).data(), m, n);
        let value = Tensor::matrix(n, m, out)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcastable(sa, sb) {
            return Err(Error::dim(op, sa, sb));
        }
        let bd = self.value(b).data();
        let w = bd.len();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % w]))
            .collect();
        Tensor::new(sa.to_vec(), data)
    }

    /// `a + b`, with `b` broadcast along the leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product, with the same broadcasting as [`add`](Self::add).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Product with a constant of identical element count; the constant
    /// receives no gradient.
    pub fn mul_const(&mut self, a: Var, multiplier: Vec<T>) -> Result<Var> {
        let x = self.value(a);
        if multiplier.len() != x.numel() {
            return Err(Error::dim("mul_const", x.shape(), &[multiplier.len()]));
        }
        let data = x
            .data()
            .iter()
            .zip(&multiplier)
            .map(|(&v, &m)| v * m)
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::MulConst(a, multiplier), &[a]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).map(|v| v * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    /// GELU with the tanh approximation; the encoder's only nonlinearity.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::of(SQRT_2_OVER_PI);
        let k = T::of(GELU_COEF);
        let half = T::of(0.5);
        let value = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::Contract("log of a non-positive value".into()));
        }
        let value = x.map(|v| v.ln());
        Ok(self.push(value, Op::Log(a), &[a]))
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "softmax_rows")?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            kernels::softmax_in_place(row);
        }
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::SoftmaxRows(a), &[a]))
    }

    /// `log Σ_j exp(a_ij)` per row, giving a length-`m` vector.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "logsumexp_rows")?;
        let out = self
            .value(a)
            .data()
            .chunks(n)
            .map(kernels::logsumexp)
            .collect::<Vec<_>>();
        debug_assert_eq!(out.len(), m);
        Ok(self.push(Tensor::from_vec(out), Op::LogSumExpRows(a), &[a]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (m, d) = self.matrix_dims(x, "layer_norm")?;
        if d < 2 {
            return Err(Error::Contract(
                "layer_norm needs at least 2 features".into(),
            ));
        }
        if eps <= T::zero() {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let n = T::from_usize(d).unwrap();
        let mut xhat = Vec::with_capacity(m * d);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * d);
        for row in self.value(x).data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * inv;
                xhat.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let value = Tensor::matrix(m, d, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.matrix_dims(table, "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Data(format!(
                "row id {bad} out of range for table of {vocab} rows"
            )));
        }
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows with no ids".into()));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let value = Tensor::matrix(ids.len(), d, out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Multi-head scaled dot-product attention within each sentence.
    ///
    /// Queries at every position attend only to the first `lengths[s]` keys
    /// of their own sentence, so padding never influences real tokens.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: &SeqLayout,
        heads: usize,
    ) -> Result<Var> {
        let (rows, d) = self.matrix_dims(q, "attention")?;
        if self.shape(k) != [rows, d] || self.shape(v) != [rows, d] {
            return Err(Error::dim("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Contract(format!(
                "{d} features not divisible into {heads} heads"
            )));
        }
        layout.check(rows)?;
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            layout,
            d,
            heads,
        );
        let value = Tensor::matrix(rows, d, out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                layout: layout.clone(),
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Average of the unpadded rows of each sentence.
    pub fn mean_pool(&mut self, x: Var, layout: &SeqLayout) -> Result<Var> {
        let (rows, d) = self.matrix_dims(x, "mean_pool")?;
        layout.check(rows)?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); layout.sentences * d];
        for (s, &len) in layout.lengths.iter().enumerate() {
            let acc = &mut out[s * d..(s + 1) * d];
            for t in 0..len {
                let r = (s * layout.max_len + t) * d;
                for (a, &v) in acc.iter_mut().zip(&xd[r..r + d]) {
                    *a += v;
                }
            }
            let inv = T::one() / T::from_usize(len).unwrap();
            acc.iter_mut().for_each(|a| *a *= inv);
        }
        let value = Tensor::matrix(layout.sentences, d, out)?;
        Ok(self.push(value, Op::MeanPool(x, layout.clone()), &[x]))
    }

    pub fn first_token(&mut self, x: Var, layout: &SeqLayout) -> Result<Var> {
        let (rows, d) = self.matrix_dims(x, "first_token")?;
        layout.check(rows)?;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(layout.sentences * d);
        for s in 0..layout.sentences {
            let r = s * layout.max_len * d;
            out.extend_from_slice(&xd[r..r + d]);
        }
        let value = Tensor::matrix(layout.sentences, d, out)?;
        Ok(self.push(value, Op::FirstToken(x, layout.clone()), &[x]))
    }

    /// Scales every row to unit L2 norm. Zero rows are rejected.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, d) = self.matrix_dims(x, "l2_normalize_rows")?;
        let mut norms = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * d);
        for (i, row) in self.value(x).data().chunks(d).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm <= T::zero() || !norm.is_finite() {
                return Err(Error::Contract(format!(
                    "row {i} has zero or non-finite norm"
                )));
            }
            norms.push(norm);
            out.extend(row.iter().map(|&v| v / norm));
        }
        let value = Tensor::matrix(m, d, out)?;
        Ok(self.push(value, Op::L2NormalizeRows(x, norms), &[x]))
    }

    /// Per-row inner product of two equally shaped matrices.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, d) = self.matrix_dims(a, "row_dot")?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("row_dot", self.shape(a), self.shape(b)));
        }
        let bd = self.value(b).data();
        let out = self
            .value(a)
            .data()
            .chunks(d)
            .zip(bd.chunks(d))
            .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p * q).sum())
            .collect();
        Ok(self.push(Tensor::from_vec(out), Op::RowDot(a, b), &[a, b]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().copied().sum::<T>() / T::from_usize(x.numel()).unwrap();
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Copy of `a`'s value that blocks gradient flow.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push_node(value, Op::StopGradient, false)
    }

    fn accumulate(&mut self, v: Var, delta: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Gradient of `b` in a broadcast binary op: sum over the repeats.
    fn reduce_broadcast(&self, b: Var, full: Vec<T>) -> Vec<T> {
        let w = self.value(b).numel();
        if w == full.len() {
            return full;
        }
        let mut out = vec![T::zero(); w];
        for chunk in full.chunks(w) {
            out.iter_mut().zip(chunk).for_each(|(o, &c)| *o += c);
        }
        out
    }

    /// Fills gradients of every `requires_grad` node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.backward_done {
            return Err(Error::State(
                "backward already ran; call reset_grads first".into(),
            ));
        }
        self.backward_done = true;
        self.backward_visits = 0;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_visits += 1;
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        // Temporarily move the op out so the node table can be borrowed freely.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::StopGradient => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.matrix_dims(a, "matmul").unwrap();
                let n = self.shape(b)[1];
                if self.requires_grad(a) {
                    let da = kernels::matmul_a_bt(g, self.value(b).data(), m, n, k);
                    self.accumulate(a, da);
                }
                if self.requires_grad(b) {
                    let db = kernels::matmul_at_b(self.value(a).data(), g, m, k, n);
                    self.accumulate(b, db);
                }
            }
            &Op::Transpose(a) => {
                let (m, n) = self.matrix_dims(a, "transpose").unwrap();
                let da = kernels::transpose(g, n, m);
                self.accumulate(a, da);
            }
            &Op::Add(a, b) => {
                self.accumulate(a, g.to_vec());
                if self.requires_grad(b) {
                    let db = self.reduce_broadcast(b, g.to_vec());
                    self.accumulate(b, db);
                }
            }
            &Op::Sub(a, b) => {
                self.accumulate(a, g.to_vec());
                if self.requires_grad(b) {
                    let db = self.reduce_broadcast(b, g.iter().map(|&x| -x).collect());
                    self.accumulate(b, db);
                }
            }
            &Op::Mul(a, b) => {
                if self.requires_grad(a) {
                    let bd = self.value(b).data();
                    let w = bd.len();
                    let da = g.iter().enumerate().map(|(j, &x)| x * bd[j % w]).collect();
                    self.accumulate(a, da);
                }
                if self.requires_grad(b) {
                    let ad = self.value(a).data();
                    let full = g.iter().zip(ad).map(|(&x, &y)| x * y).collect();
                    let db = self.reduce_broadcast(b, full);
                    self.accumulate(b, db);
                }
            }
            Op::MulConst(a, m) => {
                let da = g.iter().zip(m).map(|(&x, &y)| x * y).collect();
                self.accumulate(*a, da);
            }
            &Op::Scale(a, f) => {
                self.accumulate(a, g.iter().map(|&x| x * f).collect());
            }
            &Op::Gelu(a) => {
                let c = T::of(SQRT_2_OVER_PI);
                let k = T::of(GELU_COEF);
                let half = T::of(0.5);
                let three = T::of(3.0);
                let scale = self.gelu_grad_scale;
                let da = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gy)| {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * k * x * x);
                        gy * (half * (T::one() + t) + half * x * dt) * scale
                    })
                    .collect();
                self.accumulate(a, da);
            }
            &Op::Log(a) => {
                let da = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gy)| gy / x)
                    .collect();
                self.accumulate(a, da);
            }
            &Op::SoftmaxRows(a) => {
                let n = self.shape(a)[1];
                let y = self.nodes[i].value.data();
                let mut da = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    da.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
                }
                self.accumulate(a, da);
            }
            &Op::LogSumExpRows(a) => {
                let n = self.shape(a)[1];
                let mut da = self.value(a).data().to_vec();
                for (row, &gy) in da.chunks_mut(n).zip(g) {
                    kernels::softmax_in_place(row);
                    row.iter_mut().for_each(|p| *p *= gy);
                }
                self.accumulate(a, da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*gain)[0];
                let gv = self.value(*gain).data();
                let n = T::from_usize(d).unwrap();
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                let mut dx = Vec::with_capacity(g.len());
                for ((gr, xr), &inv) in g.chunks(d).zip(xhat.chunks(d)).zip(inv_std) {
                    let mut sum_dxh = T::zero();
                    let mut sum_dxh_xh = T::zero();
                    for j in 0..d {
                        dgain[j] += gr[j] * xr[j];
                        dbias[j] += gr[j];
                        let dxh = gr[j] * gv[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xr[j];
                    }
                    for j in 0..d {
                        let dxh = gr[j] * gv[j];
                        dx.push(inv / n * (n * dxh - sum_dxh - xr[j] * sum_dxh_xh));
                    }
                }
                self.accumulate(*x, dx);
                self.accumulate(*gain, dgain);
                self.accumulate(*bias, dbias);
            }
            Op::Gather { table, ids } => {
                let d = self.shape(*table)[1];
                let mut dt = vec![T::zero(); self.value(*table).numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                self.accumulate(*table, dt);
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                probs,
            } => {
                let d = self.shape(*q)[1];
                let (dq, dk, dv) = kernels::attention_backward(
                    g,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    layout,
                    d,
                    *heads,
                );
                self.accumulate(*q, dq);
                self.accumulate(*k, dk);
                self.accumulate(*v, dv);
            }
            Op::MeanPool(x, layout) => {
                let d = self.shape(*x)[1];
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (s, &len) in layout.lengths.iter().enumerate() {
                    let inv = T::one() / T::from_usize(len).unwrap();
                    for t in 0..len {
                        let r = (s * layout.max_len + t) * d;
                        for j in 0..d {
                            dx[r + j] = g[s * d + j] * inv;
                        }
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::FirstToken(x, layout) => {
                let d = self.shape(*x)[1];
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for s in 0..layout.sentences {
                    let r = s * layout.max_len * d;
                    dx[r..r + d].copy_from_slice(&g[s * d..(s + 1) * d]);
                }
                self.accumulate(*x, dx);
            }
            Op::L2NormalizeRows(x, norms) => {
                let d = self.shape(*x)[1];
                let y = self.nodes[i].value.data();
                let mut dx = Vec::with_capacity(y.len());
                for ((yr, gr), &norm) in y.chunks(d).zip(g.chunks(d)).zip(norms) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&p, &q)| (q - p * dot) / norm));
                }
                self.accumulate(*x, dx);
            }
            &Op::RowDot(a, b) => {
                let d = self.shape(a)[1];
                let spread = |other: &[T]| -> Vec<T> {
                    other
                        .iter()
                        .enumerate()
                        .map(|(j, &o)| o * g[j / d])
                        .collect()
                };
                let da = spread(self.value(b).data());
                let db = spread(self.value(a).data());
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            &Op::Sum(a) => {
                let n = self.value(a).numel();
                self.accumulate(a, vec![g[0]; n]);
            }
            &Op::Mean(a) => {
                let n = self.value(a).numel();
                let v = g[0] / T::from_usize(n).unwrap();
                self.accumulate(a, vec![v; n]);
            }
            &Op::Reshape(a) => {
                self.accumulate(a, g.to_vec());
            }
        }
        self.nodes[i].op = op;
    }
}
