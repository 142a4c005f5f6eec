//! Dense `f64` arrays and a tape-based reverse-mode differentiation engine.
//!
//! A [`Tape`] records every operation of one forward pass. Values live on the
//! tape; persistent parameters live in [`Tensor`]s and are bound to the tape
//! as leaves with [`Tape::param`]. After [`Tape::backward`] the gradient of
//! each bound leaf is available through [`Tape::grad`], and can be moved into
//! the owning tensor with [`Tape::accumulate_into`] before an [`sgd_step`].
//!
//! The tape is rebuilt for every forward pass; a second `backward` on the same
//! tape is rejected.

use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violated: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Contract(msg.into()))
}

/// A dense row-major array with an optional gradient buffer.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default = "default_true")]
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

fn default_true() -> bool {
    true
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return contract(format!("shape {shape:?} must have positive dimensions"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Shape {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: true,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; n]).expect("zeros: valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value]).expect("scalar shape")
    }

    /// Rows of equal length stacked into an `m × n` matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return contract("from_rows: ragged rows");
        }
        Self::new(vec![m, n], rows.concat())
    }

    /// Gaussian entries with standard deviation `scale`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], scale: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect::<Vec<f64>>();
        Self::new(shape.to_vec(), data).expect("randn: valid shape")
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(TensorError::Shape {
                op: "set_grad",
                lhs: self.shape.clone(),
                rhs: vec![grad.len()],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Element at `(row, col)` of a 2-D tensor.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[1] + col]
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    Gather(Var, Rc<[usize]>),
    L2NormalizeRows(Var),
    CrossEntropy(Var, Rc<[usize]>),
    BceWithLogits(Var, Rc<[f64]>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records a forward computation for one reverse pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn cols(shape: &[usize]) -> usize {
    *shape.last().expect("non-empty shape")
}

fn rows(shape: &[usize]) -> usize {
    shape.iter().rev().skip(1).product()
}

fn is_matrix(shape: &[usize]) -> bool {
    shape.len() == 2
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Binds a tensor as a leaf; it receives a gradient iff it requires one.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(t.shape, t.data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copies a recorded value out as a standalone tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone())
            .expect("tape values are well formed")
            .with_requires_grad(false)
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_matrix(sa) || !is_matrix(sb) || sa[1] != sb[0] {
            return Err(self.shape_err("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(name, a, b));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    fn row_broadcast(&mut self, a: Var, row: Var, mul: bool) -> Result<Var> {
        let name = if mul { "mul_row" } else { "add_row" };
        let (sa, sr) = (self.shape(a), self.shape(row));
        if !is_matrix(sa) || sr != [1, sa[1]] {
            return Err(self.shape_err(name, a, row));
        }
        let n = sa[1];
        let r = self.value(row);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| if mul { x * r[i % n] } else { x + r[i % n] })
            .collect();
        let rg = self.rg(a) || self.rg(row);
        let shape = sa.to_vec();
        let op = if mul { Op::MulRow(a, row) } else { Op::AddRow(a, row) };
        Ok(self.push(shape, out, op, rg))
    }

    /// `a + row` with the `1 × n` row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, false)
    }

    /// `a ⊙ row` with the `1 × n` row broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, true)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).iter().map(|&x| x * factor).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(shape, out, Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(shape, out, Op::Relu(a), rg)
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let out = softmax_rows_raw(self.value(a), cols(&shape));
        let rg = self.rg(a);
        self.push(shape, out, Op::SoftmaxRows(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if !is_matrix(s) {
            return contract(format!("transpose expects a matrix, got {s:?}"));
        }
        let (m, n) = (s[0], s[1]);
        let v = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.is_empty() || shape.iter().product::<usize>() != self.value(a).len() || shape.contains(&0) {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let (out, rg) = (self.value(a).to_vec(), self.rg(a));
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Mean(a), rg)
    }

    /// Column means of an `m × n` matrix as a `1 × n` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if !is_matrix(s) {
            return contract(format!("mean_rows expects a matrix, got {s:?}"));
        }
        let (m, n) = (s[0], s[1]);
        let mut out = vec![0.0; n];
        for row in self.value(a).chunks_exact(n) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let rg = self.rg(a);
        Ok(self.push(vec![1, n], out, Op::MeanRows(a), rg))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return contract("concat_rows needs at least one part");
        };
        let n = cols(self.shape(first));
        let mut m = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if !is_matrix(s) || s[1] != n {
                return Err(self.shape_err("concat_rows", first, p));
            }
            m += s[0];
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![m, n], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// `out[i] = a[index[i]]` over the flattened storage, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let len = self.value(a).len();
        if shape.iter().product::<usize>() != index.len() || shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::Shape {
                op: "gather",
                lhs: shape.to_vec(),
                rhs: vec![index.len()],
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= len) {
            return contract(format!("gather index {bad} out of range for {len} elements"));
        }
        let v = self.value(a);
        let out = index.iter().map(|&i| v[i]).collect();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), out, Op::Gather(a, index), rg))
    }

    /// Rows `start..start + count` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if !is_matrix(&s) || start + count > s[0] || count == 0 {
            return contract(format!("slice_rows {start}..{} out of range for {s:?}", start + count));
        }
        let n = s[1];
        let index: Rc<[usize]> = (start * n..(start + count) * n).collect();
        self.gather(a, index, &[count, n])
    }

    /// Scales each row to unit L2 norm. An all-zero row maps to `e₁` and
    /// passes no gradient.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let n = cols(&shape);
        let mut out = Vec::with_capacity(self.value(a).len());
        for row in self.value(a).chunks_exact(n) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                out.extend(row.iter().map(|x| x / norm));
            } else {
                out.push(1.0);
                out.extend(std::iter::repeat(0.0).take(n - 1));
            }
        }
        let rg = self.rg(a);
        self.push(shape, out, Op::L2NormalizeRows(a), rg)
    }

    /// Mean softmax cross-entropy of `m × C` logits against class ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if !is_matrix(&s) || s[0] != targets.len() {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![targets.len()],
            });
        }
        let c = s[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return contract(format!("class id {t} out of range for {c} classes"));
        }
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let row = &self.value(logits)[i * c..(i + 1) * c];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                lse - row[t]
            })
            .sum::<f64>()
            / targets.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(vec![1], vec![loss], Op::CrossEntropy(logits, targets.into()), rg))
    }

    /// Mean binary cross-entropy between sigmoid(logits) and targets in [0, 1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        if self.value(logits).len() != targets.len() {
            return Err(TensorError::Shape {
                op: "bce_with_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let n = targets.len() as f64;
        let loss = self
            .value(logits)
            .iter()
            .zip(targets)
            .map(|(&z, &t)| softplus(z) - t * z)
            .sum::<f64>()
            / n;
        let rg = self.rg(logits);
        Ok(self.push(vec![1], vec![loss], Op::BceWithLogits(logits, targets.into()), rg))
    }

    /// Mean squared error between two equally shaped values.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Squared L2 distance between two equally shaped values.
    pub fn squared_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.sum(sq))
    }

    /// Populates gradients of `loss` with respect to every recorded value
    /// that requires one. Leaves that require a gradient but are not
    /// ancestors of `loss` receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return contract("backward called twice on the same tape; re-run the forward pass");
        }
        if self.nodes[loss.0].value.len() != 1 {
            return contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            ));
        }
        self.backward_done = true;
        if self.nodes[loss.0].requires_grad {
            self.nodes[loss.0].grad = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &g);
            self.nodes[i].grad = Some(g);
        }
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, contrib: impl FnOnce(&mut [f64])) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let len = node.value.len();
        let g = node.grad.get_or_insert_with(|| vec![0.0; len]);
        contrib(g);
    }

    fn propagate(&mut self, i: usize, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.rg(a) {
                    let bv = &self.nodes[b.0].value;
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for c in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[r * n + j] * bv[c * n + j];
                            }
                            da[r * k + c] = s;
                        }
                    }
                    self.acc(a, |ga| add_into(ga, &da));
                }
                if self.rg(b) {
                    let av = &self.nodes[a.0].value;
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        for c in 0..k {
                            let x = av[r * k + c];
                            if x == 0.0 {
                                continue;
                            }
                            let dst = &mut db[c * n..(c + 1) * n];
                            for (d, &gv) in dst.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                                *d += x * gv;
                            }
                        }
                    }
                    self.acc(b, |gb| add_into(gb, &db));
                }
            }
            Op::Add(a, b) => {
                self.acc(a, |ga| add_into(ga, g));
                self.acc(b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.acc(a, |ga| add_into(ga, g));
                self.acc(b, |gb| gb.iter_mut().zip(g).for_each(|(d, x)| *d -= x));
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(&self.nodes[b.0].value).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.iter().zip(&self.nodes[a.0].value).map(|(x, y)| x * y).collect();
                self.acc(a, |ga| add_into(ga, &da));
                self.acc(b, |gb| add_into(gb, &db));
            }
            Op::AddRow(a, row) => {
                let n = self.shape(row)[1];
                self.acc(a, |ga| add_into(ga, g));
                self.acc(row, |gr| {
                    for chunk in g.chunks_exact(n) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::MulRow(a, row) => {
                let n = self.shape(row)[1];
                let rv = self.nodes[row.0].value.clone();
                let da: Vec<f64> = g.iter().enumerate().map(|(j, x)| x * rv[j % n]).collect();
                let mut dr = vec![0.0; n];
                for (j, (x, av)) in g.iter().zip(&self.nodes[a.0].value).enumerate() {
                    dr[j % n] += x * av;
                }
                self.acc(a, |ga| add_into(ga, &da));
                self.acc(row, |gr| add_into(gr, &dr));
            }
            Op::Scale(a, f) => self.acc(a, |ga| ga.iter_mut().zip(g).for_each(|(d, x)| *d += f * x)),
            Op::Relu(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[a.0].value)
                    .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                    .collect();
                self.acc(a, |ga| add_into(ga, &da));
            }
            Op::SoftmaxRows(a) => {
                let n = cols(&self.nodes[i].shape);
                let y = &self.nodes[i].value;
                let mut da = vec![0.0; y.len()];
                for ((dst, yr), gr) in da.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(g.chunks_exact(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                self.acc(a, |ga| add_into(ga, &da));
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                self.acc(a, |ga| {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Reshape(a) => self.acc(a, |ga| add_into(ga, g)),
            Op::Sum(a) => self.acc(a, |ga| ga.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let scale = g[0] / self.nodes[a.0].value.len() as f64;
                self.acc(a, |ga| ga.iter_mut().for_each(|d| *d += scale));
            }
            Op::MeanRows(a) => {
                let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                self.acc(a, |ga| {
                    for (j, d) in ga.iter_mut().enumerate() {
                        *d += g[j % n] / m as f64;
                    }
                });
            }
            Op::ConcatRows(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    let slice = &g[offset..offset + len];
                    self.acc(p, |gp| add_into(gp, slice));
                    offset += len;
                }
            }
            Op::Gather(a, ref index) => {
                self.acc(a, |ga| {
                    for (&src, &x) in index.iter().zip(g) {
                        ga[src] += x;
                    }
                });
            }
            Op::L2NormalizeRows(a) => {
                let n = cols(&self.nodes[i].shape);
                let x = &self.nodes[a.0].value;
                let y = &self.nodes[i].value;
                let mut da = vec![0.0; x.len()];
                for r in 0..rows(&self.nodes[i].shape) {
                    let xr = &x[r * n..(r + 1) * n];
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        da[r * n + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                self.acc(a, |ga| add_into(ga, &da));
            }
            Op::CrossEntropy(a, ref targets) => {
                let c = self.shape(a)[1];
                let m = targets.len() as f64;
                let mut da = softmax_rows_raw(&self.nodes[a.0].value, c);
                for (r, &t) in targets.iter().enumerate() {
                    da[r * c + t] -= 1.0;
                }
                da.iter_mut().for_each(|d| *d *= g[0] / m);
                self.acc(a, |ga| add_into(ga, &da));
            }
            Op::BceWithLogits(a, ref targets) => {
                let n = targets.len() as f64;
                let da: Vec<f64> = self.nodes[a.0]
                    .value
                    .iter()
                    .zip(targets.iter())
                    .map(|(&z, &t)| (sigmoid(z) - t) * g[0] / n)
                    .collect();
                self.acc(a, |ga| add_into(ga, &da));
            }
        }
    }

    /// Adds the gradient recorded for `v` into `target.grad`.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        if !self.backward_done {
            return contract("accumulate_into before backward");
        }
        if !target.requires_grad {
            return Ok(());
        }
        let Some(g) = self.grad(v) else {
            return contract(format!("no gradient recorded for node {}", v.0));
        };
        if g.len() != target.numel() {
            return Err(TensorError::Shape {
                op: "accumulate_into",
                lhs: target.shape.clone(),
                rhs: self.shape(v).to_vec(),
            });
        }
        match target.grad.as_mut() {
            Some(existing) => add_into(existing, g),
            None => target.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// [`Tape::accumulate_into`] over parallel slices of bound vars and tensors.
    pub fn accumulate_all(&self, vars: &[Var], targets: Vec<&mut Tensor>) -> Result<()> {
        if vars.len() != targets.len() {
            return contract(format!(
                "{} bound vars for {} parameter tensors",
                vars.len(),
                targets.len()
            ));
        }
        for (&v, t) in vars.iter().zip(targets) {
            self.accumulate_into(v, t)?;
        }
        Ok(())
    }
}

/// Plain gradient descent: `p ← p − lr·grad(p)`, then clears the gradients.
/// Tensors that do not require gradients are skipped.
pub fn sgd_step<'a>(params: impl IntoIterator<Item = &'a mut Tensor>, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return contract(format!("learning rate must be finite and non-negative, got {lr}"));
    }
    let mut params: Vec<&mut Tensor> = params.into_iter().filter(|p| p.requires_grad).collect();
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return contract(format!("sgd_step: parameter of shape {:?} has no gradient", p.shape));
    }
    for p in params.iter_mut() {
        let g = p.grad.take().expect("checked above");
        for (x, d) in p.data.iter_mut().zip(&g) {
            *x -= lr * d;
        }
    }
    Ok(())
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let dst = &mut out[r * n..(r + 1) * n];
        for c in 0..k {
            let x = a[r * k + c];
            if x == 0.0 {
                continue;
            }
            for (d, &y) in dst.iter_mut().zip(&b[c * n..(c + 1) * n]) {
                *d += x * y;
            }
        }
    }
    out
}

pub(crate) fn softmax_rows_raw(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (v - max).exp()));
        let total: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= total);
    }
    out
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
