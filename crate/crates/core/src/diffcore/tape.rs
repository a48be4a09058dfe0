//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every operation appends a node whose inputs are earlier nodes, so the tape is
//! topologically ordered by construction and `backward` is a single reverse sweep.

use super::tensor::Tensor;
use crate::error::TensorError;

/// Added under the square root when differentiating a Euclidean distance, so coincident
/// points get a zero (not NaN) gradient.
pub const DISTANCE_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Sigmoid(Var),
    LogClamped { x: Var, lo: f64, hi: f64 },
    RowSoftmax(Var),
    GatherRows(Var, Vec<usize>),
    PickColumns(Var, Vec<usize>),
    RowDistance(Var, Var),
    Distance(Var, Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records a leaf. Leaves with `requires_grad` receive a zeroed gradient buffer.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| Tensor::zeros(value.shape()));
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient; `None` for nodes that do not require one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let grad = requires_grad.then(|| Tensor::zeros(value.shape()));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let bv = self.value(bias);
        xv.require_rank("add_bias", 2)?;
        bv.require_rank("add_bias", 1)?;
        let n = xv.shape()[1];
        if bv.shape()[0] != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.value(a).require_same_shape("add", self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.value(a).require_same_shape("sub", self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.value(a).require_same_shape("mul", self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Elementwise product with a constant; no gradient flows into `c`.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var, TensorError> {
        self.value(x).require_same_shape("mul_const", &c)?;
        let value = self.value(x).zip_map(&c, |a, b| a * b);
        Ok(self.push(value, Op::MulConst(x, c), &[x]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        self.push(value, Op::Exp(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// `ln(clamp(x, lo, hi))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi).ln());
        self.push(value, Op::LogClamped { x, lo, hi }, &[x])
    }

    pub fn row_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        xv.require_rank("row_softmax", 2)?;
        if !xv.all_finite() {
            return Err(TensorError::NonFinite { op: "row_softmax" });
        }
        let value = softmax_rows(xv);
        Ok(self.push(value, Op::RowSoftmax(x), &[x]))
    }

    /// Selects rows `idx` of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let xv = self.value(x);
        xv.require_rank("gather_rows", 2)?;
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    size: m,
                });
            }
            data.extend_from_slice(xv.row(i));
        }
        let value = Tensor::new(vec![idx.len(), n], data)?;
        Ok(self.push(value, Op::GatherRows(x, idx.to_vec()), &[x]))
    }

    /// `out[i] = x[i, cols[i]]`.
    pub fn pick_columns(&mut self, x: Var, cols: &[usize]) -> Result<Var, TensorError> {
        let xv = self.value(x);
        xv.require_rank("pick_columns", 2)?;
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        if cols.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "pick_columns",
                left: xv.shape().to_vec(),
                right: vec![cols.len()],
            });
        }
        let mut data = Vec::with_capacity(m);
        for (i, &c) in cols.iter().enumerate() {
            if c >= n {
                return Err(TensorError::Index {
                    op: "pick_columns",
                    index: c,
                    size: n,
                });
            }
            data.push(xv.get(i, c));
        }
        Ok(self.push(
            Tensor::vector(data),
            Op::PickColumns(x, cols.to_vec()),
            &[x],
        ))
    }

    /// Euclidean distance between matching rows of two `m×d` matrices, giving `[m]`.
    pub fn row_distance(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        av.require_rank("row_distance", 2)?;
        av.require_same_shape("row_distance", bv)?;
        let data = (0..av.rows())
            .map(|i| squared_distance(av.row(i), bv.row(i)).sqrt())
            .collect();
        Ok(self.push(Tensor::vector(data), Op::RowDistance(a, b), &[a, b]))
    }

    /// Euclidean distance between two equal-shape tensors, as a scalar.
    pub fn l2_distance(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        av.require_same_shape("l2_distance", bv)?;
        let d = squared_distance(av.data(), bv.data()).sqrt();
        Ok(self.push(Tensor::scalar(d), Op::Distance(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Accumulates d(loss)/d(node) into every node that requires a gradient.
    ///
    /// Calling this twice without [`Tape::zero_grad`] adds the gradients twice.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            for (input, contrib) in self.local_grads(idx, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match adj[input.0].as_mut() {
                    Some(acc) => acc.add_assign(&contrib),
                    None => adj[input.0] = Some(contrib),
                }
            }
            if let Some(buf) = self.nodes[idx].grad.as_mut() {
                buf.add_assign(&g);
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let mut res = Vec::new();
                if needs(*a) {
                    let bt = val(*b).transpose().expect("rank checked at record");
                    res.push((*a, g.matmul(&bt).expect("shapes checked at record")));
                }
                if needs(*b) {
                    let at = val(*a).transpose().expect("rank checked at record");
                    res.push((*b, at.matmul(g).expect("shapes checked at record")));
                }
                res
            }
            Op::AddBias(x, b) => {
                let n = val(*b).len();
                let mut db = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (d, r) in db.iter_mut().zip(row) {
                        *d += r;
                    }
                }
                vec![(*x, g.clone()), (*b, Tensor::vector(db))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |x, y| x * y)),
                (*b, g.zip_map(val(*a), |x, y| x * y)),
            ],
            Op::MulConst(x, c) => vec![(*x, g.zip_map(c, |a, b| a * b))],
            Op::Scale(x, c) => vec![(*x, g.map(|v| v * c))],
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::Tanh(x) => vec![(*x, g.zip_map(out, |d, y| d * (1.0 - y * y)))],
            Op::Relu(x) => vec![(
                *x,
                g.zip_map(val(*x), |d, v| if v > 0.0 { d } else { 0.0 }),
            )],
            Op::Exp(x) => vec![(*x, g.zip_map(out, |d, y| d * y))],
            Op::Sigmoid(x) => vec![(*x, g.zip_map(out, |d, y| d * y * (1.0 - y)))],
            Op::LogClamped { x, lo, hi } => vec![(
                *x,
                g.zip_map(val(*x), |d, v| {
                    if v >= *lo && v <= *hi {
                        d / v
                    } else {
                        0.0
                    }
                }),
            )],
            Op::RowSoftmax(x) => {
                let n = out.cols();
                let mut dx = Vec::with_capacity(out.len());
                for (y, dy) in out.data().chunks(n).zip(g.data().chunks(n)) {
                    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                    dx.extend(y.iter().zip(dy).map(|(yi, di)| yi * (di - dot)));
                }
                vec![(*x, Tensor::new(out.shape().to_vec(), dx).expect("same shape"))]
            }
            Op::GatherRows(x, idx) => {
                let src = val(*x);
                let n = src.cols();
                let mut dx = Tensor::zeros(src.shape());
                for (k, &i) in idx.iter().enumerate() {
                    let row = &g.data()[k * n..(k + 1) * n];
                    for (d, r) in dx.data_mut()[i * n..(i + 1) * n].iter_mut().zip(row) {
                        *d += r;
                    }
                }
                vec![(*x, dx)]
            }
            Op::PickColumns(x, cols) => {
                let src = val(*x);
                let n = src.cols();
                let mut dx = Tensor::zeros(src.shape());
                for (i, &c) in cols.iter().enumerate() {
                    dx.data_mut()[i * n + c] += g.data()[i];
                }
                vec![(*x, dx)]
            }
            Op::RowDistance(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let n = av.cols();
                let mut da = Vec::with_capacity(av.len());
                for i in 0..av.rows() {
                    let (ra, rb) = (av.row(i), bv.row(i));
                    let denom = (squared_distance(ra, rb) + DISTANCE_EPS).sqrt();
                    let scale = g.data()[i] / denom;
                    da.extend(ra.iter().zip(rb).map(|(x, y)| scale * (x - y)));
                }
                debug_assert_eq!(da.len(), av.rows() * n);
                let da = Tensor::new(av.shape().to_vec(), da).expect("same shape");
                let db = da.map(|v| -v);
                vec![(*a, da), (*b, db)]
            }
            Op::Distance(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let denom = (squared_distance(av.data(), bv.data()) + DISTANCE_EPS).sqrt();
                let scale = g.item() / denom;
                let da = av.zip_map(bv, |x, y| scale * (x - y));
                let db = da.map(|v| -v);
                vec![(*a, da), (*b, db)]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
            Op::Mean(x) => {
                let n = val(*x).len().max(1) as f64;
                vec![(*x, Tensor::full(val(*x).shape(), g.item() / n))]
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let n = x.cols();
    let mut data = Vec::with_capacity(x.len());
    for row in x.data().chunks(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = data.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - max).exp();
            total += e;
            data.push(e);
        }
        for v in &mut data[start..] {
            *v /= total;
        }
    }
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}
