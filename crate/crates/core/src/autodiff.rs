//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each op appends a node
//! holding its output value and whatever it needs for the backward rule;
//! node order is creation order, so inputs always precede their consumers
//! and [`Tape::backward`] is a single reverse sweep.

use crate::error::{LabError, Result};
use crate::tensor::Tensor;

/// GELU uses the tanh approximation with this constant, `sqrt(2/pi)`.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// Variance floor in layer normalisation.
pub const LAYER_NORM_EPS: f64 = 1e-8;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Hadamard(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    SoftmaxRows(Var),
    Transpose(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor },
    Mse { pred: Var, target: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds the gradient of `v` into `target.grad`. A node that the loss does
    /// not depend on contributes zeros.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => target.accumulate_grad(g),
            None => target.accumulate_grad(&Tensor::zeros(target.rows(), target.cols())),
        }
    }
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

    /// Registers a leaf. It is differentiated iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs_grad = t.requires_grad;
        self.nodes.push(Node {
            value: t.detached(),
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t.detached(),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        value.check_finite(name)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        self.push("hadamard", out, Op::Hadamard(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// `x + 1·bias`, broadcasting a `1×n` bias over the rows of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(LabError::dim("add_row", xv.shape(), bv.shape()));
        }
        let mut out = xv.detached();
        let n = xv.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % n];
        }
        self.push("add_row", out, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scale(s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu);
        self.push("gelu", out, Op::Gelu(a), &[a])
    }

    /// Per-row normalisation to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.shape();
        let mut out = Tensor::zeros(m, n);
        let mut rstd = Vec::with_capacity(m);
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, v) in row.iter().enumerate() {
                out.set(r, j, (v - mean) * rs);
            }
            rstd.push(rs);
        }
        self.push("layer_norm", out, Op::LayerNorm { x, rstd }, &[x])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows(self.value(a));
        self.push("softmax_rows", out, Op::SoftmaxRows(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    /// Average of the rows: `m×n → 1×n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.shape();
        if m == 0 {
            return Err(LabError::Usage("mean_rows of an empty tensor".into()));
        }
        let mut out = vec![0.0; n];
        for r in 0..m {
            out.iter_mut().zip(av.row(r)).for_each(|(o, v)| *o += v / m as f64);
        }
        let out = Tensor::from_vec(1, n, out)?;
        self.push("mean_rows", out, Op::MeanRows(a), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| LabError::Usage("concat_rows of nothing".into()))?;
        let n = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            if v.cols() != n {
                return Err(LabError::dim("concat_rows", self.value(*first).shape(), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_vec(rows, n, data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn reduce_mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(LabError::Usage("reduce_mean of an empty tensor".into()));
        }
        let out = Tensor::scalar(av.sum() / av.len() as f64);
        self.push("reduce_mean", out, Op::Mean(a), &[a])
    }

    /// Mean softmax cross-entropy of `m×c` logits against `m` class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (m, c) = lv.shape();
        if labels.len() != m {
            return Err(LabError::Input(format!(
                "{} labels for {m} rows of logits",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= c) {
            return Err(LabError::Input(format!("label {bad} out of range [0,{c})")));
        }
        if m == 0 {
            return Err(LabError::Usage("cross-entropy over an empty batch".into()));
        }
        let probs = softmax_rows(lv);
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            // log-sum-exp form keeps the loss finite for confident logits.
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        let out = Tensor::scalar(loss / m as f64);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push("softmax_cross_entropy", out, op, &[logits])
    }

    /// Mean squared error over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(LabError::dim("mse_loss", p.shape(), t.shape()));
        }
        if p.is_empty() {
            return Err(LabError::Usage("mse_loss over an empty tensor".into()));
        }
        let n = p.len() as f64;
        let loss = p.data().iter().zip(t.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
        self.push("mse_loss", Tensor::scalar(loss), Op::Mse { pred, target }, &[pred, target])
    }

    /// Reverse sweep from a scalar `loss`. Every node that depends on a
    /// trainable leaf gets a gradient, intermediates included.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(LabError::Usage("loss is not on this tape".into()));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(LabError::Usage(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].clone() else { continue };
            g.check_finite("backward")?;
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut send = |v: Var, contrib: Tensor| -> Result<()> {
            if !self.nodes[v.0].needs_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(acc) => *acc = acc.add(&contrib)?,
                slot @ None => *slot = Some(contrib),
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    send(*a, g.matmul(&self.value(*b).transpose())?)?;
                }
                if self.nodes[b.0].needs_grad {
                    send(*b, self.value(*a).transpose().matmul(g)?)?;
                }
            }
            Op::Hadamard(a, b) => {
                send(*a, g.hadamard(self.value(*b))?)?;
                send(*b, g.hadamard(self.value(*a))?)?;
            }
            Op::Add(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.scale(-1.0))?;
            }
            Op::AddRow(x, bias) => {
                send(*x, g.clone())?;
                let (m, n) = g.shape();
                let mut db = vec![0.0; n];
                for r in 0..m {
                    db.iter_mut().zip(g.row(r)).for_each(|(d, v)| *d += v);
                }
                send(*bias, Tensor::from_vec(1, n, db)?)?;
            }
            Op::Scale(a, s) => send(*a, g.scale(*s))?,
            Op::Relu(a) => {
                let x = self.value(*a);
                send(*a, g.zip_with(x, "relu'", |g, x| if x > 0.0 { g } else { 0.0 })?)?;
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                send(*a, g.zip_with(x, "gelu'", |g, x| g * gelu_derivative(x))?)?;
            }
            Op::LayerNorm { x, rstd } => {
                let y = &node.value;
                let (m, n) = y.shape();
                let mut dx = Tensor::zeros(m, n);
                for (r, &rs) in rstd.iter().enumerate().take(m) {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let mean_g = gr.iter().sum::<f64>() / n as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx.set(r, j, rs * (gr[j] - mean_g - yr[j] * mean_gy));
                    }
                }
                send(*x, dx)?;
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let (m, n) = y.shape();
                let mut dx = Tensor::zeros(m, n);
                for r in 0..m {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx.set(r, j, yr[j] * (gr[j] - dot));
                    }
                }
                send(*a, dx)?;
            }
            Op::Transpose(a) => send(*a, g.transpose())?,
            Op::MeanRows(a) => {
                let (m, n) = self.value(*a).shape();
                let mut dx = Tensor::zeros(m, n);
                for r in 0..m {
                    for j in 0..n {
                        dx.set(r, j, g.get(0, j) / m as f64);
                    }
                }
                send(*a, dx)?;
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    let idx: Vec<usize> = (offset..offset + rows).collect();
                    send(*p, g.select_rows(&idx))?;
                    offset += rows;
                }
            }
            Op::Sum(a) => {
                let (m, n) = self.value(*a).shape();
                send(*a, Tensor::filled(m, n, g.get(0, 0)))?;
            }
            Op::Mean(a) => {
                let (m, n) = self.value(*a).shape();
                send(*a, Tensor::filled(m, n, g.get(0, 0) / (m * n) as f64))?;
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let m = labels.len() as f64;
                let mut d = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    let v = d.get(r, y);
                    d.set(r, y, v - 1.0);
                }
                send(*logits, d.scale(g.get(0, 0) / m))?;
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let n = p.len() as f64;
                let diff = p.sub(self.value(*target))?;
                let k = 2.0 * g.get(0, 0) / n;
                send(*pred, diff.scale(k))?;
                send(*target, diff.scale(-k))?;
            }
        }
        Ok(())
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn softmax_rows(t: &Tensor) -> Tensor {
    let (m, n) = t.shape();
    let mut out = Tensor::zeros(m, n);
    for r in 0..m {
        let row = t.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for (j, v) in row.iter().enumerate() {
            out.set(r, j, (v - max).exp() / z);
        }
    }
    out
}
