//! Dense f64 tensors and a reverse-mode differentiation tape.
//!
//! The tape is append-only and define-by-run: every op pushes one node whose
//! parents are earlier nodes, so reverse iteration is already a reverse
//! topological order and backward visits each node exactly once. A tape is
//! rebuilt per forward pass and is confined to a single thread.
//!
//! Every op validates shapes and rejects non-finite outputs.

mod checkpoint;
mod optim;
mod params;
mod svd;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError};
pub use optim::SgdMomentum;
pub use params::{Binder, ParamId, Params};
pub use svd::{svd_truncated, Svd};

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("no convergence within the iteration cap")]
    NoConvergence,
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

/// Row-major dense tensor of f64 values. A scalar has an empty shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length must match shape product"
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Centered uniform init on [-scale, scale).
    pub fn uniform<R: Rng>(shape: &[usize], scale: f64, rng: &mut R) -> Self {
        let data = (0..shape.iter().product())
            .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The single value of a scalar (or any one-element) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() needs a one-element tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    #[cfg(test)]
    fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ClampMin(Var, f64),
    Matmul(Var, Var),
    Matvec(Var, Var),
    Dot(Var, Var),
    Outer(Var, Var),
    Transpose(Var),
    Softmax(Var),
    Sigmoid(Var),
    Relu(Var),
    Sqrt(Var),
    Recip(Var),
    Sum(Var),
    Mean(Var),
    MeanLastAxis(Var),
    L2Norm(Var),
    MulByScalar(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    },
    ChannelBias(Var, Var),
    Reshape(Var),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    SliceRow(Var, usize),
    SliceChannel(Var, usize),
    CrossEntropyLogits(Var, usize),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires: bool,
}

/// Append-only op record with reverse accumulation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_unchecked(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last `backward` call, if the node needed
    /// one and was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires: bool) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(self.push_unchecked(value, op, requires))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    // ----- elementwise -----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let v = zip(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", v, Op::Add(a, b), self.requires(a) || self.requires(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let v = zip(self.value(a), self.value(b), |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b), self.requires(a) || self.requires(b))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("hadamard", a, b)?;
        let v = zip(self.value(a), self.value(b), |x, y| x * y);
        self.push(
            "hadamard",
            v,
            Op::Hadamard(a, b),
            self.requires(a) || self.requires(b),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let v = map(self.value(a), |x| x * c);
        self.push("scale", v, Op::Scale(a, c), self.requires(a))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let v = map(self.value(a), |x| x + c);
        self.push("add_scalar", v, Op::AddScalar(a), self.requires(a))
    }

    pub fn clamp_min(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let v = map(self.value(a), |x| x.max(c));
        self.push("clamp_min", v, Op::ClampMin(a, c), self.requires(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = map(self.value(a), |x| 1.0 / (1.0 + (-x).exp()));
        self.push("sigmoid", v, Op::Sigmoid(a), self.requires(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = map(self.value(a), |x| x.max(0.0));
        self.push("relu", v, Op::Relu(a), self.requires(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = map(self.value(a), f64::sqrt);
        self.push("sqrt", v, Op::Sqrt(a), self.requires(a))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = map(self.value(a), |x| 1.0 / x);
        self.push("recip", v, Op::Recip(a), self.requires(a))
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let v = matmul_raw(ta, tb);
        self.push(
            "matmul",
            v,
            Op::Matmul(a, b),
            self.requires(a) || self.requires(b),
        )
    }

    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var, TensorError> {
        let (ta, tx) = (self.value(a), self.value(x));
        if ta.rank() != 2 || tx.rank() != 1 || ta.shape()[1] != tx.shape()[0] {
            return Err(shape_err(
                "matvec",
                format!("{:?} x {:?}", ta.shape(), tx.shape()),
            ));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![0.0; m];
        for r in 0..m {
            let row = &ta.data[r * n..(r + 1) * n];
            out[r] = row.iter().zip(&tx.data).map(|(p, q)| p * q).sum();
        }
        self.push(
            "matvec",
            Tensor::vector(out),
            Op::Matvec(a, x),
            self.requires(a) || self.requires(x),
        )
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 1 || tb.rank() != 1 || ta.len() != tb.len() {
            return Err(shape_err("dot", format!("{:?} . {:?}", ta.shape(), tb.shape())));
        }
        let v: f64 = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).sum();
        self.push(
            "dot",
            Tensor::scalar(v),
            Op::Dot(a, b),
            self.requires(a) || self.requires(b),
        )
    }

    pub fn outer_product(&mut self, u: Var, v: Var) -> Result<Var, TensorError> {
        let (tu, tv) = (self.value(u), self.value(v));
        if tu.rank() != 1 || tv.rank() != 1 {
            return Err(shape_err(
                "outer_product",
                format!("{:?} (x) {:?}", tu.shape(), tv.shape()),
            ));
        }
        let (m, n) = (tu.len(), tv.len());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = tu.data[i] * tv.data[j];
            }
        }
        self.push(
            "outer_product",
            Tensor::matrix(m, n, out),
            Op::Outer(u, v),
            self.requires(u) || self.requires(v),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(shape_err("transpose", format!("{:?}", ta.shape())));
        }
        let v = transpose_raw(ta);
        self.push("transpose", v, Op::Transpose(a), self.requires(a))
    }

    // ----- reductions & nonlinear blocks -----

    /// Softmax over a vector, or row-wise over a matrix.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let v = match ta.rank() {
            1 => Tensor::vector(softmax_slice(&ta.data)),
            2 => {
                let (r, c) = (ta.shape()[0], ta.shape()[1]);
                let mut out = Vec::with_capacity(r * c);
                for row in 0..r {
                    out.extend(softmax_slice(&ta.data[row * c..(row + 1) * c]));
                }
                Tensor::matrix(r, c, out)
            }
            _ => return Err(shape_err("softmax", format!("{:?}", ta.shape()))),
        };
        self.push("softmax", v, Op::Softmax(a), self.requires(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a).data.iter().sum();
        self.push("sum", Tensor::scalar(v), Op::Sum(a), self.requires(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if ta.is_empty() {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let v = ta.data.iter().sum::<f64>() / ta.len() as f64;
        self.push("mean", Tensor::scalar(v), Op::Mean(a), self.requires(a))
    }

    /// Mean over the last axis: `[.., C] -> [..]`.
    pub fn mean_last_axis(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if ta.rank() < 1 || *ta.shape().last().unwrap() == 0 {
            return Err(shape_err("mean_last_axis", format!("{:?}", ta.shape())));
        }
        let c = *ta.shape().last().unwrap();
        let outer = ta.len() / c;
        let mut out = Vec::with_capacity(outer);
        for i in 0..outer {
            out.push(ta.data[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64);
        }
        let shape = ta.shape()[..ta.rank() - 1].to_vec();
        self.push(
            "mean_last_axis",
            Tensor::new(shape, out),
            Op::MeanLastAxis(a),
            self.requires(a),
        )
    }

    pub fn l2norm(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a).data.iter().map(|x| x * x).sum::<f64>().sqrt();
        self.push("l2norm", Tensor::scalar(v), Op::L2Norm(a), self.requires(a))
    }

    /// Multiply a tensor by a scalar-valued node.
    pub fn mul_by_scalar(&mut self, t: Var, s: Var) -> Result<Var, TensorError> {
        if self.value(s).len() != 1 {
            return Err(shape_err(
                "mul_by_scalar",
                format!("scalar operand has shape {:?}", self.value(s).shape()),
            ));
        }
        let sv = self.value(s).item();
        let v = map(self.value(t), |x| x * sv);
        self.push(
            "mul_by_scalar",
            v,
            Op::MulByScalar(t, s),
            self.requires(t) || self.requires(s),
        )
    }

    // ----- convolution -----

    /// 2-D convolution. Input is `[H, W, Cin]`, kernel `[Cout, Kh, Kw, Cin]`,
    /// output `[Ho, Wo, Cout]` with zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let (ti, tk) = (self.value(input), self.value(kernel));
        if ti.rank() != 3 || tk.rank() != 4 || ti.shape()[2] != tk.shape()[3] || stride == 0 {
            return Err(shape_err(
                "conv2d",
                format!("input {:?}, kernel {:?}, stride {stride}", ti.shape(), tk.shape()),
            ));
        }
        let (h, w) = (ti.shape()[0], ti.shape()[1]);
        let (kh, kw) = (tk.shape()[1], tk.shape()[2]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w}+{pad}"),
            ));
        }
        let v = conv2d_raw(ti, tk, stride, pad);
        self.push(
            "conv2d",
            v,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            },
            self.requires(input) || self.requires(kernel),
        )
    }

    /// Add a per-channel bias to a `[H, W, C]` tensor.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.rank() != 3 || tb.rank() != 1 || tx.shape()[2] != tb.shape()[0] {
            return Err(shape_err(
                "channel_bias",
                format!("{:?} + {:?}", tx.shape(), tb.shape()),
            ));
        }
        let c = tx.shape()[2];
        let mut out = tx.data.clone();
        for (i, v) in out.iter_mut().enumerate() {
            *v += tb.data[i % c];
        }
        let v = Tensor::new(tx.shape.clone(), out);
        self.push(
            "channel_bias",
            v,
            Op::ChannelBias(x, bias),
            self.requires(x) || self.requires(bias),
        )
    }

    // ----- shape plumbing -----

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if shape.iter().product::<usize>() != ta.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?}", ta.shape(), shape),
            ));
        }
        let v = Tensor::new(shape, ta.data.clone());
        self.push("reshape", v, Op::Reshape(a), self.requires(a))
    }

    pub fn flatten(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.value(a).len();
        self.reshape(a, vec![n])
    }

    /// Concatenate 1-D tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs".into()));
        }
        let mut out = Vec::new();
        let mut requires = false;
        for &p in parts {
            let tp = self.value(p);
            if tp.rank() != 1 {
                return Err(shape_err("concat", format!("{:?}", tp.shape())));
            }
            out.extend_from_slice(&tp.data);
            requires |= self.requires(p);
        }
        self.push(
            "concat",
            Tensor::vector(out),
            Op::Concat(parts.to_vec()),
            requires,
        )
    }

    /// Stack equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var, TensorError> {
        if rows.is_empty() {
            return Err(shape_err("stack_rows", "no inputs".into()));
        }
        let d = self.value(rows[0]).len();
        let mut out = Vec::with_capacity(rows.len() * d);
        let mut requires = false;
        for &r in rows {
            let tr = self.value(r);
            if tr.rank() != 1 || tr.len() != d {
                return Err(shape_err("stack_rows", format!("{:?}", tr.shape())));
            }
            out.extend_from_slice(&tr.data);
            requires |= self.requires(r);
        }
        self.push(
            "stack_rows",
            Tensor::matrix(rows.len(), d, out),
            Op::StackRows(rows.to_vec()),
            requires,
        )
    }

    pub fn slice_row(&mut self, m: Var, row: usize) -> Result<Var, TensorError> {
        let tm = self.value(m);
        if tm.rank() != 2 || row >= tm.shape()[0] {
            return Err(shape_err(
                "slice_row",
                format!("row {row} of {:?}", tm.shape()),
            ));
        }
        let c = tm.shape()[1];
        let v = Tensor::vector(tm.data[row * c..(row + 1) * c].to_vec());
        self.push("slice_row", v, Op::SliceRow(m, row), self.requires(m))
    }

    /// Extract channel `c` of a `[H, W, C]` tensor as `[H, W]`.
    pub fn slice_channel(&mut self, x: Var, channel: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if tx.rank() != 3 || channel >= tx.shape()[2] {
            return Err(shape_err(
                "slice_channel",
                format!("channel {channel} of {:?}", tx.shape()),
            ));
        }
        let (h, w, c) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let mut out = Vec::with_capacity(h * w);
        for i in 0..h * w {
            out.push(tx.data[i * c + channel]);
        }
        let v = Tensor::new(vec![h, w], out);
        self.push(
            "slice_channel",
            v,
            Op::SliceChannel(x, channel),
            self.requires(x),
        )
    }

    /// Cross entropy of a logit vector against a class index:
    /// `logsumexp(x) - x[label]`.
    pub fn cross_entropy_logits(&mut self, logits: Var, label: usize) -> Result<Var, TensorError> {
        let tl = self.value(logits);
        if tl.rank() != 1 || label >= tl.len() {
            return Err(shape_err(
                "cross_entropy_logits",
                format!("label {label}, logits {:?}", tl.shape()),
            ));
        }
        let max = tl.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + tl.data.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let v = Tensor::scalar(lse - tl.data[label]);
        self.push(
            "cross_entropy_logits",
            v,
            Op::CrossEntropyLogits(logits, label),
            self.requires(logits),
        )
    }

    // ----- backward -----

    fn accumulate(&mut self, v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(g) => {
                for (gi, di) in g.data.iter_mut().zip(&delta.data) {
                    *gi += di;
                }
            }
            None => self.nodes[v.0].grad = Some(delta),
        }
    }

    /// Reverse accumulation from a scalar root. Gradients of earlier calls
    /// are cleared first.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if self.value(root).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("root must be scalar, got {:?}", self.value(root).shape()),
            ));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let root_shape = self.value(root).shape().to_vec();
        self.nodes[root.0].grad = Some(Tensor::new(root_shape, vec![1.0]));

        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires || self.nodes[id].grad.is_none() {
                continue;
            }
            let gy = self.nodes[id].grad.clone().unwrap();
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(a, gy.clone());
                    self.accumulate(b, gy);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, gy.clone());
                    self.accumulate(b, map(&gy, |x| -x));
                }
                Op::Hadamard(a, b) => {
                    let (va, vb) = (self.value(a).clone(), self.value(b).clone());
                    self.accumulate(a, zip(&gy, &vb, |g, y| g * y));
                    self.accumulate(b, zip(&gy, &va, |g, x| g * x));
                }
                Op::Scale(a, c) => self.accumulate(a, map(&gy, |x| x * c)),
                Op::AddScalar(a) => self.accumulate(a, gy),
                Op::ClampMin(a, c) => {
                    let va = self.value(a).clone();
                    self.accumulate(a, zip(&gy, &va, |g, x| if x > c { g } else { 0.0 }));
                }
                Op::Matmul(a, b) => {
                    let (va, vb) = (self.value(a).clone(), self.value(b).clone());
                    let bt = transpose_raw(&vb);
                    let at = transpose_raw(&va);
                    self.accumulate(a, matmul_raw(&gy, &bt));
                    self.accumulate(b, matmul_raw(&at, &gy));
                }
                Op::Matvec(a, x) => {
                    let (va, vx) = (self.value(a).clone(), self.value(x).clone());
                    let (m, n) = (va.shape()[0], va.shape()[1]);
                    let mut da = vec![0.0; m * n];
                    for r in 0..m {
                        for c in 0..n {
                            da[r * n + c] = gy.data[r] * vx.data[c];
                        }
                    }
                    let mut dx = vec![0.0; n];
                    for r in 0..m {
                        let g = gy.data[r];
                        for c in 0..n {
                            dx[c] += va.data[r * n + c] * g;
                        }
                    }
                    self.accumulate(a, Tensor::matrix(m, n, da));
                    self.accumulate(x, Tensor::vector(dx));
                }
                Op::Dot(a, b) => {
                    let g = gy.item();
                    let (va, vb) = (self.value(a).clone(), self.value(b).clone());
                    self.accumulate(a, map(&vb, |y| g * y));
                    self.accumulate(b, map(&va, |x| g * x));
                }
                Op::Outer(u, v) => {
                    let (vu, vv) = (self.value(u).clone(), self.value(v).clone());
                    let (m, n) = (vu.len(), vv.len());
                    let mut du = vec![0.0; m];
                    let mut dv = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            let g = gy.data[i * n + j];
                            du[i] += g * vv.data[j];
                            dv[j] += g * vu.data[i];
                        }
                    }
                    self.accumulate(u, Tensor::vector(du));
                    self.accumulate(v, Tensor::vector(dv));
                }
                Op::Transpose(a) => self.accumulate(a, transpose_raw(&gy)),
                Op::Softmax(a) => {
                    let s = self.nodes[id].value.clone();
                    let cols = *s.shape().last().unwrap_or(&1);
                    let rows = s.len() / cols;
                    let mut dx = vec![0.0; s.len()];
                    for r in 0..rows {
                        let srow = &s.data[r * cols..(r + 1) * cols];
                        let grow = &gy.data[r * cols..(r + 1) * cols];
                        let inner: f64 = srow.iter().zip(grow).map(|(si, gi)| si * gi).sum();
                        for c in 0..cols {
                            dx[r * cols + c] = srow[c] * (grow[c] - inner);
                        }
                    }
                    self.accumulate(a, Tensor::new(s.shape().to_vec(), dx));
                }
                Op::Sigmoid(a) => {
                    let s = self.nodes[id].value.clone();
                    self.accumulate(a, zip(&gy, &s, |g, si| g * si * (1.0 - si)));
                }
                Op::Relu(a) => {
                    let va = self.value(a).clone();
                    self.accumulate(a, zip(&gy, &va, |g, x| if x > 0.0 { g } else { 0.0 }));
                }
                Op::Sqrt(a) => {
                    let s = self.nodes[id].value.clone();
                    self.accumulate(a, zip(&gy, &s, |g, y| g / (2.0 * y)));
                }
                Op::Recip(a) => {
                    let y = self.nodes[id].value.clone();
                    self.accumulate(a, zip(&gy, &y, |g, yi| -g * yi * yi));
                }
                Op::Sum(a) => {
                    let g = gy.item();
                    let shape = self.value(a).shape().to_vec();
                    let n = self.value(a).len();
                    self.accumulate(a, Tensor::new(shape, vec![g; n]));
                }
                Op::Mean(a) => {
                    let n = self.value(a).len();
                    let g = gy.item() / n as f64;
                    let shape = self.value(a).shape().to_vec();
                    self.accumulate(a, Tensor::new(shape, vec![g; n]));
                }
                Op::MeanLastAxis(a) => {
                    let shape = self.value(a).shape().to_vec();
                    let c = *shape.last().unwrap();
                    let mut dx = vec![0.0; self.value(a).len()];
                    for (i, v) in dx.iter_mut().enumerate() {
                        *v = gy.data[i / c] / c as f64;
                    }
                    self.accumulate(a, Tensor::new(shape, dx));
                }
                Op::L2Norm(a) => {
                    let norm = self.nodes[id].value.item();
                    if norm > 0.0 {
                        let g = gy.item() / norm;
                        let va = self.value(a).clone();
                        self.accumulate(a, map(&va, |x| g * x));
                    }
                }
                Op::MulByScalar(t, s) => {
                    let sv = self.value(s).item();
                    let vt = self.value(t).clone();
                    self.accumulate(t, map(&gy, |g| g * sv));
                    let ds: f64 = gy.data.iter().zip(&vt.data).map(|(g, x)| g * x).sum();
                    let sshape = self.value(s).shape().to_vec();
                    self.accumulate(s, Tensor::new(sshape, vec![ds]));
                }
                Op::Conv2d {
                    input,
                    kernel,
                    stride,
                    pad,
                } => {
                    let (vi, vk) = (self.value(input).clone(), self.value(kernel).clone());
                    let (di, dk) = conv2d_backward(
                        &vi,
                        &vk,
                        &gy,
                        stride,
                        pad,
                        self.requires(input),
                        self.requires(kernel),
                    );
                    if let Some(di) = di {
                        self.accumulate(input, di);
                    }
                    if let Some(dk) = dk {
                        self.accumulate(kernel, dk);
                    }
                }
                Op::ChannelBias(x, bias) => {
                    let c = self.value(bias).len();
                    let mut db = vec![0.0; c];
                    for (i, g) in gy.data.iter().enumerate() {
                        db[i % c] += g;
                    }
                    self.accumulate(x, gy);
                    self.accumulate(bias, Tensor::vector(db));
                }
                Op::Reshape(a) => {
                    let shape = self.value(a).shape().to_vec();
                    self.accumulate(a, Tensor::new(shape, gy.data));
                }
                Op::Concat(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let n = self.value(p).len();
                        let slice = gy.data[at..at + n].to_vec();
                        self.accumulate(p, Tensor::vector(slice));
                        at += n;
                    }
                }
                Op::StackRows(rows) => {
                    let d = gy.shape()[1];
                    for (i, r) in rows.into_iter().enumerate() {
                        let slice = gy.data[i * d..(i + 1) * d].to_vec();
                        self.accumulate(r, Tensor::vector(slice));
                    }
                }
                Op::SliceRow(m, row) => {
                    let shape = self.value(m).shape().to_vec();
                    let c = shape[1];
                    let mut dm = vec![0.0; shape[0] * c];
                    dm[row * c..(row + 1) * c].copy_from_slice(&gy.data);
                    self.accumulate(m, Tensor::new(shape, dm));
                }
                Op::SliceChannel(x, channel) => {
                    let shape = self.value(x).shape().to_vec();
                    let c = shape[2];
                    let mut dx = vec![0.0; self.value(x).len()];
                    for i in 0..gy.len() {
                        dx[i * c + channel] = gy.data[i];
                    }
                    self.accumulate(x, Tensor::new(shape, dx));
                }
                Op::CrossEntropyLogits(logits, label) => {
                    let g = gy.item();
                    let x = self.value(logits).clone();
                    let mut dx = softmax_slice(&x.data);
                    dx[label] -= 1.0;
                    for v in dx.iter_mut() {
                        *v *= g;
                    }
                    self.accumulate(logits, Tensor::vector(dx));
                }
            }
        }
        Ok(())
    }
}

// ----- raw kernels shared by forward and backward -----

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&x| f(x)).collect(),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape, b.shape);
    Tensor {
        shape: a.shape.clone(),
        data: a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| f(x, y))
            .collect(),
    }
}

fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn transpose_raw(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..n {
            out[c * m + r] = a.data[r * n + c];
        }
    }
    Tensor::matrix(n, m, out)
}

fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for t in 0..k {
            let av = a.data[r * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[t * n..(t + 1) * n];
            let orow = &mut out[r * n..(r + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

fn conv2d_raw(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (h, w, cin) = (input.shape[0], input.shape[1], input.shape[2]);
    let (cout, kh, kw) = (kernel.shape[0], kernel.shape[1], kernel.shape[2]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            for oc in 0..cout {
                let mut acc = 0.0;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let ibase = ((iy as usize) * w + ix as usize) * cin;
                        let kbase = ((oc * kh + ky) * kw + kx) * cin;
                        let irow = &input.data[ibase..ibase + cin];
                        let krow = &kernel.data[kbase..kbase + cin];
                        acc += irow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                out[(oy * wo + ox) * cout + oc] = acc;
            }
        }
    }
    Tensor::new(vec![ho, wo, cout], out)
}

fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (h, w, cin) = (input.shape[0], input.shape[1], input.shape[2]);
    let (cout, kh, kw) = (kernel.shape[0], kernel.shape[1], kernel.shape[2]);
    let (ho, wo) = (gy.shape[0], gy.shape[1]);
    let mut di = if want_input {
        Some(vec![0.0; input.data.len()])
    } else {
        None
    };
    let mut dk = if want_kernel {
        Some(vec![0.0; kernel.data.len()])
    } else {
        None
    };
    for oy in 0..ho {
        for ox in 0..wo {
            for oc in 0..cout {
                let g = gy.data[(oy * wo + ox) * cout + oc];
                if g == 0.0 {
                    continue;
                }
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let ibase = ((iy as usize) * w + ix as usize) * cin;
                        let kbase = ((oc * kh + ky) * kw + kx) * cin;
                        if let Some(di) = di.as_mut() {
                            let krow = &kernel.data[kbase..kbase + cin];
                            for ic in 0..cin {
                                di[ibase + ic] += g * krow[ic];
                            }
                        }
                        if let Some(dk) = dk.as_mut() {
                            let irow = &input.data[ibase..ibase + cin];
                            for ic in 0..cin {
                                dk[kbase + ic] += g * irow[ic];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        di.map(|d| Tensor::new(input.shape.clone(), d)),
        dk.map(|d| Tensor::new(kernel.shape.clone(), d)),
    )
}

#[cfg(test)]
mod tests;
