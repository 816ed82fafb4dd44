//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value, so node ids are a
//! topological order by construction. `backward` walks the tape once in
//! reverse.

use std::collections::BTreeMap;
use std::fmt;

use super::linalg::{matmul, matmul_acc, matmul_nt_acc, matmul_tn_acc, transpose};
use super::{NumError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Index of a trainable parameter inside a [`ParamSet`](super::ParamSet).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    /// Op outputs rounded to single precision.
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// An op whose forward value is computed by the caller and whose
/// vector-Jacobian product is supplied by the implementor.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient buffer per input, each sized like that input.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        upstream: &[f64],
    ) -> Result<Vec<Vec<f64>>, NumError>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

enum Op {
    Leaf,
    MatMul { m: usize, k: usize, n: usize },
    Transpose { rows: usize, cols: usize },
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddConst,
    BiasAdd { channels: usize, inner: usize },
    ScaleBy,
    Conv2d { geom: ConvGeom, cols: Vec<f64> },
    Relu,
    MaxPool2 { argmax: Vec<usize> },
    Exp,
    Log,
    Softplus,
    Clamp { lo: f64, hi: f64 },
    LogSoftmaxRows { k: usize },
    LogSumExpRows { k: usize },
    Sum,
    Mean,
    SumLast { k: usize },
    Reshape,
    GlobalAvgPool { spatial: usize },
    SliceRows { start: usize, cols: usize },
    Custom(Box<dyn CustomOp>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddConst => "add_const",
            Op::BiasAdd { .. } => "bias_add",
            Op::ScaleBy => "scale_by",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu => "relu",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Softplus => "softplus",
            Op::Clamp { .. } => "clamp",
            Op::LogSoftmaxRows { .. } => "log_softmax",
            Op::LogSumExpRows { .. } => "logsumexp",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumLast { .. } => "sum_last",
            Op::Reshape => "reshape",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::SliceRows { .. } => "slice_rows",
            Op::Custom(c) => c.name(),
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    param: Option<ParamId>,
}

/// A single-owner differentiation tape.
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    fault: Option<String>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new(Precision::default())
    }
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
            fault: None,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Test hook: scales the backward rule of every op with this name by 1.5.
    pub fn inject_fault(&mut self, op_name: &str) {
        self.fault = Some(op_name.to_string());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, mut value: Tensor) -> Result<NodeId, NumError> {
        let id = NodeId(self.nodes.len());
        if self.precision == Precision::F32 {
            for v in value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        if !value.is_finite() {
            return Err(NumError::NonFinite {
                node: id.0,
                op: op.name(),
            });
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].value.requires_grad());
        let leaf_grad = value.requires_grad();
        let value = value.with_requires_grad(requires_grad || leaf_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            param: None,
        });
        Ok(id)
    }

    fn check_shape(op: &'static str, expected: &[usize], got: &[usize]) -> Result<(), NumError> {
        if expected != got {
            return Err(NumError::ShapeMismatch {
                op,
                expected: expected.to_vec(),
                got: got.to_vec(),
            });
        }
        Ok(())
    }

    /// Constant input: never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Result<NodeId, NumError> {
        self.push(Op::Leaf, vec![], t.with_requires_grad(false))
    }

    /// Differentiable leaf without a parameter id (gradient read via [`Adjoints::wrt`]).
    pub fn variable(&mut self, t: Tensor) -> Result<NodeId, NumError> {
        self.push(Op::Leaf, vec![], t.with_requires_grad(true))
    }

    pub fn param(&mut self, id: ParamId, t: &Tensor) -> Result<NodeId, NumError> {
        let node = self.push(Op::Leaf, vec![], t.clone().with_requires_grad(true))?;
        self.nodes[node.0].param = Some(id);
        Ok(node)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumError::ShapeMismatch {
                op: "matmul",
                expected: sa.to_vec(),
                got: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(&[m, n], data)?;
        self.push(Op::MatMul { m, k, n }, vec![a, b], out)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(NumError::ShapeMismatch {
                op: "transpose",
                expected: vec![0, 0],
                got: s,
            });
        }
        let data = transpose(self.value(a).data(), s[0], s[1]);
        let out = Tensor::new(&[s[1], s[0]], data)?;
        self.push(
            Op::Transpose {
                rows: s[0],
                cols: s[1],
            },
            vec![a],
            out,
        )
    }

    fn zip_with(
        &mut self,
        op: Op,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId, NumError> {
        Self::check_shape(op.name(), self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push(op, vec![a, b], out)
    }

    fn map(&mut self, op: Op, a: NodeId, f: impl Fn(f64) -> f64) -> Result<NodeId, NumError> {
        let out = self.value(a).map(f);
        self.push(op, vec![a], out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.zip_with(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.zip_with(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.zip_with(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, NumError> {
        self.map(Op::Scale(c), a, |x| c * x)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> Result<NodeId, NumError> {
        self.map(Op::AddConst, a, |x| x + c)
    }

    /// Adds `bias[c]` along axis 1 (`[M,N] + [N]` or `[B,C,H,W] + [C]`).
    pub fn bias_add(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, NumError> {
        let sa = self.shape(a).to_vec();
        let nb = self.value(bias).numel();
        if sa.len() < 2 || sa[1] != nb {
            return Err(NumError::ShapeMismatch {
                op: "bias_add",
                expected: sa,
                got: self.shape(bias).to_vec(),
            });
        }
        let channels = sa[1];
        let inner: usize = sa[2..].iter().product();
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(a).clone().with_requires_grad(false);
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b[(i / inner) % channels];
        }
        self.push(Op::BiasAdd { channels, inner }, vec![a, bias], out)
    }

    /// Multiplies every element of `a` by the single-element node `s`.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, NumError> {
        let sv = self.value(s).item()?;
        let out = self.value(a).map(|x| sv * x);
        self.push(Op::ScaleBy, vec![a, s], out)
    }

    /// Direct cross-correlation. Input `[C,H,W]` or `[B,C,H,W]`, kernels `[O,C,kH,kW]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, NumError> {
        if stride == 0 {
            return Err(NumError::InvalidArgument(
                "conv2d stride must be positive".into(),
            ));
        }
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernels).to_vec();
        let (batch, c_in, h, w, single) = match si.as_slice() {
            [c, h, w] => (1, *c, *h, *w, true),
            [b, c, h, w] => (*b, *c, *h, *w, false),
            _ => {
                return Err(NumError::ShapeMismatch {
                    op: "conv2d",
                    expected: vec![0, 0, 0],
                    got: si,
                })
            }
        };
        if sk.len() != 4 || sk[1] != c_in {
            return Err(NumError::ShapeMismatch {
                op: "conv2d",
                expected: vec![0, c_in, 0, 0],
                got: sk,
            });
        }
        let (c_out, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(NumError::InvalidArgument(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (w + 2 * pad - kw) / stride + 1,
        };
        let cols = im2col(self.value(input).data(), &geom);
        let rows = c_in * kh * kw;
        let spatial = geom.h_out * geom.w_out;
        let wide = batch * spatial;
        let mut flat = vec![0.0; c_out * wide];
        matmul_acc(
            self.value(kernels).data(),
            &cols,
            &mut flat,
            c_out,
            rows,
            wide,
        );
        let mut out = vec![0.0; batch * c_out * spatial];
        for o in 0..c_out {
            for b in 0..batch {
                out[(b * c_out + o) * spatial..(b * c_out + o + 1) * spatial]
                    .copy_from_slice(&flat[o * wide + b * spatial..o * wide + (b + 1) * spatial]);
            }
        }
        let shape = if single {
            vec![c_out, geom.h_out, geom.w_out]
        } else {
            vec![batch, c_out, geom.h_out, geom.w_out]
        };
        let out = Tensor::new(&shape, out)?;
        self.push(Op::Conv2d { geom, cols }, vec![input, kernels], out)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        self.map(Op::Relu, a, |x| x.max(0.0))
    }

    /// 2x2 max pooling with stride 2 over the last two axes (odd edges dropped).
    pub fn max_pool2(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 || s[s.len() - 1] < 2 || s[s.len() - 2] < 2 {
            return Err(NumError::ShapeMismatch {
                op: "max_pool2",
                expected: vec![2, 2],
                got: s,
            });
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let (ho, wo) = (h / 2, w / 2);
        let planes: usize = s[..s.len() - 2].iter().product();
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([ho, wo]);
        let out = Tensor::new(&shape, out)?;
        self.push(Op::MaxPool2 { argmax }, vec![a], out)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        self.map(Op::Exp, a, f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        self.map(Op::Log, a, f64::ln)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        self.map(Op::Softplus, a, softplus)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId, NumError> {
        self.map(Op::Clamp { lo, hi }, a, move |x| x.clamp(lo, hi))
    }

    /// Row-wise log-softmax of `[M,K]`, stabilized by max subtraction.
    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        let (m, k) = self.matrix_dims("log_softmax", a)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; m * k];
        for i in 0..m {
            let row = &x[i * k..(i + 1) * k];
            let lse = logsumexp(row);
            for j in 0..k {
                out[i * k + j] = row[j] - lse;
            }
        }
        let out = Tensor::new(&[m, k], out)?;
        self.push(Op::LogSoftmaxRows { k }, vec![a], out)
    }

    /// Row-wise log-sum-exp of `[M,K]` giving `[M]`.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        let (m, k) = self.matrix_dims("logsumexp", a)?;
        let x = self.value(a).data();
        let out: Vec<f64> = (0..m).map(|i| logsumexp(&x[i * k..(i + 1) * k])).collect();
        let out = Tensor::new(&[m], out)?;
        self.push(Op::LogSumExpRows { k }, vec![a], out)
    }

    fn matrix_dims(&self, op: &'static str, a: NodeId) -> Result<(usize, usize), NumError> {
        match self.shape(a) {
            [m, k] => Ok((*m, *k)),
            s => Err(NumError::ShapeMismatch {
                op,
                expected: vec![0, 0],
                got: s.to_vec(),
            }),
        }
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::Sum, vec![a], Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Op::Mean, vec![a], Tensor::scalar(s))
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        let s = self.shape(a).to_vec();
        let k = *s.last().unwrap_or(&1);
        let x = self.value(a).data();
        let out: Vec<f64> = x.chunks(k).map(|c| c.iter().sum()).collect();
        let shape = if s.len() > 1 {
            s[..s.len() - 1].to_vec()
        } else {
            vec![1]
        };
        let out = Tensor::new(&shape, out)?;
        self.push(Op::SumLast { k }, vec![a], out)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, NumError> {
        let out = self.value(a).reshape(shape)?.with_requires_grad(false);
        self.push(Op::Reshape, vec![a], out)
    }

    /// `[B,C,H,W] -> [B,C]` spatial mean.
    pub fn global_avg_pool(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(NumError::ShapeMismatch {
                op: "global_avg_pool",
                expected: vec![0, 0, 0, 0],
                got: s,
            });
        }
        let spatial = s[2] * s[3];
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(spatial)
            .map(|c| c.iter().sum::<f64>() / spatial as f64)
            .collect();
        let out = Tensor::new(&[s[0], s[1]], out)?;
        self.push(Op::GlobalAvgPool { spatial }, vec![a], out)
    }

    /// Rows `start..end` of a `[M,N]` matrix.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, NumError> {
        let (m, n) = self.matrix_dims("slice_rows", a)?;
        if start >= end || end > m {
            return Err(NumError::InvalidArgument(format!(
                "slice_rows {start}..{end} out of range for {m} rows"
            )));
        }
        let data = self.value(a).data()[start * n..end * n].to_vec();
        let out = Tensor::new(&[end - start, n], data)?;
        self.push(Op::SliceRows { start, cols: n }, vec![a], out)
    }

    pub fn custom(
        &mut self,
        op: Box<dyn CustomOp>,
        inputs: &[NodeId],
        output: Tensor,
    ) -> Result<NodeId, NumError> {
        self.push(
            Op::Custom(op),
            inputs.to_vec(),
            output.with_requires_grad(false),
        )
    }

    /// Reverse sweep from a single-element sink.
    pub fn backward(&self, sink: NodeId) -> Result<Adjoints, NumError> {
        let sink_value = self.value(sink);
        if sink_value.numel() != 1 {
            return Err(NumError::NotScalar(sink_value.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[sink.0] = Some(vec![1.0]);
        for id in (0..=sink.0).rev() {
            let Some(upstream) = adj[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.value.requires_grad() || node.inputs.is_empty() {
                adj[id] = Some(upstream);
                continue;
            }
            let mut grads = self.node_backward(node, &upstream)?;
            if let Some(fault) = &self.fault {
                if fault == node.op.name() {
                    for g in grads.iter_mut().flatten() {
                        g.iter_mut().for_each(|v| *v *= 1.5);
                    }
                }
            }
            for (input, g) in node.inputs.iter().zip(grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].value.requires_grad() {
                    continue;
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(NumError::NonFiniteGrad {
                        node: id,
                        op: node.op.name(),
                    });
                }
                match &mut adj[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
            adj[id] = Some(upstream);
        }
        Ok(Adjoints {
            adjoints: adj,
            params: self
                .nodes
                .iter()
                .enumerate()
                .filter_map(|(i, n)| n.param.map(|p| (p, NodeId(i))))
                .collect(),
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    /// Gradient of `sink` with respect to every parameter leaf on the tape.
    pub fn grad(&self, sink: NodeId) -> Result<BTreeMap<ParamId, Tensor>, NumError> {
        Ok(self.backward(sink)?.param_grads())
    }

    fn node_backward(&self, node: &Node, up: &[f64]) -> Result<Vec<Option<Vec<f64>>>, NumError> {
        let val = |i: usize| self.nodes[node.inputs[i].0].value.data();
        let wants = |i: usize| self.nodes[node.inputs[i].0].value.requires_grad();
        let out = node.value.data();
        let g = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul { m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let mut ga = None;
                let mut gb = None;
                if wants(0) {
                    let mut d = vec![0.0; m * k];
                    matmul_nt_acc(up, val(1), &mut d, m, n, k);
                    ga = Some(d);
                }
                if wants(1) {
                    let mut d = vec![0.0; k * n];
                    matmul_tn_acc(val(0), up, &mut d, m, k, n);
                    gb = Some(d);
                }
                vec![ga, gb]
            }
            Op::Transpose { rows, cols } => vec![Some(transpose(up, *cols, *rows))],
            Op::Add => vec![Some(up.to_vec()), Some(up.to_vec())],
            Op::Sub => vec![Some(up.to_vec()), Some(up.iter().map(|v| -v).collect())],
            Op::Mul => {
                let (a, b) = (val(0), val(1));
                vec![
                    Some(up.iter().zip(b).map(|(u, y)| u * y).collect()),
                    Some(up.iter().zip(a).map(|(u, x)| u * x).collect()),
                ]
            }
            Op::Scale(c) => vec![Some(up.iter().map(|u| c * u).collect())],
            Op::AddConst | Op::Reshape => vec![Some(up.to_vec())],
            Op::BiasAdd { channels, inner } => {
                let mut gb = vec![0.0; *channels];
                for (i, u) in up.iter().enumerate() {
                    gb[(i / inner) % channels] += u;
                }
                vec![Some(up.to_vec()), Some(gb)]
            }
            Op::ScaleBy => {
                let s = val(1)[0];
                let a = val(0);
                vec![
                    Some(up.iter().map(|u| s * u).collect()),
                    Some(vec![up.iter().zip(a).map(|(u, x)| u * x).sum()]),
                ]
            }
            Op::Conv2d { geom, cols } => {
                let rows = geom.c_in * geom.kh * geom.kw;
                let spatial = geom.h_out * geom.w_out;
                let wide = geom.batch * spatial;
                // upstream regrouped to [c_out, batch * spatial] to match `cols`
                let mut upf = vec![0.0; geom.c_out * wide];
                for b in 0..geom.batch {
                    for o in 0..geom.c_out {
                        upf[o * wide + b * spatial..o * wide + (b + 1) * spatial].copy_from_slice(
                            &up[(b * geom.c_out + o) * spatial..(b * geom.c_out + o + 1) * spatial],
                        );
                    }
                }
                let mut gk = vec![0.0; geom.c_out * rows];
                matmul_nt_acc(&upf, cols, &mut gk, geom.c_out, wide, rows);
                let gx = if wants(0) {
                    let mut dcols = vec![0.0; rows * wide];
                    matmul_tn_acc(val(1), &upf, &mut dcols, geom.c_out, rows, wide);
                    let mut gx = vec![0.0; geom.batch * geom.c_in * geom.h * geom.w];
                    col2im_acc(&dcols, geom, &mut gx);
                    Some(gx)
                } else {
                    None
                };
                vec![gx, Some(gk)]
            }
            Op::Relu => {
                let a = val(0);
                vec![Some(
                    up.iter()
                        .zip(a)
                        .map(|(u, x)| if *x > 0.0 { *u } else { 0.0 })
                        .collect(),
                )]
            }
            Op::MaxPool2 { argmax } => {
                let mut ga = vec![0.0; val(0).len()];
                for (u, &idx) in up.iter().zip(argmax) {
                    ga[idx] += u;
                }
                vec![Some(ga)]
            }
            Op::Exp => vec![Some(up.iter().zip(out).map(|(u, y)| u * y).collect())],
            Op::Log => vec![Some(up.iter().zip(val(0)).map(|(u, x)| u / x).collect())],
            Op::Softplus => vec![Some(
                up.iter()
                    .zip(val(0))
                    .map(|(u, x)| u * sigmoid(*x))
                    .collect(),
            )],
            Op::Clamp { lo, hi } => vec![Some(
                up.iter()
                    .zip(val(0))
                    .map(|(u, x)| if x >= lo && x <= hi { *u } else { 0.0 })
                    .collect(),
            )],
            Op::LogSoftmaxRows { k } => {
                let mut ga = vec![0.0; out.len()];
                for ((gr, ur), yr) in ga.chunks_mut(*k).zip(up.chunks(*k)).zip(out.chunks(*k)) {
                    let s: f64 = ur.iter().sum();
                    for j in 0..*k {
                        gr[j] = ur[j] - yr[j].exp() * s;
                    }
                }
                vec![Some(ga)]
            }
            Op::LogSumExpRows { k } => {
                let x = val(0);
                let mut ga = vec![0.0; x.len()];
                for (i, (gr, xr)) in ga.chunks_mut(*k).zip(x.chunks(*k)).enumerate() {
                    for j in 0..*k {
                        gr[j] = up[i] * (xr[j] - out[i]).exp();
                    }
                }
                vec![Some(ga)]
            }
            Op::Sum => vec![Some(vec![up[0]; val(0).len()])],
            Op::Mean => {
                let n = val(0).len();
                vec![Some(vec![up[0] / n as f64; n])]
            }
            Op::SumLast { k } => vec![Some(
                up.iter()
                    .flat_map(|u| std::iter::repeat_n(*u, *k))
                    .collect(),
            )],
            Op::GlobalAvgPool { spatial } => vec![Some(
                up.iter()
                    .flat_map(|u| std::iter::repeat_n(u / *spatial as f64, *spatial))
                    .collect(),
            )],
            Op::SliceRows { start, cols } => {
                let mut ga = vec![0.0; val(0).len()];
                ga[start * cols..start * cols + up.len()].copy_from_slice(up);
                vec![Some(ga)]
            }
            Op::Custom(c) => {
                let inputs: Vec<&Tensor> =
                    node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                c.backward(&inputs, &node.value, up)?
                    .into_iter()
                    .map(Some)
                    .collect()
            }
        };
        Ok(g)
    }
}

/// Result of a reverse sweep.
pub struct Adjoints {
    adjoints: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, NodeId)>,
    shapes: Vec<Vec<usize>>,
}

impl Adjoints {
    /// Gradient with respect to any node; zeros when the sink does not depend on it.
    pub fn wrt(&self, node: NodeId) -> Tensor {
        let shape = &self.shapes[node.0];
        match &self.adjoints[node.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("adjoint shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Per-parameter gradients; a parameter placed on the tape more than once accumulates.
    pub fn param_grads(&self) -> BTreeMap<ParamId, Tensor> {
        let mut out: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        for &(pid, node) in &self.params {
            let g = self.wrt(node);
            match out.get_mut(&pid) {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b),
                None => {
                    out.insert(pid, g);
                }
            }
        }
        out
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
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

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Patches laid out `[c_in * kh * kw, batch * h_out * w_out]`.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let rows = g.c_in * g.kh * g.kw;
    let spatial = g.h_out * g.w_out;
    let wide = g.batch * spatial;
    let mut cols = vec![0.0; rows * wide];
    for b in 0..g.batch {
        let img = &x[b * g.c_in * g.h * g.w..];
        for c in 0..g.c_in {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let r = (c * g.kh + ki) * g.kw + kj;
                    let drow = &mut cols[r * wide + b * spatial..r * wide + (b + 1) * spatial];
                    for oi in 0..g.h_out {
                        let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        for oj in 0..g.w_out {
                            let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                            if jj < 0 || jj >= g.w as isize {
                                continue;
                            }
                            drow[oi * g.w_out + oj] =
                                img[(c * g.h + ii as usize) * g.w + jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_acc(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let spatial = g.h_out * g.w_out;
    let wide = g.batch * spatial;
    for b in 0..g.batch {
        let img = &mut dx[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w];
        for c in 0..g.c_in {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let r = (c * g.kh + ki) * g.kw + kj;
                    let srow = &dcols[r * wide + b * spatial..r * wide + (b + 1) * spatial];
                    for oi in 0..g.h_out {
                        let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        for oj in 0..g.w_out {
                            let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                            if jj < 0 || jj >= g.w as isize {
                                continue;
                            }
                            img[(c * g.h + ii as usize) * g.w + jj as usize] +=
                                srow[oi * g.w_out + oj];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_derivative_two_w() {
        let mut g = Graph::new(Precision::F64);
        let w = g.param(ParamId(0), &Tensor::scalar(3.0)).unwrap();
        let y = g.mul(w, w).unwrap();
        let grads = g.grad(y).unwrap();
        assert_eq!(grads[&ParamId(0)].data(), &[6.0]);
    }

    #[test]
    fn constant_sink_gives_zero_gradient() {
        let mut g = Graph::new(Precision::F64);
        let w = g.param(ParamId(0), &Tensor::scalar(-2.5)).unwrap();
        let _unused = g.scale(w, 4.0).unwrap();
        let c = g.input(Tensor::scalar(7.0)).unwrap();
        let y = g.sum(c).unwrap();
        let grads = g.grad(y).unwrap();
        assert_eq!(grads[&ParamId(0)].data(), &[0.0]);
    }

    #[test]
    fn non_scalar_sink_is_rejected() {
        let mut g = Graph::new(Precision::F64);
        let w = g.variable(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(g.backward(w), Err(NumError::NotScalar(_))));
    }

    #[test]
    fn non_finite_forward_names_the_node() {
        let mut g = Graph::new(Precision::F64);
        let x = g.input(Tensor::new(&[2], vec![1.0, 0.0]).unwrap()).unwrap();
        let err = g.log(x).unwrap_err();
        assert!(matches!(err, NumError::NonFinite { node: 1, op: "log" }));
    }

    #[test]
    fn conv_same_padding_keeps_spatial_extent() {
        let mut g = Graph::new(Precision::F64);
        let x = g.input(Tensor::zeros(&[3, 32, 32])).unwrap();
        let k = g.input(Tensor::zeros(&[8, 3, 3, 3])).unwrap();
        let y = g.conv2d(x, k, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[8, 32, 32]);
        let k5 = g.input(Tensor::zeros(&[2, 3, 5, 5])).unwrap();
        let y = g.conv2d(x, k5, 2, 0).unwrap();
        assert_eq!(g.shape(y), &[2, 14, 14]);
        assert!(g.conv2d(x, k, 0, 1).is_err());
    }

    #[test]
    fn identity_kernel_copies_channel() {
        let mut g = Graph::new(Precision::F64);
        let img = Tensor::from_fn(&[2, 4, 5], |i| (i as f64).sin());
        let x = g.input(img.clone()).unwrap();
        // picks channel 1
        let k = g
            .input(Tensor::new(&[1, 2, 1, 1], vec![0.0, 1.0]).unwrap())
            .unwrap();
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &img.data()[20..]);
    }

    #[test]
    fn f32_mode_rounds_outputs() {
        let mut g = Graph::new(Precision::F32);
        let x = g.input(Tensor::scalar(0.1)).unwrap();
        let y = g.scale(x, 3.0).unwrap();
        assert_eq!(g.value(y).data()[0], (0.3f64) as f32 as f64);
    }

    #[test]
    fn fault_injection_corrupts_only_named_op() {
        let build = |fault: Option<&str>| {
            let mut g = Graph::new(Precision::F64);
            if let Some(f) = fault {
                g.inject_fault(f);
            }
            let w = g.param(ParamId(0), &Tensor::scalar(2.0)).unwrap();
            let e = g.exp(w).unwrap();
            let y = g.sum(e).unwrap();
            g.grad(y).unwrap()[&ParamId(0)].data()[0]
        };
        let clean = build(None);
        assert!((clean - 2f64.exp()).abs() < 1e-12);
        assert!((build(Some("exp")) - 1.5 * clean).abs() < 1e-12);
        assert_eq!(build(Some("relu")), clean);
    }
}
