//! Static computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is built once through its builder methods, each returning a
//! [`NodeId`]. Nodes are appended in topological order, so node `i` only
//! reads nodes `< i`. `forward` binds the named inputs and caches every
//! intermediate value; `backward` walks the node list in exact reverse order
//! and returns the gradient of every named input.
//!
//! All reductions accumulate left to right in a fixed loop order, so two runs
//! on identical inputs are bit-identical.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input(String),
    /// `[m, k] x [k, n] -> [m, n]`
    MatMul(NodeId, NodeId),
    /// `[N, C, H, W]` input, `[O, C, kh, kw]` weight.
    Conv2d {
        input: NodeId,
        weight: NodeId,
        stride: usize,
        padding: usize,
    },
    /// Adds a `[C]` bias along axis 1 of `[N, C, ...]`.
    BiasAdd { input: NodeId, bias: NodeId },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `[N, C, H, W] -> [N, C]`
    GlobalAvgPool(NodeId),
    /// `[N, ...] -> [N, prod(...)]`
    Flatten(NodeId),
    /// Batch mean of the squared L2 error per example.
    Mse { pred: NodeId, target: NodeId },
    /// Batch mean of `-sum_k t_k log softmax(z)_k`; targets are probability rows.
    SoftmaxCrossEntropy { logits: NodeId, target: NodeId },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::BiasAdd { .. } => "bias_add",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Flatten(_) => "flatten",
            Op::Mse { .. } => "mse",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Input(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) => vec![a, b],
            Op::Conv2d { input, weight, .. } => vec![input, weight],
            Op::BiasAdd { input, bias } => vec![input, bias],
            Op::Relu(a) | Op::Scale(a, _) | Op::GlobalAvgPool(a) | Op::Flatten(a) => vec![a],
            Op::Mse { pred, target } => vec![pred, target],
            Op::SoftmaxCrossEntropy { logits, target } => vec![logits, target],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Option<Tensor>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    output: Option<NodeId>,
    forwarded: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        for inp in op.inputs() {
            assert!(inp.0 < self.nodes.len(), "node {} does not exist yet", inp.0);
        }
        self.nodes.push(Node { op, value: None });
        self.forwarded = false;
        let id = NodeId(self.nodes.len() - 1);
        self.output = Some(id);
        id
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Op::Input(name.to_string()))
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, stride: usize, padding: usize) -> NodeId {
        self.push(Op::Conv2d {
            input,
            weight,
            stride: stride.max(1),
            padding,
        })
    }
    pub fn bias_add(&mut self, input: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::BiasAdd { input, bias })
    }
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }
    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(x, c))
    }
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        self.push(Op::GlobalAvgPool(x))
    }
    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Flatten(x))
    }
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> NodeId {
        self.push(Op::Mse { pred, target })
    }
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: NodeId) -> NodeId {
        self.push(Op::SoftmaxCrossEntropy { logits, target })
    }

    /// The node `forward` returns and `backward` seeds. Defaults to the last node.
    pub fn set_output(&mut self, id: NodeId) {
        assert!(id.0 < self.nodes.len());
        self.output = Some(id);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    /// Cached value of a node from the last forward pass.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(|n| n.value.as_ref())
    }

    pub fn input_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Input(name) => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Drop cached values, e.g. before cloning a graph into a worker.
    pub fn clear(&mut self) {
        for n in &mut self.nodes {
            n.value = None;
        }
        self.forwarded = false;
    }

    pub fn forward(&mut self, inputs: &HashMap<String, Tensor>) -> Result<&Tensor> {
        let out = self
            .output
            .ok_or_else(|| Error::InvalidArgument("empty graph".into()))?;
        self.forwarded = false;
        for i in 0..=out.0 {
            let value = {
                let op = &self.nodes[i].op;
                match op {
                    Op::Input(name) => inputs
                        .get(name)
                        .cloned()
                        .ok_or_else(|| Error::UnboundInput(name.clone()))?,
                    _ => eval_op(i, op, &self.nodes)?,
                }
            };
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    node: i,
                    op: self.nodes[i].op.name(),
                });
            }
            self.nodes[i].value = Some(value);
        }
        for n in &mut self.nodes[out.0 + 1..] {
            n.value = None;
        }
        self.forwarded = true;
        Ok(self.nodes[out.0].value.as_ref().expect("just computed"))
    }

    /// Gradients of `<seed_grad, output>` with respect to every named input.
    pub fn backward(&mut self, seed_grad: &Tensor) -> Result<BTreeMap<String, Tensor>> {
        if !self.forwarded {
            return Err(Error::BackwardBeforeForward);
        }
        let out = self.output.expect("forwarded graph has an output");
        let out_shape = self.nodes[out.0].value.as_ref().unwrap().shape().to_vec();
        if seed_grad.shape() != out_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                node: out.0,
                op: "backward_seed",
                detail: format!("seed {:?} vs output {:?}", seed_grad.shape(), out_shape),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed_grad.data().to_vec());
        let mut result = BTreeMap::new();
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let op = &self.nodes[i].op;
            if let Op::Input(name) = op {
                let shape = self.nodes[i].value.as_ref().unwrap().shape().to_vec();
                let t = Tensor::new(shape, g)?;
                // An input bound twice under one name accumulates.
                match result.get_mut(name) {
                    Some(existing) => {
                        let e: &mut Tensor = existing;
                        for (a, b) in e.data_mut().iter_mut().zip(t.data()) {
                            *a += *b;
                        }
                    }
                    None => {
                        result.insert(name.clone(), t);
                    }
                }
                continue;
            }
            for (id, contrib) in backprop_op(op, &g, &self.nodes) {
                match &mut grads[id.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&contrib) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        // Inputs that do not influence the output get zero gradients.
        for i in 0..=out.0 {
            if let Op::Input(name) = &self.nodes[i].op {
                if !result.contains_key(name) {
                    let v = self.nodes[i].value.as_ref().unwrap();
                    result.insert(name.clone(), Tensor::zeros(v.shape()));
                }
            }
        }
        Ok(result)
    }
}

fn val(nodes: &[Node], id: NodeId) -> &Tensor {
    nodes[id.0].value.as_ref().expect("inputs precede node")
}

fn mismatch(node: usize, op: &Op, detail: String) -> Error {
    Error::ShapeMismatch {
        node,
        op: op.name(),
        detail,
    }
}

fn eval_op(i: usize, op: &Op, nodes: &[Node]) -> Result<Tensor> {
    match *op {
        Op::Input(_) => unreachable!(),
        Op::MatMul(a, b) => {
            let (a, b) = (val(nodes, a), val(nodes, b));
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(mismatch(i, op, format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Tensor::new(vec![m, n], matmul(a.data(), b.data(), m, k, n))
        }
        Op::Conv2d {
            input,
            weight,
            stride,
            padding,
        } => {
            let (x, w) = (val(nodes, input), val(nodes, weight));
            let geo = ConvGeom::new(x.shape(), w.shape(), stride, padding)
                .map_err(|d| mismatch(i, op, d))?;
            Tensor::new(geo.out_shape(), conv_forward(&geo, x.data(), w.data()))
        }
        Op::BiasAdd { input, bias } => {
            let (x, b) = (val(nodes, input), val(nodes, bias));
            if x.rank() < 2 || b.rank() != 1 || b.shape()[0] != x.shape()[1] {
                return Err(mismatch(i, op, format!("{:?} + bias {:?}", x.shape(), b.shape())));
            }
            let c = x.shape()[1];
            let inner: usize = x.shape()[2..].iter().product();
            let mut out = x.data().to_vec();
            for (j, v) in out.iter_mut().enumerate() {
                *v += b.data()[(j / inner) % c];
            }
            Tensor::new(x.shape().to_vec(), out)
        }
        Op::Relu(a) => Ok(val(nodes, a).map(|v| v.max(0.0))),
        Op::Add(a, b) => {
            let (a, b) = (val(nodes, a), val(nodes, b));
            if a.shape() != b.shape() {
                return Err(mismatch(i, op, format!("{:?} + {:?}", a.shape(), b.shape())));
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            Tensor::new(a.shape().to_vec(), data)
        }
        Op::Scale(a, c) => Ok(val(nodes, a).scale(c)),
        Op::GlobalAvgPool(a) => {
            let x = val(nodes, a);
            if x.rank() != 4 {
                return Err(mismatch(i, op, format!("expected rank 4, got {:?}", x.shape())));
            }
            let (n, c) = (x.shape()[0], x.shape()[1]);
            let hw = x.shape()[2] * x.shape()[3];
            let data = x
                .data()
                .chunks(hw)
                .map(|plane| plane.iter().fold(0.0, |s, &v| s + v) / hw as f64)
                .collect();
            Tensor::new(vec![n, c], data)
        }
        Op::Flatten(a) => {
            let x = val(nodes, a);
            let n = x.shape()[0];
            Tensor::new(vec![n, x.len() / n], x.data().to_vec())
        }
        Op::Mse { pred, target } => {
            let (p, t) = (val(nodes, pred), val(nodes, target));
            if p.shape() != t.shape() {
                return Err(mismatch(i, op, format!("{:?} vs target {:?}", p.shape(), t.shape())));
            }
            let n = p.shape()[0] as f64;
            let s = p
                .data()
                .iter()
                .zip(t.data())
                .fold(0.0, |acc, (a, b)| acc + (a - b) * (a - b));
            Ok(Tensor::scalar(s / n))
        }
        Op::SoftmaxCrossEntropy { logits, target } => {
            let (z, t) = (val(nodes, logits), val(nodes, target));
            if z.rank() != 2 || z.shape() != t.shape() {
                return Err(mismatch(i, op, format!("{:?} vs target {:?}", z.shape(), t.shape())));
            }
            let (n, k) = (z.shape()[0], z.shape()[1]);
            let mut total = 0.0;
            for r in 0..n {
                let lsm = log_softmax(&z.data()[r * k..(r + 1) * k]);
                let row_t = &t.data()[r * k..(r + 1) * k];
                total += lsm
                    .iter()
                    .zip(row_t)
                    .fold(0.0, |acc, (l, tt)| acc - tt * l);
            }
            Ok(Tensor::scalar(total / n as f64))
        }
    }
}

fn backprop_op(op: &Op, g: &[f64], nodes: &[Node]) -> Vec<(NodeId, Vec<f64>)> {
    match *op {
        Op::Input(_) => vec![],
        Op::MatMul(a_id, b_id) => {
            let (a, b) = (val(nodes, a_id), val(nodes, b_id));
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            // dA = G B^T, dB = A^T G
            let mut da = vec![0.0; m * k];
            for r in 0..m {
                for p in 0..k {
                    let mut s = 0.0;
                    for c in 0..n {
                        s += g[r * n + c] * b.data()[p * n + c];
                    }
                    da[r * k + p] = s;
                }
            }
            let mut db = vec![0.0; k * n];
            for r in 0..m {
                for p in 0..k {
                    let av = a.data()[r * k + p];
                    let row = &g[r * n..(r + 1) * n];
                    for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(row) {
                        *d += av * gv;
                    }
                }
            }
            vec![(a_id, da), (b_id, db)]
        }
        Op::Conv2d {
            input,
            weight,
            stride,
            padding,
        } => {
            let (x, w) = (val(nodes, input), val(nodes, weight));
            let geo = ConvGeom::new(x.shape(), w.shape(), stride, padding).expect("checked in forward");
            let (dx, dw) = conv_backward(&geo, x.data(), w.data(), g);
            vec![(input, dx), (weight, dw)]
        }
        Op::BiasAdd { input, bias } => {
            let x = val(nodes, input);
            let c = x.shape()[1];
            let inner: usize = x.shape()[2..].iter().product();
            let mut db = vec![0.0; c];
            for (j, &gv) in g.iter().enumerate() {
                db[(j / inner) % c] += gv;
            }
            vec![(input, g.to_vec()), (bias, db)]
        }
        Op::Relu(a) => {
            let x = val(nodes, a);
            let d = x
                .data()
                .iter()
                .zip(g)
                .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                .collect();
            vec![(a, d)]
        }
        Op::Add(a, b) => vec![(a, g.to_vec()), (b, g.to_vec())],
        Op::Scale(a, c) => vec![(a, g.iter().map(|v| v * c).collect())],
        Op::GlobalAvgPool(a) => {
            let x = val(nodes, a);
            let hw = x.shape()[2] * x.shape()[3];
            let mut d = Vec::with_capacity(x.len());
            for &gv in g {
                d.extend(std::iter::repeat_n(gv / hw as f64, hw));
            }
            vec![(a, d)]
        }
        Op::Flatten(a) => vec![(a, g.to_vec())],
        Op::Mse { pred, target } => {
            let (p, t) = (val(nodes, pred), val(nodes, target));
            let n = p.shape()[0] as f64;
            let c = 2.0 * g[0] / n;
            let dp: Vec<f64> = p.data().iter().zip(t.data()).map(|(a, b)| c * (a - b)).collect();
            let dt = dp.iter().map(|v| -v).collect();
            vec![(pred, dp), (target, dt)]
        }
        Op::SoftmaxCrossEntropy { logits, target } => {
            let (z, t) = (val(nodes, logits), val(nodes, target));
            let (n, k) = (z.shape()[0], z.shape()[1]);
            let c = g[0] / n as f64;
            let mut dz = vec![0.0; n * k];
            let mut dt = vec![0.0; n * k];
            for r in 0..n {
                let lsm = log_softmax(&z.data()[r * k..(r + 1) * k]);
                let row_t = &t.data()[r * k..(r + 1) * k];
                let t_sum = row_t.iter().fold(0.0, |s, v| s + v);
                for j in 0..k {
                    dz[r * k + j] = c * (lsm[j].exp() * t_sum - row_t[j]);
                    dt[r * k + j] = -c * lsm[j];
                }
            }
            vec![(logits, dz), (target, dt)]
        }
    }
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().fold(0.0, |s, &v| s + (v - max).exp()).ln();
    z.iter().map(|v| v - lse).collect()
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for r in 0..m {
        let out = &mut c[r * n..(r + 1) * n];
        for p in 0..k {
            let av = a[r * k + p];
            for (o, &bv) in out.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    c
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> std::result::Result<Self, String> {
        if x.len() != 4 || w.len() != 4 {
            return Err(format!("expected rank-4 input and weight, got {x:?} and {w:?}"));
        }
        if x[1] != w[1] {
            return Err(format!("input channels {} vs weight channels {}", x[1], w[1]));
        }
        let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(format!("kernel {kh}x{kw} larger than padded input {h}x{wd}"));
        }
        Ok(Self {
            n: x[0],
            c: x[1],
            h,
            w: wd,
            o: w[0],
            kh,
            kw,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        })
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.oh, self.ow]
    }

    /// Output index range `lo..hi` whose input coordinate `o*stride + k - pad`
    /// lands inside `0..size`.
    fn valid(&self, k: usize, size: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= size-1
        let top = size as isize - 1 - off;
        let hi = if top < 0 { 0 } else { (top / s + 1).min(out as isize) };
        (lo as usize, (hi.max(lo)) as usize)
    }
}

impl ConvGeom {
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.o * g.oh * g.ow];
    let plane = g.oh * g.ow;
    if g.pointwise() {
        for n in 0..g.n {
            for o in 0..g.o {
                let dst = &mut out[(n * g.o + o) * plane..(n * g.o + o + 1) * plane];
                for c in 0..g.c {
                    let wv = w[o * g.c + c];
                    let src = &x[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d += wv * v;
                    }
                }
            }
        }
        return out;
    }
    for n in 0..g.n {
        for o in 0..g.o {
            let dst = &mut out[(n * g.o + o) * plane..(n * g.o + o + 1) * plane];
            for c in 0..g.c {
                let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                for ki in 0..g.kh {
                    let (y0, y1) = g.valid(ki, g.h, g.oh);
                    for kj in 0..g.kw {
                        let wv = w[((o * g.c + c) * g.kh + ki) * g.kw + kj];
                        let (x0, x1) = g.valid(kj, g.w, g.ow);
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ki - g.pad;
                            let row = &src[iy * g.w..(iy + 1) * g.w];
                            let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                            for ox in x0..x1 {
                                drow[ox] += wv * row[ox * g.stride + kj - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(g: &ConvGeom, x: &[f64], w: &[f64], dy: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let plane = g.oh * g.ow;
    if g.pointwise() {
        for n in 0..g.n {
            for o in 0..g.o {
                let gy = &dy[(n * g.o + o) * plane..(n * g.o + o + 1) * plane];
                for c in 0..g.c {
                    let off = (n * g.c + c) * plane;
                    let wv = w[o * g.c + c];
                    let mut acc = 0.0;
                    for ((d, &xv), &gv) in dx[off..off + plane].iter_mut().zip(&x[off..off + plane]).zip(gy) {
                        acc += gv * xv;
                        *d += gv * wv;
                    }
                    dw[o * g.c + c] += acc;
                }
            }
        }
        return (dx, dw);
    }
    for n in 0..g.n {
        for o in 0..g.o {
            let gy = &dy[(n * g.o + o) * plane..(n * g.o + o + 1) * plane];
            for c in 0..g.c {
                let base = (n * g.c + c) * g.h * g.w;
                for ki in 0..g.kh {
                    let (y0, y1) = g.valid(ki, g.h, g.oh);
                    for kj in 0..g.kw {
                        let widx = ((o * g.c + c) * g.kh + ki) * g.kw + kj;
                        let wv = w[widx];
                        let (x0, x1) = g.valid(kj, g.w, g.ow);
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ki - g.pad;
                            for ox in x0..x1 {
                                let ix = base + iy * g.w + ox * g.stride + kj - g.pad;
                                let gv = gy[oy * g.ow + ox];
                                acc += gv * x[ix];
                                dx[ix] += gv * wv;
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    (dx, dw)
}
