//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every value produced through a [`Tape`] is a node. Nodes created from
//! inputs that require gradients record their operation; [`Tape::backward`]
//! replays those records in reverse creation order and accumulates gradients
//! by summation. A tape supports exactly one backward pass.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::gemm::{gemm, View};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Operation tag, parseable from the names used in attribute-driven calls.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Conv2d,
    Relu,
    MaxPool2d,
    Dense,
    SoftmaxCrossEntropy,
    Add,
    Scale,
    ElementwiseSub,
    SumSquares,
    MatMul,
    Reshape,
    Mean,
}

impl OpKind {
    pub const ALL: [OpKind; 12] = [
        OpKind::Conv2d,
        OpKind::Relu,
        OpKind::MaxPool2d,
        OpKind::Dense,
        OpKind::SoftmaxCrossEntropy,
        OpKind::Add,
        OpKind::Scale,
        OpKind::ElementwiseSub,
        OpKind::SumSquares,
        OpKind::MatMul,
        OpKind::Reshape,
        OpKind::Mean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::Relu => "relu",
            OpKind::MaxPool2d => "maxpool2d",
            OpKind::Dense => "dense",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::Add => "add",
            OpKind::Scale => "scale",
            OpKind::ElementwiseSub => "elementwise_sub",
            OpKind::SumSquares => "sum_squares",
            OpKind::MatMul => "matmul",
            OpKind::Reshape => "reshape",
            OpKind::Mean => "mean",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttrValue {
    Int(i64),
    Float(f64),
    Ints(Vec<i64>),
    Bool(bool),
}

pub type Attrs = BTreeMap<String, AttrValue>;

/// A fully parameterized operation.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// inputs: x `[C,H,W]`, kernel `[O,C,KH,KW]`, optional bias `[O]`
    Conv2d {
        stride: usize,
        pad: usize,
    },
    Relu,
    /// input `[C,H,W]`
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    /// inputs: x `[in]` or `[N,in]`, weight `[out,in]`, bias `[out]`
    Dense,
    /// logits `[C]` or `[N,C]`; mean loss over rows
    SoftmaxCrossEntropy {
        targets: Vec<usize>,
    },
    Add,
    Scale(f64),
    ElementwiseSub,
    SumSquares,
    /// `[m,k] · [k,n]`, or `[m,k] · [n,k]ᵀ` when `transpose_b`
    MatMul {
        transpose_b: bool,
    },
    Reshape(Vec<usize>),
    Mean,
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu => OpKind::Relu,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::Dense => OpKind::Dense,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::Add => OpKind::Add,
            Op::Scale(_) => OpKind::Scale,
            Op::ElementwiseSub => OpKind::ElementwiseSub,
            Op::SumSquares => OpKind::SumSquares,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Mean => OpKind::Mean,
        }
    }

    /// Build an operation from its tag and a string-keyed attribute map.
    pub fn from_attrs(kind: OpKind, attrs: &Attrs) -> Result<Op> {
        let name = kind.name();
        let missing = |a: &str| Error::Attribute {
            op: name,
            name: a.to_string(),
        };
        let int = |a: &str| -> Result<Option<usize>> {
            match attrs.get(a) {
                None => Ok(None),
                Some(AttrValue::Int(v)) if *v >= 0 => Ok(Some(*v as usize)),
                Some(_) => Err(missing(a)),
            }
        };
        let ints = |a: &str| -> Result<Option<Vec<usize>>> {
            match attrs.get(a) {
                None => Ok(None),
                Some(AttrValue::Ints(v)) if v.iter().all(|&x| x >= 0) => {
                    Ok(Some(v.iter().map(|&x| x as usize).collect()))
                }
                Some(_) => Err(missing(a)),
            }
        };
        Ok(match kind {
            OpKind::Conv2d => Op::Conv2d {
                stride: int("stride")?.unwrap_or(1),
                pad: int("pad")?.unwrap_or(0),
            },
            OpKind::Relu => Op::Relu,
            OpKind::MaxPool2d => {
                let window = int("window")?.ok_or_else(|| missing("window"))?;
                Op::MaxPool2d {
                    window,
                    stride: int("stride")?.unwrap_or(window),
                }
            }
            OpKind::Dense => Op::Dense,
            OpKind::SoftmaxCrossEntropy => {
                let targets = match (ints("targets")?, int("target")?) {
                    (Some(t), _) => t,
                    (None, Some(t)) => vec![t],
                    (None, None) => return Err(missing("target")),
                };
                Op::SoftmaxCrossEntropy { targets }
            }
            OpKind::Add => Op::Add,
            OpKind::Scale => match attrs.get("factor") {
                Some(AttrValue::Float(f)) => Op::Scale(*f),
                Some(AttrValue::Int(i)) => Op::Scale(*i as f64),
                _ => return Err(missing("factor")),
            },
            OpKind::ElementwiseSub => Op::ElementwiseSub,
            OpKind::SumSquares => Op::SumSquares,
            OpKind::MatMul => Op::MatMul {
                transpose_b: match attrs.get("transpose_b") {
                    None => false,
                    Some(AttrValue::Bool(b)) => *b,
                    Some(_) => return Err(missing("transpose_b")),
                },
            },
            OpKind::Reshape => Op::Reshape(ints("shape")?.ok_or_else(|| missing("shape"))?),
            OpKind::Mean => Op::Mean,
        })
    }

    fn arity(&self) -> (usize, usize) {
        match self {
            Op::Conv2d { .. } => (2, 3),
            Op::Dense => (3, 3),
            Op::Add | Op::ElementwiseSub | Op::MatMul { .. } => (2, 2),
            _ => (1, 1),
        }
    }
}

/// Data kept from the forward pass for the backward rule.
enum Saved {
    None,
    Cols(Vec<f64>),
    Argmax(Vec<usize>),
    Probs(Vec<f64>),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    record: Option<(Op, Vec<Var>, Saved)>,
}

/// Gradients produced by one backward pass, keyed by node.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// `(node id, gradient)` pairs for every node that received a gradient.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
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

    /// A leaf node; gradients are reported for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            record: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Attribute-driven entry point: parse the tag, build the op, apply it.
    pub fn forward_op(&mut self, kind: &str, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        let kind: OpKind = kind.parse()?;
        let op = Op::from_attrs(kind, attrs)?;
        self.apply(op, inputs)
    }

    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let (lo, hi) = op.arity();
        if inputs.len() < lo || inputs.len() > hi {
            return Err(Error::shape(
                op.kind().name(),
                format!("expected {lo}..={hi} inputs, got {}", inputs.len()),
            ));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, saved) = forward(&op, &values)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} produced a non-finite output",
                op.kind()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let record = requires_grad.then(|| (op, inputs.to_vec(), saved));
        self.nodes.push(Node {
            value,
            requires_grad,
            record,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.apply(Op::Conv2d { stride, pad }, &inputs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Relu, &[x])
    }

    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        self.apply(Op::MaxPool2d { window, stride }, &[x])
    }

    pub fn dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        self.apply(Op::Dense, &[x, weight, bias])
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.apply(
            Op::SoftmaxCrossEntropy {
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::ElementwiseSub, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.apply(Op::Scale(factor), &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::SumSquares, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        self.apply(Op::MatMul { transpose_b }, &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape(shape.to_vec()), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Mean, &[x])
    }

    /// Gradients of a scalar `loss` with respect to every node that requires
    /// them. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if let Some((op, inputs, saved)) = &node.record {
                let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let needs: Vec<bool> = inputs
                    .iter()
                    .map(|v| self.nodes[v.0].requires_grad)
                    .collect();
                let input_grads = backward_rule(op, &values, &node.value, saved, &upstream, &needs);
                for ((var, g), need) in inputs.iter().zip(input_grads).zip(needs) {
                    if !need {
                        continue;
                    }
                    let g = g.expect("backward rule skipped a required input");
                    match &mut grads[var.0] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            }
            grads[id] = Some(upstream);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            } else if let Some(t) = g {
                if !t.is_finite() {
                    return Err(Error::NonFinite("gradient".into()));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

fn conv_geometry(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<(usize, ConvGeom)> {
    let op = "conv2d";
    let (xs, ks) = (x.shape(), k.shape());
    if xs.len() != 3 {
        return Err(Error::shape(
            op,
            format!("input must be [C,H,W], got {xs:?}"),
        ));
    }
    if ks.len() != 4 {
        return Err(Error::shape(
            op,
            format!("kernel must be [O,C,KH,KW], got {ks:?}"),
        ));
    }
    if ks[1] != xs[0] {
        return Err(Error::shape(
            op,
            format!(
                "kernel expects {} input channels, input has {}",
                ks[1], xs[0]
            ),
        ));
    }
    if stride == 0 {
        return Err(Error::shape(op, "stride must be positive"));
    }
    let (h, w) = (xs[1] + 2 * pad, xs[2] + 2 * pad);
    if ks[2] > h || ks[3] > w {
        return Err(Error::shape(
            op,
            format!(
                "kernel {}x{} exceeds padded input {}x{}",
                ks[2], ks[3], h, w
            ),
        ));
    }
    let g = ConvGeom {
        c: xs[0],
        h: xs[1],
        w: xs[2],
        kh: ks[2],
        kw: ks[3],
        oh: (h - ks[2]) / stride + 1,
        ow: (w - ks[3]) / stride + 1,
        stride,
        pad,
    };
    Ok((ks[0], g))
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.oh * g.ow;
    let mut cols = vec![0.0; g.c * g.kh * g.kw * p];
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[oy * g.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.oh * g.ow;
    let mut x = vec![0.0; g.c * g.h * g.w];
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            x[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn pool_geometry(
    x: &Tensor,
    window: usize,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::shape(
            "maxpool2d",
            format!("input must be [C,H,W], got {s:?}"),
        ));
    }
    if window == 0 || stride == 0 || window > s[1] || window > s[2] {
        return Err(Error::shape(
            "maxpool2d",
            format!(
                "window {window} stride {stride} invalid for {}x{} input",
                s[1], s[2]
            ),
        ));
    }
    Ok((
        s[0],
        s[1],
        s[2],
        (s[1] - window) / stride + 1,
        (s[2] - window) / stride + 1,
    ))
}

/// Rows × columns of a dense/softmax operand treated as a batch.
fn as_rows(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape() {
        [n] => Some((1, *n)),
        [r, n] => Some((*r, *n)),
        _ => None,
    }
}

fn forward(op: &Op, x: &[&Tensor]) -> Result<(Tensor, Saved)> {
    Ok(match op {
        Op::Conv2d { stride, pad } => {
            let (o, g) = conv_geometry(x[0], x[1], *stride, *pad)?;
            if let Some(b) = x.get(2) {
                if b.shape() != [o] {
                    return Err(Error::shape(
                        "conv2d",
                        format!("bias must be [{o}], got {:?}", b.shape()),
                    ));
                }
            }
            let cols = im2col(x[0].data(), &g);
            let p = g.oh * g.ow;
            let ckk = g.c * g.kh * g.kw;
            let mut y = vec![0.0; o * p];
            if let Some(b) = x.get(2) {
                for (row, &bv) in y.chunks_exact_mut(p).zip(b.data()) {
                    row.fill(bv);
                }
            }
            gemm(
                View::row_major(x[1].data(), o, ckk),
                View::row_major(&cols, ckk, p),
                &mut y,
                1.0,
            );
            (Tensor::new(vec![o, g.oh, g.ow], y)?, Saved::Cols(cols))
        }
        Op::Relu => {
            let data = x[0].data().iter().map(|&v| v.max(0.0)).collect();
            (Tensor::new(x[0].shape().to_vec(), data)?, Saved::None)
        }
        Op::MaxPool2d { window, stride } => {
            let (c, h, w, oh, ow) = pool_geometry(x[0], *window, *stride)?;
            let src = x[0].data();
            let mut out = Vec::with_capacity(c * oh * ow);
            let mut arg = Vec::with_capacity(c * oh * ow);
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for ky in 0..*window {
                            for kx in 0..*window {
                                let i = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                                if src[i] > best {
                                    best = src[i];
                                    best_i = i;
                                }
                            }
                        }
                        out.push(best);
                        arg.push(best_i);
                    }
                }
            }
            (Tensor::new(vec![c, oh, ow], out)?, Saved::Argmax(arg))
        }
        Op::Dense => {
            let (rows, input) = as_rows(x[0]).ok_or_else(|| {
                Error::shape(
                    "dense",
                    format!("input must be [in] or [N,in], got {:?}", x[0].shape()),
                )
            })?;
            let ws = x[1].shape();
            if ws.len() != 2 || ws[1] != input {
                return Err(Error::shape(
                    "dense",
                    format!("weight {ws:?} incompatible with input width {input}"),
                ));
            }
            let out = ws[0];
            if x[2].shape() != [out] {
                return Err(Error::shape(
                    "dense",
                    format!("bias must be [{out}], got {:?}", x[2].shape()),
                ));
            }
            let mut y = Vec::with_capacity(rows * out);
            for _ in 0..rows {
                y.extend_from_slice(x[2].data());
            }
            gemm(
                View::row_major(x[0].data(), rows, input),
                View::transposed(x[1].data(), out, input),
                &mut y,
                1.0,
            );
            let shape = if x[0].shape().len() == 1 {
                vec![out]
            } else {
                vec![rows, out]
            };
            (Tensor::new(shape, y)?, Saved::None)
        }
        Op::SoftmaxCrossEntropy { targets } => {
            let (rows, classes) = as_rows(x[0]).ok_or_else(|| {
                Error::shape(
                    "softmax_cross_entropy",
                    format!("logits must be [C] or [N,C], got {:?}", x[0].shape()),
                )
            })?;
            if targets.len() != rows {
                return Err(Error::shape(
                    "softmax_cross_entropy",
                    format!("{} targets for {rows} rows", targets.len()),
                ));
            }
            if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
                return Err(Error::shape(
                    "softmax_cross_entropy",
                    format!("target {t} out of {classes} classes"),
                ));
            }
            let mut probs = Vec::with_capacity(rows * classes);
            let mut loss = 0.0;
            for (row, &t) in x[0].data().chunks_exact(classes).zip(targets) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let lse = max + sum.ln();
                loss += lse - row[t];
                probs.extend(row.iter().map(|v| (v - lse).exp()));
            }
            (Tensor::scalar(loss / rows as f64), Saved::Probs(probs))
        }
        Op::Add | Op::ElementwiseSub => {
            let name = op.kind().name();
            same_shape(name, x[0], x[1])?;
            let sign = if matches!(op, Op::Add) { 1.0 } else { -1.0 };
            let data = x[0]
                .data()
                .iter()
                .zip(x[1].data())
                .map(|(a, b)| a + sign * b)
                .collect();
            (Tensor::new(x[0].shape().to_vec(), data)?, Saved::None)
        }
        Op::Scale(f) => {
            let data = x[0].data().iter().map(|v| v * f).collect();
            (Tensor::new(x[0].shape().to_vec(), data)?, Saved::None)
        }
        Op::SumSquares => (
            Tensor::scalar(x[0].data().iter().map(|v| v * v).sum()),
            Saved::None,
        ),
        Op::Mean => {
            let d = x[0].data();
            (
                Tensor::scalar(d.iter().sum::<f64>() / d.len() as f64),
                Saved::None,
            )
        }
        Op::MatMul { transpose_b } => {
            let (a, b) = (x[0].shape(), x[1].shape());
            if a.len() != 2 || b.len() != 2 {
                return Err(Error::shape(
                    "matmul",
                    format!("operands must be 2-D, got {a:?} and {b:?}"),
                ));
            }
            let (m, k) = (a[0], a[1]);
            let (bk, n) = if *transpose_b {
                (b[1], b[0])
            } else {
                (b[0], b[1])
            };
            if k != bk {
                return Err(Error::shape(
                    "matmul",
                    format!("inner dimensions differ: {a:?} x {b:?} (transpose_b={transpose_b})"),
                ));
            }
            let bv = if *transpose_b {
                View::transposed(x[1].data(), n, k)
            } else {
                View::row_major(x[1].data(), k, n)
            };
            let mut y = vec![0.0; m * n];
            gemm(View::row_major(x[0].data(), m, k), bv, &mut y, 0.0);
            (Tensor::new(vec![m, n], y)?, Saved::None)
        }
        Op::Reshape(shape) => {
            let numel: usize = shape.iter().product();
            if numel != x[0].numel() || shape.contains(&0) {
                return Err(Error::shape(
                    "reshape",
                    format!("cannot view {:?} as {shape:?}", x[0].shape()),
                ));
            }
            (x[0].clone().with_shape(shape.clone()), Saved::None)
        }
    })
}

/// Input gradients for one recorded op. Entries are `None` only where the
/// corresponding input does not require a gradient.
fn backward_rule(
    op: &Op,
    x: &[&Tensor],
    out: &Tensor,
    saved: &Saved,
    up: &Tensor,
    needs: &[bool],
) -> Vec<Option<Tensor>> {
    let g = up.data();
    match op {
        Op::Conv2d { stride, pad } => {
            let (o, geom) = conv_geometry(x[0], x[1], *stride, *pad).expect("validated in forward");
            let Saved::Cols(cols) = saved else {
                unreachable!()
            };
            let p = geom.oh * geom.ow;
            let ckk = geom.c * geom.kh * geom.kw;
            let dx = needs[0].then(|| {
                let mut dcols = vec![0.0; ckk * p];
                gemm(
                    View::transposed(x[1].data(), o, ckk),
                    View::row_major(g, o, p),
                    &mut dcols,
                    0.0,
                );
                Tensor::new(x[0].shape().to_vec(), col2im(&dcols, &geom)).unwrap()
            });
            let dk = needs[1].then(|| {
                let mut dk = vec![0.0; o * ckk];
                gemm(
                    View::row_major(g, o, p),
                    View::transposed(cols, ckk, p),
                    &mut dk,
                    0.0,
                );
                Tensor::new(x[1].shape().to_vec(), dk).unwrap()
            });
            let mut res = vec![dx, dk];
            if x.len() == 3 {
                res.push(
                    needs[2].then(|| {
                        Tensor::vector(g.chunks_exact(p).map(|r| r.iter().sum()).collect())
                    }),
                );
            }
            res
        }
        Op::Relu => {
            let d = x[0]
                .data()
                .iter()
                .zip(g)
                .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                .collect();
            vec![Some(Tensor::new(x[0].shape().to_vec(), d).unwrap())]
        }
        Op::MaxPool2d { .. } => {
            let Saved::Argmax(arg) = saved else {
                unreachable!()
            };
            let mut d = vec![0.0; x[0].numel()];
            for (&i, &gv) in arg.iter().zip(g) {
                d[i] += gv;
            }
            vec![Some(Tensor::new(x[0].shape().to_vec(), d).unwrap())]
        }
        Op::Dense => {
            let (rows, input) = as_rows(x[0]).unwrap();
            let out_dim = x[1].shape()[0];
            let dx = needs[0].then(|| {
                let mut d = vec![0.0; rows * input];
                gemm(
                    View::row_major(g, rows, out_dim),
                    View::row_major(x[1].data(), out_dim, input),
                    &mut d,
                    0.0,
                );
                Tensor::new(x[0].shape().to_vec(), d).unwrap()
            });
            let dw = needs[1].then(|| {
                let mut d = vec![0.0; out_dim * input];
                gemm(
                    View::transposed(g, rows, out_dim),
                    View::row_major(x[0].data(), rows, input),
                    &mut d,
                    0.0,
                );
                Tensor::new(x[1].shape().to_vec(), d).unwrap()
            });
            let db = needs[2].then(|| {
                let mut d = vec![0.0; out_dim];
                for row in g.chunks_exact(out_dim) {
                    for (a, b) in d.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                Tensor::vector(d)
            });
            vec![dx, dw, db]
        }
        Op::SoftmaxCrossEntropy { targets } => {
            let Saved::Probs(probs) = saved else {
                unreachable!()
            };
            let (rows, classes) = as_rows(x[0]).unwrap();
            let scale = g[0] / rows as f64;
            let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (r, &t) in targets.iter().enumerate() {
                d[r * classes + t] -= scale;
            }
            vec![Some(Tensor::new(x[0].shape().to_vec(), d).unwrap())]
        }
        Op::Add => vec![Some(up.clone()), Some(up.clone())],
        Op::ElementwiseSub => {
            let neg = Tensor::new(up.shape().to_vec(), g.iter().map(|v| -v).collect()).unwrap();
            vec![Some(up.clone()), Some(neg)]
        }
        Op::Scale(f) => vec![Some(
            Tensor::new(up.shape().to_vec(), g.iter().map(|v| v * f).collect()).unwrap(),
        )],
        Op::SumSquares => {
            let d = x[0].data().iter().map(|v| 2.0 * v * g[0]).collect();
            vec![Some(Tensor::new(x[0].shape().to_vec(), d).unwrap())]
        }
        Op::Mean => {
            let n = x[0].numel() as f64;
            vec![Some(Tensor::full(x[0].shape(), g[0] / n))]
        }
        Op::MatMul { transpose_b } => {
            let (m, k) = (x[0].shape()[0], x[0].shape()[1]);
            let n = out.shape()[1];
            let da = needs[0].then(|| {
                let bt = if *transpose_b {
                    View::row_major(x[1].data(), n, k)
                } else {
                    View::transposed(x[1].data(), k, n)
                };
                let mut d = vec![0.0; m * k];
                gemm(View::row_major(g, m, n), bt, &mut d, 0.0);
                Tensor::new(vec![m, k], d).unwrap()
            });
            let db = needs[1].then(|| {
                if *transpose_b {
                    // d(B) with B stored [n,k]: gᵀ · A
                    let mut d = vec![0.0; n * k];
                    gemm(
                        View::transposed(g, m, n),
                        View::row_major(x[0].data(), m, k),
                        &mut d,
                        0.0,
                    );
                    Tensor::new(vec![n, k], d).unwrap()
                } else {
                    let mut d = vec![0.0; k * n];
                    gemm(
                        View::transposed(x[0].data(), m, k),
                        View::row_major(g, m, n),
                        &mut d,
                        0.0,
                    );
                    Tensor::new(vec![k, n], d).unwrap()
                }
            });
            vec![da, db]
        }
        Op::Reshape(_) => vec![Some(up.clone().with_shape(x[0].shape().to_vec()))],
    }
}
