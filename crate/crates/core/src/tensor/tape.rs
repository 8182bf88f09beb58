use std::cell::RefCell;
use std::rc::Rc;

use super::{gemm, mismatch, Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul { a: usize, b: usize, batched: bool },
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Narrow { x: usize, axis: usize, start: usize },
    Concat { xs: Vec<usize>, axis: usize },
    IndexSelect { x: usize, ids: Vec<usize> },
    Sum(usize),
    Mean(usize),
    SumAxis { x: usize, axis: usize },
    MeanAxis { x: usize, axis: usize },
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm { x: usize, rstd: Vec<f64> },
    Gelu(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
    Mse(usize, usize),
    StraightThrough(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order for a single backward pass.
///
/// Nodes are appended as operations run, so every node's inputs precede it.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of one backward pass, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zeros when nothing flowed into it.
    pub fn wrt_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape().as_slice()))
    }
}

fn trailing_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out, out_shape);
    }
    // Iterate the output in row-major order, innermost axis as a tight loop.
    let last = nd - 1;
    let (inner_len, inner_stride) = (out_shape[last], strides[last]);
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    loop {
        for j in 0..inner_len {
            out.push(data[base + j * inner_stride]);
        }
        let mut d = last;
        loop {
            if d == 0 {
                return (out, out_shape);
            }
            d -= 1;
            idx[d] += 1;
            base += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn add_into(dst: &mut Option<Tensor>, g: Tensor) {
    match dst {
        Some(d) => {
            for (a, b) in d.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
        None => *dst = Some(g),
    }
}

/// Sums `g` (shape `a`) down to the trailing shape `b`.
fn reduce_to(g: &Tensor, b_shape: &[usize]) -> Tensor {
    if g.shape == b_shape {
        return g.clone();
    }
    let n: usize = b_shape.iter().product();
    let mut out = vec![0.0; n];
    for chunk in g.data.chunks(n.max(1)) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor { shape: b_shape.to_vec(), data: out }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, o) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = (v - max).exp();
            s += *oi;
        }
        o.iter_mut().for_each(|v| *v /= s);
    }
    out
}

fn log_softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, o) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = v - lse;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A differentiable leaf.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    /// A value that receives no gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `loss`. Gradients are returned for every
    /// node that requires them; leaves are read back with [`Gradients::wrt`].
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NotScalar(root.value.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor { shape: root.value.shape.clone(), data: vec![1.0] });
        for i in (0..=loss.id).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let rg = |j: usize| nodes[j].requires_grad;
            let val = |j: usize| &*nodes[j].value;
            let y = &*node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if rg(*b) {
                        let mut gb = reduce_to(&g, &val(*b).shape);
                        if sign < 0.0 {
                            gb.data.iter_mut().for_each(|v| *v = -*v);
                        }
                        add_into(&mut grads[*b], gb);
                    }
                    if rg(*a) {
                        add_into(&mut grads[*a], g);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let nb = vb.numel();
                    if rg(*a) {
                        let data = g.data.iter().enumerate().map(|(k, gv)| gv * vb.data[k % nb]).collect();
                        add_into(&mut grads[*a], Tensor { shape: va.shape.clone(), data });
                    }
                    if rg(*b) {
                        let prod = Tensor {
                            shape: va.shape.clone(),
                            data: g.data.iter().zip(&va.data).map(|(gv, av)| gv * av).collect(),
                        };
                        add_into(&mut grads[*b], reduce_to(&prod, &vb.shape));
                    }
                }
                Op::Scale(a, c) => {
                    if rg(*a) {
                        add_into(&mut grads[*a], g.map(|v| v * c));
                    }
                }
                Op::AddScalar(a) | Op::Reshape(a) | Op::StraightThrough(a) => {
                    if rg(*a) {
                        let shape = val(*a).shape.clone();
                        add_into(&mut grads[*a], Tensor { shape, data: g.data });
                    }
                }
                Op::MatMul { a, b, batched } => {
                    let (va, vb) = (val(*a), val(*b));
                    let nd = va.shape.len();
                    let (m, k) = (va.shape[nd - 2], va.shape[nd - 1]);
                    let nn = vb.shape[vb.shape.len() - 1];
                    if !batched {
                        let rows = va.numel() / k;
                        if rg(*a) {
                            let mut ga = vec![0.0; va.numel()];
                            gemm(rows, nn, k, &g.data, false, &vb.data, true, &mut ga, 0.0);
                            add_into(&mut grads[*a], Tensor { shape: va.shape.clone(), data: ga });
                        }
                        if rg(*b) {
                            let mut gb = vec![0.0; vb.numel()];
                            gemm(k, rows, nn, &va.data, true, &g.data, false, &mut gb, 0.0);
                            add_into(&mut grads[*b], Tensor { shape: vb.shape.clone(), data: gb });
                        }
                    } else {
                        let batch = va.numel() / (m * k);
                        if rg(*a) {
                            let mut ga = vec![0.0; va.numel()];
                            for bi in 0..batch {
                                gemm(
                                    m,
                                    nn,
                                    k,
                                    &g.data[bi * m * nn..],
                                    false,
                                    &vb.data[bi * k * nn..],
                                    true,
                                    &mut ga[bi * m * k..],
                                    0.0,
                                );
                            }
                            add_into(&mut grads[*a], Tensor { shape: va.shape.clone(), data: ga });
                        }
                        if rg(*b) {
                            let mut gb = vec![0.0; vb.numel()];
                            for bi in 0..batch {
                                gemm(
                                    k,
                                    m,
                                    nn,
                                    &va.data[bi * m * k..],
                                    true,
                                    &g.data[bi * m * nn..],
                                    false,
                                    &mut gb[bi * k * nn..],
                                    0.0,
                                );
                            }
                            add_into(&mut grads[*b], Tensor { shape: vb.shape.clone(), data: gb });
                        }
                    }
                }
                Op::Permute(a, axes) => {
                    if rg(*a) {
                        let (data, shape) = permute_data(&g.data, &g.shape, &inverse_axes(axes));
                        add_into(&mut grads[*a], Tensor { shape, data });
                    }
                }
                Op::Narrow { x, axis, start } => {
                    if rg(*x) {
                        let xs = &val(*x).shape;
                        let (outer, len_in, inner) = axis_split(xs, *axis);
                        let len = g.shape[*axis];
                        let mut data = vec![0.0; val(*x).numel()];
                        for o in 0..outer {
                            let src = &g.data[o * len * inner..(o + 1) * len * inner];
                            let dst_at = (o * len_in + start) * inner;
                            data[dst_at..dst_at + len * inner].copy_from_slice(src);
                        }
                        add_into(&mut grads[*x], Tensor { shape: xs.clone(), data });
                    }
                }
                Op::Concat { xs, axis } => {
                    let (outer, total, inner) = axis_split(&g.shape, *axis);
                    let mut offset = 0;
                    for &x in xs {
                        let len = val(x).shape[*axis];
                        if rg(x) {
                            let mut data = Vec::with_capacity(val(x).numel());
                            for o in 0..outer {
                                let at = (o * total + offset) * inner;
                                data.extend_from_slice(&g.data[at..at + len * inner]);
                            }
                            add_into(&mut grads[x], Tensor { shape: val(x).shape.clone(), data });
                        }
                        offset += len;
                    }
                }
                Op::IndexSelect { x, ids } => {
                    if rg(*x) {
                        let vx = val(*x);
                        let inner = vx.numel() / vx.shape[0].max(1);
                        let mut data = vec![0.0; vx.numel()];
                        for (r, &id) in ids.iter().enumerate() {
                            let src = &g.data[r * inner..(r + 1) * inner];
                            for (d, s) in data[id * inner..(id + 1) * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        add_into(&mut grads[*x], Tensor { shape: vx.shape.clone(), data });
                    }
                }
                Op::Sum(a) | Op::Mean(a) => {
                    if rg(*a) {
                        let va = val(*a);
                        let scale = if matches!(node.op, Op::Mean(_)) { 1.0 / va.numel() as f64 } else { 1.0 };
                        add_into(&mut grads[*a], Tensor::full(&va.shape, g.data[0] * scale));
                    }
                }
                Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                    if rg(*x) {
                        let xs = &val(*x).shape;
                        let (outer, len, inner) = axis_split(xs, *axis);
                        let scale = if matches!(node.op, Op::MeanAxis { .. }) { 1.0 / len as f64 } else { 1.0 };
                        let mut data = vec![0.0; outer * len * inner];
                        for o in 0..outer {
                            for l in 0..len {
                                let dst = &mut data[(o * len + l) * inner..(o * len + l + 1) * inner];
                                for (d, s) in dst.iter_mut().zip(&g.data[o * inner..(o + 1) * inner]) {
                                    *d = s * scale;
                                }
                            }
                        }
                        add_into(&mut grads[*x], Tensor { shape: xs.clone(), data });
                    }
                }
                Op::Softmax(a) => {
                    if rg(*a) {
                        let cols = *y.shape.last().unwrap();
                        let mut data = vec![0.0; y.numel()];
                        for ((yr, gr), dr) in y.data.chunks(cols).zip(g.data.chunks(cols)).zip(data.chunks_mut(cols)) {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                                *d = yv * (gv - dot);
                            }
                        }
                        add_into(&mut grads[*a], Tensor { shape: y.shape.clone(), data });
                    }
                }
                Op::LogSoftmax(a) => {
                    if rg(*a) {
                        let cols = *y.shape.last().unwrap();
                        let mut data = vec![0.0; y.numel()];
                        for ((yr, gr), dr) in y.data.chunks(cols).zip(g.data.chunks(cols)).zip(data.chunks_mut(cols)) {
                            let gs: f64 = gr.iter().sum();
                            for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                                *d = gv - yv.exp() * gs;
                            }
                        }
                        add_into(&mut grads[*a], Tensor { shape: y.shape.clone(), data });
                    }
                }
                Op::LayerNorm { x, rstd } => {
                    if rg(*x) {
                        let cols = *y.shape.last().unwrap();
                        let inv_n = 1.0 / cols as f64;
                        let mut data = vec![0.0; y.numel()];
                        for (r, ((yr, gr), dr)) in
                            y.data.chunks(cols).zip(g.data.chunks(cols)).zip(data.chunks_mut(cols)).enumerate()
                        {
                            let mg: f64 = gr.iter().sum::<f64>() * inv_n;
                            let mgy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() * inv_n;
                            for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                                *d = rstd[r] * (gv - mg - yv * mgy);
                            }
                        }
                        add_into(&mut grads[*x], Tensor { shape: y.shape.clone(), data });
                    }
                }
                Op::Gelu(a) | Op::Relu(a) | Op::Exp(a) | Op::Log(a) => {
                    if rg(*a) {
                        let va = val(*a);
                        let data = match &node.op {
                            Op::Gelu(_) => g.data.iter().zip(&va.data).map(|(gv, x)| gv * gelu_grad(*x)).collect(),
                            Op::Relu(_) => g
                                .data
                                .iter()
                                .zip(&va.data)
                                .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                                .collect(),
                            Op::Exp(_) => g.data.iter().zip(&y.data).map(|(gv, yv)| gv * yv).collect(),
                            _ => g.data.iter().zip(&va.data).map(|(gv, x)| gv / x).collect(),
                        };
                        add_into(&mut grads[*a], Tensor { shape: va.shape.clone(), data });
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    if rg(*x) {
                        let vx = val(*x);
                        let data = g
                            .data
                            .iter()
                            .zip(&vx.data)
                            .map(|(gv, v)| if *v > *lo && *v < *hi { *gv } else { 0.0 })
                            .collect();
                        add_into(&mut grads[*x], Tensor { shape: vx.shape.clone(), data });
                    }
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    if rg(*logits) {
                        let vl = val(*logits);
                        let k = *vl.shape.last().unwrap();
                        let scale = g.data[0] / targets.len() as f64;
                        let mut data: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                        for (r, &t) in targets.iter().enumerate() {
                            data[r * k + t] -= scale;
                        }
                        add_into(&mut grads[*logits], Tensor { shape: vl.shape.clone(), data });
                    }
                }
                Op::Mse(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let scale = 2.0 * g.data[0] / va.numel() as f64;
                    let diff: Vec<f64> = va.data.iter().zip(&vb.data).map(|(x, y)| (x - y) * scale).collect();
                    if rg(*b) {
                        let data = diff.iter().map(|v| -v).collect();
                        add_into(&mut grads[*b], Tensor { shape: vb.shape.clone(), data });
                    }
                    if rg(*a) {
                        add_into(&mut grads[*a], Tensor { shape: va.shape.clone(), data: diff });
                    }
                }
            }
            // Interior node grads are not needed after propagation; keep leaves.
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

impl<'t> Var<'t> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    pub fn value(self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape.clone()
    }

    pub fn requires_grad(self) -> bool {
        self.tape.rg(self.id)
    }

    /// Scalar value of a one-element var.
    pub fn item(self) -> f64 {
        self.value().item()
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn zip_broadcast(self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (a, b) = (self.value(), other.value());
        if !trailing_broadcast(&a.shape, &b.shape) {
            return Err(mismatch(name, &[&a.shape, &b.shape]));
        }
        let nb = b.numel().max(1);
        let data = a.data.iter().enumerate().map(|(k, x)| f(*x, b.data[k % nb])).collect();
        Ok(Tensor { shape: a.shape.clone(), data })
    }

    /// Elementwise sum; `other` may match a trailing suffix of `self`'s shape.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_broadcast(other, "add", |a, b| a + b)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_broadcast(other, "sub", |a, b| a - b)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_broadcast(other, "mul", |a, b| a * b)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddScalar(self.id))
    }

    /// `[..., m, k] · [k, n]` (shared right operand) or
    /// `[..., m, k] · [..., k, n]` with identical leading dimensions.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let err = || mismatch("matmul", &[&a.shape, &b.shape]);
        if a.ndim() < 2 || b.ndim() < 2 {
            return Err(err());
        }
        let (m, k) = (a.shape[a.ndim() - 2], a.shape[a.ndim() - 1]);
        let (kb, n) = (b.shape[b.ndim() - 2], b.shape[b.ndim() - 1]);
        if k != kb {
            return Err(err());
        }
        let mut shape = a.shape[..a.ndim() - 1].to_vec();
        shape.push(n);
        let batched = b.ndim() > 2;
        let mut out = vec![0.0; shape.iter().product()];
        if !batched {
            gemm(a.numel() / k.max(1), k, n, &a.data, false, &b.data, false, &mut out, 0.0);
        } else {
            if a.shape[..a.ndim() - 2] != b.shape[..b.ndim() - 2] {
                return Err(err());
            }
            let batch = a.numel() / (m * k).max(1);
            for bi in 0..batch {
                gemm(m, k, n, &a.data[bi * m * k..], false, &b.data[bi * k * n..], false, &mut out[bi * m * n..], 0.0);
            }
        }
        let v = Tensor { shape, data: out };
        Ok(self.binary(other, v, Op::MatMul { a: self.id, b: other.id, batched }))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let mut seen = vec![false; a.ndim()];
        if axes.len() != a.ndim() || axes.iter().any(|&x| x >= a.ndim() || std::mem::replace(&mut seen[x], true)) {
            return Err(TensorError::InvalidArgument(format!("bad permutation {axes:?} for {:?}", a.shape)));
        }
        let (data, shape) = permute_data(&a.data, &a.shape, axes);
        Ok(self.unary(Tensor { shape, data }, Op::Permute(self.id, axes.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let nd = self.shape().len();
        if nd < 2 {
            return Err(mismatch("transpose", &[&self.shape()]));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = (*self.value()).clone().reshaped(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        if axis >= a.ndim() || start + len > a.shape[axis] {
            return Err(mismatch("narrow", &[&a.shape]));
        }
        let (outer, len_in, inner) = axis_split(&a.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let at = (o * len_in + start) * inner;
            data.extend_from_slice(&a.data[at..at + len * inner]);
        }
        let mut shape = a.shape.clone();
        shape[axis] = len;
        Ok(self.unary(Tensor { shape, data }, Op::Narrow { x: self.id, axis, start }))
    }

    pub fn concat(xs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = xs.first().ok_or_else(|| TensorError::InvalidArgument("concat of nothing".into()))?;
        let tape = first.tape;
        let vals: Vec<Rc<Tensor>> = xs.iter().map(|x| x.value()).collect();
        let base = &vals[0].shape;
        if axis >= base.len() {
            return Err(mismatch("concat", &[base]));
        }
        for v in &vals[1..] {
            let ok = v.shape.len() == base.len()
                && v.shape.iter().zip(base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(mismatch("concat", &[base, &v.shape]));
            }
        }
        let total: usize = vals.iter().map(|v| v.shape[axis]).sum();
        let (outer, _, inner) = axis_split(base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &vals {
                let len = v.shape[axis];
                data.extend_from_slice(&v.data[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let rg = xs.iter().any(|x| x.requires_grad());
        let ids = xs.iter().map(|x| x.id).collect();
        Ok(tape.push(Tensor { shape, data }, Op::Concat { xs: ids, axis }, rg))
    }

    /// Rows of axis 0 picked by `ids` (gather / embedding lookup).
    pub fn index_select(self, ids: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if a.ndim() == 0 {
            return Err(mismatch("index_select", &[&a.shape]));
        }
        let rows = a.shape[0];
        let inner = a.numel() / rows.max(1);
        let mut data = Vec::with_capacity(ids.len() * inner);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange { index: id, len: rows });
            }
            data.extend_from_slice(&a.data[id * inner..(id + 1) * inner]);
        }
        let mut shape = a.shape.clone();
        shape[0] = ids.len();
        Ok(self.unary(Tensor { shape, data }, Op::IndexSelect { x: self.id, ids: ids.to_vec() }))
    }

    pub fn embedding(table: Var<'t>, ids: &[usize]) -> Result<Var<'t>> {
        table.index_select(ids)
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let a = self.value();
        let v = Tensor::scalar(a.sum() / a.numel() as f64);
        self.unary(v, Op::Mean(self.id))
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Result<Var<'t>> {
        let a = self.value();
        if axis >= a.ndim() {
            return Err(mismatch(if mean { "mean_axis" } else { "sum_axis" }, &[&a.shape]));
        }
        let (outer, len, inner) = axis_split(&a.shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &a.data[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            data.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut shape = a.shape.clone();
        shape.remove(axis);
        let op = if mean { Op::MeanAxis { x: self.id, axis } } else { Op::SumAxis { x: self.id, axis } };
        Ok(self.unary(Tensor { shape, data }, op))
    }

    /// Sums out `axis` (the axis is removed).
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, true)
    }

    fn last_dim(self, op: &'static str) -> Result<usize> {
        let s = self.shape();
        match s.last() {
            Some(&c) if c > 0 => Ok(c),
            _ => Err(mismatch(op, &[&s])),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        let cols = self.last_dim("softmax")?;
        let a = self.value();
        let v = Tensor { shape: a.shape.clone(), data: softmax_rows(&a.data, cols) };
        Ok(self.unary(v, Op::Softmax(self.id)))
    }

    pub fn log_softmax(self) -> Result<Var<'t>> {
        let cols = self.last_dim("log_softmax")?;
        let a = self.value();
        let v = Tensor { shape: a.shape.clone(), data: log_softmax_rows(&a.data, cols) };
        Ok(self.unary(v, Op::LogSoftmax(self.id)))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(self, eps: f64) -> Result<Var<'t>> {
        let cols = self.last_dim("layer_norm")?;
        let a = self.value();
        let mut data = vec![0.0; a.numel()];
        let mut rstd = Vec::with_capacity(a.numel() / cols);
        for (row, out) in a.data.chunks(cols).zip(data.chunks_mut(cols)) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (o, v) in out.iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
            rstd.push(r);
        }
        Ok(self.unary(Tensor { shape: a.shape.clone(), data }, Op::LayerNorm { x: self.id, rstd }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        let v = self.value().map(gelu);
        self.unary(v, Op::Gelu(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.value().map(f64::ln);
        self.unary(v, Op::Log(self.id))
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let v = self.value().map(|x| x.clamp(lo, hi));
        self.unary(v, Op::Clamp { x: self.id, lo, hi })
    }

    /// Mean cross-entropy of `[n, K]` logits against class ids.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if a.ndim() != 2 || a.shape[0] != targets.len() || targets.is_empty() {
            return Err(mismatch("cross_entropy", &[&a.shape, &[targets.len()]]));
        }
        let k = a.shape[1];
        let logp = log_softmax_rows(&a.data, k);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= k {
                return Err(TensorError::IndexOutOfRange { index: t, len: k });
            }
            loss -= logp[r * k + t];
        }
        loss /= targets.len() as f64;
        let probs = logp.iter().map(|v| v.exp()).collect();
        let op = Op::CrossEntropy { logits: self.id, targets: targets.to_vec(), probs };
        Ok(self.unary(Tensor::scalar(loss), op))
    }

    /// Mean squared error against a same-shape var.
    pub fn mse(self, target: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), target.value());
        if a.shape != b.shape || a.numel() == 0 {
            return Err(mismatch("mse", &[&a.shape, &b.shape]));
        }
        let loss = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64;
        Ok(self.binary(target, Tensor::scalar(loss), Op::Mse(self.id, target.id)))
    }

    /// Forwards `hard` while routing the backward pass to `self` unchanged.
    pub fn straight_through(self, hard: Tensor) -> Result<Var<'t>> {
        if hard.shape != self.shape() {
            return Err(mismatch("straight_through", &[&self.shape(), &hard.shape]));
        }
        Ok(self.unary(hard, Op::StraightThrough(self.id)))
    }
}
