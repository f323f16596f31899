//! Define-by-run tape: one [`Tape`] per forward pass, [`Var`] handles index
//! into it. Records are pushed in topological order (inputs precede
//! outputs), so [`Tape::backward`] is a single reverse sweep with additive
//! gradient accumulation.

use std::cell::RefCell;

use super::kernels;
use super::{Result, Tensor, TensorError};

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Matmul(usize, usize),
    Conv1d { input: usize, kernel: usize, stride: usize },
    ConvT1d { input: usize, kernel: usize, stride: usize },
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Square(usize),
    Ln(usize),
    LogSoftmax(usize),
    Sum(usize),
    Mean(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    Transpose(usize),
    LogAddExp(usize, usize),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires: bool,
    op: Op,
}

/// Computation tape for one forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tape({} nodes)", self.nodes.borrow().len())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, requires: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            grad: None,
            requires,
            op,
        });
        Var { tape: self, id }
    }

    /// Place a tensor on the tape. `requires_grad` marks it as a
    /// differentiation target.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Non-differentiable value on the tape.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, false, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Concatenate along `axis`. All parts must agree on every other dim.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArg {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        for p in parts {
            assert!(std::ptr::eq(p.tape, self), "concat across tapes");
        }
        let (requires, value) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].id].value;
            let rank = first.rank();
            if axis >= rank {
                return Err(TensorError::InvalidArg {
                    op: "concat",
                    msg: format!("axis {axis} out of range for rank {rank}"),
                });
            }
            let mut axis_total = 0;
            for p in parts {
                let t = &nodes[p.id].value;
                if t.rank() != rank
                    || t.shape()
                        .iter()
                        .zip(first.shape())
                        .enumerate()
                        .any(|(d, (a, b))| d != axis && a != b)
                {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: first.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                axis_total += t.shape()[axis];
            }
            let mut shape = first.shape().to_vec();
            shape[axis] = axis_total;
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let mut data = vec![0.0; shape.iter().product()];
            let mut offset = 0;
            for p in parts {
                let t = &nodes[p.id].value;
                let alen = t.shape()[axis];
                let src = t.data();
                for o in 0..outer {
                    let dst_start = (o * axis_total + offset) * inner;
                    let src_start = o * alen * inner;
                    data[dst_start..dst_start + alen * inner]
                        .copy_from_slice(&src[src_start..src_start + alen * inner]);
                }
                offset += alen;
            }
            let requires = parts.iter().any(|p| nodes[p.id].requires);
            (requires, Tensor::new(shape, data).unwrap())
        };
        Ok(self.push(
            value,
            requires,
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }

    /// Reverse sweep from `loss`, which must be a single-element tensor on
    /// this tape. Populates gradients for every `requires_grad` node that
    /// `loss` depends on; fan-out accumulates additively.
    pub fn backward(&self, loss: Var) -> Result<()> {
        assert!(std::ptr::eq(loss.tape, self), "loss from a different tape");
        let mut nodes = self.nodes.borrow_mut();
        if loss.id >= nodes.len() {
            return Err(TensorError::NotOnTape {
                id: loss.id,
                len: nodes.len(),
            });
        }
        if nodes[loss.id].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: nodes[loss.id].value.shape().to_vec(),
            });
        }
        for n in nodes.iter_mut() {
            n.grad = if n.requires {
                Some(vec![0.0; n.value.numel()])
            } else {
                None
            };
        }
        if !nodes[loss.id].requires {
            return Ok(());
        }
        nodes[loss.id].grad.as_mut().unwrap()[0] = 1.0;

        for id in (0..=loss.id).rev() {
            if !nodes[id].requires || matches!(nodes[id].op, Op::Leaf) {
                continue;
            }
            let (head, tail) = nodes.split_at_mut(id);
            let node = &tail[0];
            let g = node.grad.as_ref().unwrap();
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc_binary_linear(head, *a, g, 1.0);
                    acc_binary_linear(head, *b, g, 1.0);
                }
                Op::Sub(a, b) => {
                    acc_binary_linear(head, *a, g, 1.0);
                    acc_binary_linear(head, *b, g, -1.0);
                }
                Op::Mul(a, b) => {
                    let ga = mul_grad(g, &head[*b].value, head[*a].value.numel());
                    let gb = mul_grad(g, &head[*a].value, head[*b].value.numel());
                    acc(head, *a, &ga);
                    acc(head, *b, &gb);
                }
                Op::Scale(a, c) => {
                    let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                    acc(head, *a, &ga);
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (head[*a].value.shape()[0], head[*a].value.shape()[1]);
                    let n = head[*b].value.shape()[1];
                    if head[*a].requires {
                        let mut ga = vec![0.0; m * k];
                        kernels::matmul_gbt_acc(g, head[*b].value.data(), m, k, n, &mut ga);
                        acc(head, *a, &ga);
                    }
                    if head[*b].requires {
                        let mut gb = vec![0.0; k * n];
                        kernels::matmul_atg_acc(head[*a].value.data(), g, m, k, n, &mut gb);
                        acc(head, *b, &gb);
                    }
                }
                Op::Conv1d { input, kernel, stride } => {
                    let (cin, l) = (head[*input].value.shape()[0], head[*input].value.shape()[1]);
                    let (cout, kw) = (head[*kernel].value.shape()[0], head[*kernel].value.shape()[2]);
                    let l_out = (l - kw) / stride + 1;
                    if head[*kernel].requires {
                        // g_k[cout, cin*kw] += G[cout, l_out] @ cols[cin*kw, l_out]^T
                        let cols = kernels::im2col(head[*input].value.data(), cin, l, kw, *stride, l_out);
                        let mut gk = vec![0.0; cout * cin * kw];
                        kernels::matmul_gbt_acc(g, &cols, cout, cin * kw, l_out, &mut gk);
                        acc(head, *kernel, &gk);
                    }
                    if head[*input].requires {
                        // g_cols = K[cout, cin*kw]^T @ G -> scatter back
                        let mut gcols = vec![0.0; cin * kw * l_out];
                        kernels::matmul_atg_acc(head[*kernel].value.data(), g, cout, cin * kw, l_out, &mut gcols);
                        let mut gi = vec![0.0; cin * l];
                        kernels::col2im_acc(&gcols, cin, l, kw, *stride, l_out, &mut gi);
                        acc(head, *input, &gi);
                    }
                }
                Op::ConvT1d { input, kernel, stride } => {
                    let (cin, l) = (head[*input].value.shape()[0], head[*input].value.shape()[1]);
                    let (cout, kw) = (head[*kernel].value.shape()[1], head[*kernel].value.shape()[2]);
                    let l_out = (l - 1) * stride + kw;
                    // forward scattered cols = K^T @ in; adjoint gathers
                    let gcols = kernels::im2col(g, cout, l_out, kw, *stride, l);
                    if head[*input].requires {
                        let mut gi = vec![0.0; cin * l];
                        kernels::matmul_acc(head[*kernel].value.data(), &gcols, cin, cout * kw, l, &mut gi);
                        acc(head, *input, &gi);
                    }
                    if head[*kernel].requires {
                        let mut gk = vec![0.0; cin * cout * kw];
                        kernels::matmul_gbt_acc(head[*input].value.data(), &gcols, cin, cout * kw, l, &mut gk);
                        acc(head, *kernel, &gk);
                    }
                }
                Op::Relu(a) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(head[*a].value.iter())
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    acc(head, *a, &ga);
                }
                Op::Tanh(a) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(node.value.iter())
                        .map(|(gv, &y)| gv * (1.0 - y * y))
                        .collect();
                    acc(head, *a, &ga);
                }
                Op::Sigmoid(a) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(node.value.iter())
                        .map(|(gv, &y)| gv * y * (1.0 - y))
                        .collect();
                    acc(head, *a, &ga);
                }
                Op::Square(a) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(head[*a].value.iter())
                        .map(|(gv, &x)| gv * 2.0 * x)
                        .collect();
                    acc(head, *a, &ga);
                }
                Op::Ln(a) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(head[*a].value.iter())
                        .map(|(gv, &x)| gv / x)
                        .collect();
                    acc(head, *a, &ga);
                }
                Op::LogSoftmax(a) => {
                    let shape = node.value.shape();
                    let width = *shape.last().unwrap();
                    let rows = node.value.numel() / width;
                    let mut ga = vec![0.0; node.value.numel()];
                    for r in 0..rows {
                        let y = &node.value.data()[r * width..(r + 1) * width];
                        let gr = &g[r * width..(r + 1) * width];
                        let gsum: f64 = gr.iter().sum();
                        for ((o, &yv), &gv) in ga[r * width..(r + 1) * width].iter_mut().zip(y).zip(gr) {
                            *o = gv - yv.exp() * gsum;
                        }
                    }
                    acc(head, *a, &ga);
                }
                Op::Sum(a) => {
                    let ga = vec![g[0]; head[*a].value.numel()];
                    acc(head, *a, &ga);
                }
                Op::Mean(a) => {
                    let n = head[*a].value.numel();
                    let ga = vec![g[0] / n as f64; n];
                    acc(head, *a, &ga);
                }
                Op::Concat { inputs, axis } => {
                    let shape = node.value.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let total = shape[*axis];
                    let mut offset = 0;
                    let ids = inputs.clone();
                    for pid in ids {
                        let alen = head[pid].value.shape()[*axis];
                        if head[pid].requires {
                            let mut gp = vec![0.0; head[pid].value.numel()];
                            for o in 0..outer {
                                let src = (o * total + offset) * inner;
                                let dst = o * alen * inner;
                                gp[dst..dst + alen * inner]
                                    .copy_from_slice(&g[src..src + alen * inner]);
                            }
                            acc(head, pid, &gp);
                        }
                        offset += alen;
                    }
                }
                Op::Slice { input, axis, start } => {
                    let ishape = head[*input].value.shape().to_vec();
                    let outer: usize = ishape[..*axis].iter().product();
                    let inner: usize = ishape[*axis + 1..].iter().product();
                    let alen = node.value.shape()[*axis];
                    let mut gi = vec![0.0; head[*input].value.numel()];
                    for o in 0..outer {
                        let dst = (o * ishape[*axis] + start) * inner;
                        let src = o * alen * inner;
                        gi[dst..dst + alen * inner].copy_from_slice(&g[src..src + alen * inner]);
                    }
                    acc(head, *input, &gi);
                }
                Op::Transpose(a) => {
                    let shape = node.value.shape();
                    let gi = kernels::transpose(g, shape[0], shape[1]);
                    acc(head, *a, &gi);
                }
                Op::LogAddExp(a, b) => {
                    let out = node.value.data();
                    let ga = laex_grad(g, out, &head[*a].value, head[*a].value.numel());
                    let gb = laex_grad(g, out, &head[*b].value, head[*b].value.numel());
                    acc(head, *a, &ga);
                    acc(head, *b, &gb);
                }
            }
        }
        Ok(())
    }
}

/// Accumulate `delta` into the gradient of `id` if it requires one.
fn acc(nodes: &mut [Node], id: usize, delta: &[f64]) {
    if let Some(gr) = nodes[id].grad.as_mut() {
        for (o, &d) in gr.iter_mut().zip(delta) {
            *o += d;
        }
    }
}

/// Add/sub path: parent gets sign*g, collapsed by summation when the parent
/// is a broadcast scalar.
fn acc_binary_linear(nodes: &mut [Node], id: usize, g: &[f64], sign: f64) {
    let numel = nodes[id].value.numel();
    if let Some(gr) = nodes[id].grad.as_mut() {
        if numel == g.len() {
            for (o, &gv) in gr.iter_mut().zip(g) {
                *o += sign * gv;
            }
        } else {
            // scalar parent broadcast over the other operand
            gr[0] += sign * g.iter().sum::<f64>();
        }
    }
}

/// Gradient of elementwise mul w.r.t. one operand, given the other's value.
fn mul_grad(g: &[f64], other: &Tensor, parent_numel: usize) -> Vec<f64> {
    if parent_numel == g.len() {
        if other.numel() == 1 {
            let c = other.data()[0];
            g.iter().map(|gv| gv * c).collect()
        } else {
            g.iter().zip(other.iter()).map(|(gv, &ov)| gv * ov).collect()
        }
    } else {
        // parent is the broadcast scalar: sum g * other
        vec![g.iter().zip(other.iter()).map(|(gv, &ov)| gv * ov).sum()]
    }
}

/// Gradient of logaddexp w.r.t. one operand: g * exp(operand - out), with
/// dead (-inf) cells pinned to zero so no NaN leaks out of impossible paths.
fn laex_grad(g: &[f64], out: &[f64], operand: &Tensor, parent_numel: usize) -> Vec<f64> {
    let term = |gv: f64, ov: f64, outv: f64| {
        if ov == f64::NEG_INFINITY || outv == f64::NEG_INFINITY {
            0.0
        } else {
            gv * (ov - outv).exp()
        }
    };
    if parent_numel == g.len() {
        if operand.numel() == 1 {
            let ov = operand.data()[0];
            g.iter().zip(out).map(|(&gv, &outv)| term(gv, ov, outv)).collect()
        } else {
            g.iter()
                .zip(out)
                .zip(operand.iter())
                .map(|((&gv, &outv), &ov)| term(gv, ov, outv))
                .collect()
        }
    } else {
        vec![g
            .iter()
            .zip(out)
            .zip(operand.iter())
            .map(|((&gv, &outv), &ov)| term(gv, ov, outv))
            .sum()]
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        nodes[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires
    }

    /// Gradient populated by the last [`Tape::backward`] call.
    pub fn grad(&self) -> Option<Tensor> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.value.shape().to_vec(), g.clone()).unwrap())
    }

    fn unary(self, f: impl Fn(f64) -> f64, op: impl Fn(usize) -> Op) -> Var<'t> {
        let (value, requires) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let data = n.value.iter().map(|&x| f(x)).collect();
            (
                Tensor::new(n.value.shape().to_vec(), data).unwrap(),
                n.requires,
            )
        };
        self.tape.push(value, requires, op(self.id))
    }

    fn binary_elem(
        self,
        rhs: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        assert!(std::ptr::eq(self.tape, rhs.tape), "{name} across tapes");
        let (value, requires) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[rhs.id].value;
            let value = if a.shape() == b.shape() {
                let data = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(a.shape().to_vec(), data).unwrap()
            } else if a.is_scalar() {
                let x = a.data()[0];
                let data = b.iter().map(|&y| f(x, y)).collect();
                Tensor::new(b.shape().to_vec(), data).unwrap()
            } else if b.is_scalar() {
                let y = b.data()[0];
                let data = a.iter().map(|&x| f(x, y)).collect();
                Tensor::new(a.shape().to_vec(), data).unwrap()
            } else {
                return Err(TensorError::ShapeMismatch {
                    op: name,
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            };
            (value, nodes[self.id].requires || nodes[rhs.id].requires)
        };
        Ok(self.tape.push(value, requires, op(self.id, rhs.id)))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary_elem(rhs, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary_elem(rhs, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary_elem(rhs, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn logaddexp(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary_elem(rhs, "logaddexp", kernels::logaddexp, Op::LogAddExp)
    }

    /// Multiply by a plain constant.
    pub fn scale(self, c: f64) -> Var<'t> {
        let (value, requires) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let data = n.value.iter().map(|&x| x * c).collect();
            (
                Tensor::new(n.value.shape().to_vec(), data).unwrap(),
                n.requires,
            )
        };
        self.tape.push(value, requires, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| if x > 0.0 { x } else { 0.0 }, Op::Relu)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(|x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, Op::Square)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, Op::Ln)
    }

    pub fn sum(self) -> Var<'t> {
        let (value, requires) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (Tensor::scalar(n.value.iter().sum()), n.requires)
        };
        self.tape.push(value, requires, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let (value, requires) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let numel = n.value.numel() as f64;
            (
                Tensor::scalar(n.value.iter().sum::<f64>() / numel),
                n.requires,
            )
        };
        self.tape.push(value, requires, Op::Mean(self.id))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Var<'t> {
        let (value, requires) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let width = *n.value.shape().last().expect("log_softmax on rank-0");
            let rows = n.value.numel() / width;
            let mut data = vec![0.0; n.value.numel()];
            for r in 0..rows {
                let x = &n.value.data()[r * width..(r + 1) * width];
                let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + x.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
                for (o, &v) in data[r * width..(r + 1) * width].iter_mut().zip(x) {
                    *o = v - lse;
                }
            }
            (
                Tensor::new(n.value.shape().to_vec(), data).unwrap(),
                n.requires,
            )
        };
        self.tape.push(value, requires, Op::LogSoftmax(self.id))
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        assert!(std::ptr::eq(self.tape, rhs.tape), "matmul across tapes");
        let (value, requires) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[rhs.id].value;
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let mut data = vec![0.0; m * n];
            kernels::matmul_acc(a.data(), b.data(), m, k, n, &mut data);
            (
                Tensor::new(vec![m, n], data).unwrap(),
                nodes[self.id].requires || nodes[rhs.id].requires,
            )
        };
        Ok(self.tape.push(value, requires, Op::Matmul(self.id, rhs.id)))
    }

    /// Valid-padding 1-d convolution: input `[c_in, l]`, kernel
    /// `[c_out, c_in, k]`, output `[c_out, (l - k)/stride + 1]`.
    pub fn conv1d(self, kernel: Var<'t>, stride: usize) -> Result<Var<'t>> {
        assert!(std::ptr::eq(self.tape, kernel.tape), "conv1d across tapes");
        let (value, requires) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let k = &nodes[kernel.id].value;
            if stride == 0 {
                return Err(TensorError::InvalidArg {
                    op: "conv1d",
                    msg: "stride must be >= 1".into(),
                });
            }
            if x.rank() != 2 || k.rank() != 3 || x.shape()[0] != k.shape()[1] || x.shape()[1] < k.shape()[2]
            {
                return Err(TensorError::ShapeMismatch {
                    op: "conv1d",
                    lhs: x.shape().to_vec(),
                    rhs: k.shape().to_vec(),
                });
            }
            let (cin, l) = (x.shape()[0], x.shape()[1]);
            let (cout, kw) = (k.shape()[0], k.shape()[2]);
            let l_out = (l - kw) / stride + 1;
            let cols = kernels::im2col(x.data(), cin, l, kw, stride, l_out);
            let mut data = vec![0.0; cout * l_out];
            kernels::matmul_acc(k.data(), &cols, cout, cin * kw, l_out, &mut data);
            (
                Tensor::new(vec![cout, l_out], data).unwrap(),
                nodes[self.id].requires || nodes[kernel.id].requires,
            )
        };
        Ok(self.tape.push(
            value,
            requires,
            Op::Conv1d {
                input: self.id,
                kernel: kernel.id,
                stride,
            },
        ))
    }

    /// Transposed 1-d convolution (overlap-add): input `[c_in, l]`, kernel
    /// `[c_in, c_out, k]`, output `[c_out, (l - 1)*stride + k]`.
    pub fn conv1d_transposed(self, kernel: Var<'t>, stride: usize) -> Result<Var<'t>> {
        assert!(std::ptr::eq(self.tape, kernel.tape), "conv1d_transposed across tapes");
        let (value, requires) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let k = &nodes[kernel.id].value;
            if stride == 0 {
                return Err(TensorError::InvalidArg {
                    op: "conv1d_transposed",
                    msg: "stride must be >= 1".into(),
                });
            }
            if x.rank() != 2 || k.rank() != 3 || x.shape()[0] != k.shape()[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv1d_transposed",
                    lhs: x.shape().to_vec(),
                    rhs: k.shape().to_vec(),
                });
            }
            let (cin, l) = (x.shape()[0], x.shape()[1]);
            let (cout, kw) = (k.shape()[1], k.shape()[2]);
            let l_out = (l - 1) * stride + kw;
            // cols[cout*kw, l] = K^T[cout*kw, cin] @ x, then scatter-add
            let kt = kernels::transpose(k.data(), cin, cout * kw);
            let mut cols = vec![0.0; cout * kw * l];
            kernels::matmul_acc(&kt, x.data(), cout * kw, cin, l, &mut cols);
            let mut data = vec![0.0; cout * l_out];
            kernels::col2im_acc(&cols, cout, l_out, kw, stride, l, &mut data);
            (
                Tensor::new(vec![cout, l_out], data).unwrap(),
                nodes[self.id].requires || nodes[kernel.id].requires,
            )
        };
        Ok(self.tape.push(
            value,
            requires,
            Op::ConvT1d {
                input: self.id,
                kernel: kernel.id,
                stride,
            },
        ))
    }

    /// Contiguous slice `[start, end)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let (value, requires) = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.id].value;
            if axis >= t.rank() || start >= end || end > t.shape()[axis] {
                return Err(TensorError::InvalidArg {
                    op: "slice",
                    msg: format!(
                        "range {start}..{end} on axis {axis} of shape {:?}",
                        t.shape()
                    ),
                });
            }
            let outer: usize = t.shape()[..axis].iter().product();
            let inner: usize = t.shape()[axis + 1..].iter().product();
            let alen = end - start;
            let mut shape = t.shape().to_vec();
            shape[axis] = alen;
            let mut data = vec![0.0; outer * alen * inner];
            for o in 0..outer {
                let src = (o * t.shape()[axis] + start) * inner;
                let dst = o * alen * inner;
                data[dst..dst + alen * inner]
                    .copy_from_slice(&t.data()[src..src + alen * inner]);
            }
            (Tensor::new(shape, data).unwrap(), nodes[self.id].requires)
        };
        Ok(self.tape.push(
            value,
            requires,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
        ))
    }

    /// Rank-2 transpose.
    pub fn transpose(self) -> Result<Var<'t>> {
        let (value, requires) = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.id].value;
            if t.rank() != 2 {
                return Err(TensorError::BadRank {
                    op: "transpose",
                    expected: 2,
                    shape: t.shape().to_vec(),
                });
            }
            let (r, c) = (t.shape()[0], t.shape()[1]);
            (
                Tensor::new(vec![c, r], kernels::transpose(t.data(), r, c)).unwrap(),
                nodes[self.id].requires,
            )
        };
        Ok(self.tape.push(value, requires, Op::Transpose(self.id)))
    }
}
