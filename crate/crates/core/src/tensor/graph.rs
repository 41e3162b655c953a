use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;

use super::kernels::{self, ConvGeometry};
use super::{broadcast_shape, broadcast_strides, for_each_broadcast, reduce_to_shape, Tensor};
use crate::error::{invalid, shape_err, Error, Result};
use crate::exec::Execution;

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Silu(Var),
    MatMul(Var, Var),
    Conv2d { input: Var, kernel: Var, geom: ConvGeometry },
    SumAll(Var),
    SumAxis { a: Var, axis: usize },
    MaxAxis { a: Var, argmax: Vec<usize> },
    Softmax { a: Var, axis: usize },
    Reshape(Var),
    Permute { a: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Upsample2x(Var),
    PairwiseSqDist(Var, Var),
    Gather { a: Var, indices: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of executed operations.
///
/// Nodes are appended in execution order, which is a topological order, so
/// backward is a single reverse sweep. A graph is built fresh for every forward
/// pass and is consumed by [`Graph::backward`].
#[derive(Debug)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
    exec: Execution,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every tracked leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
        None => *slot = Some(contrib),
    }
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(invalid(format!("axis {axis} out of range for shape {shape:?}")));
    }
    if shape[axis] == 0 {
        return Err(invalid(format!("empty reduction axis {axis} in {shape:?}")));
    }
    Ok(())
}

/// `(outer, extent, inner)` split of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::with_execution(Execution::default())
    }

    pub fn with_execution(exec: Execution) -> Self {
        Self { nodes: RefCell::new(Vec::new()), consumed: Cell::new(false), exec }
    }

    pub fn execution(&self) -> Execution {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Leaf that receives a gradient on backward.
    pub fn param(&self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn binary(&self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        if ta.shape() == tb.shape() {
            return ta.zip_map(tb, f);
        }
        let out = broadcast_shape(ta.shape(), tb.shape())
            .map_err(|e| shape_err(format!("{name}: {e}")))?;
        let sa = broadcast_strides(ta.shape(), &out);
        let sb = broadcast_strides(tb.shape(), &out);
        let mut data = vec![0.0; out.iter().product()];
        let (da, db) = (ta.data(), tb.data());
        for_each_broadcast(&out, &sa, &sb, |i, ia, ib| data[i] = f(da[ia], db[ib]));
        Tensor::new(out, data)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        self.nodes.borrow()[a.0].value.map(f)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "div", |x, y| x / y)?;
        self.push(v, Op::Div(a, b), &[a, b], "div")
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        let v = self.unary(a, |x| -x);
        self.push(v, Op::Neg(a), &[a], "neg")
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let v = self.unary(a, |x| c * x);
        self.push(v, Op::Scale(a, c), &[a], "scale")
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        let v = self.unary(a, |x| x + c);
        self.push(v, Op::AddScalar(a), &[a], "add_scalar")
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        let v = self.unary(a, f64::exp);
        self.push(v, Op::Exp(a), &[a], "exp")
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        let v = self.unary(a, f64::ln);
        self.push(v, Op::Log(a), &[a], "log")
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let v = self.unary(a, |x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a], "relu")
    }

    pub fn silu(&self, a: Var) -> Result<Var> {
        let v = self.unary(a, |x| x / (1.0 + (-x).exp()));
        self.push(v, Op::Silu(a), &[a], "silu")
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// `[M×K] · [K×N]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (ta.shape(), tb.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(shape_err(format!("matmul {sa:?} · {sb:?}")));
            }
            let data = kernels::matmul(ta.data(), tb.data(), sa[0], sa[1], sb[1], self.exec);
            Tensor::new([sa[0], sb[1]], data)?
        };
        self.push(v, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// Cross-correlation of `[B,C,H,W]` input with an `[O,C,KH,KW]` kernel.
    pub fn conv2d(&self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (v, geom) = {
            let nodes = self.nodes.borrow();
            let (ti, tk) = (&nodes[input.0].value, &nodes[kernel.0].value);
            let geom = conv_geometry(ti.shape(), tk.shape(), stride, padding)?;
            let (oh, ow) = geom.output_hw().expect("checked");
            let data = kernels::conv2d_forward(ti.data(), tk.data(), &geom, self.exec);
            (Tensor::new([geom.batch, geom.out_channels, oh, ow], data)?, geom)
        };
        self.push(v, Op::Conv2d { input, kernel, geom }, &[input, kernel], "conv2d")
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let s = self.nodes.borrow()[a.0].value.sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a], "sum")
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = self.nodes.borrow()[a.0].value.len();
        if n == 0 {
            return Err(invalid("mean of an empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            check_axis(t.shape(), axis)?;
            let (outer, n, inner) = split_axis(t.shape(), axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for k in 0..n {
                    let src = &t.data()[(o * n + k) * inner..][..inner];
                    for (d, s) in out[o * inner..][..inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            let mut shape = t.shape().to_vec();
            shape.remove(axis);
            Tensor::new(shape, out)?
        };
        self.push(v, Op::SumAxis { a, axis }, &[a], "sum_axis")
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let n = self.nodes.borrow()[a.0].value.shape().get(axis).copied().unwrap_or(0);
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Max along `axis` (removed), with the flat input index of each winner.
    /// Ties go to the smallest index.
    pub fn max_axis(&self, a: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let (v, argmax) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            check_axis(t.shape(), axis)?;
            let (outer, n, inner) = split_axis(t.shape(), axis);
            let mut out = vec![f64::NEG_INFINITY; outer * inner];
            let mut arg = vec![0usize; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let slot = o * inner + i;
                    for k in 0..n {
                        let idx = (o * n + k) * inner + i;
                        if k == 0 || t.data()[idx] > out[slot] {
                            out[slot] = t.data()[idx];
                            arg[slot] = idx;
                        }
                    }
                }
            }
            let mut shape = t.shape().to_vec();
            shape.remove(axis);
            (Tensor::new(shape, out)?, arg)
        };
        let var = self.push(v, Op::MaxAxis { a, argmax: argmax.clone() }, &[a], "max_axis")?;
        Ok((var, argmax))
    }

    /// Max over all elements, returning the flat argmax.
    pub fn max(&self, a: Var) -> Result<(Var, usize)> {
        let n = self.nodes.borrow()[a.0].value.len();
        let flat = self.reshape(a, vec![n])?;
        let (m, arg) = self.max_axis(flat, 0)?;
        Ok((m, arg[0]))
    }

    /// Min along `axis`, computed as `-max(-a)`.
    pub fn min_axis(&self, a: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let na = self.neg(a)?;
        let (m, arg) = self.max_axis(na, axis)?;
        Ok((self.neg(m)?, arg))
    }

    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            check_axis(t.shape(), axis)?;
            let (outer, n, inner) = split_axis(t.shape(), axis);
            let mut out = vec![0.0; t.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * n + k) * inner + i;
                    let mx = (0..n).map(|k| t.data()[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for k in 0..n {
                        let e = (t.data()[idx(k)] - mx).exp();
                        out[idx(k)] = e;
                        total += e;
                    }
                    for k in 0..n {
                        out[idx(k)] /= total;
                    }
                }
            }
            Tensor::new(t.shape().to_vec(), out)?
        };
        self.push(v, Op::Softmax { a, axis }, &[a], "softmax")
    }

    pub fn reshape(&self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.nodes.borrow()[a.0].value.clone().reshape(shape)?;
        self.push(v, Op::Reshape(a), &[a], "reshape")
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let mut seen = vec![false; t.rank()];
            if perm.len() != t.rank() || perm.iter().any(|&p| p >= t.rank() || std::mem::replace(&mut seen[p], true)) {
                return Err(invalid(format!("bad permutation {perm:?} for rank {}", t.rank())));
            }
            let shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
            Tensor::new(shape, kernels::permute(t.data(), t.shape(), perm))?
        };
        self.push(v, Op::Permute { a, perm: perm.to_vec() }, &[a], "permute")
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts.first().ok_or_else(|| invalid("concat of nothing"))?.0].value;
            if axis >= first.rank() {
                return Err(invalid(format!("concat axis {axis} for rank {}", first.rank())));
            }
            let mut shape = first.shape().to_vec();
            shape[axis] = 0;
            for p in parts {
                let s = nodes[p.0].value.shape();
                let ok = s.len() == first.rank()
                    && s.iter().enumerate().all(|(i, &e)| i == axis || e == first.shape()[i]);
                if !ok {
                    return Err(shape_err(format!("concat {:?} with {s:?}", first.shape())));
                }
                shape[axis] += s[axis];
            }
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for p in parts {
                    let t = &nodes[p.0].value;
                    let chunk = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::new(shape, data)?
        };
        self.push(v, Op::Concat { parts: parts.to_vec(), axis }, parts, "concat")
    }

    /// Nearest-neighbour 2× upsampling of a `[B,C,H,W]` tensor.
    pub fn upsample2x(&self, a: Var) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let &[b, c, h, w] = t.shape() else {
                return Err(shape_err(format!("upsample2x expects rank 4, got {:?}", t.shape())));
            };
            Tensor::new([b, c, 2 * h, 2 * w], kernels::upsample2x(t.data(), b * c, h, w))?
        };
        self.push(v, Op::Upsample2x(a), &[a], "upsample2x")
    }

    /// `[N×D]`, `[M×D]` → `[N×M]` of squared euclidean distances.
    pub fn pairwise_sq_dist(&self, a: Var, b: Var) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (ta.shape(), tb.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
                return Err(shape_err(format!("pairwise_sq_dist {sa:?} vs {sb:?}")));
            }
            let data = kernels::pairwise_sq_dist(ta.data(), tb.data(), sa[0], sb[0], sa[1], self.exec);
            Tensor::new([sa[0], sb[0]], data)?
        };
        self.push(v, Op::PairwiseSqDist(a, b), &[a, b], "pairwise_sq_dist")
    }

    /// Picks flat elements of `a` into a rank-1 tensor.
    pub fn gather(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if let Some(&bad) = indices.iter().find(|&&i| i >= t.len()) {
                return Err(invalid(format!("gather index {bad} out of range for {}", t.len())));
            }
            Tensor::from_vec(indices.iter().map(|&i| t.data()[i]).collect())
        };
        self.push(v, Op::Gather { a, indices: indices.to_vec() }, &[a], "gather")
    }

    /// Reverse sweep from a scalar `loss`; returns gradients for every tracked leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.consumed.get() {
            return Err(Error::GraphConsumed);
        }
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        let mut out = Gradients::default();
        for (i, n) in nodes.iter().enumerate() {
            if matches!(n.op, Op::Leaf) && n.requires_grad {
                out.grads.insert(Var(i), Tensor::zeros(n.value.shape().to_vec()));
            }
        }
        if !loss_node.requires_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                if node.requires_grad {
                    out.grads.insert(Var(i), Tensor::new(node.value.shape().to_vec(), g)?);
                }
                continue;
            }
            self.backprop(&nodes, node, g, &mut grads);
        }
        Ok(out)
    }

    fn backprop(&self, nodes: &[Node], node: &Node, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        let tracked = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        let out_shape = node.value.shape();
        let exec = self.exec;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &x in [a, b] {
                    if tracked(x) {
                        add_into(&mut grads[x.0], reduce_to_shape(&g, out_shape, val(x).shape()));
                    }
                }
            }
            Op::Sub(a, b) => {
                if tracked(*a) {
                    add_into(&mut grads[a.0], reduce_to_shape(&g, out_shape, val(*a).shape()));
                }
                if tracked(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    add_into(&mut grads[b.0], reduce_to_shape(&neg, out_shape, val(*b).shape()));
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (ta, tb) = (val(*a), val(*b));
                let sa = broadcast_strides(ta.shape(), out_shape);
                let sb = broadcast_strides(tb.shape(), out_shape);
                let mut ga = vec![0.0; ta.len()];
                let mut gb = vec![0.0; tb.len()];
                let (da, db) = (ta.data(), tb.data());
                for_each_broadcast(out_shape, &sa, &sb, |i, ia, ib| {
                    if is_div {
                        ga[ia] += g[i] / db[ib];
                        gb[ib] -= g[i] * da[ia] / (db[ib] * db[ib]);
                    } else {
                        ga[ia] += g[i] * db[ib];
                        gb[ib] += g[i] * da[ia];
                    }
                });
                if tracked(*a) {
                    add_into(&mut grads[a.0], ga);
                }
                if tracked(*b) {
                    add_into(&mut grads[b.0], gb);
                }
            }
            Op::Neg(a) => add_into(&mut grads[a.0], g.iter().map(|v| -v).collect()),
            Op::Scale(a, c) => add_into(&mut grads[a.0], g.iter().map(|v| c * v).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => add_into(&mut grads[a.0], g),
            Op::Exp(a) => {
                let y = node.value.data();
                add_into(&mut grads[a.0], g.iter().zip(y).map(|(g, y)| g * y).collect());
            }
            Op::Log(a) => {
                let x = val(*a).data();
                add_into(&mut grads[a.0], g.iter().zip(x).map(|(g, x)| g / x).collect());
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                add_into(&mut grads[a.0], g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Silu(a) => {
                let x = val(*a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                add_into(&mut grads[a.0], d);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if tracked(*a) {
                    let bt = kernels::transpose(tb.data(), k, n);
                    add_into(&mut grads[a.0], kernels::matmul(&g, &bt, m, n, k, exec));
                }
                if tracked(*b) {
                    let at = kernels::transpose(ta.data(), m, k);
                    add_into(&mut grads[b.0], kernels::matmul(&at, &g, k, m, n, exec));
                }
            }
            Op::Conv2d { input, kernel, geom } => {
                if tracked(*input) {
                    let gi = kernels::conv2d_backward_input(&g, val(*kernel).data(), geom, exec);
                    add_into(&mut grads[input.0], gi);
                }
                if tracked(*kernel) {
                    let gk = kernels::conv2d_backward_kernel(&g, val(*input).data(), geom, exec);
                    add_into(&mut grads[kernel.0], gk);
                }
            }
            Op::SumAll(a) => add_into(&mut grads[a.0], vec![g[0]; val(*a).len()]),
            Op::SumAxis { a, axis } => {
                let shape = val(*a).shape();
                let (outer, n, inner) = split_axis(shape, *axis);
                let mut d = vec![0.0; val(*a).len()];
                for o in 0..outer {
                    for k in 0..n {
                        d[(o * n + k) * inner..][..inner].copy_from_slice(&g[o * inner..][..inner]);
                    }
                }
                add_into(&mut grads[a.0], d);
            }
            Op::MaxAxis { a, argmax } => {
                let mut d = vec![0.0; val(*a).len()];
                for (gi, &idx) in g.iter().zip(argmax) {
                    d[idx] += gi;
                }
                add_into(&mut grads[a.0], d);
            }
            Op::Softmax { a, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = split_axis(out_shape, *axis);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dot: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..n {
                            d[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                add_into(&mut grads[a.0], d);
            }
            Op::Permute { a, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                add_into(&mut grads[a.0], kernels::permute(&g, out_shape, &inverse));
            }
            Op::Concat { parts, axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let mut pieces: Vec<Vec<f64>> = parts.iter().map(|p| Vec::with_capacity(val(*p).len())).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (p, piece) in parts.iter().zip(pieces.iter_mut()) {
                        let chunk = val(*p).shape()[*axis] * inner;
                        piece.extend_from_slice(&g[off..off + chunk]);
                        off += chunk;
                    }
                }
                for (p, piece) in parts.iter().zip(pieces) {
                    if tracked(*p) {
                        add_into(&mut grads[p.0], piece);
                    }
                }
            }
            Op::Upsample2x(a) => {
                let s = val(*a).shape();
                add_into(&mut grads[a.0], kernels::upsample2x_backward(&g, s[0] * s[1], s[2], s[3]));
            }
            Op::PairwiseSqDist(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, d) = (ta.shape()[0], ta.shape()[1]);
                let m = tb.shape()[0];
                let (da, db) = (ta.data(), tb.data());
                let mut ga = vec![0.0; n * d];
                let mut gb = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let w = 2.0 * g[i * m + j];
                        if w == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = da[i * d + k] - db[j * d + k];
                            ga[i * d + k] += w * diff;
                            gb[j * d + k] -= w * diff;
                        }
                    }
                }
                if tracked(*a) {
                    add_into(&mut grads[a.0], ga);
                }
                if tracked(*b) {
                    add_into(&mut grads[b.0], gb);
                }
            }
            Op::Gather { a, indices } => {
                let mut d = vec![0.0; val(*a).len()];
                for (gi, &idx) in g.iter().zip(indices) {
                    d[idx] += gi;
                }
                add_into(&mut grads[a.0], d);
            }
        }
    }
}

pub(crate) fn conv_geometry(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<ConvGeometry> {
    let (&[batch, in_channels, height, width], &[out_channels, kc, kernel_h, kernel_w]) = (input, kernel) else {
        return Err(shape_err(format!("conv2d expects rank-4 input and kernel, got {input:?} and {kernel:?}")));
    };
    if kc != in_channels {
        return Err(shape_err(format!("conv2d kernel {kernel:?} does not match input {input:?}")));
    }
    if stride == 0 {
        return Err(invalid("conv2d stride must be >= 1"));
    }
    let geom = ConvGeometry {
        batch,
        in_channels,
        height,
        width,
        out_channels,
        kernel_h,
        kernel_w,
        stride,
        padding,
    };
    match geom.output_hw() {
        Some((oh, ow)) if oh > 0 && ow > 0 => Ok(geom),
        _ => Err(invalid(format!(
            "conv2d output extent is not positive for input {input:?}, kernel {kernel:?}, padding {padding}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        assert_eq!(g.value(g.add(a, b).unwrap()).data(), &[4.0, 6.0]);
        let r = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(g.value(g.relu(r).unwrap()).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(t(&[1], &[0.0]));
        assert_eq!(g.value(g.exp(z).unwrap()).data(), &[1.0]);
    }

    #[test]
    fn log_of_negative_is_non_finite_error() {
        let g = Graph::new();
        let a = g.constant(t(&[1], &[-1.0]));
        assert!(matches!(g.log(a), Err(Error::NonFinite(_))));
        let big = g.constant(t(&[1], &[1000.0]));
        assert!(matches!(g.exp(big), Err(Error::NonFinite(_))));
    }

    #[test]
    fn broadcast_add_and_mismatch() {
        let g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[1, 2], &[10.0, 20.0]));
        assert_eq!(g.value(g.add(a, b).unwrap()).data(), &[11.0, 22.0, 13.0, 24.0]);
        let c = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(g.add(a, c), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_examples() {
        let g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(g.value(g.matmul(i2, m).unwrap()).data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let c = g.constant(t(&[2, 1], &[0.0, 1.0]));
        assert_eq!(g.value(g.matmul(r, c).unwrap()).data(), &[0.0]);
        assert!(g.matmul(r, r).is_err());
    }

    #[test]
    fn conv_examples() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn([1, 1, 3, 3], |i| i as f64));
        let k = g.constant(t(&[1, 1, 1, 1], &[2.0]));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), Tensor::from_fn([9], |i| 2.0 * i as f64).data());

        let ones = g.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let k3 = g.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let s = g.conv2d(ones, k3, 1, 0).unwrap();
        assert_eq!(g.shape(s), vec![1, 1, 1, 1]);
        assert_eq!(g.value(s).data(), &[9.0]);

        let k4 = g.constant(Tensor::full([1, 1, 4, 4], 1.0));
        assert!(matches!(g.conv2d(ones, k4, 1, 0), Err(Error::InvalidArgument(_))));
        assert!(g.conv2d(ones, k3, 0, 0).is_err());
    }

    #[test]
    fn reduce_examples() {
        let g = Graph::new();
        let a = g.constant(t(&[2], &[0.0, 0.0]));
        assert_eq!(g.value(g.softmax(a, 0).unwrap()).data(), &[0.5, 0.5]);
        let b = g.constant(t(&[2], &[2f64.ln(), 0.0]));
        let sb = g.softmax(b, 0).unwrap();
        let v = g.value(sb).data().to_vec();
        assert!((v[0] - 2.0 / 3.0).abs() < 1e-15 && (v[1] - 1.0 / 3.0).abs() < 1e-15);
        let c = g.constant(t(&[3], &[-3.0, -1.0, -2.0]));
        let (m, idx) = g.max(c).unwrap();
        assert_eq!(g.scalar(m).unwrap(), -1.0);
        assert_eq!(idx, 1);
        let e = g.constant(Tensor::zeros([2, 0]));
        assert!(g.max_axis(e, 1).is_err());
    }

    #[test]
    fn max_ties_pick_smallest_index() {
        let g = Graph::new();
        let a = g.constant(t(&[4], &[1.0, 5.0, 5.0, 0.0]));
        assert_eq!(g.max(a).unwrap().1, 1);
    }

    #[test]
    fn backward_examples() {
        let g = Graph::new();
        let w = g.param(t(&[2], &[1.0, 2.0]));
        let l = g.sum(g.square(w).unwrap()).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);

        let g = Graph::new();
        let x = g.param(t(&[1], &[3.0]));
        let l = g.mean(g.square(x).unwrap()).unwrap();
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_errors() {
        let g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
        let l = g.sum(x).unwrap();
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::GraphConsumed)));
    }

    #[test]
    fn reuse_accumulates_gradients() {
        let g = Graph::new();
        let x = g.param(t(&[1], &[2.0]));
        let y = g.add(x, x).unwrap();
        let z = g.mul(y, x).unwrap(); // 2x^2
        let l = g.sum(z).unwrap();
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[8.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let g = Graph::new();
        let a = g.param(t(&[2], &[1.0, 1.0]));
        let b = g.param(t(&[3], &[1.0, 1.0, 1.0]));
        let l = g.sum(a).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn concat_and_permute_shapes() {
        let g = Graph::new();
        let a = g.constant(Tensor::from_fn([1, 1, 2, 2], |i| i as f64));
        let b = g.constant(Tensor::from_fn([1, 2, 2, 2], |i| 10.0 + i as f64));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), vec![1, 3, 2, 2]);
        assert_eq!(g.value(c).data()[4], 10.0);
        let p = g.permute(c, &[0, 2, 3, 1]).unwrap();
        assert_eq!(g.shape(p), vec![1, 2, 2, 3]);
        assert_eq!(&g.value(p).data()[..3], &[0.0, 10.0, 14.0]);
        assert!(g.permute(c, &[0, 0, 1, 2]).is_err());
    }
}
