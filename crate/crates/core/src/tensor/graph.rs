use std::collections::HashMap;

use rand::Rng;

use super::kernels::{
    broadcast_offsets, broadcast_shape, mm_acc, mm_nt_acc, mm_tn_acc, stable_mean,
};
use super::{split_axis, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    MulScalar(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Powf(Var, f64),
    Relu(Var),
    Gelu(Var),
    MatMul(Var, Var),
    Sum { input: Var, axis: usize },
    Mean { input: Var, axis: usize },
    Variance { input: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    Softmax { input: Var, axis: usize },
    LogSoftmax { input: Var, axis: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Permute { input: Var, perm: Vec<usize> },
    Reshape(Var),
    Dropout { input: Var, mask: Vec<f64> },
    MaskFill { input: Var, mask: Vec<bool> },
    Gather { input: Var, indices: Vec<usize> },
    IndexSelect { input: Var, indices: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so the record is already a
/// topological order and backward is a single reverse sweep. A graph
/// supports exactly one [`Graph::backward`] call; build a fresh graph for
/// every step.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
    grads: Option<Vec<Option<Tensor>>>,
    matmul_macs: u64,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by forward matmuls so far.
    pub fn matmul_macs(&self) -> u64 {
        self.matmul_macs
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a trainable parameter by id. Binding the same id twice on one
    /// graph returns the same node, so gradients from every use accumulate.
    pub fn param(&mut self, id: usize, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(value.clone(), true);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.as_ref()?.get(v.0)?.as_ref()
    }

    pub fn param_grad(&self, id: usize) -> Option<&Tensor> {
        self.grad(*self.params.get(&id)?)
    }

    /// A new constant node carrying `v`'s value with no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn norm_axis(&self, v: Var, axis: isize) -> Result<usize> {
        let rank = self.nodes[v.0].value.rank() as isize;
        let a = if axis < 0 { rank + axis } else { axis };
        if a < 0 || a >= rank {
            return Err(Error::Contract(format!(
                "axis {axis} out of range for rank {rank}"
            )));
        }
        Ok(a as usize)
    }

    // ---- elementwise binary ------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(ta.shape().to_vec(), data);
        }
        let shape = broadcast_shape(name, ta.shape(), tb.shape())?;
        let oa = broadcast_offsets(ta.shape(), &shape);
        let ob = broadcast_offsets(tb.shape(), &shape);
        let data = oa
            .iter()
            .zip(&ob)
            .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
            .collect();
        Tensor::new(shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Elementwise division. Callers guard denominators; a zero denominator
    /// yields an infinity rather than an error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("div", a, b, |x, y| x / y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    // ---- elementwise unary -------------------------------------------------

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::MulScalar(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, Op::Powf(a, p), |x| x.powf(p))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), |x| {
            0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
        })
    }

    /// Inverted dropout. Identity (same node) when `train` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, train: bool, rng: &mut R) -> Var {
        if !train || p == 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let scale = 1.0 / keep;
        let n = self.nodes[a.0].value.numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Dropout { input: a, mask }, rg)
    }

    /// Replaces entries where `mask` is true with `value`. No gradient flows
    /// to masked entries.
    pub fn mask_fill(&mut self, a: Var, mask: Vec<bool>, value: f64) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        if mask.len() != src.numel() {
            return Err(Error::shape("mask_fill", src.shape(), &[mask.len()]));
        }
        let data = src
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::MaskFill { input: a, mask }, rg))
    }

    // ---- matmul ------------------------------------------------------------

    /// Batched matrix product `[.., m, k] · [.., k, n] -> [.., m, n]` with
    /// broadcasting over the leading batch dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape("matmul", ba, bb).map_err(|_| Error::shape("matmul", sa, sb))?;
        let oa = broadcast_offsets(ba, &batch);
        let ob = broadcast_offsets(bb, &batch);
        let mut out = vec![0.0; oa.len() * m * n];
        for (bi, (&ia, &ib)) in oa.iter().zip(&ob).enumerate() {
            mm_acc(
                &ta.data()[ia * m * k..(ia + 1) * m * k],
                &tb.data()[ib * k * n..(ib + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.matmul_macs += (oa.len() * m * k * n) as u64;
        let mut shape = batch;
        shape.extend([m, n]);
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    // ---- reductions (dimension kept with size 1) ---------------------------

    fn reduce(&self, a: Var, axis: usize, f: impl Fn(&[f64]) -> f64) -> Tensor {
        let src = &self.nodes[a.0].value;
        let (outer, len, inner) = split_axis(src.shape(), axis);
        let mut out = Vec::with_capacity(outer * inner);
        let mut lane = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (l, slot) in lane.iter_mut().enumerate() {
                    *slot = src.data()[(o * len + l) * inner + i];
                }
                out.push(f(&lane));
            }
        }
        let mut shape = src.shape().to_vec();
        shape[axis] = 1;
        Tensor::new(shape, out).expect("reduced shape")
    }

    pub fn sum(&mut self, a: Var, axis: isize) -> Result<Var> {
        let axis = self.norm_axis(a, axis)?;
        let t = self.reduce(a, axis, |xs| xs.iter().sum());
        let rg = self.rg(a);
        Ok(self.push(t, Op::Sum { input: a, axis }, rg))
    }

    pub fn mean(&mut self, a: Var, axis: isize) -> Result<Var> {
        let axis = self.norm_axis(a, axis)?;
        let t = self.reduce(a, axis, |xs| stable_mean(xs.iter().copied(), xs.len()));
        let rg = self.rg(a);
        Ok(self.push(t, Op::Mean { input: a, axis }, rg))
    }

    /// Population variance (divisor `d`) along `axis`.
    pub fn variance(&mut self, a: Var, axis: isize) -> Result<Var> {
        let axis = self.norm_axis(a, axis)?;
        let t = self.reduce(a, axis, |xs| {
            let mu = stable_mean(xs.iter().copied(), xs.len());
            xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / xs.len() as f64
        });
        let rg = self.rg(a);
        Ok(self.push(t, Op::Variance { input: a, axis }, rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let src = self.nodes[a.0].value.data();
        let s = src.iter().sum::<f64>() / src.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    // ---- softmax family ----------------------------------------------------

    fn lanes_map(&self, a: Var, axis: usize, f: impl Fn(&[f64], &mut [f64])) -> Tensor {
        let src = &self.nodes[a.0].value;
        let (outer, len, inner) = split_axis(src.shape(), axis);
        let mut out = vec![0.0; src.numel()];
        let mut lane = vec![0.0; len];
        let mut res = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (l, slot) in lane.iter_mut().enumerate() {
                    *slot = src.data()[(o * len + l) * inner + i];
                }
                f(&lane, &mut res);
                for (l, &r) in res.iter().enumerate() {
                    out[(o * len + l) * inner + i] = r;
                }
            }
        }
        Tensor::new(src.shape().to_vec(), out).expect("same shape")
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: isize) -> Result<Var> {
        let axis = self.norm_axis(a, axis)?;
        let t = self.lanes_map(a, axis, |xs, out| {
            let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &x) in out.iter_mut().zip(xs) {
                *o = (x - m).exp();
                z += *o;
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        });
        let rg = self.rg(a);
        Ok(self.push(t, Op::Softmax { input: a, axis }, rg))
    }

    /// Log-softmax along `axis`. Entries equal to `-inf` stay `-inf` and
    /// receive zero gradient.
    pub fn log_softmax(&mut self, a: Var, axis: isize) -> Result<Var> {
        let axis = self.norm_axis(a, axis)?;
        let t = self.lanes_map(a, axis, |xs, out| {
            let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
            let lz = z.ln();
            for (o, &x) in out.iter_mut().zip(xs) {
                *o = x - m - lz;
            }
        });
        let rg = self.rg(a);
        Ok(self.push(t, Op::LogSoftmax { input: a, axis }, rg))
    }

    // ---- structural --------------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: isize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let axis = self.norm_axis(first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = &self.nodes[v.0].value;
                let len = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: isize, start: usize, end: usize) -> Result<Var> {
        let axis = self.norm_axis(a, axis)?;
        let src = &self.nodes[a.0].value;
        if start > end || end > src.shape()[axis] {
            return Err(Error::shape("slice", src.shape(), &[start, end]));
        }
        let (outer, len, inner) = split_axis(src.shape(), axis);
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&src.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = src.shape().to_vec();
        shape[axis] = width;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Slice { input: a, axis, start }, rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        let rank = src.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", src.shape(), perm));
        }
        let t = permute_tensor(src, perm);
        let rg = self.rg(a);
        Ok(self.push(
            t,
            Op::Permute {
                input: a,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, x: isize, y: isize) -> Result<Var> {
        let x = self.norm_axis(a, x)?;
        let y = self.norm_axis(a, y)?;
        let mut perm: Vec<usize> = (0..self.shape(a).len()).collect();
        perm.swap(x, y);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[a.0].value.clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Picks `indices[r]` from the last axis of each row `r`; output drops the
    /// last axis.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        let cols = *src.shape().last().unwrap_or(&0);
        let rows = if cols == 0 { 0 } else { src.numel() / cols };
        if rows != indices.len() || indices.iter().any(|&i| i >= cols) {
            return Err(Error::shape("gather", src.shape(), &[indices.len()]));
        }
        let data = indices
            .iter()
            .enumerate()
            .map(|(r, &c)| src.data()[r * cols + c])
            .collect();
        let shape = src.shape()[..src.rank() - 1].to_vec();
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(
            t,
            Op::Gather {
                input: a,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Selects slices along the first axis: `[n, ..] -> [indices.len(), ..]`.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        let n = *src.shape().first().unwrap_or(&0);
        if indices.iter().any(|&i| i >= n) {
            return Err(Error::shape("index_select", src.shape(), indices));
        }
        let width = if n == 0 { 0 } else { src.numel() / n };
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(&src.data()[i * width..(i + 1) * width]);
        }
        let mut shape = src.shape().to_vec();
        shape[0] = indices.len();
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(
            t,
            Op::IndexSelect {
                input: a,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients become available through
    /// [`Graph::grad`] and [`Graph::param_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Contract(
                "backward already ran on this graph; record a new graph".into(),
            ));
        }
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lt.shape()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&t),
            slot => *slot = Some(t),
        }
    }

    /// Sums `g` (shaped like the output) back onto an operand of shape `target`.
    fn unbroadcast(&self, g: &[f64], out_shape: &[usize], target: &[usize], scale: impl Fn(usize) -> f64) -> Tensor {
        let mut out = Tensor::zeros(target);
        if target == out_shape {
            for (i, (o, &gv)) in out.data_mut().iter_mut().zip(g).enumerate() {
                *o = gv * scale(i);
            }
        } else {
            let offs = broadcast_offsets(target, out_shape);
            let data = out.data_mut();
            for (i, (&off, &gv)) in offs.iter().zip(g).enumerate() {
                data[off] += gv * scale(i);
            }
        }
        out
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.rg(*a) {
                    let t = self.unbroadcast(g.data(), out.shape(), val(*a).shape(), |_| 1.0);
                    self.accumulate(grads, *a, t);
                }
                if self.rg(*b) {
                    let t = self.unbroadcast(g.data(), out.shape(), val(*b).shape(), |_| sign);
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let same = ta.shape() == tb.shape();
                let oa = (!same).then(|| broadcast_offsets(ta.shape(), out.shape()));
                let ob = (!same).then(|| broadcast_offsets(tb.shape(), out.shape()));
                let av = |k: usize| ta.data()[oa.as_ref().map_or(k, |o| o[k])];
                let bv = |k: usize| tb.data()[ob.as_ref().map_or(k, |o| o[k])];
                let is_div = matches!(node.op, Op::Div(..));
                if self.rg(*a) {
                    let t = if is_div {
                        self.unbroadcast(g.data(), out.shape(), ta.shape(), |k| 1.0 / bv(k))
                    } else {
                        self.unbroadcast(g.data(), out.shape(), ta.shape(), bv)
                    };
                    self.accumulate(grads, *a, t);
                }
                if self.rg(*b) {
                    let t = if is_div {
                        self.unbroadcast(g.data(), out.shape(), tb.shape(), |k| {
                            let y = bv(k);
                            -av(k) / (y * y)
                        })
                    } else {
                        self.unbroadcast(g.data(), out.shape(), tb.shape(), av)
                    };
                    self.accumulate(grads, *b, t);
                }
            }
            Op::MulScalar(a, c) => {
                let t = map_grad(g, |_, gv| gv * c);
                self.accumulate(grads, *a, t);
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Exp(a) => {
                let t = map_grad(g, |k, gv| gv * out.data()[k]);
                self.accumulate(grads, *a, t);
            }
            Op::Log(a) => {
                let x = val(*a);
                let t = map_grad(g, |k, gv| gv / x.data()[k]);
                self.accumulate(grads, *a, t);
            }
            Op::Sqrt(a) => {
                let t = map_grad(g, |k, gv| gv * 0.5 / out.data()[k]);
                self.accumulate(grads, *a, t);
            }
            Op::Powf(a, p) => {
                let x = val(*a);
                let t = map_grad(g, |k, gv| gv * p * x.data()[k].powf(p - 1.0));
                self.accumulate(grads, *a, t);
            }
            Op::Relu(a) => {
                let x = val(*a);
                let t = map_grad(g, |k, gv| if x.data()[k] > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *a, t);
            }
            Op::Gelu(a) => {
                let x = val(*a);
                let t = map_grad(g, |k, gv| {
                    let x = x.data()[k];
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let th = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    gv * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)
                });
                self.accumulate(grads, *a, t);
            }
            Op::Dropout { input, mask } => {
                let t = map_grad(g, |k, gv| gv * mask[k]);
                self.accumulate(grads, *input, t);
            }
            Op::MaskFill { input, mask } => {
                let t = map_grad(g, |k, gv| if mask[k] { 0.0 } else { gv });
                self.accumulate(grads, *input, t);
            }
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, out, g, grads),
            Op::Sum { input, axis } | Op::Mean { input, axis } => {
                let x = val(*input);
                let (outer, len, inner) = split_axis(x.shape(), *axis);
                let scale = if matches!(node.op, Op::Mean { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let mut t = Tensor::zeros(x.shape());
                let d = t.data_mut();
                for o in 0..outer {
                    for l in 0..len {
                        for k in 0..inner {
                            d[(o * len + l) * inner + k] = g.data()[o * inner + k] * scale;
                        }
                    }
                }
                self.accumulate(grads, *input, t);
            }
            Op::Variance { input, axis } => {
                let x = val(*input);
                let (outer, len, inner) = split_axis(x.shape(), *axis);
                let mut t = Tensor::zeros(x.shape());
                let d = t.data_mut();
                let n = len as f64;
                for o in 0..outer {
                    for k in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + k;
                        let mu = stable_mean((0..len).map(|l| x.data()[at(l)]), len);
                        let gv = g.data()[o * inner + k];
                        for l in 0..len {
                            d[at(l)] = gv * 2.0 * (x.data()[at(l)] - mu) / n;
                        }
                    }
                }
                self.accumulate(grads, *input, t);
            }
            Op::SumAll(a) => {
                let gv = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), gv));
            }
            Op::MeanAll(a) => {
                let x = val(*a);
                let gv = g.data()[0] / x.numel() as f64;
                self.accumulate(grads, *a, Tensor::full(x.shape(), gv));
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = split_axis(out.shape(), *axis);
                let mut t = Tensor::zeros(out.shape());
                let d = t.data_mut();
                for o in 0..outer {
                    for k in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + k;
                        let dot: f64 = (0..len).map(|l| g.data()[at(l)] * out.data()[at(l)]).sum();
                        for l in 0..len {
                            d[at(l)] = out.data()[at(l)] * (g.data()[at(l)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *input, t);
            }
            Op::LogSoftmax { input, axis } => {
                let (outer, len, inner) = split_axis(out.shape(), *axis);
                let mut t = Tensor::zeros(out.shape());
                let d = t.data_mut();
                for o in 0..outer {
                    for k in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + k;
                        let gsum: f64 = (0..len).map(|l| g.data()[at(l)]).sum();
                        for l in 0..len {
                            d[at(l)] = g.data()[at(l)] - out.data()[at(l)].exp() * gsum;
                        }
                    }
                }
                self.accumulate(grads, *input, t);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut start = 0;
                for &v in inputs {
                    let shape = val(v).shape();
                    let len = shape[*axis];
                    if self.rg(v) {
                        let mut t = Tensor::zeros(shape);
                        let d = t.data_mut();
                        for o in 0..outer {
                            let src = &g.data()[(o * total + start) * inner..(o * total + start + len) * inner];
                            d[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
                        }
                        self.accumulate(grads, v, t);
                    }
                    start += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let shape = val(*input).shape();
                let (outer, len, inner) = split_axis(shape, *axis);
                let width = out.shape()[*axis];
                let mut t = Tensor::zeros(shape);
                let d = t.data_mut();
                for o in 0..outer {
                    let dst = o * len * inner + start * inner;
                    d[dst..dst + width * inner]
                        .copy_from_slice(&g.data()[o * width * inner..(o + 1) * width * inner]);
                }
                self.accumulate(grads, *input, t);
            }
            Op::Permute { input, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accumulate(grads, *input, permute_tensor(g, &inv));
            }
            Op::Reshape(a) => {
                let t = g.clone().reshape(val(*a).shape()).expect("reshape grad");
                self.accumulate(grads, *a, t);
            }
            Op::Gather { input, indices } => {
                let x = val(*input);
                let cols = *x.shape().last().unwrap();
                let mut t = Tensor::zeros(x.shape());
                for (r, &c) in indices.iter().enumerate() {
                    t.data_mut()[r * cols + c] += g.data()[r];
                }
                self.accumulate(grads, *input, t);
            }
            Op::IndexSelect { input, indices } => {
                let x = val(*input);
                let width = x.numel() / x.shape()[0];
                let mut t = Tensor::zeros(x.shape());
                for (r, &i) in indices.iter().enumerate() {
                    let dst = &mut t.data_mut()[i * width..(i + 1) * width];
                    for (d, s) in dst.iter_mut().zip(&g.data()[r * width..(r + 1) * width]) {
                        *d += s;
                    }
                }
                self.accumulate(grads, *input, t);
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let batch = &out.shape()[..out.rank() - 2];
        let oa = broadcast_offsets(&sa[..sa.len() - 2], batch);
        let ob = broadcast_offsets(&sb[..sb.len() - 2], batch);
        if self.rg(a) {
            let mut ga = Tensor::zeros(sa);
            for (bi, &ia) in oa.iter().enumerate() {
                let ib = ob[bi];
                mm_nt_acc(
                    &g.data()[bi * m * n..(bi + 1) * m * n],
                    &tb.data()[ib * k * n..(ib + 1) * k * n],
                    &mut ga.data_mut()[ia * m * k..(ia + 1) * m * k],
                    m,
                    k,
                    n,
                );
            }
            self.accumulate(grads, a, ga);
        }
        if self.rg(b) {
            let mut gb = Tensor::zeros(sb);
            for (bi, &ib) in ob.iter().enumerate() {
                let ia = oa[bi];
                mm_tn_acc(
                    &ta.data()[ia * m * k..(ia + 1) * m * k],
                    &g.data()[bi * m * n..(bi + 1) * m * n],
                    &mut gb.data_mut()[ib * k * n..(ib + 1) * k * n],
                    m,
                    k,
                    n,
                );
            }
            self.accumulate(grads, b, gb);
        }
    }
}

fn map_grad(g: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
    let data = g.data().iter().enumerate().map(|(k, &gv)| f(k, gv)).collect();
    Tensor::new(g.shape().to_vec(), data).expect("same shape")
}

fn permute_tensor(src: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = src.shape();
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = src.numel();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(src.data()[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permuted shape")
}
