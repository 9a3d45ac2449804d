//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass in execution order.
//! Inputs of a node always have smaller indices than the node itself, so a
//! reverse sweep over the node list is a reverse topological order.
//!
//! Broadcasting is limited to equal shapes and scalar-vs-tensor. Anything
//! else goes through [`Tape::expand`].

pub mod gradcheck;
pub mod special;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use gradcheck::finite_difference_grad;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    Lgamma,
    Digamma,
    /// `x^p` for a constant exponent.
    Pow(f64),
    /// `c * x`
    Scale(f64),
    /// `x + c`
    Shift(f64),
    /// Clamp to `[lo, hi]`; zero gradient outside.
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reduce { x: Var, axes: Vec<usize>, mean: bool },
    Expand(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Select { x: Var, t: usize },
    Stack(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    /// Interior nodes whose gradient is kept by `backward`.
    retained: Vec<usize>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Softplus => "softplus",
            Unary::Lgamma => "lgamma",
            Unary::Digamma => "digamma",
            Unary::Pow(_) => "pow_scalar",
            Unary::Scale(_) => "scale",
            Unary::Shift(_) => "shift",
            Unary::Clamp(..) => "clamp",
        }
    }

    fn in_domain(self, x: f64) -> bool {
        match self {
            Unary::Log | Unary::Lgamma | Unary::Digamma => x > 0.0,
            Unary::Pow(p) => x >= 0.0 || p.fract() == 0.0,
            _ => true,
        }
    }

    fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Lgamma => special::lgamma(x),
            Unary::Digamma => special::digamma(x),
            Unary::Pow(p) => x.powf(p),
            Unary::Scale(c) => c * x,
            Unary::Shift(c) => x + c,
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Lgamma => special::digamma(x),
            Unary::Digamma => special::trigamma(x),
            Unary::Pow(p) => p * x.powf(p - 1.0),
            Unary::Scale(c) => c,
            Unary::Shift(_) => 1.0,
            Unary::Clamp(lo, hi) => {
                if (lo..=hi).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    fn eval(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }

    /// (∂/∂a, ∂/∂b)
    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            Binary::Add => (1.0, 1.0),
            Binary::Sub => (1.0, -1.0),
            Binary::Mul => (b, a),
            Binary::Div => (1.0 / b, -a / (b * b)),
        }
    }
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { op, index }),
        None => Ok(()),
    }
}

/// Maps each input element of a reduction to its output element.
fn reduce_plan(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut out_shape = Vec::new();
    let mut out_stride = vec![0usize; shape.len()];
    let mut stride = 1;
    for d in (0..shape.len()).rev() {
        if !axes.contains(&d) {
            out_stride[d] = stride;
            stride *= shape[d];
        }
    }
    for (d, &n) in shape.iter().enumerate() {
        if !axes.contains(&d) {
            out_shape.push(n);
        }
    }
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; shape.len()];
    let mut out = 0usize;
    for _ in 0..numel {
        map.push(out);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            out += out_stride[d];
            if idx[d] < shape[d] {
                break;
            }
            out -= out_stride[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out_shape, map)
}

fn grad_buf(adj: &mut [Option<Vec<f64>>], v: Var, numel: usize) -> &mut Vec<f64> {
    adj[v.0].get_or_insert_with(|| vec![0.0; numel])
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Keeps the gradient of an interior node after `backward`; leaves
    /// always keep theirs.
    pub fn retain_grad(&mut self, v: Var) {
        if !self.retained.contains(&v.0) {
            self.retained.push(v.0);
        }
    }

    /// Accumulated gradient of a leaf or retained node, if any backward
    /// pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if let Some(bad) = xv.data().iter().find(|&&v| !kind.in_domain(v)) {
            return Err(Error::Domain {
                op: kind.name(),
                detail: format!("{bad}"),
            });
        }
        let out = xv.map(|v| kind.eval(v));
        check_finite(kind.name(), out.data())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Unary(kind, x), rg))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Softplus, x)
    }
    pub fn lgamma(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Lgamma, x)
    }
    pub fn digamma(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Digamma, x)
    }
    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        self.unary(Unary::Pow(p), x)
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Pow(2.0), x)
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::Scale(c), x)
    }
    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::Shift(c), x)
    }
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(Unary::Clamp(lo, hi), x)
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = if av.shape() == bv.shape() {
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| kind.eval(x, y))
                .collect();
            Tensor::new(av.shape().to_vec(), data)?
        } else if bv.numel() == 1 {
            let y = bv.data()[0];
            av.map(|x| kind.eval(x, y))
        } else if av.numel() == 1 {
            let x = av.data()[0];
            bv.map(|y| kind.eval(x, y))
        } else {
            return Err(Error::shape(kind.name(), av.shape(), bv.shape()));
        };
        check_finite(kind.name(), out.data())?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let d = xv.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), rg))
    }

    fn reduce(&mut self, x: Var, axes: &[usize], mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if let Some(&axis) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(Error::Axis { axis, shape });
        }
        let (out_shape, map) = reduce_plan(&shape, &axes);
        let mut out = Tensor::zeros(&out_shape);
        {
            let o = out.data_mut();
            for (&dst, &v) in map.iter().zip(self.value(x).data()) {
                o[dst] += v;
            }
        }
        if mean {
            let count: usize = axes.iter().map(|&a| shape[a]).product();
            let inv = 1.0 / count as f64;
            out.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reduce { x, axes, mean }, rg))
    }

    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, axes, false)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, axes, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, &axes, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, &axes, true)
    }

    /// Repeats `x` over new leading dimensions; `x.shape` must be a suffix of `shape`.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let xs = xv.shape();
        if xs.len() > shape.len() || &shape[shape.len() - xs.len()..] != xs {
            return Err(Error::shape("expand", xs, shape));
        }
        let reps: usize = shape[..shape.len() - xs.len()].iter().product();
        let mut out = Vec::with_capacity(reps * xv.numel());
        for _ in 0..reps {
            out.extend_from_slice(xv.data());
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape.to_vec(), out)?, Op::Expand(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Concatenation along the last axis; leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", &[], &[]))?;
        let lead = {
            let s = self.shape(*first);
            s[..s.len() - 1].to_vec()
        };
        let rows: usize = lead.iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", self.shape(*first), s));
            }
            total += s[s.len() - 1];
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let v = self.value(p);
                let w = v.shape()[v.ndim() - 1];
                out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec()), rg))
    }

    /// `x[..., start..start+len]`
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        let w = *s.last().ok_or_else(|| Error::shape("slice", &s, &[start, len]))?;
        if start + len > w {
            return Err(Error::shape("slice", &s, &[start, len]));
        }
        let rows = xv.numel() / w.max(1);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.data()[r * w + start..r * w + start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, start }, rg))
    }

    /// `x[:, t, :]` of a 3-d tensor.
    pub fn select_step(&mut self, x: Var, t: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 || t >= s[1] {
            return Err(Error::shape("select_step", s, &[t]));
        }
        let (b, tt, k) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(b * k);
        for i in 0..b {
            let off = (i * tt + t) * k;
            out.extend_from_slice(&xv.data()[off..off + k]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![b, k], out)?, Op::Select { x, t }, rg))
    }

    /// Stacks `T` tensors of shape `[B, K]` into `[B, T, K]`.
    pub fn stack_steps(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("stack_steps", &[], &[]))?;
        let s = self.shape(*first).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("stack_steps", &s, &[]));
        }
        for &p in parts {
            if self.shape(p) != &s[..] {
                return Err(Error::shape("stack_steps", &s, self.shape(p)));
            }
        }
        let (b, k, t) = (s[0], s[1], parts.len());
        let mut out = vec![0.0; b * t * k];
        for (j, &p) in parts.iter().enumerate() {
            let d = self.value(p).data();
            for i in 0..b {
                out[(i * t + j) * k..(i * t + j + 1) * k].copy_from_slice(&d[i * k..(i + 1) * k]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![b, t, k], out)?, Op::Stack(parts.to_vec()), rg))
    }

    /// Runs the chain rule from a single-element `loss`, adding into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !matches!(node.op, Op::Leaf) && self.retained.contains(&i) {
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
            match &node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        match &mut self.grads[i] {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
                Op::Unary(kind, x) => {
                    let xv = self.nodes[x.0].value.data();
                    let yv = node.value.data();
                    let buf = grad_buf(&mut adj, *x, xv.len());
                    for j in 0..xv.len() {
                        buf[j] += g[j] * kind.deriv(xv[j], yv[j]);
                    }
                }
                Op::Binary(kind, a, b) => {
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    let n = g.len();
                    let pick = |v: &[f64], j: usize| if v.len() == 1 { v[0] } else { v[j] };
                    if self.nodes[a.0].requires_grad {
                        let buf = grad_buf(&mut adj, *a, av.len());
                        for j in 0..n {
                            let (da, _) = kind.partials(pick(av, j), pick(bv, j));
                            buf[if av.len() == 1 { 0 } else { j }] += g[j] * da;
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        let buf = grad_buf(&mut adj, *b, bv.len());
                        for j in 0..n {
                            let (_, db) = kind.partials(pick(av, j), pick(bv, j));
                            buf[if bv.len() == 1 { 0 } else { j }] += g[j] * db;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let at = &self.nodes[a.0].value;
                    let bt = &self.nodes[b.0].value;
                    let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
                    let (ad, bd) = (at.data(), bt.data());
                    if self.nodes[a.0].requires_grad {
                        let buf = grad_buf(&mut adj, *a, m * k);
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bd[p * n..(p + 1) * n];
                                buf[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        let buf = grad_buf(&mut adj, *b, k * n);
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = ad[i * k + p];
                                for (o, &gv) in buf[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *o += aip * gv;
                                }
                            }
                        }
                    }
                }
                Op::Transpose(x) => {
                    let s = self.nodes[x.0].value.shape();
                    let (r, c) = (s[0], s[1]);
                    let buf = grad_buf(&mut adj, *x, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                }
                Op::Reduce { x, axes, mean } => {
                    let shape = self.nodes[x.0].value.shape();
                    let (_, map) = reduce_plan(shape, axes);
                    let scale = if *mean {
                        1.0 / axes.iter().map(|&a| shape[a]).product::<usize>() as f64
                    } else {
                        1.0
                    };
                    let buf = grad_buf(&mut adj, *x, map.len());
                    for (o, &src) in buf.iter_mut().zip(&map) {
                        *o += g[src] * scale;
                    }
                }
                Op::Expand(x) => {
                    let n = self.nodes[x.0].value.numel();
                    let buf = grad_buf(&mut adj, *x, n);
                    for chunk in g.chunks(n.max(1)) {
                        buf.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
                    }
                }
                Op::Reshape(x) => {
                    let buf = grad_buf(&mut adj, *x, g.len());
                    buf.iter_mut().zip(&g).for_each(|(o, v)| *o += v);
                }
                Op::Concat(parts) => {
                    let total = *node.value.shape().last().unwrap();
                    let rows = g.len() / total.max(1);
                    let mut off = 0;
                    for &p in parts {
                        let pv = &self.nodes[p.0].value;
                        let w = pv.shape()[pv.ndim() - 1];
                        if self.nodes[p.0].requires_grad {
                            let buf = grad_buf(&mut adj, p, pv.numel());
                            for r in 0..rows {
                                let src = &g[r * total + off..r * total + off + w];
                                buf[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(o, v)| *o += v);
                            }
                        }
                        off += w;
                    }
                }
                Op::Slice { x, start } => {
                    let xv = &self.nodes[x.0].value;
                    let w = xv.shape()[xv.ndim() - 1];
                    let len = *node.value.shape().last().unwrap();
                    let buf = grad_buf(&mut adj, *x, xv.numel());
                    for (r, src) in g.chunks(len.max(1)).enumerate() {
                        let dst = &mut buf[r * w + start..r * w + start + len];
                        dst.iter_mut().zip(src).for_each(|(o, v)| *o += v);
                    }
                }
                Op::Select { x, t } => {
                    let s = self.nodes[x.0].value.shape();
                    let (b, tt, k) = (s[0], s[1], s[2]);
                    let buf = grad_buf(&mut adj, *x, b * tt * k);
                    for i in 0..b {
                        let off = (i * tt + t) * k;
                        buf[off..off + k]
                            .iter_mut()
                            .zip(&g[i * k..(i + 1) * k])
                            .for_each(|(o, v)| *o += v);
                    }
                }
                Op::Stack(parts) => {
                    let s = node.value.shape();
                    let (b, t, k) = (s[0], s[1], s[2]);
                    for (j, &p) in parts.iter().enumerate() {
                        if !self.nodes[p.0].requires_grad {
                            continue;
                        }
                        let buf = grad_buf(&mut adj, p, b * k);
                        for i in 0..b {
                            let src = &g[(i * t + j) * k..(i * t + j + 1) * k];
                            buf[i * k..(i + 1) * k].iter_mut().zip(src).for_each(|(o, v)| *o += v);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
