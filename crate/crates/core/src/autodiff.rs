//! Reverse-mode differentiation over a linear operation tape.
//!
//! Every forward operation appends a node holding its output value and the
//! handles of its inputs. [`Tape::backward`] walks the nodes in reverse
//! record order and pushes adjoints through each operation's analytic
//! derivative. Parameters enter the tape by name via [`Tape::param`]; their
//! adjoints are added (never assigned) into the [`ParameterStore`]
//! accumulators.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{self, gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Sigmoid,
    Tanh,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Unary(Pointwise, Var),
    MatMul(Var, Var),
    /// `x · wᵀ + b`, with `x` either `[in]` or `[rows, in]`.
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Concat(Vec<Var>),
    Slice {
        src: Var,
        start: usize,
        len: usize,
    },
    Repeat {
        src: Var,
        times: usize,
    },
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Pick(Var, usize),
    Row {
        table: Var,
        index: usize,
    },
    MaskMul(Var, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Adjoints of every node after a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Adjoint of `var`; zeros when `var` does not reach the root.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
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

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or constant.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds a named parameter. Repeated calls return the same node, so a
    /// weight shared across time steps accumulates one combined gradient.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.leaf(value);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Binds a parameter when present in the store, `None` otherwise.
    pub fn param_opt(&mut self, store: &ParameterStore, name: &str) -> Result<Option<Var>> {
        if store.contains(name) {
            self.param(store, name).map(Some)
        } else {
            Ok(None)
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("multiply", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn pointwise(&mut self, f: Pointwise, a: Var) -> Var {
        let v = match f {
            Pointwise::Sigmoid => self.value(a).map(tensor::sigmoid),
            Pointwise::Tanh => self.value(a).map(f64::tanh),
        };
        self.push(v, Op::Unary(f, a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.pointwise(Pointwise::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.pointwise(Pointwise::Tanh, a)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// Affine map `x · wᵀ + b` for `w: [out, in]`, applied to a vector or to
    /// each row of a matrix.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.len() != 2 || xs.len() > 2 || *xs.last().unwrap() != ws[1] {
            return Err(Error::dim("linear", xs, ws));
        }
        let (out_dim, in_dim) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(Error::dim("linear bias", self.shape(b), &[out_dim]));
            }
        }
        let rows = self.value(x).rows();
        let mut out = vec![0.0; rows * out_dim];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for r in 0..rows {
                out[r * out_dim..(r + 1) * out_dim].copy_from_slice(bias);
            }
        }
        gemm_nt(
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            rows,
            in_dim,
            out_dim,
        );
        let shape = if xs.len() == 1 {
            vec![out_dim]
        } else {
            vec![rows, out_dim]
        };
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero parts".into()))?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || &s[..s.len() - 1] != lead {
                return Err(Error::dim("concat", self.shape(first), s));
            }
        }
        let rows = self.value(first).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec())))
    }

    /// `src[..., start..start+len]` along the last axis.
    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(src).to_vec();
        let width = *s.last().unwrap();
        if len == 0 || start + len > width {
            return Err(Error::dim("slice", &s, &[start, len]));
        }
        let value = self.value(src);
        let mut out = Vec::with_capacity(value.rows() * len);
        for r in 0..value.rows() {
            out.extend_from_slice(&value.row(r)[start..start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { src, start, len }))
    }

    /// Stacks a vector `times` times into a `[times, n]` matrix.
    pub fn repeat(&mut self, src: Var, times: usize) -> Result<Var> {
        if self.shape(src).len() != 1 || times == 0 {
            return Err(Error::dim("repeat", self.shape(src), &[times]));
        }
        let row = self.value(src).data();
        let n = row.len();
        let mut out = Vec::with_capacity(times * n);
        for _ in 0..times {
            out.extend_from_slice(row);
        }
        Ok(self.push(Tensor::new(vec![times, n], out)?, Op::Repeat { src, times }))
    }

    pub fn reshape(&mut self, src: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(src).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(src)))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, z: Var) -> Result<Var> {
        let value = self.value(z);
        if !value.all_finite() {
            return Err(Error::Numeric("softmax of non-finite input".into()));
        }
        let mut out = Vec::with_capacity(value.len());
        for r in 0..value.rows() {
            out.extend(tensor::softmax_slice(value.row(r)));
        }
        let shape = value.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(z)))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, z: Var) -> Result<Var> {
        let value = self.value(z);
        if !value.all_finite() {
            return Err(Error::Numeric("log_softmax of non-finite input".into()));
        }
        let mut out = Vec::with_capacity(value.len());
        for r in 0..value.rows() {
            out.extend(tensor::log_softmax_slice(value.row(r)));
        }
        let shape = value.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax(z)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Scalar at flat index `index`.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let value = self.value(a);
        if index >= value.len() {
            return Err(Error::dim("pick", value.shape(), &[index]));
        }
        let s = value.data()[index];
        Ok(self.push(Tensor::scalar(s), Op::Pick(a, index)))
    }

    /// Row `index` of a `[rows, cols]` table, e.g. an embedding lookup.
    pub fn row(&mut self, table: Var, index: usize) -> Result<Var> {
        let value = self.value(table);
        if value.rank() != 2 || index >= value.shape()[0] {
            return Err(Error::dim("row", value.shape(), &[index]));
        }
        let r = value.row(index).to_vec();
        Ok(self.push(Tensor::vector(r), Op::Row { table, index }))
    }

    /// Multiplies by a constant mask that carries no gradient.
    pub fn mask_mul(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        if mask.shape() != self.shape(a) {
            return Err(Error::dim("mask_mul", self.shape(a), mask.shape()));
        }
        let v = self.value(a).zip_map(&mask, |x, m| x * m);
        Ok(self.push(v, Op::MaskMul(a, mask)))
    }

    /// Reverse sweep from a scalar root; returns the adjoint of every node.
    pub fn gradients(&self, root: Var) -> Result<Gradients> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(self.shape(root), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Reverse sweep that adds each bound parameter's adjoint into `store`.
    pub fn backward(&self, root: Var, store: &mut ParameterStore) -> Result<Gradients> {
        let grads = self.gradients(root)?;
        let mut bound: Vec<(&String, &Var)> = self.params.iter().collect();
        bound.sort();
        for (name, var) in bound {
            if let Some(g) = &grads.grads[var.0] {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(grads)
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, g.zip_map(vb, |x, y| x * y));
                accumulate(grads, *b, g.zip_map(va, |x, y| x * y));
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::Unary(f, a) => {
                let y = &node.value;
                let d = match f {
                    Pointwise::Sigmoid => g.zip_map(y, |gi, s| gi * s * (1.0 - s)),
                    Pointwise::Tanh => g.zip_map(y, |gi, t| gi * (1.0 - t * t)),
                };
                accumulate(grads, *a, d);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (p, q, r) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                let mut da = vec![0.0; p * q];
                gemm_nt(g.data(), vb.data(), &mut da, p, r, q);
                let mut db = vec![0.0; q * r];
                gemm_tn(va.data(), g.data(), &mut db, p, q, r);
                accumulate(grads, *a, Tensor::new(va.shape().to_vec(), da).unwrap());
                accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), db).unwrap());
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (out_dim, in_dim) = (vw.shape()[0], vw.shape()[1]);
                let rows = vx.rows();
                let mut dx = vec![0.0; rows * in_dim];
                gemm_nn(g.data(), vw.data(), &mut dx, rows, out_dim, in_dim);
                let mut dw = vec![0.0; out_dim * in_dim];
                gemm_tn(g.data(), vx.data(), &mut dw, rows, out_dim, in_dim);
                accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), dx).unwrap());
                accumulate(grads, *w, Tensor::new(vw.shape().to_vec(), dw).unwrap());
                if let Some(b) = b {
                    let mut db = vec![0.0; out_dim];
                    for r in 0..rows {
                        for (d, &gv) in db.iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                    accumulate(grads, *b, Tensor::vector(db));
                }
            }
            Op::Concat(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let w = vp.last_dim();
                    let mut d = Vec::with_capacity(vp.len());
                    for r in 0..rows {
                        d.extend_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    accumulate(grads, p, Tensor::new(vp.shape().to_vec(), d).unwrap());
                    offset += w;
                }
            }
            Op::Slice { src, start, len } => {
                let vs = self.value(*src);
                let width = vs.last_dim();
                let mut d = vec![0.0; vs.len()];
                for r in 0..vs.rows() {
                    d[r * width + start..r * width + start + len].copy_from_slice(g.row(r));
                }
                accumulate(grads, *src, Tensor::new(vs.shape().to_vec(), d).unwrap());
            }
            Op::Repeat { src, times } => {
                let n = self.value(*src).len();
                let mut d = vec![0.0; n];
                for r in 0..*times {
                    for (di, &gv) in d.iter_mut().zip(g.row(r)) {
                        *di += gv;
                    }
                }
                accumulate(grads, *src, Tensor::vector(d));
            }
            Op::Reshape(src) => {
                let shape = self.shape(*src).to_vec();
                accumulate(grads, *src, g.clone().reshape(&shape).unwrap());
            }
            Op::Softmax(z) => {
                // dz = s ⊙ (g − ⟨g, s⟩) per row
                let s = &node.value;
                let mut d = Vec::with_capacity(s.len());
                for r in 0..s.rows() {
                    let (sr, gr) = (s.row(r), g.row(r));
                    let inner = tensor::dot(sr, gr);
                    d.extend(sr.iter().zip(gr).map(|(&si, &gi)| si * (gi - inner)));
                }
                accumulate(grads, *z, Tensor::new(s.shape().to_vec(), d).unwrap());
            }
            Op::LogSoftmax(z) => {
                // dz = g − softmax(z) · Σg per row
                let y = &node.value;
                let mut d = Vec::with_capacity(y.len());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let total: f64 = gr.iter().sum();
                    d.extend(yr.iter().zip(gr).map(|(&yi, &gi)| gi - yi.exp() * total));
                }
                accumulate(grads, *z, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                accumulate(grads, *a, Tensor::filled(&shape, g.item()));
            }
            Op::Pick(a, index) => {
                let mut d = Tensor::zeros(self.shape(*a));
                d.data_mut()[*index] = g.item();
                accumulate(grads, *a, d);
            }
            Op::Row { table, index } => {
                let vt = self.value(*table);
                let cols = vt.last_dim();
                let mut d = Tensor::zeros(vt.shape());
                d.data_mut()[index * cols..(index + 1) * cols].copy_from_slice(g.data());
                accumulate(grads, *table, d);
            }
            Op::MaskMul(a, mask) => {
                accumulate(grads, *a, g.zip_map(mask, |x, m| x * m));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Maximum relative error between the tape gradient of `f` at `x` and the
/// central-difference estimate `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε`.
///
/// The relative error of each coordinate uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`. `f` must be deterministic; two
/// evaluations at `x` that disagree are reported as a contract error.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Contract("finite-difference eps must be positive".into()));
    }
    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.leaf(point.clone());
        let root = f(&mut tape, xv)?;
        scalar_value(&tape, root)
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let root = f(&mut tape, xv)?;
    let analytic = tape.gradients(root)?.wrt(xv);
    let base = scalar_value(&tape, root)?;
    if eval(x)?.to_bits() != base.to_bits() {
        return Err(Error::Contract(
            "function under finite-difference check is not deterministic".into(),
        ));
    }

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Same check as [`finite_difference_check`], but against named parameters
/// of a store. `f` builds the scalar on a fresh tape from the store.
pub fn parameter_gradient_check<F>(
    store: &ParameterStore,
    names: &[&str],
    eps: f64,
    f: F,
) -> Result<f64>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grads();
    let mut tape = Tape::new();
    let root = f(&mut tape, &work)?;
    let base = scalar_value(&tape, root)?;
    tape.backward(root, &mut work)?;

    {
        let mut again = Tape::new();
        let r = f(&mut again, &work)?;
        if scalar_value(&again, r)?.to_bits() != base.to_bits() {
            return Err(Error::Contract(
                "function under finite-difference check is not deterministic".into(),
            ));
        }
    }

    let mut worst: f64 = 0.0;
    for &name in names {
        let analytic = work.grad(name)?.clone();
        for i in 0..analytic.len() {
            let orig = work.value(name)?.data()[i];
            work.value_mut(name)?.data_mut()[i] = orig + eps;
            let mut t = Tape::new();
            let r = f(&mut t, &work)?;
            let up = scalar_value(&t, r)?;
            work.value_mut(name)?.data_mut()[i] = orig - eps;
            let mut t = Tape::new();
            let r = f(&mut t, &work)?;
            let down = scalar_value(&t, r)?;
            work.value_mut(name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-8);
    (a - b).abs() / denom
}

fn scalar_value(tape: &Tape, root: Var) -> Result<f64> {
    let v = tape.value(root);
    if !v.is_scalar() {
        return Err(Error::Contract(format!(
            "expected a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}
