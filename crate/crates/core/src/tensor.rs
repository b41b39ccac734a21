//! Dense f64 tensors and a tape-based reverse-mode gradient engine.
//!
//! A [`Tensor`] is a plain immutable value (row-major data plus shape) that is
//! safe to share across threads. Differentiable computation happens through a
//! [`Tape`]: values enter as leaves via [`Tape::leaf`], operations on the
//! resulting [`Var`] handles record nodes, and [`Var::backward`] on a scalar
//! fills every node's gradient buffer. The tape is rebuilt for each forward
//! pass (define-by-run), which keeps variable-length bags simple.

use std::cell::RefCell;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Plain tensor values
// ---------------------------------------------------------------------------

/// Dense row-major f64 array. Scalars use the empty shape `[]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape {
                op: "Tensor::new".into(),
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Plain matrix product oracle-free kernel: a is m x k, b is k x n.
fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aip * b[p * n + j];
            }
        }
    }
    out
}

/// Matrix product of plain tensors, without a tape.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = matmul_dims("matmul", a.shape(), b.shape())?;
    Tensor::matrix(m, n, matmul_kernel(a.data(), b.data(), m, k, n))
}

fn matmul_dims(op: &str, a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::Shape {
            op: op.into(),
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok((a[0], a[1], b[1]))
}

/// Numerically stable softmax restricted to unmasked positions; masked
/// positions come out exactly 0. `masked[i] == true` means position i is
/// excluded from the normalization (equivalent to a -inf logit).
pub fn masked_softmax(logits: &[f64], masked: Option<&[bool]>) -> Result<Vec<f64>> {
    if let Some(m) = masked {
        if m.len() != logits.len() {
            return Err(Error::Shape {
                op: "masked_softmax".into(),
                lhs: vec![logits.len()],
                rhs: vec![m.len()],
            });
        }
    }
    let is_masked = |i: usize| masked.map_or(false, |m| m[i]);
    let mut max = f64::NEG_INFINITY;
    for (i, &l) in logits.iter().enumerate() {
        if !is_masked(i) && l > max {
            max = l;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateMask);
    }
    let mut out = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for (i, &l) in logits.iter().enumerate() {
        if !is_masked(i) {
            let e = (l - max).exp();
            out[i] = e;
            sum += e;
        }
    }
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Gradient tape
// ---------------------------------------------------------------------------

enum Op {
    Leaf,
    /// c = a . b with a: m x k, b: k x n
    Matmul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    /// y = a . x with a: m x k, x: k
    MatVec {
        a: usize,
        x: usize,
        m: usize,
        k: usize,
    },
    /// y = x . a with x: n, a: n x d
    VecMat {
        x: usize,
        a: usize,
        n: usize,
        d: usize,
    },
    Dot {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    AddConst {
        a: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    Tanh {
        a: usize,
    },
    Sigmoid {
        a: usize,
    },
    Sum {
        a: usize,
    },
    // Masked positions need no saved mask: their outputs are exactly zero,
    // which already zeroes their logit gradients.
    MaskedSoftmax {
        a: usize,
    },
    /// Concatenation of rank-1 parts; also backs row stacking.
    Concat {
        parts: Vec<(usize, usize)>,
    },
}

struct TapeInner {
    shapes: Vec<Vec<usize>>,
    vals: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
    ops: Vec<Op>,
    consumed: bool,
}

/// Records operations for one forward/backward pass. Not thread-safe by
/// construction (Rc): a tape and its vars belong to a single training run.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                shapes: Vec::new(),
                vals: Vec::new(),
                grads: Vec::new(),
                ops: Vec::new(),
                consumed: false,
            })),
        }
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::TapeConsumed);
        }
        debug_assert_eq!(numel(&shape), data.len());
        let id = inner.vals.len();
        inner.shapes.push(shape);
        inner.vals.push(data);
        inner.ops.push(op);
        Ok(Var {
            tape: self.clone(),
            id,
        })
    }

    /// Register a plain value as a differentiable leaf.
    pub fn leaf(&self, value: &Tensor) -> Var {
        self.push(value.shape().to_vec(), value.data().to_vec(), Op::Leaf)
            .expect("leaf on consumed tape")
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.leaf(&Tensor::scalar(v))
    }

    /// Concatenate rank-1 (or scalar) vars into one vector.
    pub fn concat(&self, parts: &[&Var]) -> Result<Var> {
        let mut data = Vec::new();
        let mut spans = Vec::with_capacity(parts.len());
        for part in parts {
            let v = part.values();
            spans.push((part.id, v.len()));
            data.extend_from_slice(&v);
        }
        let total = data.len();
        self.push(vec![total], data, Op::Concat { parts: spans })
    }

    /// Stack equal-length rank-1 vars as the rows of a matrix.
    pub fn stack_rows(&self, rows: &[&Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::Config("stack_rows needs at least one row".into()));
        }
        let width = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * width);
        let mut spans = Vec::with_capacity(rows.len());
        for row in rows {
            let v = row.values();
            if v.len() != width {
                return Err(Error::Shape {
                    op: "stack_rows".into(),
                    lhs: vec![width],
                    rhs: vec![v.len()],
                });
            }
            spans.push((row.id, v.len()));
            data.extend_from_slice(&v);
        }
        self.push(vec![rows.len(), width], data, Op::Concat { parts: spans })
    }
}

/// Handle to one node of a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl Var {
    fn same_tape(&self, other: &Var) -> bool {
        Rc::ptr_eq(&self.tape.inner, &other.tape.inner)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().shapes[self.id].clone()
    }

    pub fn len(&self) -> usize {
        self.tape.inner.borrow().vals[self.id].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn values(&self) -> Vec<f64> {
        self.tape.inner.borrow().vals[self.id].clone()
    }

    /// Snapshot of the node's current value.
    pub fn value(&self) -> Tensor {
        let inner = self.tape.inner.borrow();
        Tensor {
            shape: inner.shapes[self.id].clone(),
            data: inner.vals[self.id].clone(),
        }
    }

    /// The single element of a scalar node.
    pub fn item(&self) -> f64 {
        let inner = self.tape.inner.borrow();
        assert!(
            inner.vals[self.id].len() == 1,
            "item() on non-scalar {:?}",
            inner.shapes[self.id]
        );
        inner.vals[self.id][0]
    }

    /// Gradient buffer populated by `backward`; None before that.
    pub fn grad(&self) -> Option<Tensor> {
        let inner = self.tape.inner.borrow();
        if !inner.consumed {
            return None;
        }
        Some(Tensor {
            shape: inner.shapes[self.id].clone(),
            data: inner.grads[self.id].clone(),
        })
    }

    fn binary(&self, rhs: &Var, op_name: &str) -> Result<(Vec<f64>, Vec<f64>, Vec<usize>)> {
        assert!(self.same_tape(rhs), "vars come from different tapes");
        let inner = self.tape.inner.borrow();
        let (ls, rs) = (&inner.shapes[self.id], &inner.shapes[rhs.id]);
        if ls != rs {
            return Err(Error::Shape {
                op: op_name.into(),
                lhs: ls.clone(),
                rhs: rs.clone(),
            });
        }
        Ok((
            inner.vals[self.id].clone(),
            inner.vals[rhs.id].clone(),
            ls.clone(),
        ))
    }

    pub fn add(&self, rhs: &Var) -> Result<Var> {
        let (a, b, shape) = self.binary(rhs, "add")?;
        let data = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        self.tape.push(shape, data, Op::Add { a: self.id, b: rhs.id })
    }

    pub fn sub(&self, rhs: &Var) -> Result<Var> {
        let (a, b, shape) = self.binary(rhs, "sub")?;
        let data = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        self.tape.push(shape, data, Op::Sub { a: self.id, b: rhs.id })
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Var) -> Result<Var> {
        let (a, b, shape) = self.binary(rhs, "mul")?;
        let data = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        self.tape.push(shape, data, Op::Mul { a: self.id, b: rhs.id })
    }

    pub fn add_const(&self, c: f64) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let shape = inner.shapes[self.id].clone();
        let data = inner.vals[self.id].iter().map(|x| x + c).collect();
        drop(inner);
        self.tape.push(shape, data, Op::AddConst { a: self.id })
    }

    pub fn scale(&self, c: f64) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let shape = inner.shapes[self.id].clone();
        let data = inner.vals[self.id].iter().map(|x| x * c).collect();
        drop(inner);
        self.tape.push(shape, data, Op::Scale { a: self.id, c })
    }

    pub fn tanh(&self) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let shape = inner.shapes[self.id].clone();
        let data = inner.vals[self.id].iter().map(|x| x.tanh()).collect();
        drop(inner);
        self.tape.push(shape, data, Op::Tanh { a: self.id })
    }

    pub fn sigmoid(&self) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let shape = inner.shapes[self.id].clone();
        let data = inner.vals[self.id]
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        drop(inner);
        self.tape.push(shape, data, Op::Sigmoid { a: self.id })
    }

    pub fn sum(&self) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let total: f64 = inner.vals[self.id].iter().sum();
        drop(inner);
        self.tape.push(vec![], vec![total], Op::Sum { a: self.id })
    }

    /// Matrix product; both operands rank 2.
    pub fn matmul(&self, rhs: &Var) -> Result<Var> {
        assert!(self.same_tape(rhs), "vars come from different tapes");
        let inner = self.tape.inner.borrow();
        let (m, k, n) = matmul_dims("matmul", &inner.shapes[self.id], &inner.shapes[rhs.id])?;
        let data = matmul_kernel(&inner.vals[self.id], &inner.vals[rhs.id], m, k, n);
        drop(inner);
        self.tape.push(
            vec![m, n],
            data,
            Op::Matmul {
                a: self.id,
                b: rhs.id,
                m,
                k,
                n,
            },
        )
    }

    /// Matrix (m x k) times vector (k) -> vector (m).
    pub fn matvec(&self, x: &Var) -> Result<Var> {
        assert!(self.same_tape(x), "vars come from different tapes");
        let inner = self.tape.inner.borrow();
        let (ms, xs) = (&inner.shapes[self.id], &inner.shapes[x.id]);
        if ms.len() != 2 || xs.len() != 1 || ms[1] != xs[0] {
            return Err(Error::Shape {
                op: "matvec".into(),
                lhs: ms.clone(),
                rhs: xs.clone(),
            });
        }
        let (m, k) = (ms[0], ms[1]);
        let a = &inner.vals[self.id];
        let v = &inner.vals[x.id];
        let mut data = vec![0.0; m];
        for i in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * v[p];
            }
            data[i] = s;
        }
        drop(inner);
        self.tape.push(
            vec![m],
            data,
            Op::MatVec {
                a: self.id,
                x: x.id,
                m,
                k,
            },
        )
    }

    /// Row vector (n) times matrix (n x d) -> vector (d).
    pub fn vecmat(&self, a: &Var) -> Result<Var> {
        assert!(self.same_tape(a), "vars come from different tapes");
        let inner = self.tape.inner.borrow();
        let (xs, ms) = (&inner.shapes[self.id], &inner.shapes[a.id]);
        if xs.len() != 1 || ms.len() != 2 || ms[0] != xs[0] {
            return Err(Error::Shape {
                op: "vecmat".into(),
                lhs: xs.clone(),
                rhs: ms.clone(),
            });
        }
        let (n, d) = (ms[0], ms[1]);
        let x = &inner.vals[self.id];
        let m = &inner.vals[a.id];
        let mut data = vec![0.0; d];
        for i in 0..n {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            for j in 0..d {
                data[j] += xi * m[i * d + j];
            }
        }
        drop(inner);
        self.tape.push(
            vec![d],
            data,
            Op::VecMat {
                x: self.id,
                a: a.id,
                n,
                d,
            },
        )
    }

    /// Inner product of two equal-length vectors; scalar output.
    pub fn dot(&self, rhs: &Var) -> Result<Var> {
        let (a, b, shape) = self.binary(rhs, "dot")?;
        if shape.len() != 1 {
            return Err(Error::Shape {
                op: "dot".into(),
                lhs: shape.clone(),
                rhs: shape,
            });
        }
        let s: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        self.tape.push(vec![], vec![s], Op::Dot { a: self.id, b: rhs.id })
    }

    /// Softmax over unmasked positions of a rank-1 var; masked positions get
    /// exactly 0 (they are excluded from the normalization).
    pub fn masked_softmax(&self, masked: Option<&[bool]>) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        if inner.shapes[self.id].len() != 1 {
            return Err(Error::Rank {
                op: "masked_softmax".into(),
                shape: inner.shapes[self.id].clone(),
            });
        }
        let data = masked_softmax(&inner.vals[self.id], masked)?;
        let n = data.len();
        drop(inner);
        self.tape
            .push(vec![n], data, Op::MaskedSoftmax { a: self.id })
    }

    /// Reverse pass from a scalar node. Populates gradient buffers for every
    /// node and consumes the tape: no further ops or backward calls.
    pub fn backward(&self) -> Result<()> {
        let mut inner = self.tape.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::TapeConsumed);
        }
        if inner.vals[self.id].len() != 1 {
            return Err(Error::Rank {
                op: "backward".into(),
                shape: inner.shapes[self.id].clone(),
            });
        }
        inner.grads = inner.vals.iter().map(|v| vec![0.0; v.len()]).collect();
        inner.grads[self.id][0] = 1.0;
        let TapeInner {
            vals, grads, ops, ..
        } = &mut *inner;
        for (out, op) in ops.iter().enumerate().rev() {
            match op {
                Op::Leaf => {}
                Op::Matmul { a, b, m, k, n } => {
                    let go = grads[out].clone();
                    let (m, k, n) = (*m, *k, *n);
                    let av = vals[*a].clone();
                    let bv = vals[*b].clone();
                    let ga = &mut grads[*a];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += go[i * n + j] * bv[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                    let gb = &mut grads[*b];
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += av[i * k + p] * go[i * n + j];
                            }
                            gb[p * n + j] += s;
                        }
                    }
                }
                Op::MatVec { a, x, m, k } => {
                    let go = grads[out].clone();
                    let av = vals[*a].clone();
                    let xv = vals[*x].clone();
                    let (m, k) = (*m, *k);
                    let ga = &mut grads[*a];
                    for i in 0..m {
                        let gi = go[i];
                        if gi != 0.0 {
                            for p in 0..k {
                                ga[i * k + p] += gi * xv[p];
                            }
                        }
                    }
                    let gx = &mut grads[*x];
                    for i in 0..m {
                        let gi = go[i];
                        if gi != 0.0 {
                            for p in 0..k {
                                gx[p] += av[i * k + p] * gi;
                            }
                        }
                    }
                }
                Op::VecMat { x, a, n, d } => {
                    let go = grads[out].clone();
                    let xv = vals[*x].clone();
                    let av = vals[*a].clone();
                    let (n, d) = (*n, *d);
                    let gx = &mut grads[*x];
                    for i in 0..n {
                        let mut s = 0.0;
                        for j in 0..d {
                            s += av[i * d + j] * go[j];
                        }
                        gx[i] += s;
                    }
                    let ga = &mut grads[*a];
                    for i in 0..n {
                        let xi = xv[i];
                        if xi != 0.0 {
                            for j in 0..d {
                                ga[i * d + j] += xi * go[j];
                            }
                        }
                    }
                }
                Op::Dot { a, b } => {
                    let go = grads[out][0];
                    let av = vals[*a].clone();
                    let bv = vals[*b].clone();
                    for (g, y) in grads[*a].iter_mut().zip(&bv) {
                        *g += go * y;
                    }
                    for (g, x) in grads[*b].iter_mut().zip(&av) {
                        *g += go * x;
                    }
                }
                Op::Add { a, b } => {
                    let go = grads[out].clone();
                    for (g, v) in grads[*a].iter_mut().zip(&go) {
                        *g += v;
                    }
                    for (g, v) in grads[*b].iter_mut().zip(&go) {
                        *g += v;
                    }
                }
                Op::Sub { a, b } => {
                    let go = grads[out].clone();
                    for (g, v) in grads[*a].iter_mut().zip(&go) {
                        *g += v;
                    }
                    for (g, v) in grads[*b].iter_mut().zip(&go) {
                        *g -= v;
                    }
                }
                Op::Mul { a, b } => {
                    let go = grads[out].clone();
                    let av = vals[*a].clone();
                    let bv = vals[*b].clone();
                    for i in 0..go.len() {
                        grads[*a][i] += go[i] * bv[i];
                    }
                    for i in 0..go.len() {
                        grads[*b][i] += go[i] * av[i];
                    }
                }
                Op::AddConst { a } => {
                    let go = grads[out].clone();
                    for (g, v) in grads[*a].iter_mut().zip(&go) {
                        *g += v;
                    }
                }
                Op::Scale { a, c } => {
                    let go = grads[out].clone();
                    for (g, v) in grads[*a].iter_mut().zip(&go) {
                        *g += c * v;
                    }
                }
                Op::Tanh { a } => {
                    let go = grads[out].clone();
                    let y = vals[out].clone();
                    for i in 0..go.len() {
                        grads[*a][i] += go[i] * (1.0 - y[i] * y[i]);
                    }
                }
                Op::Sigmoid { a } => {
                    let go = grads[out].clone();
                    let y = vals[out].clone();
                    for i in 0..go.len() {
                        grads[*a][i] += go[i] * y[i] * (1.0 - y[i]);
                    }
                }
                Op::Sum { a } => {
                    let go = grads[out][0];
                    for g in grads[*a].iter_mut() {
                        *g += go;
                    }
                }
                Op::MaskedSoftmax { a, .. } => {
                    let go = grads[out].clone();
                    let y = vals[out].clone();
                    let s: f64 = go.iter().zip(&y).map(|(g, yi)| g * yi).sum();
                    for i in 0..go.len() {
                        grads[*a][i] += y[i] * (go[i] - s);
                    }
                }
                Op::Concat { parts } => {
                    let go = grads[out].clone();
                    let mut offset = 0;
                    for (node, len) in parts {
                        for i in 0..*len {
                            grads[*node][i] += go[offset + i];
                        }
                        offset += len;
                    }
                }
            }
        }
        inner.consumed = true;
        Ok(())
    }
}
