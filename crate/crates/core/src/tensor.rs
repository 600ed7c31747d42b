//! Dense `f64` tensors and a reverse-mode autodiff tape.
//!
//! The tape is a flat arena: every operation appends one node holding its
//! forward value, so node indices are already a topological order and the
//! backward pass is a single reverse sweep. Handles ([`Var`]) are just
//! indices tagged with the owning tape's id; using a handle on the wrong
//! tape is a contract error, not undefined behavior.
//!
//! Numeric conventions, fixed here and relied on everywhere else:
//!
//! * all arithmetic is `f64`; there is no f32 path,
//! * `relu'(0) = 0`,
//! * `sign(0) = 0` (see [`sign`]),
//! * softmax and log-sum-exp are always computed in the max-shifted form,
//! * any NaN or infinity aborts the computation with
//!   [`Error::NonFinite`](crate::error::Error) instead of propagating,
//! * no implicit broadcasting except scalar-with-tensor in the elementwise
//!   ops; everything else requires exact shape equality.
//!
//! Identical inputs and op order produce bit-identical values and gradients:
//! loops run in fixed index order and gradient accumulation is plain `+=`
//! in reverse node order.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

// ── Tensor ──────────────────────────────────────────────────────────────────

/// A dense row-major `f64` tensor.
///
/// `grad` is populated by [`Tape::export_grad`] (or by hand); the tape keeps
/// its own gradient buffers during a backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "tensor shape {:?} implies {} elements but {} were provided",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builder-style toggle for gradient tracking.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows when viewed as a 2-D tensor (`[n]` counts as one row).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Number of columns when viewed as a 2-D tensor.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => self.data.len(),
        }
    }

    /// Row `i` as a slice (2-D tensors).
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }
}

// ── Shared numeric kernels ──────────────────────────────────────────────────

/// `sign` with the convention `sign(0) = 0` (also maps ±0.0 to 0.0).
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Max-shifted log-sum-exp: `m + ln Σ exp(z_i − m)` with `m = max z_i`.
/// Never overflows for finite input; `z` must be non-empty.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    debug_assert!(!z.is_empty());
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// Stable softmax: `exp(z_i − lse(z))`. Every consumer of softmax in this
/// crate goes through this function so probabilities are bit-identical no
/// matter where they are computed.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let l = log_sum_exp(z);
    z.iter().map(|&v| (v - l).exp()).collect()
}

/// `out += a @ b` with `a: [m,k]`, `b: [k,n]`, `out: [m,n]`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a @ bᵀ` with `a: [m,k]`, `b: [n,k]`, `out: [m,n]`.
pub(crate) fn matmul_bt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// `out += aᵀ @ g` with `a: [m,k]`, `g: [m,n]`, `out: [k,n]`.
pub(crate) fn matmul_at_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn ensure_finite(op: &'static str, data: &[f64]) -> Result<()> {
    for (index, &value) in data.iter().enumerate() {
        if !value.is_finite() {
            return Err(Error::NonFinite { op, index, value });
        }
    }
    Ok(())
}

// ── Tape ────────────────────────────────────────────────────────────────────

/// Handle to a node on a specific [`Tape`]. Copyable; only valid on the tape
/// that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape_id: u64,
    index: usize,
}

enum Op {
    Leaf,
    /// `a @ b`
    Matmul { a: usize, b: usize },
    /// `a @ bᵀ` — the natural layout for `x @ Wᵀ` with weights stored
    /// `[out, in]`.
    MatmulBt { a: usize, b: usize },
    /// Row-broadcast bias add: `x: [r,c] + bias: [c]`.
    AddBias { x: usize, bias: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    /// `t + s` where `s` is a single-element tensor broadcast over `t`.
    AddScalar { t: usize, s: usize },
    /// `s − t` (scalar on the left).
    SubScalarL { s: usize, t: usize },
    /// `t − s` (scalar on the right).
    SubScalarR { t: usize, s: usize },
    MulScalar { t: usize, s: usize },
    /// Multiplication by a compile-time constant (not a tape node).
    Scale { t: usize, c: f64 },
    Relu { t: usize },
    Tanh { t: usize },
    Exp { t: usize },
    Log { t: usize },
    /// Sum of all elements → `[1]`.
    Sum { t: usize },
    /// Per-row sum: `[r,c] → [r]`.
    RowSum { t: usize },
    /// Fused per-row softmax cross-entropy: `z: [r,c]`, integer labels,
    /// output `[r]`. Saves the softmax probabilities for the backward pass,
    /// which is the closed form `probs − onehot(label)` scaled by the
    /// incoming row gradient.
    CeRows {
        z: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// A define-by-run Wengert list. Not `Send`/shareable by design: a tape and
/// all its [`Var`]s live on one thread.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    // !Send / !Sync: gradient buffers are mutated without synchronization.
    _not_send: std::marker::PhantomData<*const ()>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            _not_send: std::marker::PhantomData,
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            shape,
            data,
            grad: None,
            requires_grad,
        });
        Var {
            tape_id: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape_id != self.id {
            return Err(Error::contract(
                "variable was produced by a different tape".to_string(),
            ));
        }
        if v.index >= self.nodes.len() {
            return Err(Error::contract(format!(
                "variable index {} out of range for this tape",
                v.index
            )));
        }
        Ok(v.index)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        Ok(&self.nodes[self.check(v)?])
    }

    // ── Leaves ──

    /// Records a leaf tensor. `requires_grad` leaves receive gradients on
    /// [`Tape::backward`]. Leaf data must be finite.
    pub fn leaf(&mut self, data: &[f64], shape: &[usize], requires_grad: bool) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "leaf shape {:?} implies {} elements but {} were provided",
                shape,
                numel,
                data.len()
            )));
        }
        ensure_finite("leaf", data)?;
        Ok(self.push(Op::Leaf, shape.to_vec(), data.to_vec(), requires_grad))
    }

    /// Records a [`Tensor`] as a leaf, honoring its `requires_grad` flag.
    pub fn tensor_leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(&t.data, &t.shape, t.requires_grad)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, data: &[f64], shape: &[usize]) -> Result<Var> {
        self.leaf(data, shape, false)
    }

    /// Records a non-differentiable scalar leaf of shape `[1]`.
    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.leaf(&[value], &[1], false)
    }

    // ── Accessors ──

    pub fn value(&self, v: Var) -> Result<&[f64]> {
        Ok(&self.node(v)?.data)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(&self.node(v)?.shape)
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Result<&[f64]> {
        let node = self.node(v)?;
        node.grad.as_deref().ok_or_else(|| {
            Error::contract(
                "no gradient available: either backward was not run or the \
                 variable does not require grad"
                    .to_string(),
            )
        })
    }

    /// Copies the value of `v` into a fresh [`Tensor`] (gradient included
    /// when present).
    pub fn to_tensor(&self, v: Var) -> Result<Tensor> {
        let node = self.node(v)?;
        Ok(Tensor {
            shape: node.shape.clone(),
            data: node.data.clone(),
            requires_grad: node.requires_grad,
            grad: node.grad.clone(),
        })
    }

    /// Writes the gradient of `v` into `t.grad`, checking shapes.
    pub fn export_grad(&self, v: Var, t: &mut Tensor) -> Result<()> {
        let node = self.node(v)?;
        if node.shape != t.shape {
            return Err(Error::ShapeMismatch {
                op: "export_grad",
                left: node.shape.clone(),
                right: t.shape.clone(),
            });
        }
        match &node.grad {
            Some(g) => {
                t.grad = Some(g.clone());
                Ok(())
            }
            None => Err(Error::contract("export_grad: no gradient on this variable")),
        }
    }

    // ── Operations ──

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let node = self.node(v)?;
        match node.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::ShapeMismatch {
                op,
                left: other.to_vec(),
                right: vec![],
            }),
        }
    }

    /// `a @ b` for `a: [m,k]`, `b: [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let ai = a.index;
        let bi = b.index;
        let mut out = vec![0.0; m * n];
        matmul_acc(&self.nodes[ai].data, &self.nodes[bi].data, m, k, n, &mut out);
        ensure_finite("matmul", &out)?;
        let req = self.nodes[ai].requires_grad || self.nodes[bi].requires_grad;
        Ok(self.push(Op::Matmul { a: ai, b: bi }, vec![m, n], out, req))
    }

    /// `a @ bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_bt")?;
        let (n, k2) = self.dims2(b, "matmul_bt")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_bt",
                left: vec![m, k],
                right: vec![n, k2],
            });
        }
        let ai = a.index;
        let bi = b.index;
        let mut out = vec![0.0; m * n];
        matmul_bt_acc(&self.nodes[ai].data, &self.nodes[bi].data, m, k, n, &mut out);
        ensure_finite("matmul_bt", &out)?;
        let req = self.nodes[ai].requires_grad || self.nodes[bi].requires_grad;
        Ok(self.push(Op::MatmulBt { a: ai, b: bi }, vec![m, n], out, req))
    }

    /// Adds a bias row-vector `bias: [c]` to every row of `x: [r,c]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "add_bias")?;
        let bnode = self.node(bias)?;
        if bnode.shape != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: vec![r, c],
                right: bnode.shape.clone(),
            });
        }
        let xi = x.index;
        let bi = bias.index;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let xrow = &self.nodes[xi].data[i * c..(i + 1) * c];
            for (j, &xv) in xrow.iter().enumerate() {
                out.push(xv + self.nodes[bi].data[j]);
            }
        }
        ensure_finite("add_bias", &out)?;
        let req = self.nodes[xi].requires_grad || self.nodes[bi].requires_grad;
        Ok(self.push(Op::AddBias { x: xi, bias: bi }, vec![r, c], out, req))
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        apply: impl Fn(f64, f64) -> f64,
        make_equal: impl Fn(usize, usize) -> Op,
        make_scalar_l: Option<Op>,
        make_scalar_r: Option<Op>,
    ) -> Result<Var> {
        let ai = self.check(a)?;
        let bi = self.check(b)?;
        let (ashape, bshape) = (self.nodes[ai].shape.clone(), self.nodes[bi].shape.clone());
        let req = self.nodes[ai].requires_grad || self.nodes[bi].requires_grad;
        let (op, shape, out) = if ashape == bshape {
            let out: Vec<f64> = self.nodes[ai]
                .data
                .iter()
                .zip(&self.nodes[bi].data)
                .map(|(&x, &y)| apply(x, y))
                .collect();
            (make_equal(ai, bi), ashape, out)
        } else if self.nodes[bi].data.len() == 1 {
            let s = self.nodes[bi].data[0];
            let out: Vec<f64> = self.nodes[ai].data.iter().map(|&x| apply(x, s)).collect();
            match make_scalar_r {
                Some(op) => (op, ashape, out),
                None => unreachable!(),
            }
        } else if self.nodes[ai].data.len() == 1 {
            let s = self.nodes[ai].data[0];
            let out: Vec<f64> = self.nodes[bi].data.iter().map(|&y| apply(s, y)).collect();
            match make_scalar_l {
                Some(op) => (op, bshape, out),
                None => unreachable!(),
            }
        } else {
            return Err(Error::ShapeMismatch {
                op: op_name,
                left: ashape,
                right: bshape,
            });
        };
        ensure_finite(op_name, &out)?;
        Ok(self.push(op, shape, out, req))
    }

    /// Elementwise `a + b`. Shapes must match exactly, except that either
    /// side may be a single-element tensor broadcast over the other.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.binary(
            "add",
            a,
            b,
            |x, y| x + y,
            |a, b| Op::Add { a, b },
            Some(Op::AddScalar { t: bi, s: ai }),
            Some(Op::AddScalar { t: ai, s: bi }),
        )
    }

    /// Elementwise `a − b` with the same broadcasting rule as [`Tape::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.binary(
            "sub",
            a,
            b,
            |x, y| x - y,
            |a, b| Op::Sub { a, b },
            Some(Op::SubScalarL { s: ai, t: bi }),
            Some(Op::SubScalarR { t: ai, s: bi }),
        )
    }

    /// Elementwise `a ⊙ b` with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.binary(
            "mul",
            a,
            b,
            |x, y| x * y,
            |a, b| Op::Mul { a, b },
            Some(Op::MulScalar { t: bi, s: ai }),
            Some(Op::MulScalar { t: ai, s: bi }),
        )
    }

    /// Multiplies by a host constant (not recorded as a tape leaf).
    pub fn scale(&mut self, t: Var, c: f64) -> Result<Var> {
        let ti = self.check(t)?;
        if !c.is_finite() {
            return Err(Error::NonFinite {
                op: "scale",
                index: 0,
                value: c,
            });
        }
        let out: Vec<f64> = self.nodes[ti].data.iter().map(|&x| x * c).collect();
        ensure_finite("scale", &out)?;
        let shape = self.nodes[ti].shape.clone();
        let req = self.nodes[ti].requires_grad;
        Ok(self.push(Op::Scale { t: ti, c }, shape, out, req))
    }

    fn unary(
        &mut self,
        op_name: &'static str,
        t: Var,
        apply: impl Fn(f64) -> f64,
        make: impl Fn(usize) -> Op,
    ) -> Result<Var> {
        let ti = self.check(t)?;
        let out: Vec<f64> = self.nodes[ti].data.iter().map(|&x| apply(x)).collect();
        ensure_finite(op_name, &out)?;
        let shape = self.nodes[ti].shape.clone();
        let req = self.nodes[ti].requires_grad;
        Ok(self.push(make(ti), shape, out, req))
    }

    /// `max(0, x)`, with derivative 0 at exactly 0.
    pub fn relu(&mut self, t: Var) -> Result<Var> {
        self.unary("relu", t, |x| if x > 0.0 { x } else { 0.0 }, |t| Op::Relu { t })
    }

    pub fn tanh(&mut self, t: Var) -> Result<Var> {
        self.unary("tanh", t, f64::tanh, |t| Op::Tanh { t })
    }

    /// `exp(x)`. Overflow to infinity is reported as a non-finite error.
    pub fn exp(&mut self, t: Var) -> Result<Var> {
        self.unary("exp", t, f64::exp, |t| Op::Exp { t })
    }

    /// `ln(x)`. Inputs ≤ 0 are domain errors identifying the offending index.
    pub fn log(&mut self, t: Var) -> Result<Var> {
        let ti = self.check(t)?;
        for (index, &value) in self.nodes[ti].data.iter().enumerate() {
            if value <= 0.0 {
                return Err(Error::Domain {
                    op: "log",
                    index,
                    value,
                });
            }
        }
        self.unary("log", t, f64::ln, |t| Op::Log { t })
    }

    /// Sum of all elements, yielding a `[1]` scalar.
    pub fn sum(&mut self, t: Var) -> Result<Var> {
        let ti = self.check(t)?;
        let s: f64 = self.nodes[ti].data.iter().sum();
        ensure_finite("sum", &[s])?;
        let req = self.nodes[ti].requires_grad;
        Ok(self.push(Op::Sum { t: ti }, vec![1], vec![s], req))
    }

    /// Per-row sums: `[r,c] → [r]`.
    pub fn row_sum(&mut self, t: Var) -> Result<Var> {
        let (r, c) = self.dims2(t, "row_sum")?;
        let ti = t.index;
        let out: Vec<f64> = (0..r)
            .map(|i| self.nodes[ti].data[i * c..(i + 1) * c].iter().sum())
            .collect();
        ensure_finite("row_sum", &out)?;
        let req = self.nodes[ti].requires_grad;
        Ok(self.push(Op::RowSum { t: ti }, vec![r], out, req))
    }

    /// Per-row softmax cross-entropy against integer labels:
    /// `out[i] = lse(z_i) − z_i[label_i] ≥ 0`, computed in max-shifted form.
    ///
    /// The backward pass uses the closed form `(softmax(z_i) − onehot_i)`
    /// scaled by the incoming row gradient, with the softmax captured at
    /// forward time via [`softmax`].
    pub fn cross_entropy_rows(&mut self, z: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(z, "cross_entropy_rows")?;
        if labels.len() != r {
            return Err(Error::contract(format!(
                "cross_entropy_rows: {} labels for {} rows",
                labels.len(),
                r
            )));
        }
        if c < 2 {
            return Err(Error::contract(
                "cross_entropy_rows: need at least 2 classes".to_string(),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::contract(format!(
                "cross_entropy_rows: label {} out of range for {} classes",
                bad, c
            )));
        }
        let zi = z.index;
        let mut out = Vec::with_capacity(r);
        let mut probs = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &self.nodes[zi].data[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            out.push(lse - row[labels[i]]);
            for &v in row {
                probs.push((v - lse).exp());
            }
        }
        ensure_finite("cross_entropy_rows", &out)?;
        let req = self.nodes[zi].requires_grad;
        Ok(self.push(
            Op::CeRows {
                z: zi,
                labels: labels.to_vec(),
                probs,
            },
            vec![r],
            out,
            req,
        ))
    }

    // ── Backward ──

    /// Reverse sweep from a scalar root. Resets all gradient buffers, seeds
    /// the root with 1, and accumulates into every `requires_grad` ancestor.
    /// Multiple uses of a variable accumulate additively. Calling backward
    /// again restarts from scratch (gradients do not leak across calls).
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let ridx = self.check(root)?;
        if self.nodes[ridx].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[ridx].shape
            )));
        }
        if !self.nodes[ridx].requires_grad {
            return Err(Error::contract(
                "backward root does not depend on any requires_grad leaf".to_string(),
            ));
        }
        for node in &mut self.nodes {
            node.grad = if node.requires_grad {
                Some(vec![0.0; node.data.len()])
            } else {
                None
            };
        }
        self.nodes[ridx].grad.as_mut().expect("root grad")[0] = 1.0;

        fn add_into(pg: &mut [f64], contrib: &[f64]) {
            for (p, v) in pg.iter_mut().zip(contrib) {
                *p += v;
            }
        }

        for i in (0..=ridx).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            // Parents always precede the node in the arena, so splitting at
            // `i` lets us read the node while mutating parent gradients.
            let (parents, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let g: &[f64] = node.grad.as_deref().expect("grad allocated");

            match &node.op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let k = parents[*a].shape[1];
                    if parents[*a].requires_grad {
                        let mut ga = vec![0.0; m * k];
                        matmul_bt_acc(g, &parents[*b].data, m, n, k, &mut ga);
                        if let Some(pg) = parents[*a].grad.as_mut() {
                            add_into(pg, &ga);
                        }
                    }
                    if parents[*b].requires_grad {
                        let mut gb = vec![0.0; k * n];
                        matmul_at_acc(&parents[*a].data, g, m, k, n, &mut gb);
                        if let Some(pg) = parents[*b].grad.as_mut() {
                            add_into(pg, &gb);
                        }
                    }
                }
                Op::MatmulBt { a, b } => {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let k = parents[*a].shape[1];
                    if parents[*a].requires_grad {
                        let mut ga = vec![0.0; m * k];
                        matmul_acc(g, &parents[*b].data, m, n, k, &mut ga);
                        if let Some(pg) = parents[*a].grad.as_mut() {
                            add_into(pg, &ga);
                        }
                    }
                    if parents[*b].requires_grad {
                        let mut gb = vec![0.0; n * k];
                        matmul_at_acc(g, &parents[*a].data, m, n, k, &mut gb);
                        if let Some(pg) = parents[*b].grad.as_mut() {
                            add_into(pg, &gb);
                        }
                    }
                }
                Op::AddBias { x, bias } => {
                    let (r, c) = (node.shape[0], node.shape[1]);
                    if let Some(pg) = parents[*x].grad.as_mut() {
                        add_into(pg, g);
                    }
                    if let Some(pg) = parents[*bias].grad.as_mut() {
                        for i in 0..r {
                            add_into(pg, &g[i * c..(i + 1) * c]);
                        }
                    }
                }
                Op::Add { a, b } => {
                    if let Some(pg) = parents[*a].grad.as_mut() {
                        add_into(pg, g);
                    }
                    if let Some(pg) = parents[*b].grad.as_mut() {
                        add_into(pg, g);
                    }
                }
                Op::Sub { a, b } => {
                    if let Some(pg) = parents[*a].grad.as_mut() {
                        add_into(pg, g);
                    }
                    if let Some(pg) = parents[*b].grad.as_mut() {
                        for (p, v) in pg.iter_mut().zip(g) {
                            *p -= v;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    // Contributions are materialized first because `a` and
                    // `b` may alias (x ⊙ x).
                    if parents[*a].requires_grad {
                        let contrib: Vec<f64> = g
                            .iter()
                            .zip(&parents[*b].data)
                            .map(|(&gv, &bv)| gv * bv)
                            .collect();
                        if let Some(pg) = parents[*a].grad.as_mut() {
                            add_into(pg, &contrib);
                        }
                    }
                    if parents[*b].requires_grad {
                        let contrib: Vec<f64> = g
                            .iter()
                            .zip(&parents[*a].data)
                            .map(|(&gv, &av)| gv * av)
                            .collect();
                        if let Some(pg) = parents[*b].grad.as_mut() {
                            add_into(pg, &contrib);
                        }
                    }
                }
                Op::AddScalar { t, s } => {
                    if let Some(pg) = parents[*t].grad.as_mut() {
                        add_into(pg, g);
                    }
                    if let Some(pg) = parents[*s].grad.as_mut() {
                        pg[0] += g.iter().sum::<f64>();
                    }
                }
                Op::SubScalarL { s, t } => {
                    if let Some(pg) = parents[*s].grad.as_mut() {
                        pg[0] += g.iter().sum::<f64>();
                    }
                    if let Some(pg) = parents[*t].grad.as_mut() {
                        for (p, v) in pg.iter_mut().zip(g) {
                            *p -= v;
                        }
                    }
                }
                Op::SubScalarR { t, s } => {
                    if let Some(pg) = parents[*t].grad.as_mut() {
                        add_into(pg, g);
                    }
                    if let Some(pg) = parents[*s].grad.as_mut() {
                        pg[0] -= g.iter().sum::<f64>();
                    }
                }
                Op::MulScalar { t, s } => {
                    let sval = parents[*s].data[0];
                    if parents[*t].requires_grad {
                        let contrib: Vec<f64> = g.iter().map(|&gv| gv * sval).collect();
                        if let Some(pg) = parents[*t].grad.as_mut() {
                            add_into(pg, &contrib);
                        }
                    }
                    if parents[*s].requires_grad {
                        let dot: f64 = g
                            .iter()
                            .zip(&parents[*t].data)
                            .map(|(&gv, &tv)| gv * tv)
                            .sum();
                        if let Some(pg) = parents[*s].grad.as_mut() {
                            pg[0] += dot;
                        }
                    }
                }
                Op::Scale { t, c } => {
                    let c = *c;
                    if let Some(pg) = parents[*t].grad.as_mut() {
                        for (p, v) in pg.iter_mut().zip(g) {
                            *p += v * c;
                        }
                    }
                }
                Op::Relu { t } => {
                    let contrib: Vec<f64> = g
                        .iter()
                        .zip(&parents[*t].data)
                        .map(|(&gv, &tv)| if tv > 0.0 { gv } else { 0.0 })
                        .collect();
                    if let Some(pg) = parents[*t].grad.as_mut() {
                        add_into(pg, &contrib);
                    }
                }
                Op::Tanh { t } => {
                    let ydata = &node.data;
                    if let Some(pg) = parents[*t].grad.as_mut() {
                        for ((p, &gv), &yv) in pg.iter_mut().zip(g).zip(ydata) {
                            *p += gv * (1.0 - yv * yv);
                        }
                    }
                }
                Op::Exp { t } => {
                    let ydata = &node.data;
                    if let Some(pg) = parents[*t].grad.as_mut() {
                        for ((p, &gv), &yv) in pg.iter_mut().zip(g).zip(ydata) {
                            *p += gv * yv;
                        }
                    }
                }
                Op::Log { t } => {
                    let contrib: Vec<f64> = g
                        .iter()
                        .zip(&parents[*t].data)
                        .map(|(&gv, &tv)| gv / tv)
                        .collect();
                    if let Some(pg) = parents[*t].grad.as_mut() {
                        add_into(pg, &contrib);
                    }
                }
                Op::Sum { t } => {
                    let gv = g[0];
                    if let Some(pg) = parents[*t].grad.as_mut() {
                        for p in pg.iter_mut() {
                            *p += gv;
                        }
                    }
                }
                Op::RowSum { t } => {
                    let c = parents[*t].shape[1];
                    if let Some(pg) = parents[*t].grad.as_mut() {
                        for (i, &gv) in g.iter().enumerate() {
                            for p in pg[i * c..(i + 1) * c].iter_mut() {
                                *p += gv;
                            }
                        }
                    }
                }
                Op::CeRows { z, labels, probs } => {
                    let c = parents[*z].shape[1];
                    if let Some(pg) = parents[*z].grad.as_mut() {
                        for (i, &gv) in g.iter().enumerate() {
                            let prow = &probs[i * c..(i + 1) * c];
                            let prowg = &mut pg[i * c..(i + 1) * c];
                            for (j, (p, &pv)) in prowg.iter_mut().zip(prow).enumerate() {
                                let y = if j == labels[i] { 1.0 } else { 0.0 };
                                *p += gv * (pv - y);
                            }
                        }
                    }
                }
            }
        }

        for node in &self.nodes {
            if let Some(g) = &node.grad {
                ensure_finite("backward", g)?;
            }
        }
        Ok(())
    }
}

// ── Tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_returns_input() {
        let mut tape = Tape::new();
        let x = tape.constant(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let eye = tape
            .constant(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3])
            .unwrap();
        let y = tape.matmul(x, eye).unwrap();
        assert_eq!(tape.value(y).unwrap(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_dot_product() {
        // [1,2] @ [3,4]ᵀ = 11, as a 1×2 by 2×1 product.
        let mut tape = Tape::new();
        let a = tape.constant(&[1.0, 2.0], &[1, 2]).unwrap();
        let b = tape.constant(&[3.0, 4.0], &[2, 1]).unwrap();
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).unwrap(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(&[1.0, 2.0], &[1, 2]).unwrap();
        let b = tape.constant(&[1.0, 2.0, 3.0], &[3, 1]).unwrap();
        match tape.matmul(a, b) {
            Err(Error::ShapeMismatch { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("expected shape mismatch, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn matmul_bt_matches_explicit_transpose() {
        let mut tape = Tape::new();
        let a = tape.constant(&[1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let w = tape.constant(&[5.0, 6.0, 7.0, 8.0, 9.0, 10.0], &[3, 2]).unwrap();
        let y = tape.matmul_bt(a, w).unwrap();
        // wᵀ = [[5,7,9],[6,8,10]]; a @ wᵀ computed by hand.
        let wt = tape
            .constant(&[5.0, 7.0, 9.0, 6.0, 8.0, 10.0], &[2, 3])
            .unwrap();
        let y2 = tape.matmul(a, wt).unwrap();
        assert_eq!(tape.value(y).unwrap(), tape.value(y2).unwrap());
    }

    #[test]
    fn relu_clamps_and_keeps() {
        let mut tape = Tape::new();
        let x = tape.constant(&[-1.0, 0.0, 2.5], &[1, 3]).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).unwrap(), &[0.0, 0.0, 2.5]);
    }

    #[test]
    fn log_derivative_at_two() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2.0], &[1], true).unwrap();
        let y = tape.log(x).unwrap();
        tape.backward(y).unwrap();
        assert!((tape.grad(x).unwrap()[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn log_of_nonpositive_names_the_offending_index() {
        let mut tape = Tape::new();
        let x = tape.constant(&[1.0, -3.0], &[1, 2]).unwrap();
        match tape.log(x) {
            Err(Error::Domain { op, index, value }) => {
                assert_eq!(op, "log");
                assert_eq!(index, 1);
                assert_eq!(value, -3.0);
            }
            other => panic!("expected domain error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn backward_on_identity_chain_gives_unit_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[3.5], &[1], true).unwrap();
        let y = tape.scale(x, 1.0).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        // d/dx Σ x² = 2x.
        let mut tape = Tape::new();
        let x = tape.leaf(&[1.0, 2.0, 3.0], &[1, 3], true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn reused_variable_accumulates_gradient() {
        // y = x + x ⇒ dy/dx = 2.
        let mut tape = Tape::new();
        let x = tape.leaf(&[5.0], &[1], true).unwrap();
        let y = tape.add(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn scalar_broadcast_add_and_mul() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[1.0, 2.0, 3.0], &[1, 3], true).unwrap();
        let c = tape.scalar(10.0).unwrap();
        let y = tape.add(x, c).unwrap();
        assert_eq!(tape.value(y).unwrap(), &[11.0, 12.0, 13.0]);
        let z = tape.mul(y, c).unwrap();
        let s = tape.sum(z).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[10.0, 10.0, 10.0]);
    }

    #[test]
    fn mismatched_nonscalar_shapes_error() {
        let mut tape = Tape::new();
        let a = tape.constant(&[1.0, 2.0], &[1, 2]).unwrap();
        let b = tape.constant(&[1.0, 2.0, 3.0], &[1, 3]).unwrap();
        assert!(matches!(
            tape.add(a, b),
            Err(Error::ShapeMismatch { op: "add", .. })
        ));
    }

    #[test]
    fn backward_root_must_be_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[1.0, 2.0], &[1, 2], true).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn foreign_variable_is_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let x = t1.leaf(&[1.0], &[1], true).unwrap();
        assert!(matches!(t2.scale(x, 2.0), Err(Error::Contract(_))));
    }

    #[test]
    fn exp_overflow_is_caught() {
        let mut tape = Tape::new();
        let x = tape.constant(&[1000.0], &[1]).unwrap();
        assert!(matches!(
            tape.exp(x),
            Err(Error::NonFinite { op: "exp", .. })
        ));
    }

    #[test]
    fn nan_leaf_is_rejected() {
        let mut tape = Tape::new();
        assert!(matches!(
            tape.leaf(&[f64::NAN], &[1], false),
            Err(Error::NonFinite { op: "leaf", .. })
        ));
    }

    #[test]
    fn repeated_backward_does_not_leak_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2.0], &[1], true).unwrap();
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        let g1 = tape.grad(x).unwrap().to_vec();
        tape.backward(y).unwrap();
        let g2 = tape.grad(x).unwrap().to_vec();
        assert_eq!(g1, g2);
        assert_eq!(g1, vec![4.0]);
    }

    #[test]
    fn cross_entropy_rows_values_and_closed_form_gradient() {
        let mut tape = Tape::new();
        let z = tape.leaf(&[0.0, 0.0, 1.0, -1.0], &[2, 2], true).unwrap();
        let ce = tape.cross_entropy_rows(z, &[0, 0]).unwrap();
        let v = tape.value(ce).unwrap();
        assert!((v[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((v[1] - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-15);
        let s = tape.sum(ce).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(z).unwrap();
        // Row 0: softmax(0,0) − (1,0) = (−0.5, 0.5).
        assert!((g[0] + 0.5).abs() < 1e-15);
        assert!((g[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_rows_is_nonnegative_even_for_extreme_logits() {
        let mut tape = Tape::new();
        let z = tape.constant(&[1000.0, 0.0], &[1, 2]).unwrap();
        let ce = tape.cross_entropy_rows(z, &[0]).unwrap();
        let v = tape.value(ce).unwrap()[0];
        assert!(v >= 0.0 && v < 1e-12, "ce({{1000,0}}, 0) = {v}");
    }

    #[test]
    fn forward_and_backward_are_bit_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape
                .leaf(&[0.3, -0.7, 0.11, 0.93, -0.25, 0.5], &[2, 3], true)
                .unwrap();
            let w = tape
                .leaf(&[0.1, -0.2, 0.3, 0.7, 0.01, -0.5], &[2, 3], true)
                .unwrap();
            let h = tape.matmul_bt(x, w).unwrap();
            let r = tape.relu(h).unwrap();
            let s = tape.sum(r).unwrap();
            tape.backward(s).unwrap();
            (
                tape.value(s).unwrap().to_vec(),
                tape.grad(x).unwrap().to_vec(),
                tape.grad(w).unwrap().to_vec(),
            )
        };
        let (v1, gx1, gw1) = run();
        let (v2, gx2, gw2) = run();
        assert_eq!(v1.iter().map(|f| f.to_bits()).collect::<Vec<_>>(),
                   v2.iter().map(|f| f.to_bits()).collect::<Vec<_>>());
        assert_eq!(gx1.iter().map(|f| f.to_bits()).collect::<Vec<_>>(),
                   gx2.iter().map(|f| f.to_bits()).collect::<Vec<_>>());
        assert_eq!(gw1.iter().map(|f| f.to_bits()).collect::<Vec<_>>(),
                   gw2.iter().map(|f| f.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn sign_convention() {
        assert_eq!(sign(3.2), 1.0);
        assert_eq!(sign(-0.001), -1.0);
        assert_eq!(sign(0.0), 0.0);
        assert_eq!(sign(-0.0), 0.0);
    }

    #[test]
    fn tensor_shape_data_consistency_enforced() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let t = tensor2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn softmax_sums_to_one_and_is_stable() {
        let p = softmax(&[1000.0, 999.0, 0.0]);
        let s: f64 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
