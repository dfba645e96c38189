//! Reverse-mode autodiff over a flat operation tape.
//!
//! A [`Tape`] owns every tensor produced during one forward pass. Operations
//! append nodes and return lightweight [`Var`] handles (indices into the
//! arena); [`Tape::backward`] replays the tape in reverse, accumulating
//! gradients into every node that transitively depends on a
//! `requires_grad` leaf. The intended lifecycle is one tape per training
//! step: build, `backward`, read leaf gradients, drop.
//!
//! Operation coverage is exactly what the storyboard model needs — batched
//! matmul, axis softmax, size-1 broadcasting elementwise arithmetic, clip /
//! log / sqrt / silu, sum and mean reductions, and the structural ops
//! (reshape, permute, concat, slice, masked fill). Gradients for every op are
//! verified against central finite differences in `gradcheck`.

use crate::error::{Error, Result};
use crate::tensor::{for_each_lane, Scalar, Tensor};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    Matmul { a: usize, b: usize },
    Softmax { x: usize, axis: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Scale { x: usize, c: S },
    AddScalar { x: usize },
    Log { x: usize },
    Sqrt { x: usize },
    Clip { x: usize, lo: S, hi: S },
    Silu { x: usize },
    Abs { x: usize },
    Sum { x: usize, axis: Option<usize> },
    Mean { x: usize, axis: Option<usize> },
    Reshape { x: usize },
    Permute { x: usize, perm: Vec<usize> },
    Concat { xs: Vec<usize>, axis: usize },
    Slice { x: usize, ranges: Vec<(usize, usize)> },
    MaskedFill { x: usize, mask: Tensor<S> },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
    requires_grad: bool,
    op: Op<S>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an input tensor. Gradients are accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<S>, requires_grad: bool) -> Var {
        self.push(t, requires_grad, Op::Leaf)
    }

    /// A leaf that never receives gradients (masks, one-hot selectors,
    /// positional tables, data).
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated for `v`, if any. `None` either means `v` does not
    /// require gradients or the loss did not depend on it.
    pub fn grad_ref(&self, v: Var) -> Option<&Tensor<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient for `v`, materializing zeros when the loss did not touch it.
    pub fn grad(&self, v: Var) -> Tensor<S> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape().to_vec()),
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ── elementwise binary ──────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = zip_broadcast("add", self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(v, self.rg(&[a.0, b.0]), Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = zip_broadcast("sub", self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(v, self.rg(&[a.0, b.0]), Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = zip_broadcast("mul", self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(v, self.rg(&[a.0, b.0]), Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = zip_broadcast("div", self.value(a), self.value(b), |x, y| x / y)?;
        Ok(self.push(v, self.rg(&[a.0, b.0]), Op::Div { a: a.0, b: b.0 }))
    }

    // ── scalar-constant ops ─────────────────────────────────────────────

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let v = self.value(x).map(|e| e * c);
        let rg = self.nodes[x.0].requires_grad;
        self.push(v, rg, Op::Scale { x: x.0, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Var {
        let v = self.value(x).map(|e| e + c);
        let rg = self.nodes[x.0].requires_grad;
        self.push(v, rg, Op::AddScalar { x: x.0 })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, S::from_f64(-1.0))
    }

    // ── elementwise unary ───────────────────────────────────────────────

    /// Natural log. Errors on any non-positive element; clip first.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|v| **v <= S::zero()) {
            return Err(Error::Domain {
                op: "log",
                reason: format!("non-positive input {bad} (clip before log)"),
            });
        }
        let v = self.value(x).map(|e| e.ln());
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(v, rg, Op::Log { x: x.0 }))
    }

    /// Square root. Errors on negative elements; gradient at 0 is unbounded,
    /// so callers add an epsilon under the root.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|v| **v < S::zero()) {
            return Err(Error::Domain {
                op: "sqrt",
                reason: format!("negative input {bad}"),
            });
        }
        let v = self.value(x).map(|e| e.sqrt());
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(v, rg, Op::Sqrt { x: x.0 }))
    }

    /// Clamp into `[lo, hi]`; gradient is zero outside that interval.
    pub fn clip(&mut self, x: Var, lo: S, hi: S) -> Var {
        let v = self.value(x).map(|e| if e < lo {
            lo
        } else if e > hi {
            hi
        } else {
            e
        });
        let rg = self.nodes[x.0].requires_grad;
        self.push(v, rg, Op::Clip { x: x.0, lo, hi })
    }

    /// SiLU activation `x · σ(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * sigmoid(e));
        let rg = self.nodes[x.0].requires_grad;
        self.push(v, rg, Op::Silu { x: x.0 })
    }

    /// Absolute value; subgradient 0 at exactly 0.
    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| if e < S::zero() { -e } else { e });
        let rg = self.nodes[x.0].requires_grad;
        self.push(v, rg, Op::Abs { x: x.0 })
    }

    // ── matmul and softmax ──────────────────────────────────────────────

    /// Matrix product over the last two axes. Leading (batch) axes must be
    /// equal on both operands, except that a rank-2 operand broadcasts
    /// against any batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul_vals(self.value(a), self.value(b))?;
        Ok(self.push(v, self.rg(&[a.0, b.0]), Op::Matmul { a: a.0, b: b.0 }))
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis("softmax", self.value(x).shape(), axis)?;
        let v = softmax_vals(self.value(x), axis);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(v, rg, Op::Softmax { x: x.0, axis }))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self
            .value(x)
            .data()
            .iter()
            .fold(S::zero(), |acc, &v| acc + v);
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(s), rg, Op::Sum { x: x.0, axis: None })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self
            .value(x)
            .data()
            .iter()
            .fold(S::zero(), |acc, &v| acc + v)
            / S::from_f64(n as f64);
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(s), rg, Op::Mean { x: x.0, axis: None })
    }

    /// Sum along one axis. The axis is kept with size 1 (`keepdim`) so the
    /// result broadcasts back against the input.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis("sum_axis", self.value(x).shape(), axis)?;
        let v = reduce_axis_vals(self.value(x), axis, false);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            v,
            rg,
            Op::Sum {
                x: x.0,
                axis: Some(axis),
            },
        ))
    }

    /// Mean along one axis, keeping it with size 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis("mean_axis", self.value(x).shape(), axis)?;
        let v = reduce_axis_vals(self.value(x), axis, true);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            v,
            rg,
            Op::Mean {
                x: x.0,
                axis: Some(axis),
            },
        ))
    }

    // ── structural ──────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(x).reshaped(shape)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(v, rg, Op::Reshape { x: x.0 }))
    }

    /// Reorder axes; `perm[i]` names the input axis that becomes output
    /// axis `i`.
    pub fn permute(&mut self, x: Var, perm: impl Into<Vec<usize>>) -> Result<Var> {
        let perm = perm.into();
        let v = permute_vals(self.value(x), &perm)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(v, rg, Op::Permute { x: x.0, perm }))
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let vals: Vec<&Tensor<S>> = xs.iter().map(|v| self.value(*v)).collect();
        let v = concat_vals(&vals, axis)?;
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(v, rg, Op::Concat { xs: ids, axis }))
    }

    /// Contiguous sub-block: one `(start, end)` half-open range per axis.
    pub fn slice(&mut self, x: Var, ranges: &[(usize, usize)]) -> Result<Var> {
        let v = slice_vals(self.value(x), ranges)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            v,
            rg,
            Op::Slice {
                x: x.0,
                ranges: ranges.to_vec(),
            },
        ))
    }

    /// Replace elements where `mask` ≥ 0.5 with the constant `v` (typically
    /// the −1e9 attention sentinel). The mask itself is never differentiated.
    pub fn masked_fill(&mut self, x: Var, mask: &Tensor<S>, v: S) -> Result<Var> {
        if mask.shape() != self.value(x).shape() {
            return Err(Error::ShapeMismatch {
                op: "masked_fill",
                lhs: self.value(x).shape().to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        let half = S::from_f64(0.5);
        let val: Vec<S> = self
            .value(x)
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&e, &m)| if m >= half { v } else { e })
            .collect();
        let val = Tensor::new(self.value(x).shape().to_vec(), val)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            val,
            rg,
            Op::MaskedFill {
                x: x.0,
                mask: mask.clone(),
            },
        ))
    }

    // ── composites ──────────────────────────────────────────────────────

    /// Mean squared error between two same-shape tensors (scalar result).
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    /// Sum a non-empty list of same-shape vars.
    pub fn sum_vars(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::Contract("sum_vars of empty list".into()))?;
        let mut acc = first;
        for &x in rest {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Errors if the loss is not shape
    /// `[1]`, does not depend on any `requires_grad` leaf, or if backward
    /// already ran on this tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape; build a fresh tape per step".into(),
            ));
        }
        let lid = loss.0;
        if self.nodes[lid].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[lid].value.shape()
            )));
        }
        if !self.nodes[lid].requires_grad {
            return Err(Error::Contract(
                "loss does not depend on any requires_grad leaf".into(),
            ));
        }
        self.backward_done = true;
        self.nodes[lid].grad = Some(Tensor::full(vec![1], S::one()));

        for id in (0..=lid).rev() {
            if !self.nodes[id].requires_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            let g = self.nodes[id].grad.clone().unwrap();
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add { a, b } => {
                    self.accum(a, reduce_to_shape(&g, self.nodes[a].value.shape()));
                    self.accum(b, reduce_to_shape(&g, self.nodes[b].value.shape()));
                }
                Op::Sub { a, b } => {
                    self.accum(a, reduce_to_shape(&g, self.nodes[a].value.shape()));
                    let neg = g.map(|v| S::zero() - v);
                    self.accum(b, reduce_to_shape(&neg, self.nodes[b].value.shape()));
                }
                Op::Mul { a, b } => {
                    let da = zip_broadcast("mul-bwd", &g, &self.nodes[b].value, |g, b| g * b)?;
                    let db = zip_broadcast("mul-bwd", &g, &self.nodes[a].value, |g, a| g * a)?;
                    self.accum(a, reduce_to_shape(&da, self.nodes[a].value.shape()));
                    self.accum(b, reduce_to_shape(&db, self.nodes[b].value.shape()));
                }
                Op::Div { a, b } => {
                    // y = a/b: dy/da = 1/b, dy/db = -a/b².
                    let da = zip_broadcast("div-bwd", &g, &self.nodes[b].value, |g, b| g / b)?;
                    let coeff = zip_broadcast(
                        "div-bwd",
                        &self.nodes[a].value,
                        &self.nodes[b].value,
                        |a, b| S::zero() - a / (b * b),
                    )?;
                    let db = zip_broadcast("div-bwd", &g, &coeff, |g, c| g * c)?;
                    self.accum(a, reduce_to_shape(&da, self.nodes[a].value.shape()));
                    self.accum(b, reduce_to_shape(&db, self.nodes[b].value.shape()));
                }
                Op::Scale { x, c } => {
                    self.accum(x, g.map(|v| v * c));
                }
                Op::AddScalar { x } => {
                    self.accum(x, g);
                }
                Op::Log { x } => {
                    let xv = &self.nodes[x].value;
                    let dx = zip_broadcast("log-bwd", &g, xv, |g, x| g / x)?;
                    self.accum(x, dx);
                }
                Op::Sqrt { x } => {
                    // dy/dx = 1/(2·sqrt(x)) = 1/(2y), reusing the stored output.
                    let y = self.nodes[id].value.clone();
                    let dx = zip_broadcast("sqrt-bwd", &g, &y, |g, y| {
                        g / (S::from_f64(2.0) * y)
                    })?;
                    self.accum(x, dx);
                }
                Op::Clip { x, lo, hi } => {
                    let xv = &self.nodes[x].value;
                    let dx = zip_broadcast("clip-bwd", &g, xv, |g, x| {
                        if x < lo || x > hi {
                            S::zero()
                        } else {
                            g
                        }
                    })?;
                    self.accum(x, dx);
                }
                Op::Silu { x } => {
                    let xv = &self.nodes[x].value;
                    let dx = zip_broadcast("silu-bwd", &g, xv, |g, x| {
                        let s = sigmoid(x);
                        g * (s * (S::one() + x * (S::one() - s)))
                    })?;
                    self.accum(x, dx);
                }
                Op::Abs { x } => {
                    let xv = &self.nodes[x].value;
                    let dx = zip_broadcast("abs-bwd", &g, xv, |g, x| {
                        if x < S::zero() {
                            -g
                        } else if x > S::zero() {
                            g
                        } else {
                            S::zero()
                        }
                    })?;
                    self.accum(x, dx);
                }
                Op::Matmul { a, b } => {
                    let av = self.nodes[a].value.clone();
                    let bv = self.nodes[b].value.clone();
                    // dA = g · Bᵀ, summed over batch when A was broadcast.
                    let da = matmul_vals(&g, &transpose_last(&bv))?;
                    self.accum(a, sum_leading_to(&da, av.shape()));
                    // dB = Aᵀ · g, summed over batch when B was broadcast.
                    let db = matmul_vals(&transpose_last(&av), &g)?;
                    self.accum(b, sum_leading_to(&db, bv.shape()));
                }
                Op::Softmax { x, axis } => {
                    // dx = y ⊙ (g − Σ g·y) per lane.
                    let y = self.nodes[id].value.clone();
                    let mut dx = Tensor::zeros(y.shape().to_vec());
                    let n = y.shape()[axis];
                    for_each_lane(y.shape(), axis, |base, stride| {
                        let mut dot = S::zero();
                        for k in 0..n {
                            let o = base + k * stride;
                            dot = dot + g.data()[o] * y.data()[o];
                        }
                        for k in 0..n {
                            let o = base + k * stride;
                            dx.data_mut()[o] = y.data()[o] * (g.data()[o] - dot);
                        }
                    });
                    self.accum(x, dx);
                }
                Op::Sum { x, axis } => {
                    let xshape = self.nodes[x].value.shape().to_vec();
                    let dx = match axis {
                        None => Tensor::full(xshape, g.item()?),
                        Some(_) => broadcast_to(&g, &xshape)?,
                    };
                    self.accum(x, dx);
                }
                Op::Mean { x, axis } => {
                    let xshape = self.nodes[x].value.shape().to_vec();
                    let dx = match axis {
                        None => {
                            let n = S::from_f64(self.nodes[x].value.numel() as f64);
                            Tensor::full(xshape, g.item()? / n)
                        }
                        Some(ax) => {
                            let n = S::from_f64(xshape[ax] as f64);
                            let scaled = g.map(|v| v / n);
                            broadcast_to(&scaled, &xshape)?
                        }
                    };
                    self.accum(x, dx);
                }
                Op::Reshape { x } => {
                    let xshape = self.nodes[x].value.shape().to_vec();
                    self.accum(x, g.reshaped(xshape)?);
                }
                Op::Permute { x, perm } => {
                    let inv = invert_perm(&perm);
                    self.accum(x, permute_vals(&g, &inv)?);
                }
                Op::Concat { xs, axis } => {
                    let shapes: Vec<Vec<usize>> = xs
                        .iter()
                        .map(|&i| self.nodes[i].value.shape().to_vec())
                        .collect();
                    let parts = split_vals(&g, &shapes, axis);
                    for (&i, part) in xs.iter().zip(parts) {
                        self.accum(i, part);
                    }
                }
                Op::Slice { x, ranges } => {
                    let xshape = self.nodes[x].value.shape().to_vec();
                    self.accum(x, scatter_slice(&g, &xshape, &ranges));
                }
                Op::MaskedFill { x, mask } => {
                    let half = S::from_f64(0.5);
                    let dx = zip_broadcast("maskfill-bwd", &g, &mask, |g, m| {
                        if m >= half {
                            S::zero()
                        } else {
                            g
                        }
                    })?;
                    self.accum(x, dx);
                }
            }
        }
        Ok(())
    }

    fn accum(&mut self, id: usize, contrib: Tensor<S>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        debug_assert_eq!(self.nodes[id].value.shape(), contrib.shape());
        match &mut self.nodes[id].grad {
            Some(g) => {
                for (gv, cv) in g.data_mut().iter_mut().zip(contrib.data()) {
                    *gv = *gv + *cv;
                }
            }
            None => self.nodes[id].grad = Some(contrib),
        }
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (S::zero() - x).exp())
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Domain {
            op,
            reason: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    Ok(())
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

// ── value-level kernels (shared by forward and backward) ────────────────

/// Batched matrix product; see [`Tape::matmul`] for the broadcast contract.
pub fn matmul_vals<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra < 2 || rb < 2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, ka) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (kb, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    let a_batch = &a.shape()[..ra - 2];
    let b_batch = &b.shape()[..rb - 2];
    let (batch_shape, a_batched, b_batched) = if a_batch == b_batch {
        (a_batch.to_vec(), true, true)
    } else if ra == 2 {
        (b_batch.to_vec(), false, true)
    } else if rb == 2 {
        (a_batch.to_vec(), true, false)
    } else {
        return Err(Error::ShapeMismatch {
            op: "matmul (batch dims)",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    };
    if ka != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul (inner dim)",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let k = ka;
    let batch: usize = batch_shape.iter().product();
    let mut out = vec![S::zero(); batch * m * n];
    let ad = a.data();
    let bd = b.data();
    for bi in 0..batch {
        let ao = if a_batched { bi * m * k } else { 0 };
        let bo = if b_batched { bi * k * n } else { 0 };
        let co = bi * m * n;
        for i in 0..m {
            let arow = &ad[ao + i * k..ao + (i + 1) * k];
            let orow = &mut out[co + i * n..co + (i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                // Skipping exact zeros makes one-hot selector products cheap
                // and cannot change results: 0·x contributes nothing.
                if av == S::zero() {
                    continue;
                }
                let brow = &bd[bo + p * n..bo + (p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
    }
    let mut shape = batch_shape;
    shape.push(m);
    shape.push(n);
    Tensor::new(shape, out)
}

/// Swap the last two axes.
pub fn transpose_last<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let rank = t.rank();
    assert!(rank >= 2, "transpose_last needs rank ≥ 2");
    let mut perm: Vec<usize> = (0..rank).collect();
    perm.swap(rank - 2, rank - 1);
    permute_vals(t, &perm).expect("identity-derived perm is valid")
}

/// Sum leading batch axes of `t` until its shape matches `target`. Used to
/// fold broadcast matmul gradients back onto a rank-2 operand.
fn sum_leading_to<S: Scalar>(t: &Tensor<S>, target: &[usize]) -> Tensor<S> {
    if t.shape() == target {
        return t.clone();
    }
    let rest: usize = target.iter().product();
    let batch = t.numel() / rest;
    let mut out = vec![S::zero(); rest];
    for b in 0..batch {
        let blk = &t.data()[b * rest..(b + 1) * rest];
        for (o, &v) in out.iter_mut().zip(blk) {
            *o = *o + v;
        }
    }
    Tensor::new(target.to_vec(), out).expect("target shape consistent")
}

fn broadcast_out_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    a.iter()
        .zip(b)
        .map(|(&da, &db)| {
            if da == db || db == 1 {
                Ok(da.max(db))
            } else if da == 1 {
                Ok(db)
            } else {
                Err(Error::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        })
        .collect()
}

/// Row-major strides of `shape`, zeroed on axes broadcast up to `out`.
fn bstrides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut st = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        st[i] = st[i + 1] * shape[i + 1];
    }
    st.iter()
        .zip(shape.iter().zip(out))
        .map(|(&s, (&d, &o))| if d == 1 && o != 1 { 0 } else { s })
        .collect()
}

/// Elementwise combine with size-1 broadcasting (equal ranks only).
pub fn zip_broadcast<S: Scalar>(
    op: &'static str,
    a: &Tensor<S>,
    b: &Tensor<S>,
    f: impl Fn(S, S) -> S,
) -> Result<Tensor<S>> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let out_shape = broadcast_out_shape(op, a.shape(), b.shape())?;
    let sa = bstrides(a.shape(), &out_shape);
    let sb = bstrides(b.shape(), &out_shape);
    let numel: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..numel {
        out.push(f(a.data()[oa], b.data()[ob]));
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            oa -= sa[ax] * out_shape[ax];
            ob -= sb[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

/// Sum `g` down to `target` over axes where `target` is size 1 (the adjoint
/// of size-1 broadcasting).
pub(crate) fn reduce_to_shape<S: Scalar>(g: &Tensor<S>, target: &[usize]) -> Tensor<S> {
    if g.shape() == target {
        return g.clone();
    }
    let mut out = Tensor::zeros(target.to_vec());
    let st = bstrides(target, g.shape());
    let rank = g.rank();
    let mut idx = vec![0usize; rank];
    let mut to = 0usize;
    let gshape = g.shape().to_vec();
    for &v in g.data() {
        out.data_mut()[to] = out.data_mut()[to] + v;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            to += st[ax];
            if idx[ax] < gshape[ax] {
                break;
            }
            to -= st[ax] * gshape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Expand size-1 axes of `t` up to `out_shape` by repetition.
fn broadcast_to<S: Scalar>(t: &Tensor<S>, out_shape: &[usize]) -> Result<Tensor<S>> {
    zip_broadcast("broadcast_to", t, &Tensor::zeros(out_shape.to_vec()), |a, _| a)
}

fn softmax_vals<S: Scalar>(x: &Tensor<S>, axis: usize) -> Tensor<S> {
    let mut out = x.clone();
    let n = x.shape()[axis];
    for_each_lane(x.shape(), axis, |base, stride| {
        let mut mx = S::neg_infinity();
        for k in 0..n {
            let v = out.data()[base + k * stride];
            if v > mx {
                mx = v;
            }
        }
        let mut sum = S::zero();
        for k in 0..n {
            let o = base + k * stride;
            let e = (out.data()[o] - mx).exp();
            out.data_mut()[o] = e;
            sum = sum + e;
        }
        for k in 0..n {
            let o = base + k * stride;
            out.data_mut()[o] = out.data()[o] / sum;
        }
    });
    out
}

/// Reduce one axis to size 1 (sum, or mean when `mean` is set).
fn reduce_axis_vals<S: Scalar>(x: &Tensor<S>, axis: usize, mean: bool) -> Tensor<S> {
    let mut shape = x.shape().to_vec();
    let n = shape[axis];
    shape[axis] = 1;
    let mut out = Tensor::zeros(shape);
    let mut w = 0usize;
    for_each_lane(x.shape(), axis, |base, stride| {
        let mut s = S::zero();
        for k in 0..n {
            s = s + x.data()[base + k * stride];
        }
        if mean {
            s = s / S::from_f64(n as f64);
        }
        out.data_mut()[w] = s;
        w += 1;
    });
    // for_each_lane visits lanes in row-major order of the remaining axes,
    // which is exactly the row-major order of the size-1-axis output.
    out
}

fn concat_vals<S: Scalar>(xs: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>> {
    let first = xs[0];
    check_axis("concat", first.shape(), axis)?;
    let rank = first.rank();
    for x in xs {
        if x.rank() != rank
            || x.shape()[..axis] != first.shape()[..axis]
            || x.shape()[axis + 1..] != first.shape()[axis + 1..]
        {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
    }
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let outer: usize = first.shape()[..axis].iter().product();
    let total_axis: usize = xs.iter().map(|x| x.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for x in xs {
            let blk = x.shape()[axis] * inner;
            out.extend_from_slice(&x.data()[o * blk..(o + 1) * blk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total_axis;
    Tensor::new(shape, out)
}

/// Inverse of concat: split `g` into parts with the given shapes along `axis`.
fn split_vals<S: Scalar>(g: &Tensor<S>, shapes: &[Vec<usize>], axis: usize) -> Vec<Tensor<S>> {
    let inner: usize = g.shape()[axis + 1..].iter().product();
    let outer: usize = g.shape()[..axis].iter().product();
    let mut parts: Vec<Tensor<S>> = shapes
        .iter()
        .map(|s| Tensor::zeros(s.clone()))
        .collect();
    let mut src = 0usize;
    for o in 0..outer {
        for (part, shape) in parts.iter_mut().zip(shapes) {
            let blk = shape[axis] * inner;
            part.data_mut()[o * blk..(o + 1) * blk]
                .copy_from_slice(&g.data()[src..src + blk]);
            src += blk;
        }
    }
    parts
}

fn slice_vals<S: Scalar>(x: &Tensor<S>, ranges: &[(usize, usize)]) -> Result<Tensor<S>> {
    if ranges.len() != x.rank() {
        return Err(Error::Contract(format!(
            "slice needs one range per axis: got {} for rank {}",
            ranges.len(),
            x.rank()
        )));
    }
    for (axis, (&(s, e), &d)) in ranges.iter().zip(x.shape()).enumerate() {
        if s >= e || e > d {
            return Err(Error::SliceOutOfBounds {
                axis,
                range: (s, e),
                shape: x.shape().to_vec(),
            });
        }
    }
    let out_shape: Vec<usize> = ranges.iter().map(|&(s, e)| e - s).collect();
    let st = x.strides();
    let rank = out_shape.len();
    let numel: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut off: usize = ranges.iter().zip(&st).map(|(&(s, _), &t)| s * t).sum();
    for _ in 0..numel {
        out.push(x.data()[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += st[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= st[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

/// Adjoint of slice: place `g` into a zero tensor of shape `xshape` at
/// `ranges`.
fn scatter_slice<S: Scalar>(
    g: &Tensor<S>,
    xshape: &[usize],
    ranges: &[(usize, usize)],
) -> Tensor<S> {
    let mut out = Tensor::zeros(xshape.to_vec());
    let st = out.strides();
    let rank = xshape.len();
    let gshape = g.shape().to_vec();
    let mut idx = vec![0usize; rank];
    let mut off: usize = ranges.iter().zip(&st).map(|(&(s, _), &t)| s * t).sum();
    for &v in g.data() {
        out.data_mut()[off] = out.data_mut()[off] + v;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += st[ax];
            if idx[ax] < gshape[ax] {
                break;
            }
            off -= st[ax] * gshape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Reorder axes of a value tensor; `perm[i]` is the input axis that becomes
/// output axis `i`.
pub fn permute_vals<S: Scalar>(t: &Tensor<S>, perm: &[usize]) -> Result<Tensor<S>> {
    let rank = t.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Contract(format!(
            "permute: {perm:?} is not a permutation of 0..{rank}"
        )));
    }
    let in_strides = t.strides();
    let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
    let os: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel = t.numel();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        out.push(t.data()[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += os[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= os[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}
