//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations append nodes to a Wengert list, so the list itself is a
//! topological order and a single reverse sweep visits every node exactly
//! once. A node flagged `stop_gradient` passes its value through but
//! contributes exactly zero to all upstream gradients.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::numeric;
use crate::tensor::Tensor;

type GradFn = Box<dyn Fn(&Tensor) -> Result<Tensor>>;

fn grad_fn(f: impl Fn(&Tensor) -> Result<Tensor> + 'static) -> GradFn {
    Box::new(f)
}

struct Node {
    value: Tensor,
    parents: Vec<(usize, GradFn)>,
    requires_grad: bool,
    stop_gradient: bool,
}

/// Single-graph recording tape. One backward pass at a time; tensors stored
/// on the tape are immutable.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Slot assignment used when expanding a `[tokens, experts]` matrix into
/// `[tokens, experts, capacity]` routing tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub token: usize,
    pub expert: usize,
    pub slot: usize,
}

/// Result of a backward pass: one gradient tensor per reachable
/// `requires_grad` node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for a variable, densified to zeros when the variable was
    /// never reached.
    pub fn wrt_or_zeros(&self, var: Var<'_>) -> Tensor {
        match self.wrt(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&var.shape()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, parents: Vec<(usize, GradFn)>, stop_gradient: bool) -> Var<'_> {
        let requires_grad = !stop_gradient && !parents.is_empty();
        self.push_with(value, parents, stop_gradient, requires_grad)
    }

    fn push_with(
        &self,
        value: Tensor,
        parents: Vec<(usize, GradFn)>,
        stop_gradient: bool,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            requires_grad,
            stop_gradient,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf with no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), false)
    }

    /// Trainable leaf: always receives an entry in [`Gradients`].
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_with(value, Vec::new(), false, true)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Reverse sweep from a scalar root. Returns gradients for every
    /// `requires_grad` leaf (zeros when the leaf was not reached).
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(
            std::ptr::eq(self, loss.tape),
            "backward called with a var from another tape"
        );
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::invalid(format!(
                "backward: root must be scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        let mut seed = Tensor::zeros(root.value.shape());
        seed.data_mut()[0] = 1.0;
        grads[loss.id] = Some(seed);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if node.stop_gradient || !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[id].clone() else {
                continue;
            };
            for (pid, rule) in &node.parents {
                if !nodes[*pid].requires_grad || nodes[*pid].stop_gradient {
                    continue;
                }
                let contribution = rule(&upstream)?;
                grads[*pid] = Some(match grads[*pid].take() {
                    Some(existing) => existing.add(&contribution)?,
                    None => contribution,
                });
            }
        }
        // densify untouched trainable leaves
        for (id, node) in nodes.iter().enumerate() {
            if node.requires_grad && node.parents.is_empty() && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }
}

impl<'t> Var<'t> {
    fn node(&self) -> Ref<'t, Node> {
        Ref::map(self.tape.nodes.borrow(), |nodes| &nodes[self.id])
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.node().value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node().value.shape().to_vec()
    }

    pub fn scalar_value(&self) -> Result<f64> {
        self.node().value.scalar_value()
    }

    pub fn requires_grad(&self) -> bool {
        self.node().requires_grad
    }

    pub fn is_stop_gradient(&self) -> bool {
        self.node().stop_gradient
    }

    fn same_tape(&self, other: Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars belong to different tapes"
        );
    }

    /// Value passthrough that blocks gradient flow entirely.
    pub fn stop_gradient(&self) -> Var<'t> {
        let v = self.value();
        // parent edge kept so the graph records provenance; backward skips it
        self.tape
            .push(v, vec![(self.id, grad_fn(|g| Ok(g.clone())))], true)
    }

    fn unary(
        &self,
        value: Tensor,
        rule: impl Fn(&Tensor) -> Result<Tensor> + 'static,
    ) -> Var<'t> {
        let parents: Vec<(usize, GradFn)> = if self.requires_grad() {
            vec![(self.id, grad_fn(rule))]
        } else {
            Vec::new()
        };
        self.tape.push(value, parents, false)
    }

    #[allow(clippy::type_complexity)]
    fn binary(
        &self,
        other: Var<'t>,
        value: Tensor,
        left: impl Fn(&Tensor) -> Result<Tensor> + 'static,
        right: impl Fn(&Tensor) -> Result<Tensor> + 'static,
    ) -> Var<'t> {
        self.same_tape(other);
        let mut parents: Vec<(usize, GradFn)> = Vec::new();
        if self.requires_grad() {
            parents.push((self.id, grad_fn(left)));
        }
        if other.requires_grad() {
            parents.push((other.id, grad_fn(right)));
        }
        self.tape.push(value, parents, false)
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().add(&other.value())?;
        Ok(self.binary(other, out, |g| Ok(g.clone()), |g| Ok(g.clone())))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().sub(&other.value())?;
        Ok(self.binary(other, out, |g| Ok(g.clone()), |g| g.scale(-1.0)))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let out = a.mul(&b)?;
        Ok(self.binary(other, out, move |g| g.mul(&b), move |g| g.mul(&a)))
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let out = a.div(&b)?;
        let b2 = b.clone();
        Ok(self.binary(
            other,
            out,
            move |g| g.div(&b),
            move |g| {
                // d(a/b)/db = -a / b^2
                let num = g.mul(&a)?;
                let den = b2.mul(&b2)?;
                num.div(&den)?.scale(-1.0)
            },
        ))
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        let out = self.value().scale(c)?;
        Ok(self.unary(out, move |g| g.scale(c)))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        let out = self.value().map("add_scalar", |v| v + c)?;
        Ok(self.unary(out, |g| Ok(g.clone())))
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        let out = self.value().map("exp", f64::exp)?;
        let saved = out.clone();
        Ok(self.unary(out, move |g| g.mul(&saved)))
    }

    pub fn ln(&self) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.map("ln", f64::ln)?;
        Ok(self.unary(out, move |g| g.div(&x)))
    }

    /// Exact GELU `x * Phi(x)` with the standard-normal CDF.
    pub fn gelu(&self) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.map("gelu", numeric::gelu)?;
        Ok(self.unary(out, move |g| {
            let local = x.map("gelu_grad", numeric::gelu_derivative)?;
            g.mul(&local)
        }))
    }

    /// CDF of `N(0, sigma^2)` applied elementwise.
    pub fn normal_cdf(&self, sigma: f64) -> Result<Var<'t>> {
        if sigma <= 0.0 {
            return Err(Error::invalid("normal_cdf: sigma must be positive"));
        }
        let x = self.value();
        let out = x.map("normal_cdf", |v| numeric::normal_cdf(v, sigma))?;
        Ok(self.unary(out, move |g| {
            let local = x.map("normal_pdf", |v| numeric::normal_pdf(v, sigma))?;
            g.mul(&local)
        }))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let out = a.matmul(&b)?;
        let bt = b.transpose()?;
        let at = a.transpose()?;
        Ok(self.binary(
            other,
            out,
            move |g| g.matmul(&bt),
            move |g| at.matmul(g),
        ))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let out = self.value().transpose()?;
        Ok(self.unary(out, |g| g.transpose()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let original = self.shape();
        let out = self.value().reshape(shape)?;
        Ok(self.unary(out, move |g| g.reshape(&original)))
    }

    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let out = self.value().softmax_rows()?;
        let s = out.clone();
        Ok(self.unary(out, move |g| {
            // dX = S * (G - rowsum(G * S))
            let gs = g.mul(&s)?;
            let row_dots = gs.sum_axis(1)?;
            let (m, n) = (s.shape()[0], s.shape()[1]);
            let mut data = Vec::with_capacity(m * n);
            for i in 0..m {
                let dot = row_dots.data()[i];
                for j in 0..n {
                    data.push(s.at2(i, j) * (g.at2(i, j) - dot));
                }
            }
            Tensor::new(vec![m, n], data)
        }))
    }

    /// Softmax normalized along axis 0 (down each column).
    pub fn softmax_cols(&self) -> Result<Var<'t>> {
        self.transpose()?.softmax_rows()?.transpose()
    }

    pub fn sum_all(&self) -> Result<Var<'t>> {
        let x_shape = self.shape();
        let out = Tensor::scalar(self.value().sum_all());
        out.check_finite("sum_all")?;
        Ok(self.unary(out, move |g| {
            Ok(Tensor::filled(&x_shape, g.scalar_value()?))
        }))
    }

    pub fn mean_all(&self) -> Result<Var<'t>> {
        let x_shape = self.shape();
        let n: usize = x_shape.iter().product();
        let out = Tensor::scalar(self.value().mean_all());
        out.check_finite("mean_all")?;
        Ok(self.unary(out, move |g| {
            Ok(Tensor::filled(&x_shape, g.scalar_value()? / n as f64))
        }))
    }

    /// Axis sum of a 2-D value: axis 0 gives column sums, axis 1 row sums.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.sum_axis(axis)?;
        let (m, n) = (x.shape()[0], x.shape()[1]);
        Ok(self.unary(out, move |g| {
            let mut data = Vec::with_capacity(m * n);
            for i in 0..m {
                for j in 0..n {
                    data.push(if axis == 0 { g.data()[j] } else { g.data()[i] });
                }
            }
            Tensor::new(vec![m, n], data)
        }))
    }

    /// Add a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&self, v: Var<'t>) -> Result<Var<'t>> {
        let m = self.value();
        let b = v.value();
        let out = broadcast_rows(&m, &b, "add_row", |a, x| a + x)?;
        Ok(self.binary(v, out, |g| Ok(g.clone()), |g| g.sum_axis(0)))
    }

    /// Divide each row elementwise by a length-`n` vector (scales columns).
    pub fn div_row(&self, v: Var<'t>) -> Result<Var<'t>> {
        let mval = self.value();
        let b = v.value();
        let out = broadcast_rows(&mval, &b, "div_row", |a, x| a / x)?;
        let b_left = b.clone();
        Ok(self.binary(
            v,
            out,
            move |g| broadcast_rows(g, &b_left, "div_row_grad", |a, x| a / x),
            move |g| {
                let (rows, cols) = (mval.shape()[0], mval.shape()[1]);
                let mut dv = vec![0.0; cols];
                for i in 0..rows {
                    for j in 0..cols {
                        dv[j] -= g.at2(i, j) * mval.at2(i, j) / (b.data()[j] * b.data()[j]);
                    }
                }
                Tensor::new(vec![cols], dv)
            },
        ))
    }

    /// Divide each column elementwise by a length-`m` vector (scales rows).
    pub fn div_col(&self, v: Var<'t>) -> Result<Var<'t>> {
        let mval = self.value();
        let b = v.value();
        let out = broadcast_cols(&mval, &b, "div_col", |a, x| a / x)?;
        let b_left = b.clone();
        Ok(self.binary(
            v,
            out,
            move |g| broadcast_cols(g, &b_left, "div_col_grad", |a, x| a / x),
            move |g| {
                let (rows, cols) = (mval.shape()[0], mval.shape()[1]);
                let mut dv = vec![0.0; rows];
                for i in 0..rows {
                    for j in 0..cols {
                        dv[i] -= g.at2(i, j) * mval.at2(i, j) / (b.data()[i] * b.data()[i]);
                    }
                }
                Tensor::new(vec![rows], dv)
            },
        ))
    }

    /// Subtract a length-`m` vector from each column of an `[m, n]` matrix.
    pub fn sub_col(&self, v: Var<'t>) -> Result<Var<'t>> {
        let mval = self.value();
        let b = v.value();
        let out = broadcast_cols(&mval, &b, "sub_col", |a, x| a - x)?;
        Ok(self.binary(
            v,
            out,
            |g| Ok(g.clone()),
            |g| g.sum_axis(1)?.scale(-1.0),
        ))
    }

    /// Pick one entry per row of an `[m, n]` matrix, returning shape `[m]`.
    pub fn select_per_row(&self, indices: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape().len() != 2 || indices.len() != x.shape()[0] {
            return Err(Error::invalid("select_per_row: need one index per row"));
        }
        let (m, n) = (x.shape()[0], x.shape()[1]);
        for &j in indices {
            if j >= n {
                return Err(Error::invalid("select_per_row: column out of range"));
            }
        }
        let data: Vec<f64> = indices.iter().enumerate().map(|(i, &j)| x.at2(i, j)).collect();
        let out = Tensor::new(vec![m], data)?;
        let idx = indices.to_vec();
        Ok(self.unary(out, move |g| {
            let mut dm = Tensor::zeros(&[m, n]);
            for (i, &j) in idx.iter().enumerate() {
                dm.set2(i, j, g.data()[i]);
            }
            Ok(dm)
        }))
    }

    /// Slice `[t, e, c]` at expert index `r`, producing `[t, c]`.
    pub fn slice_expert(&self, r: usize) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.slice_middle(r)?;
        let full = x.shape().to_vec();
        Ok(self.unary(out, move |g| {
            let mut dx = Tensor::zeros(&full);
            let (t, c) = (full[0], full[2]);
            for i in 0..t {
                for k in 0..c {
                    dx.set3(i, r, k, g.at2(i, k));
                }
            }
            Ok(dx)
        }))
    }

    /// Expand a `[tokens, experts]` matrix into a `[tokens, experts,
    /// capacity]` tensor holding the matrix entry at each placement and zero
    /// elsewhere. Gradients accumulate back onto the matrix entries.
    pub fn scatter_to_slots(&self, placements: &[Placement], capacity: usize) -> Result<Var<'t>> {
        let pi = self.value();
        if pi.shape().len() != 2 {
            return Err(Error::invalid("scatter_to_slots: expected a matrix"));
        }
        let (t, e) = (pi.shape()[0], pi.shape()[1]);
        let mut out = Tensor::zeros(&[t, e, capacity]);
        for p in placements {
            if p.token >= t || p.expert >= e || p.slot >= capacity {
                return Err(Error::invalid("scatter_to_slots: placement out of range"));
            }
            out.set3(p.token, p.expert, p.slot, pi.at2(p.token, p.expert));
        }
        let saved: Vec<Placement> = placements.to_vec();
        Ok(self.unary(out, move |g| {
            let mut dp = Tensor::zeros(&[t, e]);
            for p in &saved {
                let cur = dp.at2(p.token, p.expert);
                dp.set2(p.token, p.expert, cur + g.at3(p.token, p.expert, p.slot));
            }
            Ok(dp)
        }))
    }
}

fn broadcast_rows(
    m: &Tensor,
    v: &Tensor,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if m.shape().len() != 2 || v.shape() != [m.shape()[1]] {
        return Err(Error::ShapeMismatch {
            op,
            lhs: m.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            data.push(f(m.at2(i, j), v.data()[j]));
        }
    }
    Tensor::new(vec![rows, cols], data)
}

fn broadcast_cols(
    m: &Tensor,
    v: &Tensor,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if m.shape().len() != 2 || v.shape() != [m.shape()[0]] {
        return Err(Error::ShapeMismatch {
            op,
            lhs: m.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            data.push(f(m.at2(i, j), v.data()[i]));
        }
    }
    Tensor::new(vec![rows, cols], data)
}
