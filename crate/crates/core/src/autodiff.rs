//! Tape-based reverse-mode automatic differentiation with nonsmooth
//! elementary operations and projection layers.
//!
//! A [`Tape`] is built node by node; every node may only reference nodes
//! created before it, so insertion order is a topological order. Nodes are
//! vector valued. The leading trainable parameters live in one flat vector
//! `θ ∈ R^p`, and each [`Op::Parameter`] node reads a slice of it.
//!
//! Nondifferentiable points use fixed Clarke-subdifferential selections:
//! `relu'(0) = 0`, `abs'(0) = 0`, the guarded square root
//! `sqrt(max(x, 1e-12))` has derivative zero below the guard, and clamps
//! have derivative zero on their (closed) saturated regions. Projection
//! nodes backpropagate through [`crate::hs::vjp`].

use std::sync::Arc;

use crate::error::{check_len, Error, Result};
use crate::hs::{hs_element, vjp};
use crate::linalg::dot;
use crate::polytope::Polytope;
use crate::qp::{project_with, ProjectionOptions, ProjectionResult};
use crate::scalar::Scalar;

pub type NodeId = usize;

const SQRT_GUARD: f64 = 1e-12;

/// Elementary operation of a node.
#[derive(Clone, Debug)]
pub enum Op<T> {
    /// Slice `θ[offset .. offset + len]`.
    Parameter {
        offset: usize,
    },
    /// Fixed value (data, targets, constant matrices).
    Constant,
    /// `W x + b`; parents `[w, x, b]`, `w` row-major `rows × cols`.
    Affine {
        rows: usize,
        cols: usize,
    },
    Add,
    Sub,
    Mul,
    Div,
    Scale(T),
    Offset(T),
    Relu,
    Sigmoid,
    Tanh,
    Sqrt,
    Square,
    Abs,
    Log,
    Clamp {
        lo: T,
        hi: T,
    },
    Sum,
    Mean,
    /// `mean((pred − target)²)`; parents `[pred, target]`.
    MseLoss,
    /// Binary cross-entropy on `clamp(pred, eps, 1 − eps)`; parents `[pred, target]`.
    BceLoss {
        eps: T,
    },
    Projection(Arc<Polytope<T>>),
}

impl<T> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Parameter { .. } => "parameter",
            Op::Constant => "constant",
            Op::Affine { .. } => "affine",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::Offset(_) => "offset",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Sqrt => "sqrt",
            Op::Square => "square",
            Op::Abs => "abs",
            Op::Log => "log",
            Op::Clamp { .. } => "clamp",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::MseLoss => "mse-loss",
            Op::BceLoss { .. } => "bce-loss",
            Op::Projection(_) => "projection",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node<T> {
    pub op: Op<T>,
    pub parents: Vec<NodeId>,
    pub value: Vec<T>,
    pub adjoint: Vec<T>,
    /// Cached forward solve of a projection node.
    pub projection: Option<ProjectionResult<T>>,
}

impl<T: Scalar> Node<T> {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Computation graph of a scalar loss `Φ(θ)`.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_count: usize,
    output: Option<NodeId>,
    forwarded: bool,
    projection_opts: ProjectionOptions<T>,
}

fn broadcast_len(a: usize, b: usize) -> Option<usize> {
    match (a, b) {
        (x, y) if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    }
}

#[inline]
fn at<T: Copy>(v: &[T], i: usize) -> T {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    /// Empty tape over `param_count` trainable scalars.
    pub fn new(param_count: usize) -> Self {
        Self {
            nodes: Vec::new(),
            param_count,
            output: None,
            forwarded: false,
            projection_opts: ProjectionOptions::default(),
        }
    }

    /// Solver options used by projection nodes.
    pub fn set_projection_options(&mut self, opts: ProjectionOptions<T>) {
        self.projection_opts = opts;
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id]
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id].value
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    fn push(&mut self, op: Op<T>, parents: Vec<NodeId>, len: usize) -> NodeId {
        self.forwarded = false;
        self.nodes.push(Node {
            op,
            parents,
            value: vec![T::zero(); len],
            adjoint: vec![T::zero(); len],
            projection: None,
        });
        self.nodes.len() - 1
    }

    fn len_of(&self, id: NodeId) -> Result<usize> {
        self.nodes
            .get(id)
            .map(|n| n.len())
            .ok_or_else(|| Error::Input(format!("unknown node {id}")))
    }

    pub fn parameter(&mut self, offset: usize, len: usize) -> Result<NodeId> {
        if offset + len > self.param_count {
            return Err(Error::Input(format!(
                "parameter slice {offset}..{} exceeds p = {}",
                offset + len,
                self.param_count
            )));
        }
        Ok(self.push(Op::Parameter { offset }, Vec::new(), len))
    }

    pub fn constant(&mut self, value: Vec<T>) -> NodeId {
        let id = self.push(Op::Constant, Vec::new(), value.len());
        self.nodes[id].value = value;
        id
    }

    /// Rebinds the value of a constant node.
    pub fn set_constant(&mut self, id: NodeId, value: Vec<T>) -> Result<()> {
        let node = self
            .nodes
            .get_mut(id)
            .ok_or_else(|| Error::Input(format!("unknown node {id}")))?;
        if !matches!(node.op, Op::Constant) {
            return Err(Error::Input(format!("node {id} is not a constant")));
        }
        check_len("constant value", node.value.len(), value.len())?;
        node.value = value;
        self.forwarded = false;
        Ok(())
    }

    pub fn affine(
        &mut self,
        w: NodeId,
        x: NodeId,
        b: NodeId,
        rows: usize,
        cols: usize,
    ) -> Result<NodeId> {
        check_len("affine weight", rows * cols, self.len_of(w)?)?;
        check_len("affine input", cols, self.len_of(x)?)?;
        check_len("affine bias", rows, self.len_of(b)?)?;
        Ok(self.push(Op::Affine { rows, cols }, vec![w, x, b], rows))
    }

    fn binary(&mut self, op: Op<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (la, lb) = (self.len_of(a)?, self.len_of(b)?);
        let len = broadcast_len(la, lb).ok_or_else(|| {
            Error::Input(format!("{}: incompatible lengths {la} and {lb}", op.name()))
        })?;
        Ok(self.push(op, vec![a, b], len))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Div, a, b)
    }

    fn unary(&mut self, op: Op<T>, a: NodeId) -> Result<NodeId> {
        let len = self.len_of(a)?;
        Ok(self.push(op, vec![a], len))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        self.unary(Op::Scale(c), a)
    }

    pub fn offset(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        self.unary(Op::Offset(c), a)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Relu, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Tanh, a)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Sqrt, a)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Square, a)
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Abs, a)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Log, a)
    }

    pub fn clamp(&mut self, a: NodeId, lo: T, hi: T) -> Result<NodeId> {
        if !(lo <= hi) {
            return Err(Error::Input("clamp bounds out of order".into()));
        }
        self.unary(Op::Clamp { lo, hi }, a)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.len_of(a)?;
        Ok(self.push(Op::Sum, vec![a], 1))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        if self.len_of(a)? == 0 {
            return Err(Error::Input("mean of an empty node".into()));
        }
        Ok(self.push(Op::Mean, vec![a], 1))
    }

    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        check_len("mse target", self.len_of(pred)?, self.len_of(target)?)?;
        Ok(self.push(Op::MseLoss, vec![pred, target], 1))
    }

    pub fn bce_loss(&mut self, pred: NodeId, target: NodeId, eps: T) -> Result<NodeId> {
        check_len("bce target", self.len_of(pred)?, self.len_of(target)?)?;
        if !(eps > T::zero() && eps < T::lit(0.5)) {
            return Err(Error::Input("bce clamp eps must lie in (0, 0.5)".into()));
        }
        Ok(self.push(Op::BceLoss { eps }, vec![pred, target], 1))
    }

    pub fn projection(&mut self, polytope: Arc<Polytope<T>>, x: NodeId) -> Result<NodeId> {
        check_len("projection input", polytope.n(), self.len_of(x)?)?;
        let n = polytope.n();
        Ok(self.push(Op::Projection(polytope), vec![x], n))
    }

    /// Marks the scalar loss node.
    pub fn set_output(&mut self, id: NodeId) -> Result<()> {
        check_len("loss node length", 1, self.len_of(id)?)?;
        self.output = Some(id);
        Ok(())
    }

    /// Evaluates every node in insertion order and returns the loss.
    pub fn forward(&mut self, theta: &[T]) -> Result<T> {
        check_len("parameter vector", self.param_count, theta.len())?;
        let out = self
            .output
            .ok_or_else(|| Error::Input("tape has no output node".into()))?;
        for k in 0..self.nodes.len() {
            let (value, proj) = self.eval_node(k, theta).map_err(|e| Error::Node {
                node: k,
                source: Box::new(e),
            })?;
            let node = &mut self.nodes[k];
            node.value = value;
            node.projection = proj;
        }
        self.forwarded = true;
        Ok(self.nodes[out].value[0])
    }

    fn eval_node(&self, k: NodeId, theta: &[T]) -> Result<(Vec<T>, Option<ProjectionResult<T>>)> {
        let node = &self.nodes[k];
        let arg = |i: usize| -> &[T] { &self.nodes[node.parents[i]].value };
        let map = |f: &dyn Fn(T) -> T| -> Vec<T> { arg(0).iter().map(|&v| f(v)).collect() };
        let zip = |f: &dyn Fn(T, T) -> T| -> Vec<T> {
            let (a, b) = (arg(0), arg(1));
            (0..node.len()).map(|i| f(at(a, i), at(b, i))).collect()
        };
        let v = match &node.op {
            Op::Parameter { offset } => theta[*offset..*offset + node.len()].to_vec(),
            Op::Constant => node.value.clone(),
            Op::Affine { rows, cols } => {
                let (w, x, b) = (arg(0), arg(1), arg(2));
                (0..*rows)
                    .map(|i| dot(&w[i * cols..(i + 1) * cols], x) + b[i])
                    .collect()
            }
            Op::Add => zip(&|a, b| a + b),
            Op::Sub => zip(&|a, b| a - b),
            Op::Mul => zip(&|a, b| a * b),
            Op::Div => zip(&|a, b| a / b),
            Op::Scale(c) => map(&|a| a * *c),
            Op::Offset(c) => map(&|a| a + *c),
            Op::Relu => map(&|a| a.max(T::zero())),
            Op::Sigmoid => map(&sigmoid),
            Op::Tanh => map(&|a| a.tanh()),
            Op::Sqrt => map(&|a| a.max(T::lit(SQRT_GUARD)).sqrt()),
            Op::Square => map(&|a| a * a),
            Op::Abs => map(&|a| a.abs()),
            Op::Log => map(&|a| a.ln()),
            Op::Clamp { lo, hi } => map(&|a| a.max(*lo).min(*hi)),
            Op::Sum => vec![arg(0).iter().copied().sum()],
            Op::Mean => {
                let a = arg(0);
                vec![a.iter().copied().sum::<T>() / T::from_usize(a.len()).unwrap()]
            }
            Op::MseLoss => {
                let (p, t) = (arg(0), arg(1));
                let s: T = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum();
                vec![s / T::from_usize(p.len().max(1)).unwrap()]
            }
            Op::BceLoss { eps } => {
                let (p, t) = (arg(0), arg(1));
                let one = T::one();
                let s: T = p
                    .iter()
                    .zip(t)
                    .map(|(&a, &y)| {
                        let c = a.max(*eps).min(one - *eps);
                        -(y * c.ln() + (one - y) * (one - c).ln())
                    })
                    .sum();
                vec![s / T::from_usize(p.len().max(1)).unwrap()]
            }
            Op::Projection(poly) => {
                let res = project_with(poly, arg(0), &self.projection_opts)?;
                return Ok((res.y.clone(), Some(res)));
            }
        };
        if let Some(bad) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::Input(format!(
                "{} produced a non-finite value at component {bad}",
                node.op.name()
            )));
        }
        Ok((v, None))
    }

    /// Reverse sweep: accumulates `g_j += g_k · d_kj` from the output back to
    /// the parameters and returns `∂Φ/∂θ` (an element of the AD field).
    pub fn reverse(&mut self) -> Result<Vec<T>> {
        if !self.forwarded {
            return Err(Error::Input("reverse called before forward".into()));
        }
        let out = self.output.expect("forwarded tape has an output");
        for n in &mut self.nodes {
            n.adjoint.iter_mut().for_each(|a| *a = T::zero());
        }
        self.nodes[out].adjoint[0] = T::one();
        let mut grad = vec![T::zero(); self.param_count];
        for k in (0..=out).rev() {
            if self.nodes[k].adjoint.iter().all(|&a| a == T::zero()) {
                continue;
            }
            let contributions = self.local_vjp(k).map_err(|e| Error::Node {
                node: k,
                source: Box::new(e),
            })?;
            if let Op::Parameter { offset } = self.nodes[k].op {
                for (g, &a) in grad[offset..].iter_mut().zip(&self.nodes[k].adjoint) {
                    *g += a;
                }
            }
            for (parent, delta) in contributions {
                let adj = &mut self.nodes[parent].adjoint;
                if delta.len() == adj.len() {
                    for (a, d) in adj.iter_mut().zip(delta) {
                        *a += d;
                    }
                } else {
                    // broadcast scalar parent
                    adj[0] += delta.into_iter().sum();
                }
            }
        }
        Ok(grad)
    }

    /// Pullback of the node adjoint onto each parent.
    fn local_vjp(&self, k: NodeId) -> Result<Vec<(NodeId, Vec<T>)>> {
        let node = &self.nodes[k];
        let g = &node.adjoint;
        let val = |i: usize| -> &[T] { &self.nodes[node.parents[i]].value };
        let len = node.len();
        let one = T::one();
        let zero = T::zero();
        let unary = |f: &dyn Fn(T, T) -> T| -> Vec<(NodeId, Vec<T>)> {
            let x = val(0);
            vec![(
                node.parents[0],
                (0..len).map(|i| g[i] * f(x[i], node.value[i])).collect(),
            )]
        };
        let out = match &node.op {
            Op::Parameter { .. } | Op::Constant => Vec::new(),
            Op::Affine { rows, cols } => {
                let (w, x) = (val(0), val(1));
                let mut gw = vec![zero; rows * cols];
                let mut gx = vec![zero; *cols];
                for i in 0..*rows {
                    let gi = g[i];
                    if gi == zero {
                        continue;
                    }
                    for j in 0..*cols {
                        gw[i * cols + j] = gi * x[j];
                        gx[j] += gi * w[i * cols + j];
                    }
                }
                vec![
                    (node.parents[0], gw),
                    (node.parents[1], gx),
                    (node.parents[2], g.clone()),
                ]
            }
            Op::Add | Op::Sub | Op::Mul | Op::Div => {
                let (a, b) = (val(0), val(1));
                let (mut ga, mut gb) = (Vec::with_capacity(len), Vec::with_capacity(len));
                for i in 0..len {
                    let (ai, bi) = (at(a, i), at(b, i));
                    let (da, db) = match node.op {
                        Op::Add => (one, one),
                        Op::Sub => (one, -one),
                        Op::Mul => (bi, ai),
                        _ => (one / bi, -ai / (bi * bi)),
                    };
                    ga.push(g[i] * da);
                    gb.push(g[i] * db);
                }
                vec![(node.parents[0], ga), (node.parents[1], gb)]
            }
            Op::Scale(c) => unary(&|_, _| *c),
            Op::Offset(_) => unary(&|_, _| one),
            Op::Relu => unary(&|x, _| if x > zero { one } else { zero }),
            Op::Sigmoid => unary(&|_, y| y * (one - y)),
            Op::Tanh => unary(&|_, y| one - y * y),
            Op::Sqrt => unary(&|x, y| {
                if x > T::lit(SQRT_GUARD) {
                    T::lit(0.5) / y
                } else {
                    zero
                }
            }),
            Op::Square => unary(&|x, _| T::lit(2.0) * x),
            Op::Abs => unary(&|x, _| {
                if x > zero {
                    one
                } else if x < zero {
                    -one
                } else {
                    zero
                }
            }),
            Op::Log => unary(&|x, _| one / x),
            Op::Clamp { lo, hi } => unary(&|x, _| if x > *lo && x < *hi { one } else { zero }),
            Op::Sum => vec![(node.parents[0], vec![g[0]; val(0).len()])],
            Op::Mean => {
                let m = val(0).len();
                vec![(node.parents[0], vec![g[0] / T::from_usize(m).unwrap(); m])]
            }
            Op::MseLoss => {
                let (p, t) = (val(0), val(1));
                let scale = T::lit(2.0) * g[0] / T::from_usize(p.len().max(1)).unwrap();
                let gp: Vec<T> = p.iter().zip(t).map(|(&a, &b)| scale * (a - b)).collect();
                let gt = gp.iter().map(|&v| -v).collect();
                vec![(node.parents[0], gp), (node.parents[1], gt)]
            }
            Op::BceLoss { eps } => {
                let (p, t) = (val(0), val(1));
                let inv = g[0] / T::from_usize(p.len().max(1)).unwrap();
                let mut gp = Vec::with_capacity(p.len());
                let mut gt = Vec::with_capacity(p.len());
                for (&a, &y) in p.iter().zip(t) {
                    let c = a.max(*eps).min(one - *eps);
                    let inside = a > *eps && a < one - *eps;
                    let dc = -(y / c) + (one - y) / (one - c);
                    gp.push(if inside { inv * dc } else { zero });
                    gt.push(inv * ((one - c).ln() - c.ln()));
                }
                vec![(node.parents[0], gp), (node.parents[1], gt)]
            }
            Op::Projection(poly) => {
                let res = node
                    .projection
                    .as_ref()
                    .ok_or_else(|| Error::Input("projection node has no cached solve".into()))?;
                let factor = hs_element(poly, res)?;
                vec![(node.parents[0], vjp(&factor, g)?)]
            }
        };
        Ok(out)
    }

    /// Piece identifiers of every nonsmooth node at the current values:
    /// sign classes of relu/abs inputs, saturation of clamps and sqrt
    /// guards, and projection active sets. Two points with the same
    /// signature lie on the same smooth piece.
    pub fn piece_signature(&self) -> Vec<Vec<i64>> {
        let class = |x: T, lo: T, hi: T| -> i64 {
            if x < lo {
                -2
            } else if x == lo {
                -1
            } else if x < hi {
                0
            } else if x == hi {
                1
            } else {
                2
            }
        };
        let mut sig = Vec::new();
        for node in &self.nodes {
            let input = node.parents.first().map(|&p| &self.nodes[p].value);
            let entry: Option<Vec<i64>> = match &node.op {
                Op::Relu | Op::Abs => input.map(|x| {
                    x.iter()
                        .map(|&v| class(v, T::zero(), T::infinity()))
                        .collect()
                }),
                Op::Sqrt => input.map(|x| {
                    x.iter()
                        .map(|&v| class(v, T::lit(SQRT_GUARD), T::infinity()))
                        .collect()
                }),
                Op::Clamp { lo, hi } => {
                    input.map(|x| x.iter().map(|&v| class(v, *lo, *hi)).collect())
                }
                Op::BceLoss { eps } => {
                    input.map(|x| x.iter().map(|&v| class(v, *eps, T::one() - *eps)).collect())
                }
                Op::Projection(_) => node
                    .projection
                    .as_ref()
                    .map(|r| r.active.iter().map(|&i| i as i64).collect()),
                _ => None,
            };
            if let Some(e) = entry {
                sig.push(e);
            }
        }
        sig
    }
}

/// Per-parameter comparison of reverse mode against central differences.
#[derive(Clone, Debug)]
pub struct GradcheckEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|analytic − numeric| / max(1, |analytic|, |numeric|)`
    pub rel_error: f64,
    /// Perturbing this parameter by `±h` changes a nonsmooth piece.
    pub flagged: bool,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    /// Largest error among entries that are not excluded.
    pub max_rel_error: f64,
    pub flagged: usize,
}

/// Compares [`Tape::reverse`] with `(Φ(θ + h eᵢ) − Φ(θ − h eᵢ)) / 2h`.
///
/// With `skip_nonsmooth`, parameters whose perturbation moves any relu,
/// abs, clamp, sqrt guard or projection active set onto a different piece
/// are flagged and excluded from `max_rel_error`. The tape is left
/// forwarded at `theta`.
pub fn gradcheck<T: Scalar>(
    tape: &mut Tape<T>,
    theta: &[T],
    h: T,
    skip_nonsmooth: bool,
) -> Result<GradcheckReport> {
    if !(h > T::zero()) {
        return Err(Error::Input(
            "finite-difference step must be positive".into(),
        ));
    }
    tape.forward(theta)?;
    let grad = tape.reverse()?;
    let base = tape.piece_signature();
    let mut point = theta.to_vec();
    let mut entries = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        point[i] = theta[i] + h;
        let plus = tape.forward(&point)?;
        let sig_plus = tape.piece_signature();
        point[i] = theta[i] - h;
        let minus = tape.forward(&point)?;
        let sig_minus = tape.piece_signature();
        point[i] = theta[i];
        let numeric = ((plus - minus) / (T::lit(2.0) * h)).as_f64();
        let analytic = grad[i].as_f64();
        let rel_error = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
        entries.push(GradcheckEntry {
            index: i,
            analytic,
            numeric,
            rel_error,
            flagged: sig_plus != base || sig_minus != base,
        });
    }
    tape.forward(theta)?;
    let flagged = entries.iter().filter(|e| e.flagged).count();
    let max_rel_error = entries
        .iter()
        .filter(|e| !(skip_nonsmooth && e.flagged))
        .fold(0.0f64, |m, e| m.max(e.rel_error));
    Ok(GradcheckReport {
        entries,
        max_rel_error,
        flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DenseMatrix;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn example_one() -> Arc<Polytope<f64>> {
        Arc::new(
            Polytope::new(
                DenseMatrix::new(1, 2, vec![-1.0, 0.0]).unwrap(),
                vec![-0.3],
                DenseMatrix::new(1, 2, vec![1.0, 1.0]).unwrap(),
                vec![1.0],
            )
            .unwrap(),
        )
    }

    /// `|‖Π(W x + β)‖² − y|` with `θ = (vec W, β)`, W row-major.
    fn example_one_tape(x: [f64; 2], y: f64) -> Tape<f64> {
        let mut t = Tape::new(6);
        let w = t.parameter(0, 4).unwrap();
        let beta = t.parameter(4, 2).unwrap();
        let xin = t.constant(x.to_vec());
        let z = t.affine(w, xin, beta, 2, 2).unwrap();
        let p = t.projection(example_one(), z).unwrap();
        let sq = t.square(p).unwrap();
        let norm = t.sum(sq).unwrap();
        let target = t.constant(vec![y]);
        let diff = t.sub(norm, target).unwrap();
        let loss = t.abs(diff).unwrap();
        t.set_output(loss).unwrap();
        t
    }

    fn product_tape() -> Tape<f64> {
        let mut t = Tape::new(2);
        let a = t.parameter(0, 1).unwrap();
        let b = t.parameter(1, 1).unwrap();
        let m = t.mul(a, b).unwrap();
        t.set_output(m).unwrap();
        t
    }

    #[test]
    fn product_forward_reverse() {
        let mut t = product_tape();
        assert_eq!(t.forward(&[2.0, 3.0]).unwrap(), 6.0);
        assert_eq!(t.reverse().unwrap(), vec![3.0, 2.0]);
    }

    #[test]
    fn relu_selections() {
        let mut t = Tape::new(1);
        let a = t.parameter(0, 1).unwrap();
        let r = t.relu(a).unwrap();
        t.set_output(r).unwrap();
        assert_eq!(t.forward(&[0.0]).unwrap(), 0.0);
        assert_eq!(t.reverse().unwrap(), vec![0.0]);
        t.forward(&[-1.0]).unwrap();
        assert_eq!(t.reverse().unwrap(), vec![0.0]);
        t.forward(&[2.0]).unwrap();
        assert_eq!(t.reverse().unwrap(), vec![1.0]);
    }

    #[test]
    fn example_one_forward_values() {
        let mut t = example_one_tape([0.0, 0.0], 0.0);
        let loss = t.forward(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(loss, 0.5, epsilon = 1e-15);
        // nodes: 0 W, 1 β, 2 x, 3 z, 4 Π(z), 5 square, 6 sum
        assert_eq!(t.value(3), &[0.0, 0.0]);
        assert_abs_diff_eq!(t.value(4)[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(t.value(4)[1], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(t.value(6)[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn example_one_gradient_is_annihilated() {
        let mut t = example_one_tape([0.0, 0.0], 0.0);
        t.forward(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let g = t.reverse().unwrap();
        // (1,1) lies in range(Bᵀ), so J(1,1) = 0 and every parameter gradient vanishes
        for v in g {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn gradcheck_quadratic() {
        let mut t = Tape::new(1);
        let a = t.parameter(0, 1).unwrap();
        let s = t.square(a).unwrap();
        t.set_output(s).unwrap();
        let rep = gradcheck(&mut t, &[3.0], 1e-6, true).unwrap();
        assert_abs_diff_eq!(rep.entries[0].analytic, 6.0);
        assert!(rep.max_rel_error <= 1e-8);
    }

    #[test]
    fn gradcheck_flags_relu_kink() {
        let mut t = Tape::new(1);
        let a = t.parameter(0, 1).unwrap();
        let r = t.relu(a).unwrap();
        t.set_output(r).unwrap();
        let rep = gradcheck(&mut t, &[0.0], 1e-6, true).unwrap();
        assert_eq!(rep.flagged, 1);
        assert!(rep.entries[0].flagged);
        assert_eq!(rep.max_rel_error, 0.0);
        let strict = gradcheck(&mut t, &[0.0], 1e-6, false).unwrap();
        assert!(strict.max_rel_error > 0.4);
    }

    #[test]
    fn gradcheck_example_one_strict_complementarity() {
        // W x + β = (0.05, 1.2): the floor x1 ≥ 0.3 binds with a positive multiplier
        let mut t = example_one_tape([1.0, 2.0], 0.1);
        let theta = [0.05, 0.0, 0.1, 0.6, 0.0, 0.0];
        t.forward(&theta).unwrap();
        let proj = t.node(4).projection.clone().unwrap();
        assert_eq!(proj.active, vec![0]);
        assert!(proj.lambda[0] > 1e-3);
        let rep = gradcheck(&mut t, &theta, 1e-6, true).unwrap();
        assert_eq!(rep.flagged, 0);
        assert!(rep.max_rel_error <= 1e-5, "{rep:?}");
    }

    #[test]
    fn smooth_ops_match_finite_differences() {
        let mut t = Tape::new(6);
        let a = t.parameter(0, 3).unwrap();
        let b = t.parameter(3, 3).unwrap();
        let s = t.sigmoid(a).unwrap();
        let th = t.tanh(b).unwrap();
        let prod = t.mul(s, th).unwrap();
        let d = t.div(prod, s).unwrap();
        let off = t.offset(s, 2.0).unwrap();
        let lg = t.log(off).unwrap();
        let sq = t.sqrt(off).unwrap();
        let sc = t.scale(lg, 0.7).unwrap();
        let sum1 = t.add(d, sc).unwrap();
        let sum2 = t.sub(sum1, sq).unwrap();
        let target = t.constant(vec![0.1, -0.2, 0.3]);
        let mse = t.mse_loss(sum2, target).unwrap();
        let mean = t.mean(sum2).unwrap();
        let total = t.add(mse, mean).unwrap();
        t.set_output(total).unwrap();
        let theta = [0.3, -0.4, 1.1, 0.2, 0.5, -0.9];
        let rep = gradcheck(&mut t, &theta, 1e-6, false).unwrap();
        assert!(rep.max_rel_error <= 1e-8, "{rep:?}");
    }

    #[test]
    fn bce_gradient() {
        let mut t = Tape::new(3);
        let a = t.parameter(0, 3).unwrap();
        let y = t.constant(vec![1.0, 0.0, 1.0]);
        let l = t.bce_loss(a, y, 1e-3).unwrap();
        t.set_output(l).unwrap();
        let rep = gradcheck(&mut t, &[0.3, 0.6, 0.9], 1e-6, false).unwrap();
        assert!(rep.max_rel_error <= 1e-7, "{rep:?}");
        // saturated entries contribute nothing
        t.forward(&[0.0, 1.0, 0.5]).unwrap();
        let g = t.reverse().unwrap();
        assert_eq!(&g[..2], &[0.0, 0.0]);
    }

    #[test]
    fn broadcast_scalar_operand() {
        let mut t = Tape::new(3);
        let v = t.parameter(0, 2).unwrap();
        let s = t.parameter(2, 1).unwrap();
        let c = t.sub(v, s).unwrap();
        let sq = t.square(c).unwrap();
        let m = t.sum(sq).unwrap();
        t.set_output(m).unwrap();
        let rep = gradcheck(&mut t, &[1.0, 2.0, 0.5], 1e-6, false).unwrap();
        assert!(rep.max_rel_error < 1e-8);
        assert_abs_diff_eq!(rep.entries[2].analytic, -2.0 * (0.5 + 1.5), epsilon = 1e-12);
    }

    #[test]
    fn shape_and_order_errors() {
        let mut t = Tape::<f64>::new(2);
        assert!(t.parameter(1, 2).is_err());
        let a = t.parameter(0, 2).unwrap();
        let c = t.constant(vec![1.0, 2.0, 3.0]);
        assert!(t.add(a, c).is_err());
        assert!(t.set_output(a).is_err());
        assert!(t.forward(&[0.0, 0.0]).is_err());
        assert!(t.reverse().is_err());
        assert!(t.add(a, 99).is_err());
    }

    #[test]
    fn projection_vjp_matches_dense_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let p = Arc::new(crate::testing::random_polytope(&mut rng, 16, 10, 3));
            let n = p.n();
            let mut t = Tape::new(n);
            let x = t.parameter(0, n).unwrap();
            let y = t.projection(p.clone(), x).unwrap();
            let wv: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w = t.constant(wv.clone());
            let prod = t.mul(y, w).unwrap();
            let s = t.sum(prod).unwrap();
            t.set_output(s).unwrap();
            let theta = crate::testing::random_point(&mut rng, n, 2.0);
            t.forward(&theta).unwrap();
            let g = t.reverse().unwrap();
            let res = t.node(y).projection.clone().unwrap();
            let j = crate::hs::dense_jacobian(&hs_element(&p, &res).unwrap()).unwrap();
            let reference = j.tr_matvec(&wv).unwrap();
            for (a, b) in g.iter().zip(&reference) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn reverse_is_linear_in_the_output() {
        let build = |which: u8| {
            let mut t = Tape::new(2);
            let a = t.parameter(0, 2).unwrap();
            let th = t.tanh(a).unwrap();
            let s1 = t.sum(th).unwrap();
            let sq = t.square(a).unwrap();
            let s2 = t.mean(sq).unwrap();
            let out = match which {
                1 => s1,
                2 => s2,
                _ => t.add(s1, s2).unwrap(),
            };
            t.set_output(out).unwrap();
            t
        };
        let theta = [0.4, -1.3];
        let mut grads: Vec<Vec<f64>> = Vec::new();
        for w in [1u8, 2, 3] {
            let mut t = build(w);
            t.forward(&theta).unwrap();
            grads.push(t.reverse().unwrap());
        }
        for i in 0..2 {
            assert!((grads[0][i] + grads[1][i] - grads[2][i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn reverse_is_deterministic() {
        let mut a = example_one_tape([1.0, 2.0], 0.1);
        let mut b = example_one_tape([1.0, 2.0], 0.1);
        let theta = [0.05, 0.0, 0.1, 0.6, 0.3, -0.2];
        a.forward(&theta).unwrap();
        b.forward(&theta).unwrap();
        let ga = a.reverse().unwrap();
        let gb = b.reverse().unwrap();
        assert_eq!(
            ga.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            gb.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn forward_error_names_node() {
        let mut t = Tape::new(1);
        let a = t.parameter(0, 1).unwrap();
        let l = t.log(a).unwrap();
        t.set_output(l).unwrap();
        match t.forward(&[-1.0]) {
            Err(Error::Node { node, .. }) => assert_eq!(node, 1),
            other => panic!("{other:?}"),
        }
    }
}
