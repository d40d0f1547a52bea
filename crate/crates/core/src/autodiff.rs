//! Scalar reverse-mode differentiation.
//!
//! Geometry code (kinematics, projection, losses) is written once against the
//! [`Real`] trait and evaluated either with plain `f64` or with [`Var`], which
//! records every operation on a [`Tape`]. Operations whose derivatives are
//! computed elsewhere (the flow's input gradient) enter the tape through
//! [`Tape::custom`].

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Numeric scalar usable by the differentiable geometry code.
pub trait Real:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    /// Value with externally supplied partials w.r.t. `inputs`.
    fn custom(inputs: &[Self], value: f64, partials: &[f64]) -> Self;

    fn powi2(self) -> Self {
        self * self
    }
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn custom(_inputs: &[Self], value: f64, _partials: &[f64]) -> Self {
        value
    }
}

#[derive(Clone, Copy)]
struct Span {
    start: u32,
    end: u32,
}

/// Append-only record of operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Span>>,
    edges: RefCell<Vec<(u32, f64)>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes (inputs included).
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, parents: &[(u32, f64)]) -> u32 {
        let mut edges = self.edges.borrow_mut();
        let start = edges.len() as u32;
        edges.extend_from_slice(parents);
        let end = edges.len() as u32;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Span { start, end });
        (nodes.len() - 1) as u32
    }

    /// A new independent variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.push(&[]);
        Var {
            tape: Some(self),
            idx,
            val: value,
        }
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    /// Node with externally supplied value and partial derivatives
    /// `∂out/∂inputs[i] = partials[i]`.
    pub fn custom<'t>(&'t self, inputs: &[Var<'t>], value: f64, partials: &[f64]) -> Var<'t> {
        assert_eq!(inputs.len(), partials.len());
        let parents: Vec<(u32, f64)> = inputs
            .iter()
            .zip(partials)
            .filter(|(v, _)| v.tape.is_some())
            .map(|(v, &p)| (v.idx, p))
            .collect();
        let idx = self.push(&parents);
        Var {
            tape: Some(self),
            idx,
            val: value,
        }
    }

    /// Adjoints of every node with respect to `output`.
    pub fn gradient(&self, output: Var<'_>) -> Gradient {
        let nodes = self.nodes.borrow();
        let edges = self.edges.borrow();
        let mut adj = vec![0.0; nodes.len()];
        if output.tape.is_none() {
            return Gradient { adj };
        }
        adj[output.idx as usize] = 1.0;
        for i in (0..=output.idx as usize).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let span = nodes[i];
            for &(p, w) in &edges[span.start as usize..span.end as usize] {
                adj[p as usize] += w * a;
            }
        }
        Gradient { adj }
    }
}

/// Result of a backward sweep.
pub struct Gradient {
    adj: Vec<f64>,
}

impl Gradient {
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        match v.tape {
            Some(_) => self.adj.get(v.idx as usize).copied().unwrap_or(0.0),
            None => 0.0,
        }
    }

    pub fn wrt_all(&self, vs: &[Var<'_>]) -> Vec<f64> {
        vs.iter().map(|&v| self.wrt(v)).collect()
    }
}

/// Differentiable scalar. Constants carry no tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    idx: u32,
    val: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.val)
    }
}

impl<'t> Var<'t> {
    fn unary(self, val: f64, d: f64) -> Self {
        match self.tape {
            Some(t) => Var {
                tape: Some(t),
                idx: t.push(&[(self.idx, d)]),
                val,
            },
            None => Var {
                tape: None,
                idx: 0,
                val,
            },
        }
    }

    fn binary(self, rhs: Self, val: f64, da: f64, db: f64) -> Self {
        match (self.tape, rhs.tape) {
            (Some(t), Some(_)) => Var {
                tape: Some(t),
                idx: t.push(&[(self.idx, da), (rhs.idx, db)]),
                val,
            },
            (Some(_), None) => self.unary(val, da),
            (None, Some(_)) => rhs.unary(val, db),
            (None, None) => Var {
                tape: None,
                idx: 0,
                val,
            },
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, self.val + rhs.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, self.val - rhs.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, self.val * rhs.val, rhs.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.val;
        self.binary(rhs, self.val * inv, inv, -self.val * inv * inv)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(-self.val, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Self;
    fn add(self, rhs: f64) -> Self {
        self.unary(self.val + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: f64) -> Self {
        self.unary(self.val - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        self.unary(self.val * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Self;
    fn div(self, rhs: f64) -> Self {
        self.unary(self.val / rhs, 1.0 / rhs)
    }
}

impl<'t> Real for Var<'t> {
    fn cst(v: f64) -> Self {
        Var {
            tape: None,
            idx: 0,
            val: v,
        }
    }
    fn value(self) -> f64 {
        self.val
    }
    fn sqrt(self) -> Self {
        let r = self.val.sqrt();
        // zero slope at the origin keeps coincident points differentiable
        let d = if r > 0.0 { 0.5 / r } else { 0.0 };
        self.unary(r, d)
    }
    fn sin(self) -> Self {
        self.unary(self.val.sin(), self.val.cos())
    }
    fn cos(self) -> Self {
        self.unary(self.val.cos(), -self.val.sin())
    }
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }
    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }
    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.unary(t, 1.0 - t * t)
    }
    fn custom(inputs: &[Self], value: f64, partials: &[f64]) -> Self {
        match inputs.iter().find_map(|v| v.tape) {
            Some(t) => t.custom(inputs, value, partials),
            None => Var::cst(value),
        }
    }
}
