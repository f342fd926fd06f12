//! Small dense solvers for the convexified subproblems.
//!
//! Every quadratic form is Hermitian and handled in complex arithmetic. A
//! problem of dimension one is a planar problem in disguise and gets an exact
//! enumeration solver; larger problems go through dual bisection on the single
//! quadratic inequality with a closed-form inner minimization.

mod dual;
mod eig;
mod planar;

pub use eig::{lambda_max, max_generalized_eig};

use crate::channel::C64;
use nalgebra::{DMatrix, DVector};

/// Failure modes that prevent a solve from starting or finishing.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SolverError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("quadratic form is not positive semidefinite (min eigenvalue {0:e})")]
    NotConvex(f64),
    #[error("matrix is singular or not positive definite")]
    Singular,
    #[error("unsupported constraint combination: {0}")]
    Unsupported(&'static str),
    #[error("objective is unbounded below on the feasible set")]
    Unbounded,
}

/// Hermitian matrix stored as disjoint dense diagonal blocks; uncovered entries are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockHermitian {
    dim: usize,
    blocks: Vec<(usize, DMatrix<C64>)>,
}

impl BlockHermitian {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, blocks: Vec::new() }
    }

    pub fn dense(m: DMatrix<C64>) -> Self {
        assert!(m.is_square(), "dense block must be square");
        let dim = m.nrows();
        Self { dim, blocks: vec![(0, m)] }
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let mut out = Self::zeros(d.len());
        for (i, v) in d.iter().enumerate() {
            out.blocks.push((i, DMatrix::from_element(1, 1, C64::new(*v, 0.0))));
        }
        out
    }

    pub fn scaled_identity(dim: usize, s: f64) -> Self {
        Self::diagonal(&vec![s; dim])
    }

    /// Adds a block at `offset`; blocks may not overlap.
    pub fn push_block(&mut self, offset: usize, block: DMatrix<C64>) -> Result<(), SolverError> {
        if !block.is_square() || offset + block.nrows() > self.dim {
            return Err(SolverError::Dimension(format!(
                "block {}x{} at offset {offset} exceeds dimension {}",
                block.nrows(),
                block.ncols(),
                self.dim
            )));
        }
        let end = offset + block.nrows();
        if self.blocks.iter().any(|(o, b)| offset < o + b.nrows() && *o < end) {
            return Err(SolverError::Dimension(format!("block at offset {offset} overlaps an existing block")));
        }
        self.blocks.push((offset, block));
        self.blocks.sort_by_key(|(o, _)| *o);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[(usize, DMatrix<C64>)] {
        &self.blocks
    }

    pub fn apply(&self, x: &DVector<C64>) -> DVector<C64> {
        let mut y = DVector::zeros(self.dim);
        for (o, b) in &self.blocks {
            let n = b.nrows();
            let yb = b * x.rows(*o, n);
            y.rows_mut(*o, n).copy_from(&yb);
        }
        y
    }

    /// `x^H M x`, real by hermiticity.
    pub fn quad_form(&self, x: &DVector<C64>) -> f64 {
        self.blocks
            .iter()
            .map(|(o, b)| {
                let xb = x.rows(*o, b.nrows());
                xb.dotc(&(b * xb)).re
            })
            .sum()
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (o, b) in &self.blocks {
            m.view_mut((*o, *o), b.shape()).copy_from(b);
        }
        m
    }

    /// Largest absolute entry, used as a scale for tolerances.
    pub fn max_abs(&self) -> f64 {
        self.blocks.iter().flat_map(|(_, b)| b.iter().map(|v| v.norm())).fold(0.0, f64::max)
    }

    fn min_eigenvalue(&self) -> f64 {
        self.blocks
            .iter()
            .map(|(_, b)| {
                let h = (b + b.adjoint()) * C64::new(0.5, 0.0);
                h.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
            })
            .fold(if self.covers_all() { f64::INFINITY } else { 0.0 }, f64::min)
    }

    fn covers_all(&self) -> bool {
        self.blocks.iter().map(|(_, b)| b.nrows()).sum::<usize>() == self.dim
    }

    /// True when every block is 1x1 (and so the matrix is diagonal).
    pub fn is_diagonal(&self) -> bool {
        self.blocks.iter().all(|(_, b)| b.nrows() == 1)
    }

    /// Entry `(i, i)`, zero when uncovered.
    pub fn diag_entry(&self, i: usize) -> f64 {
        self.blocks
            .iter()
            .find(|(o, b)| i >= *o && i < o + b.nrows())
            .map(|(o, b)| b[(i - o, i - o)].re)
            .unwrap_or(0.0)
    }
}

/// `x^H H x − 2 Re{a^H x} + c` with `H` Hermitian PSD.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexQuadratic {
    pub hessian: BlockHermitian,
    pub linear: DVector<C64>,
    pub constant: f64,
}

impl ConvexQuadratic {
    /// Validates shape and convexity (smallest eigenvalue ≥ −1e−8·‖H‖).
    pub fn new(hessian: BlockHermitian, linear: DVector<C64>, constant: f64) -> Result<Self, SolverError> {
        if hessian.dim() != linear.len() {
            return Err(SolverError::Dimension(format!(
                "hessian dimension {} but linear term length {}",
                hessian.dim(),
                linear.len()
            )));
        }
        let scale = hessian.max_abs();
        let min_eig = hessian.min_eigenvalue();
        if min_eig < -1e-8 * scale.max(f64::MIN_POSITIVE) {
            return Err(SolverError::NotConvex(min_eig));
        }
        Ok(Self { hessian, linear, constant })
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn eval(&self, x: &DVector<C64>) -> f64 {
        self.hessian.quad_form(x) - 2.0 * self.linear.dotc(x).re + self.constant
    }

    /// Gradient with respect to the real embedding, packed as a complex vector: `2(Hx − a)`.
    pub fn gradient(&self, x: &DVector<C64>) -> DVector<C64> {
        (self.hessian.apply(x) - &self.linear) * C64::new(2.0, 0.0)
    }

    /// Magnitude of the individual terms at `x`, for relative tolerances.
    fn scale_at(&self, x: &DVector<C64>) -> f64 {
        self.hessian.quad_form(x).abs() + 2.0 * self.linear.dotc(x).norm() + self.constant.abs()
    }
}

/// `‖x[selector]‖ ≤ radius`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ball {
    pub selector: Vec<usize>,
    pub radius: f64,
}

impl Ball {
    pub fn norm_of(&self, x: &DVector<C64>) -> f64 {
        self.selector.iter().map(|&i| x[i].norm_sqr()).sum::<f64>().sqrt()
    }
}

/// `Re{a^H x} ≤ b`.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfSpace {
    pub normal: DVector<C64>,
    pub offset: f64,
}

/// Componentwise bounds; real and imaginary parts are bounded separately.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxRegion {
    pub lower: Vec<C64>,
    pub upper: Vec<C64>,
}

impl BoxRegion {
    pub fn violation(&self, x: &DVector<C64>) -> f64 {
        let mut v: f64 = 0.0;
        for i in 0..x.len() {
            v = v
                .max(self.lower[i].re - x[i].re)
                .max(x[i].re - self.upper[i].re)
                .max(self.lower[i].im - x[i].im)
                .max(x[i].im - self.upper[i].im);
        }
        v
    }

    pub fn clip(&self, x: &DVector<C64>) -> DVector<C64> {
        DVector::from_fn(x.len(), |i, _| {
            C64::new(
                x[i].re.clamp(self.lower[i].re, self.upper[i].re),
                x[i].im.clamp(self.lower[i].im, self.upper[i].im),
            )
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QcqpProblem {
    pub objective: ConvexQuadratic,
    pub quad_ineq: Option<ConvexQuadratic>,
    pub balls: Vec<Ball>,
    pub halfspaces: Vec<HalfSpace>,
    pub bounds: Option<BoxRegion>,
}

impl QcqpProblem {
    pub fn new(objective: ConvexQuadratic) -> Self {
        Self { objective, quad_ineq: None, balls: Vec::new(), halfspaces: Vec::new(), bounds: None }
    }

    pub fn with_quad_ineq(mut self, q: ConvexQuadratic) -> Self {
        self.quad_ineq = Some(q);
        self
    }

    pub fn with_ball(mut self, selector: Vec<usize>, radius: f64) -> Self {
        self.balls.push(Ball { selector, radius });
        self
    }

    pub fn with_halfspace(mut self, normal: DVector<C64>, offset: f64) -> Self {
        self.halfspaces.push(HalfSpace { normal, offset });
        self
    }

    pub fn with_bounds(mut self, lower: Vec<C64>, upper: Vec<C64>) -> Self {
        self.bounds = Some(BoxRegion { lower, upper });
        self
    }

    pub fn dim(&self) -> usize {
        self.objective.dim()
    }

    fn validate(&self) -> Result<(), SolverError> {
        let n = self.dim();
        if n == 0 {
            return Err(SolverError::Dimension("empty problem".into()));
        }
        if let Some(q) = &self.quad_ineq {
            if q.dim() != n {
                return Err(SolverError::Dimension("quadratic inequality dimension".into()));
            }
        }
        let mut seen = vec![false; n];
        for b in &self.balls {
            if !(b.radius > 0.0) || b.selector.is_empty() {
                return Err(SolverError::Dimension("ball needs a nonempty selector and a positive radius".into()));
            }
            for &i in &b.selector {
                if i >= n || seen[i] {
                    return Err(SolverError::Dimension(format!("ball selector index {i} out of range or shared")));
                }
                seen[i] = true;
            }
        }
        for h in &self.halfspaces {
            if h.normal.len() != n {
                return Err(SolverError::Dimension("halfspace normal length".into()));
            }
        }
        if let Some(b) = &self.bounds {
            if b.lower.len() != n || b.upper.len() != n {
                return Err(SolverError::Dimension("box bound length".into()));
            }
            if b.lower.iter().zip(&b.upper).any(|(l, u)| l.re > u.re || l.im > u.im) {
                return Err(SolverError::Dimension("box lower bound exceeds upper bound".into()));
            }
        }
        Ok(())
    }

    /// Largest relative constraint violation at `x` (0 when feasible).
    pub fn max_violation(&self, x: &DVector<C64>) -> f64 {
        let mut v: f64 = 0.0;
        if let Some(q) = &self.quad_ineq {
            v = v.max(q.eval(x) / q.scale_at(x).max(f64::MIN_POSITIVE));
        }
        for b in &self.balls {
            v = v.max((b.norm_of(x) - b.radius) / b.radius.max(f64::MIN_POSITIVE));
        }
        for h in &self.halfspaces {
            let val = h.normal.dotc(x).re;
            v = v.max((val - h.offset) / (h.normal.norm() * x.norm() + h.offset.abs()).max(f64::MIN_POSITIVE));
        }
        if let Some(bx) = &self.bounds {
            let scale = 1.0 + x.iter().map(|c| c.norm()).fold(0.0, f64::max);
            v = v.max(bx.violation(x) / scale);
        }
        v.max(0.0)
    }

    /// Relative KKT residual: projected stationarity, complementarity and feasibility.
    ///
    /// `dual` is laid out as `[ν, λ per ball.., π per halfspace..]`; box
    /// multipliers are implicit in the projection of the stationarity vector.
    pub fn kkt_residual(&self, x: &DVector<C64>, dual: &[f64]) -> f64 {
        let nb = self.balls.len();
        let nu = dual.first().copied().unwrap_or(0.0);
        let mut grad = self.objective.gradient(x);
        let mut denom = 2.0 * self.objective.hessian.apply(x).norm() + 2.0 * self.objective.linear.norm();
        let mut worst: f64 = 0.0;
        if let Some(q) = &self.quad_ineq {
            grad += q.gradient(x) * C64::new(nu, 0.0);
            denom += nu * (2.0 * q.hessian.apply(x).norm() + 2.0 * q.linear.norm());
            if nu > 0.0 {
                worst = worst.max(q.eval(x).abs() / q.scale_at(x).max(f64::MIN_POSITIVE));
            }
        }
        for (m, b) in self.balls.iter().enumerate() {
            let lam = dual.get(1 + m).copied().unwrap_or(0.0);
            let mut px = DVector::zeros(x.len());
            for &i in &b.selector {
                px[i] = x[i];
            }
            grad += &px * C64::new(2.0 * lam, 0.0);
            denom += 2.0 * lam * px.norm();
            if lam > 0.0 {
                worst = worst.max((b.norm_of(x) - b.radius).abs() / b.radius.max(f64::MIN_POSITIVE));
            }
        }
        for (j, h) in self.halfspaces.iter().enumerate() {
            let pi = dual.get(1 + nb + j).copied().unwrap_or(0.0);
            grad += &h.normal * C64::new(pi, 0.0);
            denom += pi * h.normal.norm();
            if pi > 0.0 {
                let val = h.normal.dotc(x).re;
                worst = worst
                    .max((val - h.offset).abs() / (h.normal.norm() * x.norm() + h.offset.abs()).max(f64::MIN_POSITIVE));
            }
        }
        if let Some(bx) = &self.bounds {
            for i in 0..x.len() {
                let scale = 1e-10 * (1.0 + x[i].norm());
                let (mut gr, mut gi) = (grad[i].re, grad[i].im);
                if (x[i].re - bx.lower[i].re).abs() <= scale && gr > 0.0 {
                    gr = 0.0;
                }
                if (x[i].re - bx.upper[i].re).abs() <= scale && gr < 0.0 {
                    gr = 0.0;
                }
                if (x[i].im - bx.lower[i].im).abs() <= scale && gi > 0.0 {
                    gi = 0.0;
                }
                if (x[i].im - bx.upper[i].im).abs() <= scale && gi < 0.0 {
                    gi = 0.0;
                }
                grad[i] = C64::new(gr, gi);
            }
        }
        let stationarity = if denom > 0.0 { grad.norm() / denom } else { 0.0 };
        worst.max(stationarity).max(self.max_violation(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub objective: f64,
    /// `[ν, λ per ball.., π per halfspace..]`, all nonnegative.
    pub dual: Vec<f64>,
    pub kkt_residual: f64,
    /// For infeasible problems: the positive minimum of the quadratic
    /// inequality (or worst violation) over the remaining constraints.
    pub certificate: Option<f64>,
    pub iterations: usize,
}

/// Bisection budget on the inequality multiplier.
pub const MAX_BISECTION_STEPS: usize = 200;
/// Target for `kkt_residual` on an optimal solve.
pub const KKT_TOL: f64 = 1e-6;

/// Minimizes a convex quadratic subject to at most one convex quadratic
/// inequality, disjoint balls, halfspaces (planar problems only) and a box.
pub fn solve_qcqp(problem: &QcqpProblem) -> Result<(DVector<C64>, SolveReport), SolverError> {
    problem.validate()?;
    if problem.dim() == 1 {
        planar::solve(problem)
    } else {
        dual::solve(problem)
    }
}

fn finish(problem: &QcqpProblem, x: DVector<C64>, dual: Vec<f64>, iterations: usize, converged: bool) -> (DVector<C64>, SolveReport) {
    let kkt = problem.kkt_residual(&x, &dual);
    let ok = converged && kkt <= KKT_TOL * (1.0 + problem.objective.linear.norm());
    let report = SolveReport {
        status: if ok { SolveStatus::Optimal } else { SolveStatus::MaxIter },
        objective: problem.objective.eval(&x),
        dual,
        kkt_residual: kkt,
        certificate: None,
        iterations,
    };
    (x, report)
}

fn infeasible(n: usize, dual_len: usize, certificate: f64, iterations: usize) -> (DVector<C64>, SolveReport) {
    let report = SolveReport {
        status: SolveStatus::Infeasible,
        objective: f64::INFINITY,
        dual: vec![0.0; dual_len],
        kkt_residual: f64::INFINITY,
        certificate: Some(certificate),
        iterations,
    };
    (DVector::zeros(n), report)
}
