//! Dual bisection on the inequality multiplier with a blockwise inner solve.
//!
//! For a fixed multiplier ν the Lagrangian is `x^H K x − 2Re{b^H x}` with
//! `K = H₀ + νG + Σ λ_m P_m`. The ball multipliers `λ` are found by a
//! safeguarded Newton iteration on the secular equations
//! `1/r_m − 1/‖x_{S_m}(λ)‖ = 0`; balls may share Hessian blocks, so the
//! equations are solved jointly.

use super::{finish, infeasible, Ball, BlockHermitian, BoxRegion, QcqpProblem, SolveReport, SolverError, MAX_BISECTION_STEPS};
use crate::channel::C64;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

const BALL_TOL: f64 = 1e-12;
const NEWTON_STEPS: usize = 100;

/// Inner Lagrangian minimizer for fixed ν.
struct Inner<'a> {
    ranges: Vec<(usize, usize)>,
    blocks: Vec<DMatrix<C64>>,
    rhs: DVector<C64>,
    balls: &'a [Ball],
    ball_of: Vec<Option<usize>>,
}

/// Smallest partition of `0..n` into contiguous ranges such that every block
/// of every matrix lies inside one range.
fn merged_partition(n: usize, mats: &[&BlockHermitian]) -> Vec<(usize, usize)> {
    let mut iv: Vec<(usize, usize)> = mats
        .iter()
        .flat_map(|m| m.blocks().iter().map(|(o, b)| (*o, o + b.nrows())))
        .collect();
    let mut covered = vec![false; n];
    for (s, e) in &iv {
        covered[*s..*e].iter_mut().for_each(|c| *c = true);
    }
    iv.extend((0..n).filter(|i| !covered[*i]).map(|i| (i, i + 1)));
    iv.sort();
    let mut out: Vec<(usize, usize)> = Vec::new();
    for (s, e) in iv {
        match out.last_mut() {
            Some(last) if s < last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out.into_iter().map(|(s, e)| (s, e - s)).collect()
}

fn assemble(ranges: &[(usize, usize)], terms: &[(&BlockHermitian, f64)]) -> Vec<DMatrix<C64>> {
    ranges
        .iter()
        .map(|&(o, len)| {
            let mut m = DMatrix::zeros(len, len);
            for (mat, w) in terms {
                if *w == 0.0 {
                    continue;
                }
                for (bo, b) in mat.blocks() {
                    if *bo >= o && bo + b.nrows() <= o + len {
                        let mut v = m.view_mut((bo - o, bo - o), b.shape());
                        v += b * C64::new(*w, 0.0);
                    }
                }
            }
            m
        })
        .collect()
}

/// Cholesky with an escalating ridge; the input is PSD up to rounding.
fn factor_psd(m: DMatrix<C64>) -> Cholesky<C64, Dyn> {
    if let Some(c) = m.clone().cholesky() {
        return c;
    }
    let n = m.nrows();
    let scale = (0..n).map(|i| m[(i, i)].re.abs()).fold(0.0, f64::max);
    let mut ridge = 1e-14 * if scale > 0.0 { scale } else { 1e-300 };
    loop {
        let shifted = &m + DMatrix::<C64>::identity(n, n) * C64::new(ridge, 0.0);
        if let Some(c) = shifted.cholesky() {
            return c;
        }
        ridge *= 10.0;
    }
}

impl<'a> Inner<'a> {
    fn new(n: usize, terms: &[(&BlockHermitian, f64)], rhs: DVector<C64>, ranges: &[(usize, usize)], balls: &'a [Ball]) -> Self {
        let mut ball_of = vec![None; n];
        for (m, b) in balls.iter().enumerate() {
            for &i in &b.selector {
                ball_of[i] = Some(m);
            }
        }
        Self { ranges: ranges.to_vec(), blocks: assemble(ranges, terms), rhs, balls, ball_of }
    }

    fn factor(&self, lam: &[f64]) -> Vec<Cholesky<C64, Dyn>> {
        self.ranges
            .iter()
            .zip(&self.blocks)
            .map(|(&(o, len), b)| {
                let mut m = b.clone();
                for i in 0..len {
                    if let Some(bi) = self.ball_of[o + i] {
                        m[(i, i)] += C64::new(lam[bi], 0.0);
                    }
                }
                factor_psd(m)
            })
            .collect()
    }

    fn apply_inverse(&self, fac: &[Cholesky<C64, Dyn>], v: &DVector<C64>) -> DVector<C64> {
        let mut x = DVector::zeros(v.len());
        for (&(o, len), c) in self.ranges.iter().zip(fac) {
            let xb = c.solve(&v.rows(o, len).into_owned());
            x.rows_mut(o, len).copy_from(&xb);
        }
        x
    }

    fn solve_at(&self, lam: &[f64]) -> (DVector<C64>, Vec<Cholesky<C64, Dyn>>) {
        let fac = self.factor(lam);
        let x = self.apply_inverse(&fac, &self.rhs);
        (x, fac)
    }

    fn residual(&self, lam: &[f64], norms: &[f64]) -> f64 {
        self.balls
            .iter()
            .enumerate()
            .map(|(m, b)| {
                let viol = (norms[m] - b.radius) / b.radius;
                if lam[m] > 0.0 {
                    viol.abs()
                } else {
                    viol.max(0.0)
                }
            })
            .fold(0.0, f64::max)
    }

    fn norms(&self, x: &DVector<C64>) -> Vec<f64> {
        self.balls.iter().map(|b| b.norm_of(x)).collect()
    }

    fn masked(&self, x: &DVector<C64>, m: usize) -> DVector<C64> {
        let mut px = DVector::zeros(x.len());
        for &i in &self.balls[m].selector {
            px[i] = x[i];
        }
        px
    }

    /// Minimizer for fixed ν; updates `lam` in place (warm start).
    fn solve(&self, lam: &mut [f64]) -> (DVector<C64>, bool) {
        if self.balls.is_empty() {
            return (self.solve_at(lam).0, true);
        }
        if let Some(x) = self.newton(lam) {
            return (x, true);
        }
        self.coordinate_bisection(lam)
    }

    fn newton(&self, lam: &mut [f64]) -> Option<DVector<C64>> {
        let nb = self.balls.len();
        let (mut x, mut fac) = self.solve_at(lam);
        let mut norms = self.norms(&x);
        let mut res = self.residual(lam, &norms);
        for _ in 0..NEWTON_STEPS {
            if res <= BALL_TOL {
                return Some(x);
            }
            let active: Vec<usize> =
                (0..nb).filter(|&m| lam[m] > 0.0 || norms[m] > self.balls[m].radius).collect();
            if let Some(&m) = active.iter().find(|&&m| norms[m] == 0.0) {
                lam[m] = 0.0;
                (x, fac) = self.solve_at(lam);
                norms = self.norms(&x);
                res = self.residual(lam, &norms);
                continue;
            }
            let masked: Vec<DVector<C64>> = active.iter().map(|&m| self.masked(&x, m)).collect();
            let solved: Vec<DVector<C64>> = masked.iter().map(|p| self.apply_inverse(&fac, p)).collect();
            let na = active.len();
            let jac = DMatrix::from_fn(na, na, |i, j| -masked[i].dotc(&solved[j]).re / norms[active[i]].powi(3));
            let f = DVector::from_fn(na, |i, _| 1.0 / self.balls[active[i]].radius - 1.0 / norms[active[i]]);
            let step = jac.lu().solve(&(-f))?;
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let mut trial = lam.to_vec();
                for (i, &m) in active.iter().enumerate() {
                    trial[m] = (lam[m] + t * step[i]).max(0.0);
                }
                let (tx, tfac) = self.solve_at(&trial);
                let tnorms = self.norms(&tx);
                let tres = self.residual(&trial, &tnorms);
                if tres < res {
                    lam.copy_from_slice(&trial);
                    (x, fac, norms, res) = (tx, tfac, tnorms, tres);
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                return if res <= 1e3 * BALL_TOL { Some(x) } else { None };
            }
        }
        (res <= 1e3 * BALL_TOL).then_some(x)
    }

    /// Slow but monotone fallback: cyclic exact maximization of the dual over one λ at a time.
    fn coordinate_bisection(&self, lam: &mut [f64]) -> (DVector<C64>, bool) {
        let nb = self.balls.len();
        for _ in 0..200 {
            for m in 0..nb {
                let norm_at = |v: f64, lam: &mut [f64]| {
                    lam[m] = v;
                    self.balls[m].norm_of(&self.solve_at(lam).0)
                };
                let r = self.balls[m].radius;
                if norm_at(0.0, lam) <= r {
                    continue;
                }
                let mut hi = 1e-300_f64.max(self.blocks.iter().map(|b| b.norm()).fold(0.0, f64::max));
                while norm_at(hi, lam) > r && hi.is_finite() {
                    hi *= 2.0;
                }
                let mut lo = 0.0;
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    if norm_at(mid, lam) > r {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                lam[m] = hi;
            }
            let x = self.solve_at(lam).0;
            if self.residual(lam, &self.norms(&x)) <= 1e3 * BALL_TOL {
                return (x, true);
            }
        }
        (self.solve_at(lam).0, false)
    }
}

/// Exact minimizer of a separable diagonal quadratic over a box.
fn box_minimizer(inner: &Inner, bx: &BoxRegion) -> Result<DVector<C64>, SolverError> {
    let n = inner.rhs.len();
    let mut x = DVector::zeros(n);
    for (&(o, _), b) in inner.ranges.iter().zip(&inner.blocks) {
        let k = b[(0, 0)].re;
        let rhs = inner.rhs[o];
        let coord = |r: f64, lo: f64, hi: f64| -> Result<f64, SolverError> {
            if k > 0.0 {
                Ok((r / k).clamp(lo, hi))
            } else if r > 0.0 {
                hi.is_finite().then_some(hi).ok_or(SolverError::Unbounded)
            } else if r < 0.0 {
                lo.is_finite().then_some(lo).ok_or(SolverError::Unbounded)
            } else {
                Ok(0.0_f64.clamp(lo, hi))
            }
        };
        x[o] = C64::new(
            coord(rhs.re, bx.lower[o].re, bx.upper[o].re)?,
            coord(rhs.im, bx.lower[o].im, bx.upper[o].im)?,
        );
    }
    Ok(x)
}

pub(super) fn solve(p: &QcqpProblem) -> Result<(DVector<C64>, SolveReport), SolverError> {
    if !p.halfspaces.is_empty() {
        return Err(SolverError::Unsupported("halfspaces are only supported for one-dimensional problems"));
    }
    if p.bounds.is_some() && !p.balls.is_empty() {
        return Err(SolverError::Unsupported("box and balls together"));
    }
    let n = p.dim();
    let nb = p.balls.len();
    let mut mats = vec![&p.objective.hessian];
    if let Some(q) = &p.quad_ineq {
        mats.push(&q.hessian);
    }
    let ranges = merged_partition(n, &mats);
    if p.bounds.is_some() && ranges.iter().any(|&(_, len)| len > 1) {
        return Err(SolverError::Unsupported("box constraints need a diagonal Hessian"));
    }

    let mut lam = vec![0.0; nb];
    let mut evals = 0usize;
    let mut inner_at = |nu: f64, lam: &mut Vec<f64>| -> Result<(DVector<C64>, bool), SolverError> {
        evals += 1;
        let (terms, rhs) = match &p.quad_ineq {
            Some(q) if nu > 0.0 => (
                vec![(&p.objective.hessian, 1.0), (&q.hessian, nu)],
                &p.objective.linear + &q.linear * C64::new(nu, 0.0),
            ),
            _ => (vec![(&p.objective.hessian, 1.0)], p.objective.linear.clone()),
        };
        let inner = Inner::new(n, &terms, rhs, &ranges, &p.balls);
        let (x, ok) = match &p.bounds {
            Some(bx) => (box_minimizer(&inner, bx)?, true),
            None => inner.solve(lam),
        };
        if x.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(SolverError::Unbounded);
        }
        Ok((x, ok))
    };
    let pack = |nu: f64, lam: &[f64]| -> Vec<f64> { std::iter::once(nu).chain(lam.iter().copied()).collect() };

    let (x0, ok0) = inner_at(0.0, &mut lam)?;
    let Some(q) = &p.quad_ineq else {
        return Ok(finish(p, x0, pack(0.0, &lam), 1, ok0));
    };
    let gscale = |x: &DVector<C64>| q.scale_at(x).max(f64::MIN_POSITIVE);
    if q.eval(&x0) <= 0.0 {
        return Ok(finish(p, x0, pack(0.0, &lam), 1, ok0));
    }

    // Bracket: g(x(ν)) is nonincreasing in ν.
    let h_scale = p.objective.hessian.max_abs();
    let g_scale = q.hessian.max_abs();
    let mut nu_hi = if h_scale > 0.0 && g_scale > 0.0 { h_scale / g_scale } else { 1.0 };
    let mut nu_lo = 0.0;
    let mut lam_hi = lam.clone();
    let mut steps = 0usize;
    let (mut x_hi, mut ok_hi) = loop {
        steps += 1;
        let (x, ok) = inner_at(nu_hi, &mut lam)?;
        if q.eval(&x) <= 0.0 {
            lam_hi.copy_from_slice(&lam);
            break (x, ok);
        }
        if steps > MAX_BISECTION_STEPS || !nu_hi.is_finite() {
            return Ok(infeasibility_check(p, q, &ranges, steps));
        }
        nu_lo = nu_hi;
        nu_hi *= 2.0;
    };

    let mut converged = false;
    for _ in 0..MAX_BISECTION_STEPS {
        if q.eval(&x_hi).abs() <= 1e-12 * gscale(&x_hi) || nu_hi - nu_lo <= 1e-15 * nu_hi {
            converged = true;
            break;
        }
        steps += 1;
        let mid = 0.5 * (nu_lo + nu_hi);
        let mut lam_mid = lam_hi.clone();
        let (x, ok) = inner_at(mid, &mut lam_mid)?;
        if q.eval(&x) <= 0.0 {
            (nu_hi, x_hi, ok_hi) = (mid, x, ok);
            lam_hi = lam_mid;
        } else {
            nu_lo = mid;
        }
    }
    let x_hi = project_balls(&p.balls, x_hi);
    Ok(finish(p, x_hi, pack(nu_hi, &lam_hi), steps, converged && ok_hi))
}

/// Removes the residual Newton error so every ball holds exactly.
fn project_balls(balls: &[Ball], mut x: DVector<C64>) -> DVector<C64> {
    for b in balls {
        let norm = b.norm_of(&x);
        if norm > b.radius {
            let s = b.radius / norm;
            for &i in &b.selector {
                x[i] *= s;
            }
        }
    }
    x
}

/// Decides between genuine infeasibility and a barely feasible set by
/// minimizing the inequality itself over the remaining constraints.
fn infeasibility_check(
    p: &QcqpProblem,
    q: &super::ConvexQuadratic,
    ranges: &[(usize, usize)],
    steps: usize,
) -> (DVector<C64>, SolveReport) {
    let n = p.dim();
    let inner = Inner::new(n, &[(&q.hessian, 1.0)], q.linear.clone(), ranges, &p.balls);
    let mut lam = vec![0.0; p.balls.len()];
    let x = match &p.bounds {
        Some(bx) => box_minimizer(&inner, bx).unwrap_or_else(|_| DVector::zeros(n)),
        None => project_balls(&p.balls, inner.solve(&mut lam).0),
    };
    let min_val = q.eval(&x);
    if min_val > 1e-12 * q.scale_at(&x).max(f64::MIN_POSITIVE) {
        return infeasible(n, 1 + p.balls.len(), min_val, steps);
    }
    finish(p, x, vec![0.0; 1 + p.balls.len()], steps, false)
}
