//! Exact solver for one complex unknown, i.e. a point in the plane.
//!
//! The objective is a scaled squared distance to a fixed point (or a linear
//! function) and every constraint is a disk or a halfplane. The minimizer is
//! the unconstrained center, a projection onto one boundary, or an
//! intersection of two boundaries; all of them are enumerated.

use super::{finish, infeasible, QcqpProblem, SolveReport, SolverError};
use crate::channel::C64;
use nalgebra::{DVector, Matrix2, Vector2};

type V2 = Vector2<f64>;

#[derive(Debug, Clone, Copy)]
enum Shape {
    /// `|t − center| ≤ radius`
    Disk { center: V2, radius: f64 },
    /// `normal · t ≤ offset`
    Line { normal: V2, offset: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Origin {
    Quad,
    Ball(usize),
    Half(usize),
    Edge,
}

#[derive(Debug, Clone, Copy)]
struct Con {
    shape: Shape,
    origin: Origin,
}

impl Con {
    /// Signed geometric distance outside the constraint.
    fn violation(&self, t: V2) -> f64 {
        match self.shape {
            Shape::Disk { center, radius } => (t - center).norm() - radius,
            Shape::Line { normal, offset } => (normal.dot(&t) - offset) / normal.norm(),
        }
    }

    fn scale(&self) -> f64 {
        match self.shape {
            Shape::Disk { center, radius } => center.norm() + radius,
            Shape::Line { normal, offset } => offset.abs() / normal.norm(),
        }
    }
}

fn v2(z: C64) -> V2 {
    V2::new(z.re, z.im)
}

fn project(t: V2, con: &Con) -> V2 {
    match con.shape {
        Shape::Disk { center, radius } => {
            let d = t - center;
            let n = d.norm();
            if n > 0.0 {
                center + d * (radius / n)
            } else {
                center + V2::new(radius, 0.0)
            }
        }
        Shape::Line { normal, offset } => t - normal * ((normal.dot(&t) - offset) / normal.norm_squared()),
    }
}

fn intersections(a: &Con, b: &Con, tol: f64) -> Vec<V2> {
    match (a.shape, b.shape) {
        (Shape::Line { normal: n1, offset: b1 }, Shape::Line { normal: n2, offset: b2 }) => {
            let m = Matrix2::new(n1.x, n1.y, n2.x, n2.y);
            m.try_inverse().map(|inv| vec![inv * V2::new(b1, b2)]).unwrap_or_default()
        }
        (Shape::Line { normal, offset }, Shape::Disk { center, radius })
        | (Shape::Disk { center, radius }, Shape::Line { normal, offset }) => {
            let nn = normal.norm();
            let (u, d) = (normal / nn, offset / nn - (normal / nn).dot(&center));
            let foot = center + u * d;
            let h2 = radius * radius - d * d;
            if h2 < -(tol * tol) {
                return Vec::new();
            }
            let h = h2.max(0.0).sqrt();
            let along = V2::new(-u.y, u.x);
            vec![foot + along * h, foot - along * h]
        }
        (Shape::Disk { center: c1, radius: r1 }, Shape::Disk { center: c2, radius: r2 }) => {
            let dv = c2 - c1;
            let d = dv.norm();
            if d == 0.0 {
                return Vec::new();
            }
            let x = (d * d + r1 * r1 - r2 * r2) / (2.0 * d);
            let h2 = r1 * r1 - x * x;
            if h2 < -(tol * tol) {
                return Vec::new();
            }
            let h = h2.max(0.0).sqrt();
            let u = dv / d;
            let base = c1 + u * x;
            let along = V2::new(-u.y, u.x);
            vec![base + along * h, base - along * h]
        }
    }
}

/// Constraint gradients in the same normalization used by `kkt_residual`.
fn gradient(con: &Con, p: &QcqpProblem, t: V2) -> V2 {
    match con.origin {
        Origin::Quad => {
            let q = p.quad_ineq.as_ref().expect("quad constraint present");
            let h = q.hessian.diag_entry(0);
            (t * h - v2(q.linear[0])) * 2.0
        }
        Origin::Ball(_) => t * 2.0,
        Origin::Half(j) => v2(p.halfspaces[j].normal[0]),
        Origin::Edge => match con.shape {
            Shape::Line { normal, .. } => normal,
            Shape::Disk { .. } => unreachable!("box edges are lines"),
        },
    }
}

/// Nonnegative least squares over subsets of at most two active constraints.
fn multipliers(grad_f: V2, grads: &[V2]) -> Vec<f64> {
    let k = grads.len();
    let mut best = (grad_f.norm(), vec![0.0; k]);
    for i in 0..k {
        let gi = grads[i];
        if gi.norm_squared() > 0.0 {
            let mu = -grad_f.dot(&gi) / gi.norm_squared();
            if mu >= 0.0 {
                let r = (grad_f + gi * mu).norm();
                if r < best.0 {
                    let mut v = vec![0.0; k];
                    v[i] = mu;
                    best = (r, v);
                }
            }
        }
        for j in i + 1..k {
            let m = Matrix2::new(gi.x, grads[j].x, gi.y, grads[j].y);
            if let Some(inv) = m.try_inverse() {
                let mu = inv * (-grad_f);
                if mu.x >= 0.0 && mu.y >= 0.0 {
                    let r = (grad_f + gi * mu.x + grads[j] * mu.y).norm();
                    if r < best.0 {
                        let mut v = vec![0.0; k];
                        v[i] = mu.x;
                        v[j] = mu.y;
                        best = (r, v);
                    }
                }
            }
        }
    }
    best.1
}

pub(super) fn solve(p: &QcqpProblem) -> Result<(DVector<C64>, SolveReport), SolverError> {
    let nb = p.balls.len();
    let dual_len = 1 + nb + p.halfspaces.len();
    let mut cons: Vec<Con> = Vec::new();

    if let Some(q) = &p.quad_ineq {
        let (h, g, c) = (q.hessian.diag_entry(0), v2(q.linear[0]), q.constant);
        if h > 0.0 {
            let center = g / h;
            let r2 = center.norm_squared() - c / h;
            if r2 < 0.0 {
                return Ok(infeasible(1, dual_len, -h * r2, 0));
            }
            cons.push(Con { shape: Shape::Disk { center, radius: r2.sqrt() }, origin: Origin::Quad });
        } else if g.norm() > 0.0 {
            cons.push(Con { shape: Shape::Line { normal: -g * 2.0, offset: -c }, origin: Origin::Quad });
        } else if c > 0.0 {
            return Ok(infeasible(1, dual_len, c, 0));
        }
    }
    for (m, b) in p.balls.iter().enumerate() {
        cons.push(Con { shape: Shape::Disk { center: V2::zeros(), radius: b.radius }, origin: Origin::Ball(m) });
    }
    for (j, hs) in p.halfspaces.iter().enumerate() {
        let normal = v2(hs.normal[0]);
        if normal.norm() > 0.0 {
            cons.push(Con { shape: Shape::Line { normal, offset: hs.offset }, origin: Origin::Half(j) });
        } else if hs.offset < 0.0 {
            return Ok(infeasible(1, dual_len, -hs.offset, 0));
        }
    }
    let mut bounded = cons.iter().any(|c| matches!(c.shape, Shape::Disk { .. }));
    if let Some(bx) = &p.bounds {
        let (lo, hi) = (bx.lower[0], bx.upper[0]);
        let edges = [
            (V2::new(1.0, 0.0), hi.re),
            (V2::new(-1.0, 0.0), -lo.re),
            (V2::new(0.0, 1.0), hi.im),
            (V2::new(0.0, -1.0), -lo.im),
        ];
        for (normal, offset) in edges {
            if offset.is_finite() {
                cons.push(Con { shape: Shape::Line { normal, offset }, origin: Origin::Edge });
            }
        }
        bounded |= [lo.re, lo.im, hi.re, hi.im].iter().all(|v| v.is_finite());
    }

    let h0 = p.objective.hessian.diag_entry(0);
    let a0 = v2(p.objective.linear[0]);
    let target = (h0 > 0.0).then(|| a0 / h0);
    if target.is_none() && !bounded {
        return Err(SolverError::Unsupported("linear planar objective needs a bounded feasible set"));
    }
    let scale = cons
        .iter()
        .map(Con::scale)
        .chain(target.map(|t| t.norm()))
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let tol = 1e-10 * scale;

    let mut cands: Vec<V2> = Vec::new();
    match target {
        Some(t) => {
            cands.push(t);
            cands.extend(cons.iter().map(|c| project(t, c)));
        }
        None => {
            let dir = if a0.norm() > 0.0 { a0 / a0.norm() } else { V2::new(1.0, 0.0) };
            for c in &cons {
                if let Shape::Disk { center, radius } = c.shape {
                    cands.push(center + dir * radius);
                    cands.push(center);
                }
            }
        }
    }
    for i in 0..cons.len() {
        for j in i + 1..cons.len() {
            cands.extend(intersections(&cons[i], &cons[j], tol));
        }
    }

    let objective = |t: V2| h0 * t.norm_squared() - 2.0 * a0.dot(&t) + p.objective.constant;
    let worst = |t: V2| cons.iter().map(|c| c.violation(t)).fold(f64::NEG_INFINITY, f64::max);
    let best = cands
        .iter()
        .filter(|t| worst(**t) <= tol)
        .min_by(|a, b| objective(**a).total_cmp(&objective(**b)))
        .copied();
    let Some(t) = best else {
        let least = cands.iter().map(|t| worst(*t)).fold(f64::INFINITY, f64::min);
        return Ok(infeasible(1, dual_len, least.max(tol), cands.len()));
    };

    let active: Vec<&Con> = cons.iter().filter(|c| c.violation(t).abs() <= 1e3 * tol).collect();
    let grads: Vec<V2> = active.iter().map(|c| gradient(c, p, t)).collect();
    let grad_f = (t * h0 - a0) * 2.0;
    let mu = multipliers(grad_f, &grads);
    let mut dual = vec![0.0; dual_len];
    for (c, m) in active.iter().zip(mu) {
        match c.origin {
            Origin::Quad => dual[0] = m,
            Origin::Ball(b) => dual[1 + b] = m,
            Origin::Half(j) => dual[1 + nb + j] = m,
            Origin::Edge => {}
        }
    }
    let x = DVector::from_element(1, C64::new(t.x, t.y));
    Ok(finish(p, x, dual, cands.len(), true))
}
