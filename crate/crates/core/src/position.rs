//! Movable-antenna position updates by majorization-minimization.
//!
//! One antenna moves at a time. Every channel coefficient it touches is an
//! affine function of its phase features `e_i(t) = exp(j 2π/λ t·a_i)`, so the
//! negated WMMSE objective and the sensing gap are Hermitian quadratics in the
//! feature vector. A `λ_max` majorizer makes each of them linear in the
//! features, the resulting cosine sum is bounded by an isotropic quadratic in
//! `t`, and the planar subproblem is solved exactly.
//!
//! Constant offsets are never derived symbolically: every affine coefficient
//! is pinned to the current channel value at the anchor.

use crate::channel::{frm, frv, stack_channels, ChannelSet, PathSet, Point, PositionLayout, Scenario, C64};
use crate::metrics::{radar_terms, surrogate_objective, DecisionState};
use crate::solvers::{lambda_max, solve_qcqp, BlockHermitian, ConvexQuadratic, QcqpProblem, SolveStatus};
use crate::updates::{ascent_ok, sensing_ok, BlockOutcome};
use nalgebra::{DMatrix, DVector};
use std::f64::consts::PI;
use thiserror::Error;

/// `Σ_l |f_l| cos(2π/λ t·a_l − ∠f_l)`, i.e. `Re{f^H e(t)}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSum {
    pub amplitudes: Vec<f64>,
    pub phases: Vec<f64>,
    pub directions: Vec<Point>,
    pub wavelength: f64,
}

impl PhaseSum {
    pub fn from_coefficients(f: &DVector<C64>, directions: &[Point], wavelength: f64) -> Self {
        assert_eq!(f.len(), directions.len(), "one coefficient per direction");
        Self {
            amplitudes: f.iter().map(|z| z.norm()).collect(),
            phases: f.iter().map(|z| z.arg()).collect(),
            directions: directions.to_vec(),
            wavelength,
        }
    }

    pub fn total_amplitude(&self) -> f64 {
        self.amplitudes.iter().sum()
    }

    fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength
    }
}

pub fn phase_sum_eval(ps: &PhaseSum, t: &Point) -> f64 {
    let k = ps.wavenumber();
    ps.amplitudes
        .iter()
        .zip(&ps.phases)
        .zip(&ps.directions)
        .map(|((r, ph), a)| r * (k * t.dot(a) - ph).cos())
        .sum()
}

pub fn phase_sum_grad(ps: &PhaseSum, t: &Point) -> Point {
    let k = ps.wavenumber();
    ps.amplitudes
        .iter()
        .zip(&ps.phases)
        .zip(&ps.directions)
        .map(|((r, ph), a)| a * (-k * r * (k * t.dot(a) - ph).sin()))
        .fold(Point::zeros(), |acc, g| acc + g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundSense {
    Upper,
    Lower,
}

/// `constant + linear·(t − anchor) ± curvature/2 ‖t − anchor‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSurrogate {
    pub curvature: f64,
    pub linear: Point,
    pub constant: f64,
    pub sense: BoundSense,
    pub anchor: Point,
}

impl QuadraticSurrogate {
    pub fn eval(&self, t: &Point) -> f64 {
        let d = t - self.anchor;
        let sign = match self.sense {
            BoundSense::Upper => 1.0,
            BoundSense::Lower => -1.0,
        };
        self.constant + self.linear.dot(&d) + sign * 0.5 * self.curvature * d.norm_squared()
    }
}

/// Quadratic bound touching `ps` at `anchor`. The curvature `8π²/λ² Σ|f|`
/// dominates the Hessian norm of every cosine sum with these amplitudes.
pub fn phase_sum_bound(ps: &PhaseSum, anchor: &Point, sense: BoundSense) -> QuadraticSurrogate {
    let k = ps.wavenumber();
    QuadraticSurrogate {
        curvature: 2.0 * k * k * ps.total_amplitude(),
        linear: phase_sum_grad(ps, anchor),
        constant: phase_sum_eval(ps, anchor),
        sense,
        anchor: *anchor,
    }
}

/// Linear majorizer of `e^H H e + Re{extra^H e}` on the sphere `‖e‖ = ‖anchor‖`.
///
/// Returns `(f, c)` with `e^H H e + Re{extra^H e} ≤ Re{f^H e} + c`, tight at
/// `anchor`. `f = 2(H − λ_max I) anchor + extra`.
pub fn lmax_majorizer(h: &DMatrix<C64>, anchor: &DVector<C64>, extra: &DVector<C64>) -> (DVector<C64>, f64) {
    let (lam, _) = lambda_max(h);
    let n2 = anchor.norm_squared();
    let ha = h * anchor;
    let f = (&ha - anchor * C64::new(lam, 0.0)) * C64::new(2.0, 0.0) + extra;
    let c = 2.0 * lam * n2 - anchor.dotc(&ha).re;
    (f, c)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PositionError {
    #[error("anchor coincides with antenna {0}")]
    Coincident(usize),
}

/// `normal · t ≥ offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceCut {
    pub normal: Point,
    pub offset: f64,
}

impl DistanceCut {
    pub fn slack(&self, t: &Point) -> f64 {
        self.normal.dot(t) - self.offset
    }
}

/// Supporting halfplanes of the exclusion disks around `others`, taken along
/// the anchor direction. Each cut implies the true spacing by Cauchy-Schwarz.
pub fn linearize_min_distance(anchor: &Point, others: &[Point], min_dist: f64) -> Result<Vec<DistanceCut>, PositionError> {
    others
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let d = anchor - o;
            let n = d.norm();
            if n == 0.0 {
                return Err(PositionError::Coincident(i));
            }
            let normal = d / n;
            Ok(DistanceCut { normal, offset: min_dist + normal.dot(o) })
        })
        .collect()
}

/// The single antenna moved by one position update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MovingAntenna {
    Tbs { m: usize, n: usize },
    Rbs { p: usize, n: usize },
    DlUser(usize),
    UlUser(usize),
}

impl MovingAntenna {
    pub fn position(&self, layout: &PositionLayout) -> Point {
        match *self {
            Self::Tbs { m, n } => layout.tbs[m][n],
            Self::Rbs { p, n } => layout.rbs[p][n],
            Self::DlUser(k) => layout.dl_user[k],
            Self::UlUser(l) => layout.ul_user[l],
        }
    }

    fn set(&self, layout: &mut PositionLayout, t: Point) {
        match *self {
            Self::Tbs { m, n } => layout.tbs[m][n] = t,
            Self::Rbs { p, n } => layout.rbs[p][n] = t,
            Self::DlUser(k) => layout.dl_user[k] = t,
            Self::UlUser(l) => layout.ul_user[l] = t,
        }
    }

    /// Other antennas of the same array; users have none.
    fn siblings(&self, layout: &PositionLayout) -> Vec<Point> {
        let others = |array: &[Point], n: usize| {
            array.iter().enumerate().filter(|(i, _)| *i != n).map(|(_, p)| *p).collect()
        };
        match *self {
            Self::Tbs { m, n } => others(&layout.tbs[m], n),
            Self::Rbs { p, n } => others(&layout.rbs[p], n),
            Self::DlUser(_) | Self::UlUser(_) => Vec::new(),
        }
    }
}

/// Concatenated phase-feature directions of one antenna, grouped per path set.
struct Features {
    directions: Vec<Point>,
    starts: Vec<usize>,
    wavenumber: f64,
}

impl Features {
    fn new(groups: Vec<Vec<Point>>, wavelength: f64) -> Self {
        let mut starts = vec![0];
        for g in &groups {
            starts.push(starts.last().unwrap() + g.len());
        }
        Self { directions: groups.concat(), starts, wavenumber: 2.0 * PI / wavelength }
    }

    fn len(&self) -> usize {
        self.directions.len()
    }

    fn at(&self, t: &Point) -> DVector<C64> {
        DVector::from_iterator(
            self.len(),
            self.directions.iter().map(|a| C64::from_polar(1.0, self.wavenumber * t.dot(a))),
        )
    }
}

fn features(ant: MovingAntenna, s: &Scenario) -> Features {
    let d = s.dims;
    let r = &s.radar;
    let single = |a: &crate::channel::Angles| vec![a.direction()];
    let groups: Vec<Vec<Point>> = match ant {
        MovingAntenna::Tbs { m, .. } => (0..d.k_d)
            .map(|k| s.dl_paths[m][k].departure_directions())
            .chain(r.tbs_angles[m].iter().map(single))
            .collect(),
        MovingAntenna::Rbs { p, .. } => (0..d.k_u)
            .map(|l| s.ul_paths[p][l].departure_directions())
            .chain(r.rbs_angles[p].iter().map(single))
            .collect(),
        MovingAntenna::DlUser(k) => (0..d.m_t)
            .map(|m| s.dl_paths[m][k].arrival_directions())
            .chain((0..d.k_u).map(|l| s.du_paths[k][l].arrival_directions()))
            .collect(),
        MovingAntenna::UlUser(l) => (0..d.m_r)
            .map(|p| s.ul_paths[p][l].arrival_directions())
            .chain((0..d.k_d).map(|k| s.du_paths[k][l].departure_directions()))
            .collect(),
    };
    Features::new(groups, s.wavelength)
}

/// A channel-dependent amplitude `x` with `x = c + u^H e`, or `x = conj(c + u^H e)`
/// when `conj` is set. `u = None` means `x` does not depend on the moving antenna.
#[derive(Debug, Clone)]
struct Amp {
    c: C64,
    u: Option<DVector<C64>>,
    conj: bool,
}

impl Amp {
    fn fixed(x: C64) -> Self {
        Self { c: x, u: None, conj: false }
    }

    /// Pins the affine form to the anchor value `x0`.
    fn varying(x0: C64, u: DVector<C64>, e0: &DVector<C64>, conj: bool) -> Self {
        let a0 = if conj { x0.conj() } else { x0 };
        Self { c: a0 - u.dotc(e0), u: Some(u), conj }
    }

    #[cfg(test)]
    fn value(&self, e: &DVector<C64>) -> C64 {
        let a = self.c + self.u.as_ref().map_or(C64::new(0.0, 0.0), |u| u.dotc(e));
        if self.conj {
            a.conj()
        } else {
            a
        }
    }
}

/// `e^H Q e + Re{l^H e} + c`.
#[derive(Debug, Clone)]
struct Quad {
    q: DMatrix<C64>,
    l: DVector<C64>,
    c: f64,
    varying: bool,
}

impl Quad {
    fn constant(n: usize, c: f64) -> Self {
        Self { q: DMatrix::zeros(n, n), l: DVector::zeros(n), c, varying: false }
    }

    /// Adds `w |x|²`.
    fn add_power(&mut self, w: f64, a: &Amp) {
        self.c += w * a.c.norm_sqr();
        if let Some(u) = &a.u {
            self.q += u * u.adjoint() * C64::new(w, 0.0);
            self.l += u * (a.c * 2.0 * w);
            self.varying = true;
        }
    }

    /// Adds `Re{g x}`.
    fn add_re(&mut self, g: C64, a: &Amp) {
        let g = if a.conj { g.conj() } else { g };
        self.c += (g * a.c).re;
        if let Some(u) = &a.u {
            self.l += u * g.conj();
            self.varying = true;
        }
    }

    fn add_scaled(&mut self, o: &Quad, w: f64) {
        self.c += w * o.c;
        if o.varying {
            self.q += &o.q * C64::new(w, 0.0);
            self.l += &o.l * C64::new(w, 0.0);
            self.varying = true;
        }
    }

    /// Adds `w |x|² T`; the moving antenna never enters both factors.
    fn add_power_times(&mut self, w: f64, a: &Amp, t: &Quad) {
        if a.u.is_none() {
            self.add_scaled(t, w * a.c.norm_sqr());
        } else {
            assert!(!t.varying, "one antenna cannot move both an echo and a receive leakage");
            self.add_power(w * t.c, a);
        }
    }

    #[cfg(test)]
    fn value(&self, e: &DVector<C64>) -> f64 {
        e.dotc(&(&self.q * e)).re + self.l.dotc(e).re + self.c
    }
}

/// Every amplitude the objective and the sensing gap are built from.
struct Table {
    /// `[k][i] = h_{d,k}^H w_i`
    dl: Vec<Vec<Amp>>,
    /// `[k][m N_t + c] = h_{d,k,m}^H W^r_m[:, c]`
    probe: Vec<Vec<Amp>>,
    /// `[k][l] = h_{du,k,l}`
    du: Vec<Vec<Amp>>,
    /// `[i][l] = u_i^H h_{u,l}`
    ul: Vec<Vec<Amp>>,
    /// `[l] = u_0^H h_{u,l}`
    radar_ul: Vec<Amp>,
    /// `[i][j] = u_i^H g_{r,j}`
    leak: Vec<Vec<Amp>>,
    /// `[j] = u_0^H g_{r,j}`
    radar_leak: Vec<Amp>,
    /// `[j][k] = w_k^H g_{t,j}`
    beam: Vec<Vec<Amp>>,
    /// `[j][m N_t + c] = W^r_m[:, c]^H g_{t,j,m}`
    beam_probe: Vec<Vec<Amp>>,
}

fn response(paths: &PathSet) -> DVector<C64> {
    DVector::from_vec(paths.response.clone())
}

fn conj(v: &DVector<C64>) -> DVector<C64> {
    v.map(|z| z.conj())
}

impl Table {
    fn fixed(ch: &ChannelSet, st: &DecisionState, s: &Scenario) -> Self {
        let d = s.dims;
        let nt = d.n_t;
        let per_probe = |x: &DVector<C64>| -> Vec<Amp> {
            (0..d.m_t)
                .flat_map(|m| {
                    let xm = x.rows(m * nt, nt).into_owned();
                    (0..nt).map(move |c| (m, c, xm.clone()))
                })
                .map(|(m, c, xm)| Amp::fixed(xm.dotc(&st.wr[m].column(c))))
                .collect()
        };
        let dots = |a: &DVector<C64>, bs: &[DVector<C64>]| -> Vec<Amp> {
            bs.iter().map(|b| Amp::fixed(a.dotc(b))).collect()
        };
        Self {
            dl: ch.hd.iter().map(|h| dots(h, &st.w)).collect(),
            probe: ch.hd.iter().map(per_probe).collect(),
            du: (0..d.k_d).map(|k| (0..d.k_u).map(|l| Amp::fixed(ch.hdu[(k, l)])).collect()).collect(),
            ul: st.u_comm.iter().map(|u| dots(u, &ch.hu)).collect(),
            radar_ul: dots(&st.u_sense, &ch.hu),
            leak: st.u_comm.iter().map(|u| dots(u, &ch.gr)).collect(),
            radar_leak: dots(&st.u_sense, &ch.gr),
            beam: ch.gt.iter().map(|g| st.w.iter().map(|w| Amp::fixed(w.dotc(g))).collect()).collect(),
            beam_probe: ch.gt.iter().map(|g| per_probe(g).into_iter().map(|a| Amp::fixed(a.c.conj())).collect()).collect(),
        }
    }

    fn build(ant: MovingAntenna, layout: &PositionLayout, ch: &ChannelSet, st: &DecisionState, s: &Scenario, feat: &Features, e0: &DVector<C64>) -> Self {
        let d = s.dims;
        let (nt, nr) = (d.n_t, d.n_r);
        let lam = s.wavelength;
        let n = feat.len();
        let mut tab = Self::fixed(ch, st, s);
        let embed = |g: usize, part: &DVector<C64>| {
            let mut u = DVector::zeros(n);
            u.rows_mut(feat.starts[g], part.len()).copy_from(part);
            u
        };
        let one = |z: C64| DVector::from_element(1, z);
        let vary = |slot: &mut Amp, u: DVector<C64>, conj: bool| {
            *slot = Amp::varying(slot.c, u, e0, conj);
        };
        match ant {
            MovingAntenna::Tbs { m, n: a } => {
                let idx = m * nt + a;
                for k in 0..d.k_d {
                    let paths = &s.dl_paths[m][k];
                    // h_{d,k}[idx] = Σ conj(e_s) v_s
                    let v = frv(&layout.dl_user[k], &paths.arrival, lam).component_mul(&conj(&response(paths)));
                    for i in 0..d.k_d {
                        vary(&mut tab.dl[k][i], embed(k, &(&v * st.w[i][idx].conj())), false);
                    }
                    for c in 0..nt {
                        vary(&mut tab.probe[k][m * nt + c], embed(k, &(&v * st.wr[m][(a, c)].conj())), false);
                    }
                }
                for j in 0..=d.k_t {
                    let f = s.radar.fading_t[m][j];
                    let g = d.k_d + j;
                    for k in 0..d.k_d {
                        vary(&mut tab.beam[j][k], embed(g, &one(st.w[k][idx] * f.conj())), false);
                    }
                    for c in 0..nt {
                        vary(&mut tab.beam_probe[j][m * nt + c], embed(g, &one(st.wr[m][(a, c)] * f.conj())), false);
                    }
                }
            }
            MovingAntenna::Rbs { p, n: a } => {
                let idx = p * nr + a;
                for l in 0..d.k_u {
                    let paths = &s.ul_paths[p][l];
                    let v = frv(&layout.ul_user[l], &paths.arrival, lam).component_mul(&conj(&response(paths)));
                    for i in 0..d.k_u {
                        vary(&mut tab.ul[i][l], embed(l, &(&v * st.u_comm[i][idx].conj())), true);
                    }
                    vary(&mut tab.radar_ul[l], embed(l, &(&v * st.u_sense[idx].conj())), true);
                }
                for j in 0..=d.k_t {
                    let f = s.radar.fading_r[p][j];
                    let g = d.k_u + j;
                    for i in 0..d.k_u {
                        vary(&mut tab.leak[i][j], embed(g, &one(st.u_comm[i][idx] * f.conj())), false);
                    }
                    vary(&mut tab.radar_leak[j], embed(g, &one(st.u_sense[idx] * f.conj())), false);
                }
            }
            MovingAntenna::DlUser(k) => {
                let big: Vec<(DMatrix<C64>, DVector<C64>)> = (0..d.m_t)
                    .map(|m| {
                        let paths = &s.dl_paths[m][k];
                        (frm(&layout.tbs[m], &paths.departure, lam), response(paths))
                    })
                    .collect();
                // conj(h_{d,k}^H x) = Σ_m (σ_m ⊙ H_m x_m)^H e_m
                let sens = |x_of: &dyn Fn(usize) -> Option<DVector<C64>>| {
                    let mut u = DVector::zeros(n);
                    for (m, (h, sigma)) in big.iter().enumerate() {
                        if let Some(x) = x_of(m) {
                            u.rows_mut(feat.starts[m], sigma.len()).copy_from(&(h * x).component_mul(sigma));
                        }
                    }
                    u
                };
                for i in 0..d.k_d {
                    let u = sens(&|m| Some(st.w[i].rows(m * nt, nt).into_owned()));
                    vary(&mut tab.dl[k][i], u, true);
                }
                for m in 0..d.m_t {
                    for c in 0..nt {
                        let u = sens(&|mm| (mm == m).then(|| st.wr[m].column(c).into_owned()));
                        vary(&mut tab.probe[k][m * nt + c], u, true);
                    }
                }
                for l in 0..d.k_u {
                    let paths = &s.du_paths[k][l];
                    let h = frv(&layout.ul_user[l], &paths.departure, lam).component_mul(&response(paths));
                    vary(&mut tab.du[k][l], embed(d.m_t + l, &h), false);
                }
            }
            MovingAntenna::UlUser(l) => {
                let big: Vec<(DMatrix<C64>, DVector<C64>)> = (0..d.m_r)
                    .map(|p| {
                        let paths = &s.ul_paths[p][l];
                        (frm(&layout.rbs[p], &paths.departure, lam), response(paths))
                    })
                    .collect();
                // u^H h_{u,l} = Σ_p (σ_p ⊙ H_p u_p)^H e_p
                let sens = |u_full: &DVector<C64>| {
                    let mut u = DVector::zeros(n);
                    for (p, (h, sigma)) in big.iter().enumerate() {
                        let up = u_full.rows(p * nr, nr);
                        u.rows_mut(feat.starts[p], sigma.len()).copy_from(&(h * up).component_mul(sigma));
                    }
                    u
                };
                for i in 0..d.k_u {
                    vary(&mut tab.ul[i][l], sens(&st.u_comm[i]), false);
                }
                vary(&mut tab.radar_ul[l], sens(&st.u_sense), false);
                for k in 0..d.k_d {
                    let paths = &s.du_paths[k][l];
                    let e_dl = frv(&layout.dl_user[k], &paths.arrival, lam);
                    vary(&mut tab.du[k][l], embed(d.m_r + k, &e_dl.component_mul(&conj(&response(paths)))), true);
                }
            }
        }
        tab
    }

    /// Echo powers `T_j` radiated by the TBSs towards each radar index.
    fn echoes(&self, n: usize) -> Vec<Quad> {
        self.beam
            .iter()
            .zip(&self.beam_probe)
            .map(|(b, bp)| {
                let mut t = Quad::constant(n, 0.0);
                b.iter().chain(bp).for_each(|a| t.add_power(1.0, a));
                t
            })
            .collect()
    }

    /// Negated weighted WMMSE surrogate, `−Σ μ R̃`.
    fn objective(&self, st: &DecisionState, s: &Scenario, n: usize) -> Quad {
        let d = s.dims;
        let echo = self.echoes(n);
        let aux = &st.aux;
        let mut f = Quad::constant(n, 0.0);
        for k in 0..d.k_d {
            let (mu, om, be) = (s.mu_d[k], aux.omega_d[k], aux.beta_d[k]);
            f.c += mu * (om - om.ln() - 1.0);
            f.add_re(be.conj() * (-2.0 * mu * om), &self.dl[k][k]);
            let w = mu * om * be.norm_sqr();
            f.c += w * s.noise_dl[k];
            self.dl[k].iter().chain(&self.probe[k]).for_each(|a| f.add_power(w, a));
            for l in 0..d.k_u {
                f.add_power(w * st.q[l], &self.du[k][l]);
            }
        }
        for l in 0..d.k_u {
            let (mu, om, be) = (s.mu_u[l], aux.omega_u[l], aux.beta_u[l]);
            f.c += mu * (om - om.ln() - 1.0);
            f.add_re(be.conj() * (-2.0 * mu * om * st.q[l].sqrt()), &self.ul[l][l]);
            let w = mu * om * be.norm_sqr();
            f.c += w * s.noise_r * st.u_comm[l].norm_squared();
            for i in 0..d.k_u {
                f.add_power(w * st.q[i], &self.ul[l][i]);
            }
            for (j, t) in echo.iter().enumerate() {
                f.add_power_times(w * s.radar.rcs_var[j], &self.leak[l][j], t);
            }
        }
        f
    }

    /// `Γ·disturbance − echo` of the sensing SINR.
    fn gap(&self, st: &DecisionState, s: &Scenario, n: usize) -> Quad {
        let echo = self.echoes(n);
        let gamma = s.gamma_r;
        let mut g = Quad::constant(n, gamma * s.noise_r * st.u_sense.norm_squared());
        for (l, a) in self.radar_ul.iter().enumerate() {
            g.add_power(gamma * st.q[l], a);
        }
        for (j, t) in echo.iter().enumerate() {
            let w = if j == 0 { -1.0 } else { gamma };
            g.add_power_times(w * s.radar.rcs_var[j], &self.radar_leak[j], t);
        }
        g
    }
}

/// Applies the `λ_max` majorizer on each connected block of `Q` separately;
/// the features of one block keep a constant norm on their own.
fn majorize(quad: &Quad, e0: &DVector<C64>) -> (DVector<C64>, f64) {
    let n = e0.len();
    let mut f = quad.l.clone();
    let mut c = quad.c;
    let mut seen = vec![false; n];
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let mut comp = vec![start];
        seen[start] = true;
        let mut at = 0;
        while at < comp.len() {
            let i = comp[at];
            for j in 0..n {
                if !seen[j] && (quad.q[(i, j)] != C64::new(0.0, 0.0) || quad.q[(j, i)] != C64::new(0.0, 0.0)) {
                    seen[j] = true;
                    comp.push(j);
                }
            }
            at += 1;
        }
        if comp.len() == 1 && quad.q[(start, start)] == C64::new(0.0, 0.0) {
            continue;
        }
        let sub = DMatrix::from_fn(comp.len(), comp.len(), |a, b| quad.q[(comp[a], comp[b])]);
        let e = DVector::from_fn(comp.len(), |a, _| e0[comp[a]]);
        let (fc, cc) = lmax_majorizer(&sub, &e, &DVector::zeros(comp.len()));
        for (a, &i) in comp.iter().enumerate() {
            f[i] += fc[a];
        }
        c += cc;
    }
    (f, c)
}

fn bound_of(quad: &Quad, feat: &Features, e0: &DVector<C64>, anchor: &Point, wavelength: f64) -> QuadraticSurrogate {
    let (f, c) = majorize(quad, e0);
    let ps = PhaseSum::from_coefficients(&f, &feat.directions, wavelength);
    let mut b = phase_sum_bound(&ps, anchor, BoundSense::Upper);
    b.constant += c;
    b
}

/// Upper bounds in the moving antenna's position, both tight at its anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSurrogates {
    /// Bounds the negated WMMSE surrogate `−Σ μ R̃`.
    pub objective: QuadraticSurrogate,
    /// Bounds the sensing gap `Γ·disturbance − echo`; `None` if the antenna does not affect it.
    pub sensing: Option<QuadraticSurrogate>,
}

pub fn block_surrogates(
    ant: MovingAntenna,
    layout: &PositionLayout,
    ch: &ChannelSet,
    st: &DecisionState,
    s: &Scenario,
) -> BlockSurrogates {
    let feat = features(ant, s);
    let t0 = ant.position(layout);
    let e0 = feat.at(&t0);
    let tab = Table::build(ant, layout, ch, st, s, &feat, &e0);
    let n = feat.len();
    let objective = bound_of(&tab.objective(st, s, n), &feat, &e0, &t0, s.wavelength);
    let gap = tab.gap(st, s, n);
    let sensing = gap.varying.then(|| bound_of(&gap, &feat, &e0, &t0, s.wavelength));
    BlockSurrogates { objective, sensing }
}

/// Minimizer of `ψ x² + q x` over `[−half, half]`.
pub fn clip_axis(psi: f64, q: f64, half: f64) -> f64 {
    assert!(psi > 0.0, "axis curvature must be positive");
    (-q / (2.0 * psi)).clamp(-half, half)
}

fn cplx(p: Point) -> C64 {
    C64::new(p.x, p.y)
}

fn scalar_quadratic(h: f64, a: Point, c: f64) -> ConvexQuadratic {
    ConvexQuadratic::new(BlockHermitian::diagonal(&[h]), DVector::from_element(1, cplx(a)), c)
        .expect("nonnegative curvature")
}

/// The convex planar subproblem of one TBS, RBS or UL-user move.
pub fn planar_subproblem(sur: &BlockSurrogates, cuts: &[DistanceCut], half: f64) -> QcqpProblem {
    let o = &sur.objective;
    let t0 = o.anchor;
    // ψ‖t‖² − 2 a·t + c reproduces constant + g·(t − t0) + ψ‖t − t0‖².
    let quad = |b: &QuadraticSurrogate| {
        let psi = 0.5 * b.curvature;
        let a = t0 * psi - b.linear * 0.5;
        scalar_quadratic(psi, a, b.constant - b.linear.dot(&t0) + psi * t0.norm_squared())
    };
    let mut p = QcqpProblem::new(quad(o)).with_bounds(vec![C64::new(-half, -half)], vec![C64::new(half, half)]);
    if let Some(g) = &sur.sensing {
        p = p.with_quad_ineq(quad(g));
    }
    for cut in cuts {
        p = p.with_halfspace(DVector::from_element(1, -cplx(cut.normal)), -cut.offset);
    }
    p
}

/// Layout and channels after one position update.
#[derive(Debug, Clone)]
pub struct MoveResult {
    pub layout: PositionLayout,
    pub channels: ChannelSet,
    pub outcome: BlockOutcome,
}

/// Step halvings tried when a rounding-level violation shows up after the solve.
const SAFEGUARD_HALVINGS: usize = 12;
/// Absolute slack on the box and the spacing, in wavelengths.
const GEOMETRY_TOL: f64 = 1e-9;

pub fn update_antenna(
    ant: MovingAntenna,
    layout: &PositionLayout,
    ch: &ChannelSet,
    st: &DecisionState,
    s: &Scenario,
) -> MoveResult {
    let keep = |why: &'static str| MoveResult { layout: layout.clone(), channels: ch.clone(), outcome: BlockOutcome::Kept(why) };
    let sur = block_surrogates(ant, layout, ch, st, s);
    if sur.objective.curvature == 0.0 {
        return keep("objective independent of this antenna");
    }
    let half = 0.5 * s.region;
    let t0 = ant.position(layout);
    let target = match ant {
        MovingAntenna::DlUser(_) => {
            let o = &sur.objective;
            let psi = 0.5 * o.curvature;
            Point::new(
                clip_axis(psi, o.linear.x - o.curvature * t0.x, half),
                clip_axis(psi, o.linear.y - o.curvature * t0.y, half),
            )
        }
        _ => {
            let Ok(cuts) = linearize_min_distance(&t0, &ant.siblings(layout), s.min_dist) else {
                return keep("anchor coincides with another antenna");
            };
            match solve_qcqp(&planar_subproblem(&sur, &cuts, half)) {
                Ok((x, r)) if r.status != SolveStatus::Infeasible => Point::new(x[0].re.clamp(-half, half), x[0].im.clamp(-half, half)),
                Ok(_) => return keep("linearized position subproblem infeasible"),
                Err(_) => return keep("position solver error"),
            }
        }
    };
    settle(ant, layout, ch, st, s, t0, target).unwrap_or_else(|| keep("safeguard rejected the move"))
}

/// Accepts the largest step towards `target` (full, then halved) that keeps the
/// geometry, the sensing floor and the surrogate ascent on the true channels.
fn settle(
    ant: MovingAntenna,
    layout: &PositionLayout,
    ch: &ChannelSet,
    st: &DecisionState,
    s: &Scenario,
    t0: Point,
    target: Point,
) -> Option<MoveResult> {
    let before = surrogate_objective(st, ch, s);
    let anchor_ok = sensing_ok(st, ch, s);
    let gap0 = radar_terms(st, ch, s).gap(s.gamma_r);
    let siblings = ant.siblings(layout);
    let half = 0.5 * s.region;
    let mut step = target - t0;
    for _ in 0..SAFEGUARD_HALVINGS {
        let t = t0 + step;
        step *= 0.5;
        let geometry = t.iter().all(|c| c.abs() <= half + GEOMETRY_TOL)
            && siblings.iter().all(|o| (t - o).norm() >= s.min_dist - GEOMETRY_TOL);
        if !geometry {
            continue;
        }
        let mut cand = layout.clone();
        ant.set(&mut cand, t);
        let cch = stack_channels(&cand, s);
        let sensing = if anchor_ok { sensing_ok(st, &cch, s) } else { radar_terms(st, &cch, s).gap(s.gamma_r) <= gap0 };
        if sensing && ascent_ok(before, surrogate_objective(st, &cch, s)) {
            return Some(MoveResult { layout: cand, channels: cch, outcome: BlockOutcome::Accepted });
        }
    }
    None
}

pub fn update_tbs_ma(layout: &PositionLayout, ch: &ChannelSet, st: &DecisionState, s: &Scenario, m: usize, n: usize) -> MoveResult {
    update_antenna(MovingAntenna::Tbs { m, n }, layout, ch, st, s)
}

pub fn update_rbs_ma(layout: &PositionLayout, ch: &ChannelSet, st: &DecisionState, s: &Scenario, p: usize, n: usize) -> MoveResult {
    update_antenna(MovingAntenna::Rbs { p, n }, layout, ch, st, s)
}

/// Closed form: each coordinate minimizes its own scalar quadratic on `[−A/2, A/2]`.
pub fn update_dl_user_ma(layout: &PositionLayout, ch: &ChannelSet, st: &DecisionState, s: &Scenario, k: usize) -> MoveResult {
    update_antenna(MovingAntenna::DlUser(k), layout, ch, st, s)
}

pub fn update_ul_user_ma(layout: &PositionLayout, ch: &ChannelSet, st: &DecisionState, s: &Scenario, l: usize) -> MoveResult {
    update_antenna(MovingAntenna::UlUser(l), layout, ch, st, s)
}
