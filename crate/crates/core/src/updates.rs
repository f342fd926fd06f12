//! Non-position block updates: WMMSE auxiliaries, DL beamformers, UL powers
//! and the receive filters.
//!
//! Beamformers are stacked as `[w_1 .. w_{K_d}, W^r_1[:,0] .. W^r_{M_t}[:,N_t−1]]`.
//! Every quadratic form in that vector is block diagonal: each `w_k` sees the
//! same `M_t N_t` block and each probing column of TBS `m` sees that block's
//! `(m, m)` sub-block.

use crate::channel::{ChannelSet, Scenario, C64};
use crate::metrics::{
    dl_terms, echo_powers, radar_terms, surrogate_objective, ul_terms_with, DecisionState,
};
use crate::solvers::{
    max_generalized_eig, solve_qcqp, BlockHermitian, ConvexQuadratic, QcqpProblem, SolveStatus,
    SolverError,
};
use nalgebra::{DMatrix, DVector};

/// Whether a block update replaced the previous values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockOutcome {
    Accepted,
    /// Previous values kept; the payload names the check that failed.
    Kept(&'static str),
}

/// Relative slack for ascent and feasibility checks after a solve.
const ACCEPT_TOL: f64 = 1e-9;

/// Sets every `β` to the MMSE equalizer and every `ω` to the inverse MSE.
pub fn update_auxiliaries(state: &DecisionState, ch: &ChannelSet, s: &Scenario) -> DecisionState {
    let mut next = state.clone();
    for k in 0..s.dims.k_d {
        let t = dl_terms(state, ch, s, k);
        next.aux.beta_d[k] = t.signal / t.total();
        next.aux.omega_d[k] = t.total() / t.interference;
    }
    let echo = echo_powers(state, ch, s);
    for l in 0..s.dims.k_u {
        let t = ul_terms_with(state, ch, s, &echo, l);
        next.aux.beta_u[l] = t.signal / t.total();
        next.aux.omega_u[l] = t.total() / t.interference;
    }
    next
}

/// Convex beamformer subproblem around an anchor state.
///
/// The weighted surrogate is an exact concave quadratic in the beamformers;
/// only the target echo in the sensing constraint is linearized (it is
/// convex, so the linearization is a global minorant and the constraint is
/// conservative).
#[derive(Debug, Clone)]
pub struct BeamformerSubproblem {
    pub anchor: DVector<C64>,
    /// Hessian seen by every DL beamformer: DL power terms plus echo leakage into UL filters.
    pub comm_hessian: DMatrix<C64>,
    /// `μ_k ω_k β_k h_{d,k}` per DL user.
    pub comm_linear: Vec<DVector<C64>>,
    /// `Γ Σ_{j≥1} σ²_j |u_0^H g_{r,j}|² g_{t,j} g_{t,j}^H`.
    pub clutter_hessian: DMatrix<C64>,
    /// `σ²_0 |u_0^H g_{r,0}|² g_{t,0} g_{t,0}^H`, linearized at the anchor.
    pub target_hessian: DMatrix<C64>,
    /// `Γ(Σ q_l |u_0^H h_{u,l}|² + σ²_r ‖u_0‖²)`.
    pub sensing_floor: f64,
    /// Beamformer-independent part of the weighted surrogate.
    pub constant: f64,
    k_d: usize,
    m_t: usize,
    n_t: usize,
}

pub fn stack_beamformers(state: &DecisionState, s: &Scenario) -> DVector<C64> {
    let d = s.dims;
    let len = d.k_d * d.m_t * d.n_t + d.m_t * d.n_t * d.n_t;
    let mut x = DVector::zeros(len);
    let nt_all = d.m_t * d.n_t;
    for (k, w) in state.w.iter().enumerate() {
        x.rows_mut(k * nt_all, nt_all).copy_from(w);
    }
    let base = d.k_d * nt_all;
    for (m, wr) in state.wr.iter().enumerate() {
        for c in 0..d.n_t {
            x.rows_mut(base + (m * d.n_t + c) * d.n_t, d.n_t).copy_from(&wr.column(c));
        }
    }
    x
}

pub fn unstack_beamformers(x: &DVector<C64>, s: &Scenario, into: &mut DecisionState) {
    let d = s.dims;
    let nt_all = d.m_t * d.n_t;
    for (k, w) in into.w.iter_mut().enumerate() {
        w.copy_from(&x.rows(k * nt_all, nt_all));
    }
    let base = d.k_d * nt_all;
    for (m, wr) in into.wr.iter_mut().enumerate() {
        for c in 0..d.n_t {
            wr.column_mut(c).copy_from(&x.rows(base + (m * d.n_t + c) * d.n_t, d.n_t));
        }
    }
}

fn outer(v: &DVector<C64>) -> DMatrix<C64> {
    v * v.adjoint()
}

/// Log-weight part of one WMMSE term with everything but the beamformers folded in.
fn wmmse_constant(omega: f64, beta: C64, signal_lin: C64, fixed_power: f64) -> f64 {
    omega.ln() - omega * (1.0 - 2.0 * (beta.conj() * signal_lin).re + beta.norm_sqr() * fixed_power) + 1.0
}

pub fn build_beamformer_subproblem(state: &DecisionState, ch: &ChannelSet, s: &Scenario) -> BeamformerSubproblem {
    let d = s.dims;
    let nt_all = d.m_t * d.n_t;
    let aux = &state.aux;
    let u0 = &state.u_sense;
    let mut comm_hessian = DMatrix::zeros(nt_all, nt_all);
    let mut comm_linear = Vec::with_capacity(d.k_d);
    let mut constant = 0.0;
    for k in 0..d.k_d {
        let wgt = s.mu_d[k] * aux.omega_d[k];
        comm_hessian += outer(&ch.hd[k]) * C64::new(wgt * aux.beta_d[k].norm_sqr(), 0.0);
        comm_linear.push(&ch.hd[k] * (aux.beta_d[k] * wgt));
        let ul_leak: f64 = (0..d.k_u).map(|l| state.q[l] * ch.hdu[(k, l)].norm_sqr()).sum();
        constant += s.mu_d[k]
            * wmmse_constant(aux.omega_d[k], aux.beta_d[k], C64::new(0.0, 0.0), s.noise_dl[k] + ul_leak);
    }
    for l in 0..d.k_u {
        let u = &state.u_comm[l];
        let wgt = s.mu_u[l] * aux.omega_u[l] * aux.beta_u[l].norm_sqr();
        for j in 0..ch.gt.len() {
            let leak = s.radar.rcs_var[j] * u.dotc(&ch.gr[j]).norm_sqr();
            comm_hessian += outer(&ch.gt[j]) * C64::new(wgt * leak, 0.0);
        }
        let ul_power: f64 = (0..d.k_u)
            .map(|i| state.q[i] * u.dotc(&ch.hu[i]).norm_sqr())
            .sum::<f64>()
            + s.noise_r * u.norm_squared();
        let signal = u.dotc(&ch.hu[l]) * state.q[l].sqrt();
        // `ul_power` already holds |signal|², so the signal enters only linearly here.
        constant += s.mu_u[l] * wmmse_constant(aux.omega_u[l], aux.beta_u[l], signal, ul_power);
    }
    let mut clutter_hessian = DMatrix::zeros(nt_all, nt_all);
    for j in 1..ch.gt.len() {
        let a = s.radar.rcs_var[j] * u0.dotc(&ch.gr[j]).norm_sqr();
        clutter_hessian += outer(&ch.gt[j]) * C64::new(s.gamma_r * a, 0.0);
    }
    let a0 = s.radar.rcs_var[0] * u0.dotc(&ch.gr[0]).norm_sqr();
    let target_hessian = outer(&ch.gt[0]) * C64::new(a0, 0.0);
    let ul_to_radar: f64 = (0..d.k_u).map(|l| state.q[l] * u0.dotc(&ch.hu[l]).norm_sqr()).sum();
    let sensing_floor = s.gamma_r * (ul_to_radar + s.noise_r * u0.norm_squared());
    BeamformerSubproblem {
        anchor: stack_beamformers(state, s),
        comm_hessian,
        comm_linear,
        clutter_hessian,
        target_hessian,
        sensing_floor,
        constant,
        k_d: d.k_d,
        m_t: d.m_t,
        n_t: d.n_t,
    }
}

impl BeamformerSubproblem {
    /// Spreads an `M_t N_t` Hermitian matrix over the stacked variable.
    fn expand(&self, full: &DMatrix<C64>) -> BlockHermitian {
        let nt_all = self.m_t * self.n_t;
        let len = self.k_d * nt_all + self.m_t * self.n_t * self.n_t;
        let mut b = BlockHermitian::zeros(len);
        for k in 0..self.k_d {
            b.push_block(k * nt_all, full.clone()).expect("disjoint blocks");
        }
        let base = self.k_d * nt_all;
        for m in 0..self.m_t {
            let sub = full.view((m * self.n_t, m * self.n_t), (self.n_t, self.n_t)).into_owned();
            for c in 0..self.n_t {
                b.push_block(base + (m * self.n_t + c) * self.n_t, sub.clone()).expect("disjoint blocks");
            }
        }
        b
    }

    /// Minimization form of the negated surrogate (without its constant).
    pub fn objective(&self) -> Result<ConvexQuadratic, SolverError> {
        let mut linear = DVector::zeros(self.anchor.len());
        let nt_all = self.m_t * self.n_t;
        for (k, a) in self.comm_linear.iter().enumerate() {
            linear.rows_mut(k * nt_all, nt_all).copy_from(a);
        }
        ConvexQuadratic::new(self.expand(&self.comm_hessian), linear, 0.0)
    }

    /// Linearized sensing constraint `Γ·disturbance − echo_lin ≤ 0`.
    pub fn sensing_constraint(&self) -> Result<ConvexQuadratic, SolverError> {
        let target = self.expand(&self.target_hessian);
        let g = target.apply(&self.anchor);
        let c = self.sensing_floor + target.quad_form(&self.anchor);
        ConvexQuadratic::new(self.expand(&self.clutter_hessian), g, c)
    }

    /// Surrogate objective predicted by the subproblem.
    pub fn value_at(&self, x: &DVector<C64>) -> f64 {
        self.constant - self.objective().expect("validated at build").eval(x)
    }

    pub fn to_qcqp(&self, s: &Scenario) -> Result<QcqpProblem, SolverError> {
        let mut p = QcqpProblem::new(self.objective()?).with_quad_ineq(self.sensing_constraint()?);
        let nt_all = self.m_t * self.n_t;
        let base = self.k_d * nt_all;
        for m in 0..self.m_t {
            let mut sel: Vec<usize> = (0..self.k_d)
                .flat_map(|k| (0..self.n_t).map(move |i| k * nt_all + m * self.n_t + i))
                .collect();
            let nn = self.n_t * self.n_t;
            sel.extend((0..nn).map(|i| base + m * nn + i));
            p = p.with_ball(sel, s.p_bs[m].sqrt());
        }
        Ok(p)
    }
}

pub(crate) fn sensing_ok(state: &DecisionState, ch: &ChannelSet, s: &Scenario) -> bool {
    let r = radar_terms(state, ch, s);
    r.gap(s.gamma_r) <= ACCEPT_TOL * s.gamma_r * r.disturbance
}

pub(crate) fn ascent_ok(before: f64, after: f64) -> bool {
    after >= before - ACCEPT_TOL * (1.0 + before.abs())
}

/// Scales each TBS down by the rounding excess over its budget, if any.
fn enforce_power(state: &mut DecisionState, s: &Scenario) {
    let nt = s.dims.n_t;
    for m in 0..s.dims.m_t {
        let used = state.power_used(m, nt);
        if used > s.p_bs[m] {
            let f = (s.p_bs[m] / used).sqrt();
            for w in state.w.iter_mut() {
                w.rows_mut(m * nt, nt).scale_mut(f);
            }
            state.wr[m].scale_mut(f);
        }
    }
}

/// Accepts `cand` only if it keeps the sensing floor and, when the anchor
/// already satisfied it, does not lower the surrogate.
fn accept(
    anchor: &DecisionState,
    cand: DecisionState,
    ch: &ChannelSet,
    s: &Scenario,
) -> (DecisionState, BlockOutcome) {
    if !sensing_ok(&cand, ch, s) {
        return (anchor.clone(), BlockOutcome::Kept("sensing floor violated after solve"));
    }
    if sensing_ok(anchor, ch, s)
        && !ascent_ok(surrogate_objective(anchor, ch, s), surrogate_objective(&cand, ch, s))
    {
        return (anchor.clone(), BlockOutcome::Kept("surrogate decreased"));
    }
    (cand, BlockOutcome::Accepted)
}

pub fn update_beamformers(state: &DecisionState, ch: &ChannelSet, s: &Scenario) -> (DecisionState, BlockOutcome) {
    let sub = build_beamformer_subproblem(state, ch, s);
    let solved = sub.to_qcqp(s).and_then(|p| solve_qcqp(&p));
    let (x, report) = match solved {
        Ok(r) => r,
        Err(_) => return (state.clone(), BlockOutcome::Kept("beamformer solver error")),
    };
    if report.status == SolveStatus::Infeasible {
        return (state.clone(), BlockOutcome::Kept("linearized sensing constraint infeasible"));
    }
    let mut cand = state.clone();
    unstack_beamformers(&x, s, &mut cand);
    enforce_power(&mut cand, s);
    accept(state, cand, ch, s)
}

/// Coefficients of the power subproblem in `s_l = √q_l`:
/// minimize `Σ b1 s² − b2 s` subject to `Σ b3 s² ≤ budget`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSubproblem {
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
    pub b3: Vec<f64>,
    /// Remaining sensing budget for UL leakage into the sensing filter.
    pub budget: f64,
}

pub fn build_power_subproblem(state: &DecisionState, ch: &ChannelSet, s: &Scenario) -> PowerSubproblem {
    let d = s.dims;
    let aux = &state.aux;
    let u0 = &state.u_sense;
    let mut b1 = vec![0.0; d.k_u];
    let mut b2 = vec![0.0; d.k_u];
    let mut b3 = vec![0.0; d.k_u];
    for l in 0..d.k_u {
        let dl: f64 = (0..d.k_d)
            .map(|k| s.mu_d[k] * aux.omega_d[k] * aux.beta_d[k].norm_sqr() * ch.hdu[(k, l)].norm_sqr())
            .sum();
        let ul: f64 = (0..d.k_u)
            .map(|i| s.mu_u[i] * aux.omega_u[i] * aux.beta_u[i].norm_sqr() * state.u_comm[i].dotc(&ch.hu[l]).norm_sqr())
            .sum();
        b1[l] = dl + ul;
        b2[l] = 2.0 * s.mu_u[l] * aux.omega_u[l] * (aux.beta_u[l].conj() * state.u_comm[l].dotc(&ch.hu[l])).re;
        b3[l] = u0.dotc(&ch.hu[l]).norm_sqr();
    }
    let r = radar_terms(state, ch, s);
    let ul_part: f64 = (0..d.k_u).map(|l| state.q[l] * b3[l]).sum();
    let rest = r.disturbance - ul_part;
    let budget = r.echo / s.gamma_r - rest;
    PowerSubproblem { b1, b2, b3, budget }
}

pub fn update_powers(state: &DecisionState, ch: &ChannelSet, s: &Scenario) -> (DecisionState, BlockOutcome) {
    let sub = build_power_subproblem(state, ch, s);
    if sub.budget < 0.0 {
        return (state.clone(), BlockOutcome::Kept("sensing floor unattainable at zero UL power"));
    }
    let n = s.dims.k_u;
    let linear = DVector::from_iterator(n, sub.b2.iter().map(|b| C64::new(0.5 * b, 0.0)));
    let problem = ConvexQuadratic::new(BlockHermitian::diagonal(&sub.b1), linear, 0.0)
        .and_then(|obj| {
            let q = ConvexQuadratic::new(BlockHermitian::diagonal(&sub.b3), DVector::zeros(n), -sub.budget)?;
            let lower = vec![C64::new(0.0, 0.0); n];
            let upper = s.p_ul.iter().map(|p| C64::new(p.sqrt(), 0.0)).collect();
            Ok(QcqpProblem::new(obj).with_quad_ineq(q).with_bounds(lower, upper))
        })
        .and_then(|p| solve_qcqp(&p));
    let (x, report) = match problem {
        Ok(r) => r,
        Err(_) => return (state.clone(), BlockOutcome::Kept("power solver error")),
    };
    if report.status == SolveStatus::Infeasible {
        return (state.clone(), BlockOutcome::Kept("power subproblem infeasible"));
    }
    let mut cand = state.clone();
    cand.q = x.iter().zip(&s.p_ul).map(|(v, p)| (v.re * v.re).clamp(0.0, *p)).collect();
    accept(state, cand, ch, s)
}

/// Receive covariance: noise, every UL user and the echoes of radar indices `clutter_from..`.
fn receive_covariance(state: &DecisionState, ch: &ChannelSet, s: &Scenario, echo: &[f64], clutter_from: usize) -> DMatrix<C64> {
    let n = ch.gr[0].len();
    let mut r = DMatrix::identity(n, n) * C64::new(s.noise_r, 0.0);
    for (h, q) in ch.hu.iter().zip(&state.q) {
        r += outer(h) * C64::new(*q, 0.0);
    }
    for j in clutter_from..ch.gr.len() {
        r += outer(&ch.gr[j]) * C64::new(s.radar.rcs_var[j] * echo[j], 0.0);
    }
    r
}

/// `u_l = D_l⁻¹ d_l` with `D_l = ω|β|² R` and `d_l = ω β* √q_l h_{u,l}`.
pub fn update_comm_filters(state: &DecisionState, ch: &ChannelSet, s: &Scenario) -> DecisionState {
    let mut next = state.clone();
    let echo = echo_powers(state, ch, s);
    let r = receive_covariance(state, ch, s, &echo, 0);
    let chol = r.cholesky().expect("noise term makes the receive covariance positive definite");
    for l in 0..s.dims.k_u {
        let (omega, beta) = (state.aux.omega_u[l], state.aux.beta_u[l]);
        if omega * beta.norm_sqr() == 0.0 {
            // The surrogate does not depend on this filter.
            continue;
        }
        // ω β* √q / (ω |β|²) = √q / β; both factors shrink like √q, and
        // forming |β|² would underflow for a user whose power is vanishing.
        let scale = C64::new(state.q[l].sqrt(), 0.0) / beta;
        if !(scale.re.is_finite() && scale.im.is_finite()) {
            continue;
        }
        next.u_comm[l] = chol.solve(&ch.hu[l]) * scale;
    }
    next
}

/// Principal generalized eigenvector of target echo versus disturbance, unit norm.
pub fn update_sensing_filter(state: &DecisionState, ch: &ChannelSet, s: &Scenario) -> Result<DecisionState, SolverError> {
    let echo = echo_powers(state, ch, s);
    let e1 = outer(&ch.gr[0]) * C64::new(s.radar.rcs_var[0] * echo[0], 0.0);
    let e2 = receive_covariance(state, ch, s, &echo, 1);
    let (_, v) = max_generalized_eig(&e1, &e2)?;
    let mut next = state.clone();
    next.u_sense = v;
    if radar_terms(&next, ch, s).sinr() < radar_terms(state, ch, s).sinr() {
        return Ok(state.clone());
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::testkit::{cvec, instance};
    use crate::metrics::{sinr_dl, sinr_radar, sinr_ul, surrogate_rate_dl, surrogate_rate_ul, Auxiliaries};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Instance whose current state meets the sensing floor, with tight auxiliaries.
    fn feasible_instance(seed: u64) -> (Scenario, ChannelSet, DecisionState) {
        let (s, _, ch, st) = instance(seed);
        let mut st = update_sensing_filter(&st, &ch, &s).unwrap();
        let sinr = sinr_radar(&st, &ch, &s);
        let mut s = s;
        s.gamma_r = 0.5 * sinr;
        st = update_auxiliaries(&st, &ch, &s);
        (s, ch, st)
    }

    #[test]
    fn zero_beamformers_give_neutral_dl_auxiliaries() {
        let (s, _, ch, mut st) = instance(1);
        st.w.iter_mut().for_each(|w| w.fill(C64::new(0.0, 0.0)));
        let next = update_auxiliaries(&st, &ch, &s);
        for k in 0..s.dims.k_d {
            assert_eq!(next.aux.beta_d[k], C64::new(0.0, 0.0));
            assert!((next.aux.omega_d[k] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_user_weight_is_one_plus_snr() {
        let (mut s, _, ch, mut st) = instance(2);
        st.wr.iter_mut().for_each(|w| w.fill(C64::new(0.0, 0.0)));
        st.q.iter_mut().for_each(|q| *q = 0.0);
        for k in 1..s.dims.k_d {
            st.w[k].fill(C64::new(0.0, 0.0));
        }
        s.noise_dl[0] = 1e-11;
        let snr = ch.hd[0].dotc(&st.w[0]).norm_sqr() / s.noise_dl[0];
        let next = update_auxiliaries(&st, &ch, &s);
        assert!((next.aux.omega_d[0] - (1.0 + snr)).abs() < 1e-12 * (1.0 + snr));
    }

    #[test]
    fn auxiliaries_make_surrogate_tight() {
        for seed in 0..5 {
            let (s, _, ch, st) = instance(seed);
            let next = update_auxiliaries(&st, &ch, &s);
            for k in 0..s.dims.k_d {
                let r = sinr_dl(&next, &ch, &s, k).ln_1p();
                assert!((surrogate_rate_dl(&next, &ch, &s, k) - r).abs() < 1e-9 * (1.0 + r));
            }
            for l in 0..s.dims.k_u {
                let r = sinr_ul(&next, &ch, &s, l).ln_1p();
                assert!((surrogate_rate_ul(&next, &ch, &s, l) - r).abs() < 1e-9 * (1.0 + r));
            }
        }
    }

    #[test]
    fn neutral_auxiliaries_give_empty_comm_terms() {
        let (s, _, ch, mut st) = instance(3);
        st.aux = Auxiliaries::neutral(s.dims.k_d, s.dims.k_u);
        let sub = build_beamformer_subproblem(&st, &ch, &s);
        assert!(sub.comm_linear.iter().all(|a| a.norm() == 0.0));
        assert_eq!(sub.comm_hessian.norm(), 0.0);
    }

    #[test]
    fn subproblem_matrices_are_psd_and_stacking_round_trips() {
        let (s, _, ch, st) = instance(4);
        let sub = build_beamformer_subproblem(&st, &ch, &s);
        for m in [&sub.comm_hessian, &sub.clutter_hessian, &sub.target_hessian] {
            let min = m.clone().symmetric_eigenvalues().min();
            assert!(min >= -1e-10 * m.norm().max(1e-300));
        }
        let mut back = st.clone();
        back.w.iter_mut().for_each(|w| w.fill(C64::new(0.0, 0.0)));
        back.wr.iter_mut().for_each(|w| w.fill(C64::new(0.0, 0.0)));
        unstack_beamformers(&stack_beamformers(&st, &s), &s, &mut back);
        assert_eq!(back, st);
    }

    #[test]
    fn subproblem_value_equals_surrogate_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..4 {
            let (s, _, ch, st) = instance(seed);
            let sub = build_beamformer_subproblem(&st, &ch, &s);
            let at_anchor = surrogate_objective(&st, &ch, &s);
            assert!((sub.value_at(&sub.anchor) - at_anchor).abs() < 1e-9 * (1.0 + at_anchor.abs()));
            let x = cvec(&mut rng, sub.anchor.len(), 0.3);
            let mut moved = st.clone();
            unstack_beamformers(&x, &s, &mut moved);
            let truth = surrogate_objective(&moved, &ch, &s);
            assert!((sub.value_at(&x) - truth).abs() < 1e-9 * (1.0 + truth.abs()));
        }
    }

    #[test]
    fn linearized_constraint_is_conservative() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (s, _, ch, st) = instance(5);
        let sub = build_beamformer_subproblem(&st, &ch, &s);
        let con = sub.sensing_constraint().unwrap();
        let anchor_gap = radar_terms(&st, &ch, &s).gap(s.gamma_r);
        assert!((con.eval(&sub.anchor) - anchor_gap).abs() < 1e-9 * (anchor_gap.abs() + 1e-30) + 1e-25);
        for _ in 0..200 {
            let x = cvec(&mut rng, sub.anchor.len(), 0.5);
            let mut moved = st.clone();
            unstack_beamformers(&x, &s, &mut moved);
            let gap = radar_terms(&moved, &ch, &s).gap(s.gamma_r);
            assert!(con.eval(&x) >= gap - 1e-12 * gap.abs().max(1e-25));
        }
    }

    #[test]
    fn beamformer_update_ascends_and_stays_feasible() {
        for seed in 0..6 {
            let (s, ch, st) = feasible_instance(seed);
            let before = surrogate_objective(&st, &ch, &s);
            let (next, outcome) = update_beamformers(&st, &ch, &s);
            assert_eq!(outcome, BlockOutcome::Accepted, "seed {seed}");
            assert!(surrogate_objective(&next, &ch, &s) >= before - 1e-7);
            for m in 0..s.dims.m_t {
                assert!(next.power_used(m, s.dims.n_t) <= s.p_bs[m] + 1e-8);
            }
            assert!(sinr_radar(&next, &ch, &s) >= s.gamma_r - 1e-6);
        }
    }

    #[test]
    fn beamformer_update_is_a_fixed_point_at_the_optimum() {
        // The echo linearization moves with the anchor, so iterate to the MM
        // fixed point first; from there one more update must not move.
        let (s, ch, st) = feasible_instance(7);
        let mut once = st;
        for _ in 0..300 {
            once = update_beamformers(&once, &ch, &s).0;
        }
        let (twice, outcome) = update_beamformers(&once, &ch, &s);
        assert_eq!(outcome, BlockOutcome::Accepted);
        let a = stack_beamformers(&once, &s);
        let b = stack_beamformers(&twice, &s);
        assert!((a - b).norm() <= 1e-6 * (1.0 + stack_beamformers(&once, &s).norm()));
    }

    /// Without echoes and with a zero floor the update is regularized
    /// WMMSE: `w_k = (A + λI)⁻¹ a_k` with one multiplier for the single TBS.
    #[test]
    fn reduces_to_regularized_wmmse_without_sensing() {
        use crate::channel::{generate_scenario, stack_channels, ScenarioConfig};
        let cfg = ScenarioConfig { m_t: 1, k_t: 1, target_rcs_db: -95.0, clutter_rcs_db: -95.0, ..ScenarioConfig::default() };
        let mut s = generate_scenario(&cfg, 3).unwrap();
        // A zero floor with no echoes at all makes the sensing constraint vacuous;
        // any nonzero target echo would leave its linearization binding.
        s.gamma_r = 0.0;
        s.radar.rcs_var.iter_mut().for_each(|v| *v = 0.0);
        let (_, lay, _, _) = instance(3);
        let mut lay = lay;
        lay.tbs.truncate(1);
        let ch = stack_channels(&lay, &s);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut st = crate::metrics::testkit::state(&s, &mut rng);
        st = update_auxiliaries(&st, &ch, &s);
        let sub = build_beamformer_subproblem(&st, &ch, &s);
        let a = &sub.comm_hessian;
        let n = a.nrows();
        let weights = |lam: f64| -> Vec<DVector<C64>> {
            let m = a + DMatrix::<C64>::identity(n, n) * C64::new(lam, 0.0);
            let lu = m.lu();
            sub.comm_linear.iter().map(|v| lu.solve(v).unwrap()).collect()
        };
        let power = |ws: &[DVector<C64>]| ws.iter().map(|w| w.norm_squared()).sum::<f64>();
        let (mut lo, mut hi) = (0.0, 1.0);
        while power(&weights(hi)) > s.p_bs[0] {
            hi *= 2.0;
        }
        let lam = if power(&weights(1e-300)) <= s.p_bs[0] {
            0.0
        } else {
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if power(&weights(mid)) > s.p_bs[0] { lo = mid } else { hi = mid }
            }
            hi
        };
        let expect = weights(lam);
        let (next, outcome) = update_beamformers(&st, &ch, &s);
        assert_eq!(outcome, BlockOutcome::Accepted);
        for (w, e) in next.w.iter().zip(&expect) {
            assert!((w - e).norm() <= 1e-6 * (1.0 + e.norm()), "{} vs {}", w, e);
        }
        assert!(next.wr[0].norm() <= 1e-6);
    }

    #[test]
    fn zero_ul_gain_gives_zero_power() {
        let (s, ch, mut st) = feasible_instance(11);
        st.aux.beta_u.iter_mut().for_each(|b| *b = C64::new(0.0, 0.0));
        let (next, _) = update_powers(&st, &ch, &s);
        assert!(next.q.iter().all(|q| *q == 0.0));
    }

    /// Grid search over each `q_l` with the others fixed at the returned values.
    #[test]
    fn power_update_matches_grid_search() {
        for seed in 0..4 {
            let (s, ch, st) = feasible_instance(20 + seed);
            let (next, outcome) = update_powers(&st, &ch, &s);
            assert_eq!(outcome, BlockOutcome::Accepted);
            let sub = build_power_subproblem(&st, &ch, &s);
            let cost = |q: &[f64]| -> f64 { (0..q.len()).map(|l| sub.b1[l] * q[l] - sub.b2[l] * q[l].sqrt()).sum() };
            let feasible = |q: &[f64]| (0..q.len()).map(|l| sub.b3[l] * q[l]).sum::<f64>() <= sub.budget;
            let ours = cost(&next.q);
            let used: f64 = (0..next.q.len()).map(|l| sub.b3[l] * next.q[l]).sum();
            assert!(used <= sub.budget * (1.0 + 1e-9));
            for l in 0..s.dims.k_u {
                let mut q = next.q.clone();
                let mut best = f64::INFINITY;
                for i in 0..=100_000 {
                    q[l] = s.p_ul[l] * i as f64 / 100_000.0;
                    if feasible(&q) {
                        best = best.min(cost(&q));
                    }
                }
                assert!(ours <= best + 1e-9 * (1.0 + best.abs()), "seed {seed} user {l}: {ours} {best}");
            }
        }
    }

    #[test]
    fn interior_power_optimum_is_scalar_calculus() {
        let (mut s, ch, st) = feasible_instance(12);
        s.gamma_r = 1e-30;
        let sub = build_power_subproblem(&st, &ch, &s);
        let (next, _) = update_powers(&st, &ch, &s);
        for l in 0..s.dims.k_u {
            let root = (sub.b2[l] / (2.0 * sub.b1[l])).max(0.0);
            let expect = (root * root).min(s.p_ul[l]);
            assert!((next.q[l] - expect).abs() <= 1e-9 * (1.0 + expect), "{} {}", next.q[l], expect);
        }
    }

    #[test]
    fn silent_user_gets_zero_filter() {
        let (s, _, ch, mut st) = instance(13);
        st.q[0] = 0.0;
        let next = update_comm_filters(&st, &ch, &s);
        assert_eq!(next.u_comm[0].norm(), 0.0);
    }

    #[test]
    fn vanishing_power_keeps_the_filter_finite() {
        let (s, _, ch, st) = instance(13);
        let reference = update_comm_filters(&update_auxiliaries(&st, &ch, &s), &ch, &s);
        // The optimal filter does not depend on the user's own power, but
        // ω|β|² and β*√q underflow long before √q/β does.
        for q in [1e-180, 1e-250, 1e-300, 1e-310] {
            let mut st = st.clone();
            st.q[0] = q;
            let st = update_auxiliaries(&st, &ch, &s);
            let next = update_comm_filters(&st, &ch, &s);
            let (u, v) = (&next.u_comm[0], &reference.u_comm[0]);
            assert!(u.iter().all(|c| c.re.is_finite() && c.im.is_finite()), "q = {q}");
            let cos = u.dotc(v).norm() / (u.norm() * v.norm());
            assert!(cos > 1.0 - 1e-6, "q = {q}: {cos}");
        }
    }

    #[test]
    fn interference_free_filter_is_matched() {
        use crate::channel::{generate_scenario, ScenarioConfig};
        let cfg = ScenarioConfig { k_u: 1, target_rcs_db: -95.0, clutter_rcs_db: -95.0, ..ScenarioConfig::default() };
        let mut s = generate_scenario(&cfg, 4).unwrap();
        s.radar.rcs_var.iter_mut().for_each(|v| *v = 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lay = crate::metrics::testkit::layout(&s, &mut rng);
        let ch = crate::channel::stack_channels(&lay, &s);
        let st = crate::metrics::testkit::state(&s, &mut rng);
        let next = update_comm_filters(&st, &ch, &s);
        let (u, h) = (&next.u_comm[0], &ch.hu[0]);
        let cos = u.dotc(h).norm() / (u.norm() * h.norm());
        assert!((cos - 1.0).abs() < 1e-10);
    }

    /// Per-user MSE objective minimized by the filter update.
    fn filter_cost(st: &DecisionState, ch: &ChannelSet, s: &Scenario, l: usize, u: &DVector<C64>) -> f64 {
        let mut moved = st.clone();
        moved.u_comm[l] = u.clone();
        -surrogate_rate_ul(&moved, ch, s, l)
    }

    #[test]
    fn comm_filter_matches_generic_solver() {
        let (s, _, ch, st) = instance(14);
        let next = update_comm_filters(&st, &ch, &s);
        let echo = echo_powers(&st, &ch, &s);
        let r = receive_covariance(&st, &ch, &s, &echo, 0);
        for l in 0..s.dims.k_u {
            let (omega, beta) = (st.aux.omega_u[l], st.aux.beta_u[l]);
            // Normalize so the curvature is O(1) and the solver tolerance is meaningful.
            let scale = omega * beta.norm_sqr() * r.norm();
            let h = &r * C64::new(omega * beta.norm_sqr() / scale, 0.0);
            let a = &ch.hu[l] * (beta.conj() * omega * st.q[l].sqrt() / scale);
            let p = QcqpProblem::new(ConvexQuadratic::new(BlockHermitian::dense(h), a, 0.0).unwrap());
            let (x, _) = solve_qcqp(&p).unwrap();
            assert!((&x - &next.u_comm[l]).norm() <= 1e-8 * x.norm());
        }
    }

    #[test]
    fn sensing_filter_matches_mvdr_without_disturbance_structure() {
        let (mut s, _, ch, mut st) = instance(15);
        s.radar.rcs_var.iter_mut().skip(1).for_each(|v| *v = 0.0);
        st.q.iter_mut().for_each(|q| *q = 0.0);
        let next = update_sensing_filter(&st, &ch, &s).unwrap();
        // Only white noise remains, so MVDR collapses to the matched filter.
        let g = &ch.gr[0];
        let cos = next.u_sense.dotc(g).norm() / (next.u_sense.norm() * g.norm());
        assert!((cos - 1.0).abs() < 1e-10);
        assert!((next.u_sense.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sensing_filter_matches_mvdr_with_interference() {
        let (s, _, ch, st) = instance(16);
        let next = update_sensing_filter(&st, &ch, &s).unwrap();
        let echo = echo_powers(&st, &ch, &s);
        let e2 = receive_covariance(&st, &ch, &s, &echo, 1);
        let mvdr = e2.lu().solve(&ch.gr[0]).unwrap();
        let cos = next.u_sense.dotc(&mvdr).norm() / (next.u_sense.norm() * mvdr.norm());
        assert!((cos - 1.0).abs() < 1e-8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn comm_filter_is_a_local_minimizer(seed in 0u64..1000, probe in 0u64..1000) {
            let (s, _, ch, st) = instance(seed);
            let next = update_comm_filters(&st, &ch, &s);
            let mut rng = ChaCha8Rng::seed_from_u64(probe);
            for l in 0..s.dims.k_u {
                let u = &next.u_comm[l];
                let base = filter_cost(&next, &ch, &s, l, u);
                let mut delta = cvec(&mut rng, u.len(), 1.0);
                delta *= C64::new(1e-3 * u.norm() / delta.norm(), 0.0);
                let moved = filter_cost(&next, &ch, &s, l, &(u + delta));
                prop_assert!(moved >= base - 1e-12 * (1.0 + base.abs()));
            }
        }

        #[test]
        fn sensing_filter_never_lowers_sinr(seed in 0u64..1000) {
            let (s, _, ch, st) = instance(seed);
            let before = sinr_radar(&st, &ch, &s);
            let next = update_sensing_filter(&st, &ch, &s).unwrap();
            prop_assert!(sinr_radar(&next, &ch, &s) >= before - 1e-9);
        }

        #[test]
        fn every_block_weakly_ascends(seed in 0u64..1000) {
            let (s, ch, st) = feasible_instance(seed);
            let base = surrogate_objective(&st, &ch, &s);
            let tol = 1e-7 * (1.0 + base.abs());
            let aux = update_auxiliaries(&st, &ch, &s);
            prop_assert!(surrogate_objective(&aux, &ch, &s) >= base - tol);
            let (bf, _) = update_beamformers(&st, &ch, &s);
            prop_assert!(surrogate_objective(&bf, &ch, &s) >= base - tol);
            let (pw, _) = update_powers(&st, &ch, &s);
            prop_assert!(surrogate_objective(&pw, &ch, &s) >= base - tol);
            let cf = update_comm_filters(&st, &ch, &s);
            prop_assert!(surrogate_objective(&cf, &ch, &s) >= base - tol);
        }

        #[test]
        fn sensing_then_beamformers_meets_floor(seed in 0u64..1000) {
            let (s, ch, st) = feasible_instance(seed);
            let st = update_sensing_filter(&st, &ch, &s).unwrap();
            let (bf, _) = update_beamformers(&st, &ch, &s);
            prop_assert!(sinr_radar(&bf, &ch, &s) >= s.gamma_r - 1e-6);
        }
    }
}
