//! SINRs, rates and the WMMSE surrogate.
//!
//! The radar probing matrix is block diagonal: TBS `m` sends its own `N_t`
//! probing streams through `W^r_m`, so every probing term is a sum of
//! per-TBS norms `‖x_m^H W^r_m‖²`.

use crate::channel::{ChannelSet, Scenario, C64};
use nalgebra::{DMatrix, DVector, DVectorView};

/// WMMSE weights `ω` and scalar equalizers `β`.
#[derive(Debug, Clone, PartialEq)]
pub struct Auxiliaries {
    pub omega_d: Vec<f64>,
    pub beta_d: Vec<C64>,
    pub omega_u: Vec<f64>,
    pub beta_u: Vec<C64>,
}

impl Auxiliaries {
    /// `ω = 1`, `β = 0` for every user.
    pub fn neutral(k_d: usize, k_u: usize) -> Self {
        Self {
            omega_d: vec![1.0; k_d],
            beta_d: vec![C64::new(0.0, 0.0); k_d],
            omega_u: vec![1.0; k_u],
            beta_u: vec![C64::new(0.0, 0.0); k_u],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionState {
    /// Stacked DL beamformers, length `M_t N_t`.
    pub w: Vec<DVector<C64>>,
    /// Per-TBS probing matrices, `N_t × N_t`.
    pub wr: Vec<DMatrix<C64>>,
    pub q: Vec<f64>,
    /// UL receive filters, length `M_r N_r`.
    pub u_comm: Vec<DVector<C64>>,
    pub u_sense: DVector<C64>,
    pub aux: Auxiliaries,
}

impl DecisionState {
    pub fn zeros(s: &Scenario) -> Self {
        let d = s.dims;
        let (nt, nr) = (d.m_t * d.n_t, d.m_r * d.n_r);
        Self {
            w: vec![DVector::zeros(nt); d.k_d],
            wr: vec![DMatrix::zeros(d.n_t, d.n_t); d.m_t],
            q: vec![0.0; d.k_u],
            u_comm: vec![DVector::zeros(nr); d.k_u],
            u_sense: DVector::zeros(nr),
            aux: Auxiliaries::neutral(d.k_d, d.k_u),
        }
    }

    /// `Σ_k ‖w_{m,k}‖² + ‖W^r_m‖_F²`.
    pub fn power_used(&self, m: usize, n_t: usize) -> f64 {
        let comm: f64 = self.w.iter().map(|w| w.rows(m * n_t, n_t).norm_squared()).sum();
        comm + self.wr[m].norm_squared()
    }

    /// Largest excess over the per-TBS and per-user budgets.
    pub fn power_residual(&self, s: &Scenario) -> f64 {
        let bs = (0..s.dims.m_t).map(|m| self.power_used(m, s.dims.n_t) - s.p_bs[m]);
        let ul = self.q.iter().zip(&s.p_ul).map(|(q, p)| (q - p).max(-q));
        bs.chain(ul).fold(0.0, f64::max)
    }
}

/// `Σ_m ‖x_m^H W^r_m‖²` for a stacked transmit-side vector `x`.
pub fn probing_power(x: &DVector<C64>, wr: &[DMatrix<C64>], n_t: usize) -> f64 {
    wr.iter()
        .enumerate()
        .map(|(m, w)| (w.adjoint() * x.rows(m * n_t, n_t)).norm_squared())
        .sum()
}

/// Power radiated towards radar index `j`: `Σ_k |g_j^H w_k|² + Σ_m ‖g_{m,j}^H W^r_m‖²`.
pub fn echo_power(state: &DecisionState, ch: &ChannelSet, s: &Scenario, j: usize) -> f64 {
    let g = &ch.gt[j];
    let comm: f64 = state.w.iter().map(|w| g.dotc(w).norm_sqr()).sum();
    comm + probing_power(g, &state.wr, s.dims.n_t)
}

pub fn echo_powers(state: &DecisionState, ch: &ChannelSet, s: &Scenario) -> Vec<f64> {
    (0..ch.gt.len()).map(|j| echo_power(state, ch, s, j)).collect()
}

/// Desired amplitude and interference-plus-noise power of one link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkTerms {
    pub signal: C64,
    pub interference: f64,
}

impl LinkTerms {
    pub fn sinr(&self) -> f64 {
        let p = self.signal.norm_sqr();
        if p == 0.0 {
            0.0
        } else {
            p / self.interference
        }
    }

    pub fn total(&self) -> f64 {
        self.signal.norm_sqr() + self.interference
    }
}

pub fn dl_terms(state: &DecisionState, ch: &ChannelSet, s: &Scenario, k: usize) -> LinkTerms {
    let h = &ch.hd[k];
    let mut interference = s.noise_dl[k] + probing_power(h, &state.wr, s.dims.n_t);
    let mut signal = C64::new(0.0, 0.0);
    for (i, w) in state.w.iter().enumerate() {
        let z = h.dotc(w);
        if i == k {
            signal = z;
        } else {
            interference += z.norm_sqr();
        }
    }
    for (l, q) in state.q.iter().enumerate() {
        interference += q * ch.hdu[(k, l)].norm_sqr();
    }
    LinkTerms { signal, interference }
}

/// Echo leakage `Σ_j σ²_j |u^H g_{r,j}|² T_j` over radar indices `from..`.
fn echo_leakage(u: &DVector<C64>, ch: &ChannelSet, s: &Scenario, echo: &[f64], from: usize) -> f64 {
    (from..ch.gr.len())
        .map(|j| s.radar.rcs_var[j] * u.dotc(&ch.gr[j]).norm_sqr() * echo[j])
        .sum()
}

pub fn ul_terms_with(
    state: &DecisionState,
    ch: &ChannelSet,
    s: &Scenario,
    echo: &[f64],
    l: usize,
) -> LinkTerms {
    let u = &state.u_comm[l];
    let mut interference = s.noise_r * u.norm_squared() + echo_leakage(u, ch, s, echo, 0);
    for (i, h) in ch.hu.iter().enumerate() {
        if i != l {
            interference += state.q[i] * u.dotc(h).norm_sqr();
        }
    }
    let signal = u.dotc(&ch.hu[l]) * state.q[l].sqrt();
    LinkTerms { signal, interference }
}

pub fn ul_terms(state: &DecisionState, ch: &ChannelSet, s: &Scenario, l: usize) -> LinkTerms {
    ul_terms_with(state, ch, s, &echo_powers(state, ch, s), l)
}

/// Numerator and denominator of the sensing SINR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadarTerms {
    pub echo: f64,
    pub disturbance: f64,
}

impl RadarTerms {
    pub fn sinr(&self) -> f64 {
        if self.echo == 0.0 {
            0.0
        } else {
            self.echo / self.disturbance
        }
    }

    /// `Γ·disturbance − echo`; nonpositive iff the sensing floor holds.
    pub fn gap(&self, gamma: f64) -> f64 {
        gamma * self.disturbance - self.echo
    }
}

pub fn radar_terms_with(
    state: &DecisionState,
    ch: &ChannelSet,
    s: &Scenario,
    echo: &[f64],
) -> RadarTerms {
    let u = &state.u_sense;
    let target = s.radar.rcs_var[0] * u.dotc(&ch.gr[0]).norm_sqr() * echo[0];
    let ul: f64 = ch.hu.iter().zip(&state.q).map(|(h, q)| q * u.dotc(h).norm_sqr()).sum();
    let disturbance = ul + echo_leakage(u, ch, s, echo, 1) + s.noise_r * u.norm_squared();
    RadarTerms { echo: target, disturbance }
}

pub fn radar_terms(state: &DecisionState, ch: &ChannelSet, s: &Scenario) -> RadarTerms {
    radar_terms_with(state, ch, s, &echo_powers(state, ch, s))
}

pub fn sinr_dl(state: &DecisionState, ch: &ChannelSet, s: &Scenario, k: usize) -> f64 {
    dl_terms(state, ch, s, k).sinr()
}

pub fn sinr_ul(state: &DecisionState, ch: &ChannelSet, s: &Scenario, l: usize) -> f64 {
    ul_terms(state, ch, s, l).sinr()
}

pub fn sinr_radar(state: &DecisionState, ch: &ChannelSet, s: &Scenario) -> f64 {
    radar_terms(state, ch, s).sinr()
}

/// Weighted sum of `ln(1 + SINR)` over DL and UL users.
pub fn sum_rate(state: &DecisionState, ch: &ChannelSet, s: &Scenario) -> f64 {
    let echo = echo_powers(state, ch, s);
    let dl: f64 = (0..s.dims.k_d)
        .map(|k| s.mu_d[k] * dl_terms(state, ch, s, k).sinr().ln_1p())
        .sum();
    let ul: f64 = (0..s.dims.k_u)
        .map(|l| s.mu_u[l] * ul_terms_with(state, ch, s, &echo, l).sinr().ln_1p())
        .sum();
    dl + ul
}

/// `log ω − ω(1 − 2Re{β* x} + |β|² P) + 1` for amplitude `x` and total power `P`.
fn wmmse_value(omega: f64, beta: C64, t: &LinkTerms) -> f64 {
    omega.ln() - omega * (1.0 - 2.0 * (beta.conj() * t.signal).re + beta.norm_sqr() * t.total()) + 1.0
}

pub fn surrogate_rate_dl(state: &DecisionState, ch: &ChannelSet, s: &Scenario, k: usize) -> f64 {
    wmmse_value(state.aux.omega_d[k], state.aux.beta_d[k], &dl_terms(state, ch, s, k))
}

pub fn surrogate_rate_ul(state: &DecisionState, ch: &ChannelSet, s: &Scenario, l: usize) -> f64 {
    wmmse_value(state.aux.omega_u[l], state.aux.beta_u[l], &ul_terms(state, ch, s, l))
}

/// Weighted surrogate `Σ μ R̃` with the stored auxiliaries.
pub fn surrogate_objective(state: &DecisionState, ch: &ChannelSet, s: &Scenario) -> f64 {
    let echo = echo_powers(state, ch, s);
    let dl: f64 = (0..s.dims.k_d)
        .map(|k| s.mu_d[k] * wmmse_value(state.aux.omega_d[k], state.aux.beta_d[k], &dl_terms(state, ch, s, k)))
        .sum();
    let ul: f64 = (0..s.dims.k_u)
        .map(|l| {
            let t = ul_terms_with(state, ch, s, &echo, l);
            s.mu_u[l] * wmmse_value(state.aux.omega_u[l], state.aux.beta_u[l], &t)
        })
        .sum();
    dl + ul
}

/// Block `m` of a stacked vector.
pub fn block(x: &DVector<C64>, m: usize, len: usize) -> DVectorView<'_, C64> {
    x.rows(m * len, len)
}


#[cfg(test)]
mod tests {
    use super::testkit::instance;
    use super::*;
    use proptest::prelude::*;

    /// Term-by-term evaluation from dense stacked products, independent of the block helpers.
    fn dense_probe(s: &Scenario, st: &DecisionState) -> DMatrix<C64> {
        let d = s.dims;
        let n = d.m_t * d.n_t;
        let mut big = DMatrix::zeros(n, n);
        for m in 0..d.m_t {
            big.view_mut((m * d.n_t, m * d.n_t), (d.n_t, d.n_t)).copy_from(&st.wr[m]);
        }
        big
    }

    fn oracle_dl(s: &Scenario, ch: &ChannelSet, st: &DecisionState, k: usize) -> f64 {
        let wr = dense_probe(s, st);
        let h = &ch.hd[k];
        let num = (h.adjoint() * &st.w[k])[0].norm_sqr();
        let mut den = s.noise_dl[k] + (h.adjoint() * &wr).norm_squared();
        for i in 0..s.dims.k_d {
            if i != k {
                den += (h.adjoint() * &st.w[i])[0].norm_sqr();
            }
        }
        for l in 0..s.dims.k_u {
            den += st.q[l] * ch.hdu[(k, l)].norm_sqr();
        }
        num / den
    }

    /// `u^H g_r g_t^H` as a 1 × M_tN_t matrix.
    fn cascade(ch: &ChannelSet, u: &DVector<C64>, j: usize) -> DMatrix<C64> {
        let row = u.adjoint() * &ch.gr[j] * ch.gt[j].adjoint();
        DMatrix::from_row_slice(1, row.ncols(), row.as_slice())
    }

    fn oracle_ul(s: &Scenario, ch: &ChannelSet, st: &DecisionState, l: usize) -> f64 {
        let wr = dense_probe(s, st);
        let u = &st.u_comm[l];
        let num = st.q[l] * (u.adjoint() * &ch.hu[l])[0].norm_sqr();
        let mut den = s.noise_r * u.norm_squared();
        for i in 0..s.dims.k_u {
            if i != l {
                den += st.q[i] * (u.adjoint() * &ch.hu[i])[0].norm_sqr();
            }
        }
        for j in 0..=s.dims.k_t {
            let c = cascade(ch, u, j);
            for w in &st.w {
                den += s.radar.rcs_var[j] * (&c * w)[0].norm_sqr();
            }
            den += s.radar.rcs_var[j] * (&c * &wr).norm_squared();
        }
        num / den
    }

    fn oracle_radar(s: &Scenario, ch: &ChannelSet, st: &DecisionState) -> f64 {
        let wr = dense_probe(s, st);
        let u = &st.u_sense;
        let c0 = cascade(ch, u, 0);
        let mut num = s.radar.rcs_var[0] * (&c0 * &wr).norm_squared();
        for w in &st.w {
            num += s.radar.rcs_var[0] * (&c0 * w)[0].norm_sqr();
        }
        let mut den = s.noise_r * u.norm_squared();
        for i in 0..s.dims.k_u {
            den += st.q[i] * (u.adjoint() * &ch.hu[i])[0].norm_sqr();
        }
        for j in 1..=s.dims.k_t {
            let c = cascade(ch, u, j);
            for w in &st.w {
                den += s.radar.rcs_var[j] * (&c * w)[0].norm_sqr();
            }
            den += s.radar.rcs_var[j] * (&c * &wr).norm_squared();
        }
        num / den
    }

    #[test]
    fn sinrs_match_dense_oracle() {
        for seed in 0..5 {
            let (s, _, ch, st) = instance(seed);
            for k in 0..s.dims.k_d {
                let (a, b) = (sinr_dl(&st, &ch, &s, k), oracle_dl(&s, &ch, &st, k));
                assert!((a - b).abs() <= 1e-10 * b.abs().max(1e-30), "dl {a} {b}");
            }
            for l in 0..s.dims.k_u {
                let (a, b) = (sinr_ul(&st, &ch, &s, l), oracle_ul(&s, &ch, &st, l));
                assert!((a - b).abs() <= 1e-10 * b.abs().max(1e-30), "ul {a} {b}");
            }
            let (a, b) = (sinr_radar(&st, &ch, &s), oracle_radar(&s, &ch, &st));
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1e-30), "radar {a} {b}");
            let mut rate = 0.0;
            for k in 0..s.dims.k_d {
                rate += s.mu_d[k] * (1.0 + oracle_dl(&s, &ch, &st, k)).ln();
            }
            for l in 0..s.dims.k_u {
                rate += s.mu_u[l] * (1.0 + oracle_ul(&s, &ch, &st, l)).ln();
            }
            assert!((sum_rate(&st, &ch, &s) - rate).abs() < 1e-12 * rate.max(1.0));
        }
    }

    #[test]
    fn unit_sinr_example() {
        let (mut s, _, mut ch, mut st) = instance(1);
        s.dims.k_u = 0;
        s.mu_u.clear();
        st.q.clear();
        st.u_comm.clear();
        ch.hu.clear();
        ch.hdu = DMatrix::zeros(s.dims.k_d, 0);
        st.wr.iter_mut().for_each(|w| w.fill(C64::new(0.0, 0.0)));
        for (i, w) in st.w.iter_mut().enumerate() {
            if i != 0 {
                w.fill(C64::new(0.0, 0.0));
            }
        }
        // Scale w_0 so |h^H w|² equals the noise power.
        let p = ch.hd[0].dotc(&st.w[0]).norm_sqr();
        st.w[0] *= C64::new((s.noise_dl[0] / p).sqrt(), 0.0);
        assert!((sinr_dl(&st, &ch, &s, 0) - 1.0).abs() < 1e-12);
        st.w[0].fill(C64::new(0.0, 0.0));
        assert_eq!(sinr_dl(&st, &ch, &s, 0), 0.0);
    }

    #[test]
    fn zero_power_gives_zero_rate() {
        let (s, _, ch, mut st) = instance(2);
        st.w.iter_mut().for_each(|w| w.fill(C64::new(0.0, 0.0)));
        st.q.iter_mut().for_each(|q| *q = 0.0);
        assert_eq!(sum_rate(&st, &ch, &s), 0.0);
        assert_eq!(sinr_ul(&st, &ch, &s, 0), 0.0);
    }

    #[test]
    fn radar_filter_orthogonal_to_target_gives_zero() {
        let (s, _, ch, mut st) = instance(3);
        let g = &ch.gr[0];
        let proj = g.dotc(&st.u_sense) / g.norm_squared();
        st.u_sense -= g * proj;
        assert!(sinr_radar(&st, &ch, &s) < 1e-20);
    }

    #[test]
    fn neutral_auxiliaries_evaluate_formula() {
        let (s, _, ch, mut st) = instance(4);
        st.aux = Auxiliaries::neutral(s.dims.k_d, s.dims.k_u);
        // log 1 − 1·(1 − 0 + 0) + 1 = 0
        for k in 0..s.dims.k_d {
            assert!(surrogate_rate_dl(&st, &ch, &s, k).abs() < 1e-15);
        }
        for l in 0..s.dims.k_u {
            assert!(surrogate_rate_ul(&st, &ch, &s, l).abs() < 1e-15);
        }
    }

    #[test]
    fn random_auxiliaries_lower_bound_the_rate() {
        for seed in 0..10 {
            let (s, _, ch, st) = instance(seed);
            for k in 0..s.dims.k_d {
                assert!(surrogate_rate_dl(&st, &ch, &s, k) <= sinr_dl(&st, &ch, &s, k).ln_1p() + 1e-9);
            }
            for l in 0..s.dims.k_u {
                assert!(surrogate_rate_ul(&st, &ch, &s, l) <= sinr_ul(&st, &ch, &s, l).ln_1p() + 1e-9);
            }
        }
    }

    #[test]
    fn power_accounting() {
        let (s, _, _, st) = instance(6);
        for m in 0..s.dims.m_t {
            let mut direct = st.wr[m].norm_squared();
            for w in &st.w {
                for n in 0..s.dims.n_t {
                    direct += w[m * s.dims.n_t + n].norm_sqr();
                }
            }
            assert!((st.power_used(m, s.dims.n_t) - direct).abs() < 1e-12);
        }
        assert_eq!(st.power_residual(&s), 0.0);
    }

    proptest! {
        #[test]
        fn rate_invariant_under_beam_rotation(seed in 0u64..50, k in 0usize..3, arg in -3.1f64..3.1) {
            let (s, _, ch, mut st) = instance(seed);
            let before = sum_rate(&st, &ch, &s);
            st.w[k] *= C64::from_polar(1.0, arg);
            let after = sum_rate(&st, &ch, &s);
            prop_assert!((before - after).abs() <= 1e-12 * before.max(1.0));
        }

        #[test]
        fn radar_sinr_invariant_under_filter_scaling(seed in 0u64..50, re in -5.0f64..5.0, im in -5.0f64..5.0) {
            prop_assume!(re.abs() + im.abs() > 1e-3);
            let (s, _, ch, mut st) = instance(seed);
            let before = sinr_radar(&st, &ch, &s);
            st.u_sense *= C64::new(re, im);
            let after = sinr_radar(&st, &ch, &s);
            prop_assert!((before - after).abs() <= 1e-10 * before);
        }
    }
}
