//! Block coordinate ascent over every decision block, with a feasible
//! starting point and one log record per sweep.
//!
//! Each sweep refreshes the auxiliaries once, so the WMMSE surrogate equals
//! the weighted sum rate at the start of the sweep. Every later block weakly
//! raises the surrogate and keeps the sensing floor, hence the logged sum
//! rate never decreases.

use crate::channel::{stack_channels, ChannelSet, Point, PositionLayout, Scenario, C64};
use crate::metrics::{sinr_radar, sum_rate, DecisionState};
use crate::position::{update_antenna, MovingAntenna};
use crate::updates::{
    update_auxiliaries, update_beamformers, update_comm_filters, update_powers, update_sensing_filter,
    BlockOutcome,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};
use thiserror::Error;

/// Which antennas may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Every BS and user antenna moves.
    JointMa,
    /// BS antennas move, users stay at their initial draw.
    BsMa,
    /// User antennas move, BS antennas stay at their initial draw.
    UserMa,
    /// Nothing moves from a random feasible draw.
    RandMa,
    /// Nothing moves from a compact half-wavelength grid.
    Fpa,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [Scheme::JointMa, Scheme::BsMa, Scheme::UserMa, Scheme::RandMa, Scheme::Fpa];

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::JointMa => "joint-ma",
            Scheme::BsMa => "bs-ma",
            Scheme::UserMa => "user-ma",
            Scheme::RandMa => "rand-ma",
            Scheme::Fpa => "fpa",
        }
    }

    pub fn moves_bs(&self) -> bool {
        matches!(self, Scheme::JointMa | Scheme::BsMa)
    }

    pub fn moves_users(&self) -> bool {
        matches!(self, Scheme::JointMa | Scheme::UserMa)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| EngineError::InvalidConfig(format!("unknown scheme `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Stop when the relative sum-rate change of one sweep is at most this.
    pub epsilon: f64,
    pub max_outer: usize,
    pub scheme: Scheme,
    /// Trade communication power for sensing until the initial point meets the floor.
    pub restoration: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self { epsilon: 1e-3, max_outer: 50, scheme: Scheme::JointMa, restoration: true }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if !(self.epsilon > 0.0) {
            return Err(EngineError::InvalidConfig("epsilon must be positive".into()));
        }
        if self.max_outer == 0 {
            return Err(EngineError::InvalidConfig("max_outer must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("invalid engine configuration: {0}")]
    InvalidConfig(String),
    #[error("{count} antennas spaced {min_dist} do not fit in a region of side {region}")]
    Geometry { count: usize, min_dist: f64, region: f64 },
    #[error("sensing floor {gamma:.4e} unattainable from the initial point (best SINR {sinr:.4e})")]
    Infeasible { sinr: f64, gamma: f64 },
}

/// State after one sweep (or the initial point for `iter = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct IterateRecord {
    pub iter: usize,
    /// Weighted sum rate in nats.
    pub sum_rate: f64,
    pub sinr_radar: f64,
    pub power_residual: f64,
    pub box_residual: f64,
    pub distance_residual: f64,
    /// Wall time since the start of the run; not part of any determinism guarantee.
    pub elapsed: Duration,
    /// Reasons of blocks that kept their previous values during this sweep.
    pub kept: Vec<&'static str>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterateLog {
    pub records: Vec<IterateRecord>,
    pub converged: bool,
    pub layout: PositionLayout,
    pub state: DecisionState,
}

impl IterateLog {
    pub fn final_sum_rate(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.sum_rate)
    }
}

/// Restoration halvings before the scenario is declared infeasible.
const RESTORATION_STEPS: usize = 20;
/// Rejection-sampling attempts for one random array.
const RANDOM_DRAWS: usize = 10_000;

fn jitter_rng(seed: u64) -> ChaCha8Rng {
    // Decorrelated from the scenario stream that uses the same seed.
    ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15)
}

fn grid_side(n: usize) -> usize {
    (1..).find(|s| s * s >= n).expect("some side fits")
}

/// `n` cell centers of a square grid filling the region, each jittered inside
/// a disk that keeps the spacing.
fn jittered_grid(n: usize, region: f64, min_dist: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Point>, EngineError> {
    let side = grid_side(n);
    let spacing = region / side as f64;
    if n > 1 && spacing < min_dist {
        return Err(EngineError::Geometry { count: n, min_dist, region });
    }
    let radius = if n > 1 { 0.5 * (spacing - min_dist) } else { 0.5 * spacing };
    Ok((0..n)
        .map(|i| {
            let (r, c) = ((i / side) as f64, (i % side) as f64);
            let center = Point::new(-0.5 * region + (c + 0.5) * spacing, -0.5 * region + (r + 0.5) * spacing);
            let rho = radius * rng.random::<f64>().sqrt();
            let phi = 2.0 * std::f64::consts::PI * rng.random::<f64>();
            center + Point::new(rho * phi.cos(), rho * phi.sin())
        })
        .collect())
}

/// Half-wavelength-style grid with spacing `min_dist`, centered in the region.
fn compact_grid(n: usize, region: f64, min_dist: f64) -> Result<Vec<Point>, EngineError> {
    let side = grid_side(n);
    let span = (side - 1) as f64 * min_dist;
    if span > region {
        return Err(EngineError::Geometry { count: n, min_dist, region });
    }
    Ok((0..n)
        .map(|i| Point::new((i % side) as f64 * min_dist - 0.5 * span, (i / side) as f64 * min_dist - 0.5 * span))
        .collect())
}

/// Uniform draw in the region conditioned on the spacing, by rejection.
fn random_array(n: usize, region: f64, min_dist: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Point>, EngineError> {
    let half = 0.5 * region;
    for _ in 0..RANDOM_DRAWS {
        let pts: Vec<Point> = (0..n)
            .map(|_| Point::new(half * (2.0 * rng.random::<f64>() - 1.0), half * (2.0 * rng.random::<f64>() - 1.0)))
            .collect();
        let ok = (0..n).all(|i| (i + 1..n).all(|j| (pts[i] - pts[j]).norm() >= min_dist));
        if ok {
            return Ok(pts);
        }
    }
    jittered_grid(n, region, min_dist, rng)
}

/// Starting antenna positions for a scheme.
pub fn initial_layout(s: &Scenario, scheme: Scheme, seed: u64) -> Result<PositionLayout, EngineError> {
    let d = s.dims;
    let mut rng = jitter_rng(seed);
    let (a, dm) = (s.region, s.min_dist);
    let mut array = |n: usize| -> Result<Vec<Point>, EngineError> {
        match scheme {
            Scheme::Fpa => compact_grid(n, a, dm),
            Scheme::RandMa => random_array(n, a, dm, &mut rng),
            _ => jittered_grid(n, a, dm, &mut rng),
        }
    };
    let tbs = (0..d.m_t).map(|_| array(d.n_t)).collect::<Result<_, _>>()?;
    let rbs = (0..d.m_r).map(|_| array(d.n_r)).collect::<Result<_, _>>()?;
    let dl_user = (0..d.k_d).map(|_| array(1).map(|v| v[0])).collect::<Result<_, _>>()?;
    let ul_user = (0..d.k_u).map(|_| array(1).map(|v| v[0])).collect::<Result<_, _>>()?;
    Ok(PositionLayout { tbs, rbs, dl_user, ul_user })
}

fn unit(v: &DVector<C64>) -> DVector<C64> {
    let n = v.norm();
    if n > 0.0 {
        v.unscale(n)
    } else {
        DVector::from_element(v.len(), C64::new(1.0 / (v.len() as f64).sqrt(), 0.0))
    }
}

/// Matched beamformers and a target-aligned probing matrix, half of each TBS budget apiece.
fn matched_beamformers(st: &mut DecisionState, ch: &ChannelSet, s: &Scenario) {
    let d = s.dims;
    let nt = d.n_t;
    for m in 0..d.m_t {
        let comm = (0.5 * s.p_bs[m] / d.k_d as f64).sqrt();
        for (k, w) in st.w.iter_mut().enumerate() {
            let h = ch.hd[k].rows(m * nt, nt).into_owned();
            w.rows_mut(m * nt, nt).copy_from(&(unit(&h) * C64::new(comm, 0.0)));
        }
        let g = unit(&ch.gt[0].rows(m * nt, nt).into_owned());
        let col = (0.5 * s.p_bs[m] / nt as f64).sqrt();
        st.wr[m] = DMatrix::from_fn(nt, nt, |r, _| g[r] * col);
    }
}

/// Moves a fraction of every comm beam's power to probing and halves the UL powers.
fn shift_towards_sensing(st: &mut DecisionState, s: &Scenario) {
    let nt = s.dims.n_t;
    for m in 0..s.dims.m_t {
        let f = std::f64::consts::FRAC_1_SQRT_2;
        for w in st.w.iter_mut() {
            w.rows_mut(m * nt, nt).scale_mut(f);
        }
        let comm: f64 = st.w.iter().map(|w| w.rows(m * nt, nt).norm_squared()).sum();
        let probe = st.wr[m].norm_squared();
        if probe > 0.0 {
            st.wr[m].scale_mut(((s.p_bs[m] - comm).max(0.0) / probe).sqrt());
        }
    }
    st.q.iter_mut().for_each(|q| *q *= 0.5);
}

fn refresh_filters(st: DecisionState, ch: &ChannelSet, s: &Scenario) -> DecisionState {
    let st = update_auxiliaries(&st, ch, s);
    let st = update_comm_filters(&st, ch, s);
    let st = update_sensing_filter(&st, ch, s).unwrap_or(st);
    update_auxiliaries(&st, ch, s)
}

/// Feasible starting point: layout for the scheme, matched beams, half UL power, optimal filters.
pub fn initialize(s: &Scenario, cfg: &EngineConfig, seed: u64) -> Result<(PositionLayout, DecisionState), EngineError> {
    cfg.validate()?;
    let layout = initial_layout(s, cfg.scheme, seed)?;
    let ch = stack_channels(&layout, s);
    let mut st = DecisionState::zeros(s);
    matched_beamformers(&mut st, &ch, s);
    st.q = s.p_ul.iter().map(|p| 0.5 * p).collect();
    st.u_comm = ch.hu.iter().map(unit).collect();
    st.u_sense = unit(&ch.gr[0]);
    st = refresh_filters(st, &ch, s);
    let mut steps = 0;
    while sinr_radar(&st, &ch, s) < s.gamma_r {
        if !cfg.restoration || steps == RESTORATION_STEPS {
            return Err(EngineError::Infeasible { sinr: sinr_radar(&st, &ch, s), gamma: s.gamma_r });
        }
        shift_towards_sensing(&mut st, s);
        st = refresh_filters(st, &ch, s);
        steps += 1;
    }
    Ok((layout, st))
}

fn movable(s: &Scenario, scheme: Scheme) -> Vec<MovingAntenna> {
    let d = s.dims;
    let mut out = Vec::new();
    if scheme.moves_bs() {
        for m in 0..d.m_t {
            out.extend((0..d.n_t).map(|n| MovingAntenna::Tbs { m, n }));
        }
        for p in 0..d.m_r {
            out.extend((0..d.n_r).map(|n| MovingAntenna::Rbs { p, n }));
        }
    }
    if scheme.moves_users() {
        out.extend((0..d.k_d).map(MovingAntenna::DlUser));
        out.extend((0..d.k_u).map(MovingAntenna::UlUser));
    }
    out
}

fn record(iter: usize, st: &DecisionState, ch: &ChannelSet, layout: &PositionLayout, s: &Scenario, start: Instant, kept: Vec<&'static str>) -> IterateRecord {
    let (box_residual, distance_residual) = layout.residuals(s.region, s.min_dist);
    IterateRecord {
        iter,
        sum_rate: sum_rate(st, ch, s),
        sinr_radar: sinr_radar(st, ch, s),
        power_residual: st.power_residual(s),
        box_residual,
        distance_residual,
        elapsed: start.elapsed(),
        kept,
    }
}

/// One full sweep in the fixed block order.
pub fn sweep(
    layout: PositionLayout,
    ch: ChannelSet,
    st: DecisionState,
    s: &Scenario,
    scheme: Scheme,
) -> (PositionLayout, ChannelSet, DecisionState, Vec<&'static str>) {
    let mut kept = Vec::new();
    let mut note = |o: BlockOutcome| {
        if let BlockOutcome::Kept(why) = o {
            kept.push(why);
        }
    };
    let st = update_auxiliaries(&st, &ch, s);
    let (st, o) = update_beamformers(&st, &ch, s);
    note(o);
    let st = update_comm_filters(&st, &ch, s);
    let st = match update_sensing_filter(&st, &ch, s) {
        Ok(next) => next,
        Err(_) => {
            note(BlockOutcome::Kept("sensing filter solver error"));
            st
        }
    };
    let (mut layout, mut ch) = (layout, ch);
    for ant in movable(s, scheme) {
        let r = update_antenna(ant, &layout, &ch, &st, s);
        note(r.outcome);
        layout = r.layout;
        ch = r.channels;
    }
    let (st, o) = update_powers(&st, &ch, s);
    note(o);
    (layout, ch, st, kept)
}

/// Runs sweeps from a given point until the relative sum-rate change drops to `epsilon`.
pub fn run_from(s: &Scenario, cfg: &EngineConfig, layout: PositionLayout, st: DecisionState) -> IterateLog {
    let start = Instant::now();
    let mut ch = stack_channels(&layout, s);
    let mut records = vec![record(0, &st, &ch, &layout, s, start, Vec::new())];
    let (mut layout, mut st) = (layout, st);
    let mut converged = false;
    for iter in 1..=cfg.max_outer {
        let (l, c, x, kept) = sweep(layout, ch, st, s, cfg.scheme);
        (layout, ch, st) = (l, c, x);
        let prev = records.last().expect("initial record").sum_rate;
        let rec = record(iter, &st, &ch, &layout, s, start, kept);
        let change = (rec.sum_rate - prev).abs() / prev.abs().max(f64::MIN_POSITIVE);
        records.push(rec);
        if change <= cfg.epsilon {
            converged = true;
            break;
        }
    }
    IterateLog { records, converged, layout, state: st }
}

pub fn run(s: &Scenario, cfg: &EngineConfig, seed: u64) -> Result<IterateLog, EngineError> {
    let (layout, st) = initialize(s, cfg, seed)?;
    Ok(run_from(s, cfg, layout, st))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_scenario, ScenarioConfig};
    use proptest::prelude::*;

    fn scenario(seed: u64) -> Scenario {
        generate_scenario(&ScenarioConfig::default(), seed).unwrap()
    }

    fn short(scheme: Scheme, max_outer: usize) -> EngineConfig {
        EngineConfig { scheme, max_outer, ..EngineConfig::default() }
    }

    fn min_spacing(pts: &[Point]) -> f64 {
        let mut d = f64::INFINITY;
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                d = d.min((pts[i] - pts[j]).norm());
            }
        }
        d
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
        }
        assert!("joint".parse::<Scheme>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(EngineConfig::default().validate().is_ok());
        assert!(EngineConfig { epsilon: 0.0, ..EngineConfig::default() }.validate().is_err());
        assert!(EngineConfig { epsilon: f64::NAN, ..EngineConfig::default() }.validate().is_err());
        assert!(EngineConfig { max_outer: 0, ..EngineConfig::default() }.validate().is_err());
    }

    #[test]
    fn layouts_respect_geometry() {
        let mut rng = jitter_rng(3);
        for n in 1..=9 {
            let g = jittered_grid(n, 2.0, 0.5, &mut rng).unwrap();
            assert!(g.iter().all(|p| p.x.abs() <= 1.0 && p.y.abs() <= 1.0));
            assert!(min_spacing(&g) >= 0.5);
            let r = random_array(n, 2.0, 0.5, &mut rng).unwrap();
            assert!(r.iter().all(|p| p.x.abs() <= 1.0 && p.y.abs() <= 1.0));
            assert!(min_spacing(&r) >= 0.5);
        }
        let c = compact_grid(4, 2.0, 0.5).unwrap();
        assert!((min_spacing(&c) - 0.5).abs() < 1e-15);
        // Centered: the mean position is the region center.
        let centroid = c.iter().fold(Point::zeros(), |a, p| a + p) / 4.0;
        assert!(centroid.norm() < 1e-15);
        assert!(matches!(jittered_grid(25, 2.0, 0.5, &mut rng), Err(EngineError::Geometry { .. })));
        assert!(matches!(compact_grid(36, 2.0, 0.5), Err(EngineError::Geometry { .. })));
    }

    #[test]
    fn initial_point_is_feasible() {
        for seed in 0..6 {
            let s = scenario(seed);
            for scheme in Scheme::ALL {
                let (layout, st) = initialize(&s, &short(scheme, 1), seed).unwrap();
                let (b, d) = layout.residuals(s.region, s.min_dist);
                assert!(b <= 1e-8 && d <= 1e-8, "{scheme} seed {seed}");
                assert!(st.power_residual(&s) <= 1e-8 * s.p_bs.iter().cloned().fold(1.0, f64::max));
                assert!(sinr_radar(&st, &stack_channels(&layout, &s), &s) >= s.gamma_r);
            }
        }
    }

    #[test]
    fn initialization_is_deterministic() {
        let s = scenario(4);
        let a = initialize(&s, &EngineConfig::default(), 9).unwrap();
        let b = initialize(&s, &EngineConfig::default(), 9).unwrap();
        assert_eq!(a, b);
        let c = initialize(&s, &EngineConfig::default(), 10).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn runs_are_deterministic() {
        let s = scenario(2);
        let strip = |log: IterateLog| -> Vec<IterateRecord> {
            log.records.into_iter().map(|r| IterateRecord { elapsed: Duration::ZERO, ..r }).collect()
        };
        let a = run(&s, &short(Scheme::JointMa, 4), 2).unwrap();
        let b = run(&s, &short(Scheme::JointMa, 4), 2).unwrap();
        assert_eq!((&a.layout, &a.state), (&b.layout, &b.state));
        assert_eq!(strip(a), strip(b));
    }

    #[test]
    fn restoration_meets_a_tight_floor() {
        let mut s = scenario(5);
        let relaxed = EngineConfig::default();
        let (layout, st) = initialize(&s, &relaxed, 5).unwrap();
        let start = sinr_radar(&st, &stack_channels(&layout, &s), &s);
        // Above what the matched start reaches, so at least one shift is needed.
        s.gamma_r = 1.5 * start;
        let strict = EngineConfig { restoration: false, ..relaxed.clone() };
        assert!(matches!(initialize(&s, &strict, 5), Err(EngineError::Infeasible { .. })));
        let (layout, st) = initialize(&s, &relaxed, 5).unwrap();
        assert!(sinr_radar(&st, &stack_channels(&layout, &s), &s) >= s.gamma_r);
        assert!(st.power_residual(&s) <= 1e-8 * s.p_bs[0]);
    }

    #[test]
    fn unreachable_floor_is_reported() {
        let mut s = scenario(5);
        s.gamma_r = 1e12;
        assert!(matches!(run(&s, &EngineConfig::default(), 5), Err(EngineError::Infeasible { .. })));
    }

    #[test]
    fn infinite_tolerance_stops_after_one_sweep() {
        let s = scenario(1);
        let cfg = EngineConfig { epsilon: f64::INFINITY, ..EngineConfig::default() };
        let log = run(&s, &cfg, 1).unwrap();
        assert_eq!(log.records.len(), 2);
        assert!(log.converged);
    }

    #[test]
    fn frozen_blocks_stay_put() {
        let s = scenario(3);
        for scheme in Scheme::ALL {
            let (layout, st) = initialize(&s, &short(scheme, 3), 3).unwrap();
            let log = run_from(&s, &short(scheme, 3), layout.clone(), st);
            assert_eq!(log.layout.tbs == layout.tbs, !scheme.moves_bs(), "{scheme}");
            assert_eq!(log.layout.rbs == layout.rbs, !scheme.moves_bs(), "{scheme}");
            assert_eq!(log.layout.dl_user == layout.dl_user && log.layout.ul_user == layout.ul_user, !scheme.moves_users(), "{scheme}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn ascent_and_constraints_persist(seed in 0u64..1000, scheme_idx in 0usize..5) {
            let scheme = Scheme::ALL[scheme_idx];
            let s = scenario(seed);
            let log = run(&s, &short(scheme, 6), seed).unwrap();
            for w in log.records.windows(2) {
                prop_assert!(w[1].sum_rate >= w[0].sum_rate - 1e-6, "{} -> {}", w[0].sum_rate, w[1].sum_rate);
            }
            for r in &log.records {
                prop_assert!(r.power_residual <= 1e-6 * s.p_bs[0]);
                prop_assert!(r.box_residual <= 1e-6 && r.distance_residual <= 1e-6);
                prop_assert!(r.sinr_radar >= s.gamma_r - 1e-6);
            }
        }
    }
}
