use super::{Angles, PathSet, C64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("dimension `{0}` must be positive")]
    NonPositiveDim(&'static str),
    #[error("invalid parameter `{name}`: {why}")]
    Invalid { name: &'static str, why: String },
}

fn invalid(name: &'static str, why: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid { name, why: why.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub m_t: usize,
    pub m_r: usize,
    pub n_t: usize,
    pub n_r: usize,
    pub k_d: usize,
    pub k_u: usize,
    /// Clutter count; the target adds one more radar index.
    pub k_t: usize,
}

/// Line-of-sight radar links. Outer index is the BS, inner index `j` with 0 the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarGeometry {
    pub tbs_angles: Vec<Vec<Angles>>,
    pub rbs_angles: Vec<Vec<Angles>>,
    pub fading_t: Vec<Vec<C64>>,
    pub fading_r: Vec<Vec<C64>>,
    /// RCS variance per radar index.
    pub rcs_var: Vec<f64>,
}

/// A full problem instance in linear units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub dims: Dims,
    /// `dl_paths[m][k]`
    pub dl_paths: Vec<Vec<PathSet>>,
    /// `ul_paths[p][l]`
    pub ul_paths: Vec<Vec<PathSet>>,
    /// `du_paths[k][l]`; arrival side is the DL user.
    pub du_paths: Vec<Vec<PathSet>>,
    pub radar: RadarGeometry,
    pub noise_dl: Vec<f64>,
    pub noise_r: f64,
    pub p_bs: Vec<f64>,
    pub p_ul: Vec<f64>,
    pub gamma_r: f64,
    pub mu_d: Vec<f64>,
    pub mu_u: Vec<f64>,
    /// Side length `A` of the square moving region.
    pub region: f64,
    pub min_dist: f64,
    pub wavelength: f64,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let d = self.dims;
        for (name, v) in [
            ("m_t", d.m_t),
            ("m_r", d.m_r),
            ("n_t", d.n_t),
            ("n_r", d.n_r),
            ("k_d", d.k_d),
            ("k_u", d.k_u),
        ] {
            if v == 0 {
                return Err(ScenarioError::NonPositiveDim(name));
            }
        }
        let grid_ok = |g: &Vec<Vec<PathSet>>, a: usize, b: usize| {
            g.len() == a && g.iter().all(|r| r.len() == b && r.iter().all(PathSet::is_consistent))
        };
        if !grid_ok(&self.dl_paths, d.m_t, d.k_d)
            || !grid_ok(&self.ul_paths, d.m_r, d.k_u)
            || !grid_ok(&self.du_paths, d.k_d, d.k_u)
        {
            return Err(invalid("paths", "path sets do not match dims"));
        }
        let r = &self.radar;
        let j = d.k_t + 1;
        let ok = |v: usize, rows: usize| v == rows;
        if !ok(r.tbs_angles.len(), d.m_t)
            || !ok(r.rbs_angles.len(), d.m_r)
            || !ok(r.fading_t.len(), d.m_t)
            || !ok(r.fading_r.len(), d.m_r)
            || r.tbs_angles.iter().chain(r.rbs_angles.iter()).any(|a| a.len() != j)
            || r.fading_t.iter().chain(r.fading_r.iter()).any(|a| a.len() != j)
            || r.rcs_var.len() != j
        {
            return Err(invalid("radar", "radar geometry does not match dims"));
        }
        if !(r.rcs_var[0] > 0.0) || r.rcs_var.iter().any(|v| !(*v >= 0.0)) {
            return Err(invalid("rcs_var", "target variance must be positive, clutter nonnegative"));
        }
        let positive = |v: &[f64]| v.iter().all(|x| x.is_finite() && *x > 0.0);
        if self.noise_dl.len() != d.k_d || !positive(&self.noise_dl) || !(self.noise_r > 0.0) {
            return Err(invalid("noise", "noise powers must be positive"));
        }
        if self.p_bs.len() != d.m_t || !positive(&self.p_bs) || self.p_ul.len() != d.k_u || !positive(&self.p_ul) {
            return Err(invalid("power", "power budgets must be positive"));
        }
        if !(self.gamma_r > 0.0) {
            return Err(invalid("gamma_r", "threshold must be positive"));
        }
        if self.mu_d.len() != d.k_d || self.mu_u.len() != d.k_u {
            return Err(invalid("weights", "weight counts do not match dims"));
        }
        let total: f64 = self.mu_d.iter().chain(self.mu_u.iter()).sum();
        if (total - 1.0).abs() > 1e-9 || self.mu_d.iter().chain(self.mu_u.iter()).any(|w| !(*w > 0.0 && *w < 1.0)) {
            return Err(invalid("weights", "weights must lie in (0,1) and sum to 1"));
        }
        if !(self.region > 0.0 && self.min_dist > 0.0 && self.wavelength > 0.0) {
            return Err(invalid("region", "region, spacing and wavelength must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario is always representable")
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        let s: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        s.validate().map_err(|e| e.to_string())?;
        Ok(s)
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    db_to_linear(dbm - 30.0)
}

/// Generation parameters, with power levels in dB units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub m_t: usize,
    pub m_r: usize,
    pub n_t: usize,
    pub n_r: usize,
    pub k_d: usize,
    pub k_u: usize,
    pub k_t: usize,
    /// Paths per user link.
    pub paths: usize,
    pub radius_m: f64,
    pub c0_db: f64,
    pub path_loss_exp: f64,
    /// Distances are clamped below at this value.
    pub ref_dist_m: f64,
    pub tx_power_dbm: f64,
    pub ul_power_dbm: f64,
    pub noise_dbm: f64,
    pub gamma_r_db: f64,
    /// Effective two-way echo gain of the target, propagation included.
    pub target_rcs_db: f64,
    pub clutter_rcs_db: f64,
    pub region: f64,
    pub min_dist: f64,
    pub wavelength: f64,
    /// Optional explicit weights; uniform when absent.
    pub weights_dl: Option<Vec<f64>>,
    pub weights_ul: Option<Vec<f64>>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            m_t: 2,
            m_r: 2,
            n_t: 4,
            n_r: 4,
            k_d: 3,
            k_u: 3,
            k_t: 2,
            paths: 6,
            radius_m: 70.0,
            c0_db: -40.0,
            path_loss_exp: 2.8,
            ref_dist_m: 1.0,
            tx_power_dbm: 30.0,
            ul_power_dbm: 20.0,
            noise_dbm: -80.0,
            gamma_r_db: 3.0,
            target_rcs_db: -102.0,
            clutter_rcs_db: -102.0,
            region: 2.0,
            min_dist: 0.5,
            wavelength: 1.0,
            weights_dl: None,
            weights_ul: None,
        }
    }
}

impl ScenarioConfig {
    pub fn dims(&self) -> Dims {
        Dims {
            m_t: self.m_t,
            m_r: self.m_r,
            n_t: self.n_t,
            n_r: self.n_r,
            k_d: self.k_d,
            k_u: self.k_u,
            k_t: self.k_t,
        }
    }

    /// Path gain `c² = C₀ d^{-α}` with `d` clamped at the reference distance.
    pub fn path_gain(&self, dist_m: f64) -> f64 {
        db_to_linear(self.c0_db) * dist_m.max(self.ref_dist_m).powf(-self.path_loss_exp)
    }
}

fn uniform_disc(rng: &mut ChaCha8Rng, radius: f64) -> (f64, f64) {
    let r = radius * rng.random::<f64>().sqrt();
    let a = 2.0 * PI * rng.random::<f64>();
    (r * a.cos(), r * a.sin())
}

fn draw_angles(rng: &mut ChaCha8Rng, n: usize) -> Vec<Angles> {
    let u = Uniform::new_inclusive(-FRAC_PI_2, FRAC_PI_2).expect("finite bounds");
    (0..n).map(|_| Angles::new(u.sample(rng), u.sample(rng))).collect()
}

fn draw_paths(rng: &mut ChaCha8Rng, l: usize, gain: f64) -> PathSet {
    let departure = draw_angles(rng, l);
    let arrival = draw_angles(rng, l);
    let sd = (gain / l as f64 / 2.0).sqrt();
    let normal = Normal::new(0.0, sd).expect("finite deviation");
    let response = (0..l).map(|_| C64::new(normal.sample(rng), normal.sample(rng))).collect();
    PathSet { departure, arrival, response }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn weights(cfg: &ScenarioConfig) -> Result<(Vec<f64>, Vec<f64>), ScenarioError> {
    match (&cfg.weights_dl, &cfg.weights_ul) {
        (None, None) => {
            let w = 1.0 / (cfg.k_d + cfg.k_u) as f64;
            Ok((vec![w; cfg.k_d], vec![w; cfg.k_u]))
        }
        (Some(d), Some(u)) => Ok((d.clone(), u.clone())),
        _ => Err(invalid("weights", "give both weights_dl and weights_ul or neither")),
    }
}

/// Draw a random instance; identical `(config, seed)` gives an identical scenario.
pub fn generate_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<Scenario, ScenarioError> {
    let dims = cfg.dims();
    if cfg.paths == 0 {
        return Err(ScenarioError::NonPositiveDim("paths"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tbs: Vec<_> = (0..dims.m_t).map(|_| uniform_disc(&mut rng, cfg.radius_m)).collect();
    let rbs: Vec<_> = (0..dims.m_r).map(|_| uniform_disc(&mut rng, cfg.radius_m)).collect();
    let dl: Vec<_> = (0..dims.k_d).map(|_| uniform_disc(&mut rng, cfg.radius_m)).collect();
    let ul: Vec<_> = (0..dims.k_u).map(|_| uniform_disc(&mut rng, cfg.radius_m)).collect();

    let l = cfg.paths;
    let dl_paths = tbs
        .iter()
        .map(|b| dl.iter().map(|u| draw_paths(&mut rng, l, cfg.path_gain(dist(*b, *u)))).collect())
        .collect();
    let ul_paths = rbs
        .iter()
        .map(|b| ul.iter().map(|u| draw_paths(&mut rng, l, cfg.path_gain(dist(*b, *u)))).collect())
        .collect();
    let du_paths = dl
        .iter()
        .map(|a| ul.iter().map(|b| draw_paths(&mut rng, l, cfg.path_gain(dist(*a, *b)))).collect())
        .collect();

    let j = dims.k_t + 1;
    let tbs_angles = (0..dims.m_t).map(|_| draw_angles(&mut rng, j)).collect();
    let rbs_angles = (0..dims.m_r).map(|_| draw_angles(&mut rng, j)).collect();
    let mut phases = |rows: usize| -> Vec<Vec<C64>> {
        (0..rows)
            .map(|_| (0..j).map(|_| C64::from_polar(1.0, 2.0 * PI * rng.random::<f64>())).collect())
            .collect()
    };
    let fading_t = phases(dims.m_t);
    let fading_r = phases(dims.m_r);
    let mut rcs_var = vec![db_to_linear(cfg.clutter_rcs_db); j];
    rcs_var[0] = db_to_linear(cfg.target_rcs_db);

    let (mu_d, mu_u) = weights(cfg)?;
    let noise = dbm_to_watts(cfg.noise_dbm);
    let s = Scenario {
        dims,
        dl_paths,
        ul_paths,
        du_paths,
        radar: RadarGeometry { tbs_angles, rbs_angles, fading_t, fading_r, rcs_var },
        noise_dl: vec![noise; dims.k_d],
        noise_r: noise,
        p_bs: vec![dbm_to_watts(cfg.tx_power_dbm); dims.m_t],
        p_ul: vec![dbm_to_watts(cfg.ul_power_dbm); dims.k_u],
        gamma_r: db_to_linear(cfg.gamma_r_db),
        mu_d,
        mu_u,
        region: cfg.region,
        min_dist: cfg.min_dist,
        wavelength: cfg.wavelength,
    };
    s.validate()?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scenario() {
        let cfg = ScenarioConfig::default();
        assert_eq!(generate_scenario(&cfg, 42).unwrap(), generate_scenario(&cfg, 42).unwrap());
        assert_ne!(generate_scenario(&cfg, 42).unwrap(), generate_scenario(&cfg, 43).unwrap());
    }

    #[test]
    fn rejects_zero_dims() {
        let cfg = ScenarioConfig { n_t: 0, ..Default::default() };
        assert_eq!(generate_scenario(&cfg, 1), Err(ScenarioError::NonPositiveDim("n_t")));
        let cfg = ScenarioConfig { paths: 0, ..Default::default() };
        assert!(generate_scenario(&cfg, 1).is_err());
    }

    #[test]
    fn reference_distance_gain_is_c0() {
        let cfg = ScenarioConfig::default();
        assert!((cfg.path_gain(1.0) - 1e-4).abs() < 1e-18);
        assert!((cfg.path_gain(0.2) - 1e-4).abs() < 1e-18);
        assert!((cfg.path_gain(10.0) - 1e-4 * 10f64.powf(-2.8)).abs() < 1e-18);
    }

    #[test]
    fn response_power_matches_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (gain, l, draws) = (2.5, 6, 10_000);
        let mut acc = 0.0;
        for _ in 0..draws {
            let ps = draw_paths(&mut rng, l, gain);
            acc += ps.response.iter().map(|z| z.norm_sqr()).sum::<f64>();
        }
        let mean = acc / draws as f64;
        assert!((mean - gain).abs() < 0.1 * gain, "mean {mean}");
    }

    #[test]
    fn angles_and_fading_in_range() {
        let s = generate_scenario(&ScenarioConfig::default(), 3).unwrap();
        let all = s
            .dl_paths
            .iter()
            .chain(s.ul_paths.iter())
            .chain(s.du_paths.iter())
            .flatten()
            .flat_map(|p| p.departure.iter().chain(p.arrival.iter()));
        for a in all {
            assert!(a.theta.abs() <= FRAC_PI_2 && a.phi.abs() <= FRAC_PI_2);
        }
        for f in s.radar.fading_t.iter().chain(s.radar.fading_r.iter()).flatten() {
            assert!((f.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn toml_round_trip() {
        let s = generate_scenario(&ScenarioConfig::default(), 5).unwrap();
        let back = Scenario::from_toml(&s.to_toml()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(toml::from_str::<ScenarioConfig>("n_t = 4\nbogus = 1").is_err());
        let c: ScenarioConfig = toml::from_str("n_t = 6").unwrap();
        assert_eq!(c.n_t, 6);
        assert_eq!(c.m_t, 2);
    }
}
