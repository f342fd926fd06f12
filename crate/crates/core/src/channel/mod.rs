//! Field-response multipath channels and radar steering vectors.
//!
//! Every link is written `left^H Σ right` where `right` is the field-response
//! matrix of the array whose positions enter as columns and `left` is the FRV
//! of the single antenna at the other end. [`PathSet::departure`] holds the
//! angles indexing `right`, [`PathSet::arrival`] the angles indexing `left`.

mod scenario;

pub use scenario::{
    generate_scenario, Dims, RadarGeometry, Scenario, ScenarioConfig, ScenarioError,
};

use nalgebra::{DMatrix, DVector, Vector2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub type C64 = Complex64;
pub type Point = Vector2<f64>;

/// Elevation `theta` and azimuth `phi` of one path, both in `[-π/2, π/2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Angles {
    pub theta: f64,
    pub phi: f64,
}

impl Angles {
    pub fn new(theta: f64, phi: f64) -> Self {
        Self { theta, phi }
    }

    /// Unit-norm-or-less projection `[cosθ sinφ, sinθ]` onto the moving plane.
    pub fn direction(&self) -> Point {
        Point::new(self.theta.cos() * self.phi.sin(), self.theta.sin())
    }
}

/// Paths of one link with a diagonal path-response matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSet {
    pub departure: Vec<Angles>,
    pub arrival: Vec<Angles>,
    /// Diagonal of Σ.
    pub response: Vec<C64>,
}

impl PathSet {
    pub fn count(&self) -> usize {
        self.response.len()
    }

    pub fn departure_directions(&self) -> Vec<Point> {
        self.departure.iter().map(Angles::direction).collect()
    }

    pub fn arrival_directions(&self) -> Vec<Point> {
        self.arrival.iter().map(Angles::direction).collect()
    }

    pub fn is_consistent(&self) -> bool {
        let l = self.response.len();
        l >= 1 && self.departure.len() == l && self.arrival.len() == l
    }
}

/// Antenna coordinates in the same length unit as the wavelength.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionLayout {
    /// `tbs[m][n]`
    pub tbs: Vec<Vec<Point>>,
    /// `rbs[p][n]`
    pub rbs: Vec<Vec<Point>>,
    pub dl_user: Vec<Point>,
    pub ul_user: Vec<Point>,
}

impl PositionLayout {
    /// Largest violation of the box `[-A/2, A/2]²` and of the intra-array spacing.
    pub fn residuals(&self, region: f64, min_dist: f64) -> (f64, f64) {
        let half = region / 2.0;
        let mut box_res: f64 = 0.0;
        let all = self
            .tbs
            .iter()
            .chain(self.rbs.iter())
            .flatten()
            .chain(self.dl_user.iter())
            .chain(self.ul_user.iter());
        for p in all {
            for c in p.iter() {
                box_res = box_res.max(c.abs() - half);
            }
        }
        let mut dist_res: f64 = 0.0;
        for array in self.tbs.iter().chain(self.rbs.iter()) {
            for i in 0..array.len() {
                for j in (i + 1)..array.len() {
                    dist_res = dist_res.max(min_dist - (array[i] - array[j]).norm());
                }
            }
        }
        (box_res.max(0.0), dist_res.max(0.0))
    }
}

/// Stacked channels for one layout.
#[derive(Debug, Clone)]
pub struct ChannelSet {
    /// `hd[k]`, length `M_t N_t`.
    pub hd: Vec<DVector<C64>>,
    /// `hu[l]`, length `M_r N_r`.
    pub hu: Vec<DVector<C64>>,
    /// `hdu[(k, l)]`.
    pub hdu: DMatrix<C64>,
    /// `gt[j]`, length `M_t N_t`; index 0 is the target.
    pub gt: Vec<DVector<C64>>,
    /// `gr[j]`, length `M_r N_r`.
    pub gr: Vec<DVector<C64>>,
}

/// Path-length difference of `pos` relative to the region origin.
pub fn phase_diff(pos: &Point, ang: &Angles) -> f64 {
    pos.x * ang.theta.cos() * ang.phi.sin() + pos.y * ang.theta.sin()
}

fn unit_phasor(phase: f64) -> C64 {
    C64::from_polar(1.0, phase)
}

/// Field-response vector of one antenna over the given paths.
pub fn frv(pos: &Point, paths: &[Angles], wavelength: f64) -> DVector<C64> {
    let k = 2.0 * PI / wavelength;
    DVector::from_iterator(
        paths.len(),
        paths.iter().map(|a| unit_phasor(k * phase_diff(pos, a))),
    )
}

/// Field-response matrix: column `n` is the FRV of `positions[n]`.
pub fn frm(positions: &[Point], paths: &[Angles], wavelength: f64) -> DMatrix<C64> {
    let mut out = DMatrix::zeros(paths.len(), positions.len());
    for (n, p) in positions.iter().enumerate() {
        out.set_column(n, &frv(p, paths, wavelength));
    }
    out
}

/// Column vector `h` with `h^H = left(pos)^H Σ right(positions)`.
pub fn link_vector(
    left: &Point,
    right: &[Point],
    paths: &PathSet,
    wavelength: f64,
) -> DVector<C64> {
    let e = frv(left, &paths.arrival, wavelength);
    let big = frm(right, &paths.departure, wavelength);
    // h = H^H Σ^H e
    let weighted = DVector::from_iterator(
        paths.count(),
        e.iter().zip(paths.response.iter()).map(|(ei, s)| ei * s.conj()),
    );
    big.adjoint() * weighted
}

/// `h_{d,m,k}`: TBS `m` to DL user `k`.
pub fn assemble_dl_channel(
    layout: &PositionLayout,
    scenario: &Scenario,
    m: usize,
    k: usize,
) -> DVector<C64> {
    link_vector(
        &layout.dl_user[k],
        &layout.tbs[m],
        &scenario.dl_paths[m][k],
        scenario.wavelength,
    )
}

/// `h_{u,p,l}`: RBS `p` to UL user `l`.
pub fn assemble_ul_channel(
    layout: &PositionLayout,
    scenario: &Scenario,
    p: usize,
    l: usize,
) -> DVector<C64> {
    link_vector(
        &layout.ul_user[l],
        &layout.rbs[p],
        &scenario.ul_paths[p][l],
        scenario.wavelength,
    )
}

/// `h_{du,k,l}` with `h^* = e_dl^H Σ e_ul`.
pub fn assemble_du_channel(layout: &PositionLayout, scenario: &Scenario, k: usize, l: usize) -> C64 {
    let v = link_vector(
        &layout.dl_user[k],
        std::slice::from_ref(&layout.ul_user[l]),
        &scenario.du_paths[k][l],
        scenario.wavelength,
    );
    // v = conj(e_dl^H Σ e_ul), which is h_du itself.
    v[0]
}

/// LoS steering vector scaled by a complex fading coefficient.
pub fn steering(positions: &[Point], ang: &Angles, fading: C64, wavelength: f64) -> DVector<C64> {
    let k = 2.0 * PI / wavelength;
    DVector::from_iterator(
        positions.len(),
        positions
            .iter()
            .map(|p| fading * unit_phasor(k * phase_diff(p, ang))),
    )
}

fn stack(blocks: impl Iterator<Item = DVector<C64>>, len: usize) -> DVector<C64> {
    let mut out = DVector::zeros(len);
    let mut at = 0;
    for b in blocks {
        out.rows_mut(at, b.len()).copy_from(&b);
        at += b.len();
    }
    debug_assert_eq!(at, len);
    out
}

/// Assemble every stacked channel for `layout`.
pub fn stack_channels(layout: &PositionLayout, scenario: &Scenario) -> ChannelSet {
    let d = scenario.dims;
    let lam = scenario.wavelength;
    let (nt_tot, nr_tot) = (d.m_t * d.n_t, d.m_r * d.n_r);
    let hd = (0..d.k_d)
        .map(|k| stack((0..d.m_t).map(|m| assemble_dl_channel(layout, scenario, m, k)), nt_tot))
        .collect();
    let hu = (0..d.k_u)
        .map(|l| stack((0..d.m_r).map(|p| assemble_ul_channel(layout, scenario, p, l)), nr_tot))
        .collect();
    let hdu = DMatrix::from_fn(d.k_d, d.k_u, |k, l| assemble_du_channel(layout, scenario, k, l));
    let r = &scenario.radar;
    let gt = (0..=d.k_t)
        .map(|j| {
            stack(
                (0..d.m_t).map(|m| steering(&layout.tbs[m], &r.tbs_angles[m][j], r.fading_t[m][j], lam)),
                nt_tot,
            )
        })
        .collect();
    let gr = (0..=d.k_t)
        .map(|j| {
            stack(
                (0..d.m_r).map(|p| steering(&layout.rbs[p], &r.rbs_angles[p][j], r.fading_r[p][j], lam)),
                nr_tot,
            )
        })
        .collect();
    ChannelSet { hd, hu, hdu, gt, gr }
}
