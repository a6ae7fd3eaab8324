//! Network drops: geometry, large-scale fading, LoS vectors, spatial
//! correlation and pilot assignment.
//!
//! A drop is a pure function of `(SystemConfig, drop_seed)`. All per-link
//! quantities are stored row-major by AP, i.e. link `(m, k)` lives at index
//! `m * K + k`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{db_to_linear, ArrayOrientation, ConfigError, CorrelationModel, PilotAssignment, SystemConfig};
use crate::linalg::{gauss_hermite_nodes, CVector, HermitianMatrix, NumericsError};
use crate::rng::{Purpose, StreamSource, DROP_STREAM};

/// Pathloss at 1 m, dB.
pub const PATHLOSS_INTERCEPT_DB: f64 = -30.18;
/// Pathloss slope, dB per decade of distance.
pub const PATHLOSS_SLOPE_DB: f64 = 26.0;

/// Maximum fraction of the trace the PSD clamp may remove from a correlation matrix.
const CORRELATION_CLAMP_BUDGET: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("shadow-fading covariance is not PSD (eigenvalue {min_eigenvalue:.3e})")]
    CovarianceNotPsd { min_eigenvalue: f64 },
    #[error("correlation matrix of link ({ap}, {ue}) is indefinite beyond the clamp budget ({removed:.3e} of trace)")]
    IndefiniteCorrelation { ap: usize, ue: usize, removed: f64 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// AP/UE placement with wrapped link distances and angles.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub ap_positions: Vec<[f64; 2]>,
    pub ue_positions: Vec<[f64; 2]>,
    /// ULA orientation of each AP, radians.
    pub ap_orientation: Vec<f64>,
    /// 3D distance including the height difference, meters.
    pub distance: Vec<f64>,
    /// Angle of arrival relative to the AP's array broadside, radians.
    pub angle: Vec<f64>,
}

/// Gauss-Hermite rule shared by every correlation matrix of a drop.
#[derive(Debug, Clone)]
pub struct Quadrature {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Quadrature {
    pub fn new(order: usize) -> Result<Self, NumericsError> {
        let (nodes, weights) = gauss_hermite_nodes(order)?;
        Ok(Self { nodes, weights })
    }
}

/// Pilot index per UE plus the cosets of UEs sharing each pilot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PilotBook {
    pub pilot_of: Vec<usize>,
    pub pilot_count: usize,
}

impl PilotBook {
    /// `P_k`: every UE on UE `k`'s pilot, including `k`, ascending.
    pub fn coset(&self, k: usize) -> Vec<usize> {
        self.members(self.pilot_of[k])
    }

    pub fn members(&self, pilot: usize) -> Vec<usize> {
        (0..self.pilot_of.len()).filter(|&l| self.pilot_of[l] == pilot).collect()
    }

    pub fn shares_pilot(&self, k: usize, l: usize) -> bool {
        self.pilot_of[k] == self.pilot_of[l]
    }
}

/// Large-scale state of one drop.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioStatistics {
    pub ap_count: usize,
    pub ue_count: usize,
    pub antennas: usize,
    pub geometry: Geometry,
    pub shadowing_db: Vec<f64>,
    pub beta: Vec<f64>,
    pub kappa: Vec<f64>,
    pub beta_los: Vec<f64>,
    pub beta_nlos: Vec<f64>,
    pub los: Vec<CVector>,
    pub correlation: Vec<HermitianMatrix>,
    pub pilots: PilotBook,
}

impl ScenarioStatistics {
    #[inline]
    pub fn link(&self, m: usize, k: usize) -> usize {
        m * self.ue_count + k
    }

    pub fn los(&self, m: usize, k: usize) -> &CVector {
        &self.los[self.link(m, k)]
    }

    pub fn r(&self, m: usize, k: usize) -> &HermitianMatrix {
        &self.correlation[self.link(m, k)]
    }

    pub fn coset(&self, k: usize) -> Vec<usize> {
        self.pilots.coset(k)
    }

    /// Copy of the drop with every LoS vector rotated by `e^{j alpha}`.
    pub fn with_los_phase(&self, alpha: f64) -> Self {
        let rot = Complex64::from_polar(1.0, alpha);
        let mut out = self.clone();
        for v in &mut out.los {
            *v *= rot;
        }
        out
    }

    /// Copy of the drop with all LoS components removed (pure Rayleigh).
    pub fn without_los(&self) -> Self {
        let mut out = self.clone();
        for v in &mut out.los {
            v.fill(Complex64::new(0.0, 0.0));
        }
        out.beta_los.fill(0.0);
        out
    }
}

/// Displacement `to - from` on the torus, chosen among the nine shifted
/// copies of the square as the one with the smallest length.
pub fn wrapped_displacement(from: [f64; 2], to: [f64; 2], side: f64) -> [f64; 2] {
    let mut best = [to[0] - from[0], to[1] - from[1]];
    let mut best_len = best[0].hypot(best[1]);
    for sx in [-1.0, 0.0, 1.0] {
        for sy in [-1.0, 0.0, 1.0] {
            let d = [to[0] + sx * side - from[0], to[1] + sy * side - from[1]];
            let len = d[0].hypot(d[1]);
            if len < best_len {
                best = d;
                best_len = len;
            }
        }
    }
    best
}

/// Link distance (with height difference) and angle from AP to UE.
pub fn link_distance_angle(ap: [f64; 2], ue: [f64; 2], cfg: &SystemConfig, orientation: f64) -> (f64, f64) {
    let d = wrapped_displacement(ap, ue, cfg.area_side_m);
    let horizontal = d[0].hypot(d[1]);
    let distance = horizontal.hypot(cfg.height_diff_m);
    (distance, d[1].atan2(d[0]) - orientation)
}

pub fn place_and_measure(cfg: &SystemConfig, drop_seed: u64) -> Geometry {
    let src = StreamSource::new(drop_seed, DROP_STREAM);
    let side = cfg.area_side_m;
    let mut rng = src.stream(Purpose::Positions, 0, 0);
    let ap_positions: Vec<[f64; 2]> = (0..cfg.ap_count)
        .map(|_| [rng.random_range(0.0..side), rng.random_range(0.0..side)])
        .collect();
    let mut rng = src.stream(Purpose::Positions, 1, 0);
    let ue_positions: Vec<[f64; 2]> = (0..cfg.ue_count)
        .map(|_| [rng.random_range(0.0..side), rng.random_range(0.0..side)])
        .collect();
    let ap_orientation = match cfg.array_orientation {
        ArrayOrientation::Common => vec![0.0; cfg.ap_count],
        ArrayOrientation::RandomPerAp => {
            let mut rng = src.stream(Purpose::Orientation, 0, 0);
            (0..cfg.ap_count).map(|_| rng.random_range(-PI..PI)).collect()
        }
    };
    geometry_from_positions(cfg, ap_positions, ue_positions, ap_orientation)
}

/// Distances and angles for explicitly given positions.
pub fn geometry_from_positions(
    cfg: &SystemConfig,
    ap_positions: Vec<[f64; 2]>,
    ue_positions: Vec<[f64; 2]>,
    ap_orientation: Vec<f64>,
) -> Geometry {
    let mut distance = Vec::with_capacity(ap_positions.len() * ue_positions.len());
    let mut angle = Vec::with_capacity(distance.capacity());
    for (m, ap) in ap_positions.iter().enumerate() {
        for ue in &ue_positions {
            let (d, theta) = link_distance_angle(*ap, *ue, cfg, ap_orientation[m]);
            distance.push(d);
            angle.push(theta);
        }
    }
    Geometry {
        ap_positions,
        ue_positions,
        ap_orientation,
        distance,
        angle,
    }
}

/// Pathloss in dB without shadowing.
pub fn pathloss_db(distance_m: f64) -> f64 {
    PATHLOSS_INTERCEPT_DB - PATHLOSS_SLOPE_DB * distance_m.log10()
}

/// Zero-mean Gaussian vector with covariance `std^2 * 2^(-d_ij / d_dc)`.
fn correlated_shadowing<R: Rng>(
    points: &[[f64; 2]],
    cfg: &SystemConfig,
    rng: &mut R,
) -> Result<Vec<f64>, ScenarioError> {
    let n = points.len();
    let var = cfg.shadow_std_db * cfg.shadow_std_db;
    let cov = DMatrix::<f64>::from_fn(n, n, |i, j| {
        let d = wrapped_displacement(points[i], points[j], cfg.area_side_m);
        var * 2f64.powf(-d[0].hypot(d[1]) / cfg.decorrelation_m)
    });
    let z = DVector::<f64>::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    if let Some(chol) = cov.clone().cholesky() {
        return Ok((chol.l() * z).iter().copied().collect());
    }
    let eig = cov.symmetric_eigen();
    let lambda_max = eig.eigenvalues.iter().fold(0.0_f64, |a, &v| a.max(v));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    if min < -crate::linalg::PSD_CLAMP_TOL * lambda_max {
        return Err(ScenarioError::CovarianceNotPsd { min_eigenvalue: min });
    }
    let mut factor = eig.eigenvectors.clone();
    for c in 0..n {
        let s = eig.eigenvalues[c].max(0.0).sqrt();
        factor.column_mut(c).scale_mut(s);
    }
    Ok((factor * z).iter().copied().collect())
}

/// Linear-scale `beta_mk` and the shadowing term `F_mk` in dB.
pub fn pathloss_and_shadowing(
    cfg: &SystemConfig,
    geometry: &Geometry,
    drop_seed: u64,
) -> Result<(Vec<f64>, Vec<f64>), ScenarioError> {
    let src = StreamSource::new(drop_seed, DROP_STREAM);
    let (a, b) = if cfg.shadow_std_db > 0.0 {
        let a = correlated_shadowing(&geometry.ap_positions, cfg, &mut src.stream(Purpose::Shadowing, 0, 0))?;
        let b = correlated_shadowing(&geometry.ue_positions, cfg, &mut src.stream(Purpose::Shadowing, 1, 0))?;
        (a, b)
    } else {
        (vec![0.0; cfg.ap_count], vec![0.0; cfg.ue_count])
    };
    let (wa, wb) = (cfg.shadow_delta_f.sqrt(), (1.0 - cfg.shadow_delta_f).sqrt());
    let k_count = cfg.ue_count;
    let mut beta = Vec::with_capacity(geometry.distance.len());
    let mut shadow = Vec::with_capacity(geometry.distance.len());
    for (i, &d) in geometry.distance.iter().enumerate() {
        let f = wa * a[i / k_count] + wb * b[i % k_count];
        shadow.push(f);
        beta.push(db_to_linear(pathloss_db(d) + f));
    }
    Ok((beta, shadow))
}

/// Rician factor `10^(a - b d)`.
pub fn rician_factor(cfg: &SystemConfig, distance_m: f64) -> f64 {
    10f64.powf(cfg.kappa_a - cfg.kappa_b * distance_m)
}

/// `(kappa, beta_los, beta_nlos)` for one link.
pub fn rician_split(cfg: &SystemConfig, beta: f64, distance_m: f64) -> (f64, f64, f64) {
    let kappa = rician_factor(cfg, distance_m);
    split_beta(beta, kappa)
}

pub fn split_beta(beta: f64, kappa: f64) -> (f64, f64, f64) {
    if kappa.is_infinite() {
        return (kappa, beta, 0.0);
    }
    (kappa, kappa / (kappa + 1.0) * beta, beta / (kappa + 1.0))
}

/// ULA steering vector scaled by `sqrt(beta_los)`.
pub fn los_vector(cfg: &SystemConfig, beta_los: f64, theta: f64) -> CVector {
    let amp = beta_los.sqrt();
    let step = 2.0 * PI * cfg.antenna_spacing * theta.sin();
    CVector::from_iterator(cfg.antennas, (0..cfg.antennas).map(|n| Complex64::from_polar(amp, step * n as f64)))
}

/// Spatial correlation matrix of the Gaussian local scattering model.
///
/// The angular integral is evaluated with Gauss-Hermite quadrature after the
/// substitution `delta = sqrt(2) * sigma_phi * x`. The matrix is Toeplitz, so
/// only the first column is integrated; the diagonal is set to `beta_nlos`.
pub fn correlation_matrix(
    cfg: &SystemConfig,
    beta_nlos: f64,
    theta: f64,
    quad: &Quadrature,
) -> Result<HermitianMatrix, ScenarioError> {
    let n = cfg.antennas;
    if cfg.correlation == CorrelationModel::Uncorrelated {
        return Ok(HermitianMatrix::from_real_diagonal(&vec![beta_nlos; n]));
    }
    let sigma = cfg.sigma_phi();
    let mut column = vec![Complex64::new(beta_nlos, 0.0); n];
    for (diff, entry) in column.iter_mut().enumerate().skip(1) {
        let phase = 2.0 * PI * cfg.antenna_spacing * diff as f64;
        *entry = if sigma == 0.0 {
            Complex64::from_polar(beta_nlos, phase * theta.sin())
        } else {
            let acc: Complex64 = quad
                .nodes
                .iter()
                .zip(&quad.weights)
                .map(|(&x, &w)| Complex64::from_polar(w, phase * (theta + std::f64::consts::SQRT_2 * sigma * x).sin()))
                .sum();
            acc * (beta_nlos / PI.sqrt())
        };
    }
    let r = DMatrix::from_fn(n, n, |l, c| {
        if l >= c {
            column[l - c]
        } else {
            column[c - l].conj()
        }
    });
    let r = HermitianMatrix::from_symmetrized(r);
    if n == 1 || r.is_psd() {
        return Ok(r);
    }
    let (values, vectors) = r.eigen();
    let removed: f64 = values.iter().filter(|&&v| v < 0.0).map(|v| -v).sum();
    if removed > CORRELATION_CLAMP_BUDGET * r.trace_re() {
        return Err(ScenarioError::IndefiniteCorrelation { ap: 0, ue: 0, removed: removed / r.trace_re() });
    }
    let mut scaled = vectors.clone();
    for c in 0..n {
        let s = values[c].max(0.0);
        scaled.column_mut(c).scale_mut(s);
    }
    Ok(HermitianMatrix::from_symmetrized(&scaled * vectors.adjoint()))
}

pub fn assign_pilots(cfg: &SystemConfig, drop_seed: u64) -> PilotBook {
    let tau_p = cfg.pilot_len;
    let mut pilot_of: Vec<usize> = (0..cfg.ue_count).map(|k| k % tau_p).collect();
    if cfg.pilot_assignment == PilotAssignment::Random {
        let mut order: Vec<usize> = (0..cfg.ue_count).collect();
        let mut rng = StreamSource::new(drop_seed, DROP_STREAM).stream(Purpose::Pilots, 0, 0);
        order.shuffle(&mut rng);
        for (slot, &k) in order.iter().enumerate() {
            pilot_of[k] = slot % tau_p;
        }
    }
    PilotBook {
        pilot_of,
        pilot_count: tau_p,
    }
}

/// Generates the full large-scale state of one drop.
pub fn build_drop(cfg: &SystemConfig, drop_seed: u64) -> Result<ScenarioStatistics, ScenarioError> {
    cfg.validate()?;
    let geometry = place_and_measure(cfg, drop_seed);
    build_drop_from_geometry(cfg, geometry, drop_seed)
}

/// Builds a drop on a given geometry (shadowing and pilots still come from `drop_seed`).
pub fn build_drop_from_geometry(
    cfg: &SystemConfig,
    geometry: Geometry,
    drop_seed: u64,
) -> Result<ScenarioStatistics, ScenarioError> {
    cfg.validate()?;
    let (beta, shadowing_db) = pathloss_and_shadowing(cfg, &geometry, drop_seed)?;
    let quad = Quadrature::new(cfg.quadrature_order)?;
    let links = beta.len();
    let mut kappa = Vec::with_capacity(links);
    let mut beta_los = Vec::with_capacity(links);
    let mut beta_nlos = Vec::with_capacity(links);
    let mut los = Vec::with_capacity(links);
    let mut correlation = Vec::with_capacity(links);
    for i in 0..links {
        let (kp, bl, bn) = rician_split(cfg, beta[i], geometry.distance[i]);
        let theta = geometry.angle[i];
        los.push(los_vector(cfg, bl, theta));
        let r = correlation_matrix(cfg, bn, theta, &quad).map_err(|e| match e {
            ScenarioError::IndefiniteCorrelation { removed, .. } => ScenarioError::IndefiniteCorrelation {
                ap: i / cfg.ue_count,
                ue: i % cfg.ue_count,
                removed,
            },
            other => other,
        })?;
        correlation.push(r);
        kappa.push(kp);
        beta_los.push(bl);
        beta_nlos.push(bn);
    }
    Ok(ScenarioStatistics {
        ap_count: cfg.ap_count,
        ue_count: cfg.ue_count,
        antennas: cfg.antennas,
        geometry,
        shadowing_db,
        beta,
        kappa,
        beta_los,
        beta_nlos,
        los,
        correlation,
        pilots: assign_pilots(cfg, drop_seed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SystemConfig {
        SystemConfig {
            ap_count: 10,
            ue_count: 5,
            antennas: 4,
            pilot_len: 2,
            ..SystemConfig::default()
        }
    }

    #[test]
    fn colocated_link_is_height_difference() {
        let c = cfg();
        let (d, _) = link_distance_angle([250.0, 400.0], [250.0, 400.0], &c, 0.0);
        assert_eq!(d, 11.0);
    }

    #[test]
    fn wrap_around_uses_torus_metric() {
        let c = SystemConfig {
            height_diff_m: 0.0,
            ..cfg()
        };
        let (d, theta) = link_distance_angle([5.0, 0.0], [995.0, 0.0], &c, 0.0);
        assert!((d - 10.0).abs() < 1e-9);
        assert!((theta.abs() - PI).abs() < 1e-12);
        let (d, _) = link_distance_angle([0.0, 10.0], [0.0, 990.0], &c, 0.0);
        assert!((d - 20.0).abs() < 1e-9);
    }

    #[test]
    fn pathloss_values() {
        assert!((pathloss_db(1.0) - (-30.18)).abs() < 1e-12);
        assert!((pathloss_db(10.0) - (-56.18)).abs() < 1e-12);
    }

    #[test]
    fn rician_factor_and_split() {
        let c = cfg();
        assert!((rician_factor(&c, 100.0) - 10.0).abs() < 1e-12);
        let (_, los, nlos) = rician_split(&c, 2e-8, 100.0);
        assert!((los - 2e-8 * 10.0 / 11.0).abs() < 1e-22);
        assert!(((los + nlos) - 2e-8).abs() <= 1e-12 * 2e-8);
        let (_, los, nlos) = split_beta(3.0, f64::INFINITY);
        assert_eq!((los, nlos), (3.0, 0.0));
        let (_, los, nlos) = split_beta(3.0, 1e300);
        assert!(nlos < 1e-299 && (los - 3.0).abs() < 1e-12);
    }

    #[test]
    fn los_vector_cases() {
        let c = SystemConfig { antennas: 3, ..cfg() };
        let v = los_vector(&c, 4.0, 0.0);
        assert!(v.iter().all(|z| (z - Complex64::new(2.0, 0.0)).norm() < 1e-15));

        let c1 = SystemConfig { antennas: 1, ..cfg() };
        let v = los_vector(&c1, 4.0, 0.7);
        assert_eq!(v.len(), 1);
        assert!((v[0] - Complex64::new(2.0, 0.0)).norm() < 1e-15);

        let c2 = SystemConfig { antennas: 2, antenna_spacing: 0.5, ..cfg() };
        let v = los_vector(&c2, 4.0, PI / 2.0);
        assert!((v[0] - Complex64::new(2.0, 0.0)).norm() < 1e-15);
        assert!((v[1] - Complex64::new(-2.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn zero_asd_is_rank_one() {
        let c = SystemConfig { asd_deg: 0.0, ..cfg() };
        let quad = Quadrature::new(c.quadrature_order).unwrap();
        let theta = 0.4;
        let r = correlation_matrix(&c, 2.0, theta, &quad).unwrap();
        for l in 0..4 {
            for n in 0..4 {
                let expected = Complex64::from_polar(2.0, 2.0 * PI * 0.5 * (l as f64 - n as f64) * theta.sin());
                assert!((r[(l, n)] - expected).norm() < 1e-12);
            }
        }
        let (values, _) = r.eigen();
        assert!(values[2].abs() < 1e-12 * values[3]);
    }

    #[test]
    fn single_antenna_correlation_is_scalar() {
        let c = SystemConfig { antennas: 1, ..cfg() };
        let quad = Quadrature::new(c.quadrature_order).unwrap();
        let r = correlation_matrix(&c, 3.5, 1.0, &quad).unwrap();
        assert_eq!(r[(0, 0)], Complex64::new(3.5, 0.0));
    }

    #[test]
    fn uncorrelated_model_is_scaled_identity() {
        let c = SystemConfig { correlation: CorrelationModel::Uncorrelated, ..cfg() };
        let quad = Quadrature::new(10).unwrap();
        let r = correlation_matrix(&c, 2.0, 0.3, &quad).unwrap();
        assert_eq!(r.matrix(), &(nalgebra::DMatrix::identity(4, 4) * Complex64::new(2.0, 0.0)));
    }

    #[test]
    fn pilot_cosets() {
        let c = SystemConfig { ue_count: 4, pilot_len: 4, ..cfg() };
        let book = assign_pilots(&c, 1);
        for k in 0..4 {
            assert_eq!(book.coset(k), vec![k]);
        }
        let c = SystemConfig { ue_count: 8, pilot_len: 4, ..cfg() };
        let book = assign_pilots(&c, 1);
        for k in 0..8 {
            assert_eq!(book.coset(k).len(), 2);
            assert!(book.coset(k).contains(&k));
        }
        let c = SystemConfig { ue_count: 40, pilot_len: 10, ..cfg() };
        for mode in [PilotAssignment::RoundRobin, PilotAssignment::Random] {
            let book = assign_pilots(&SystemConfig { pilot_assignment: mode, ..c.clone() }, 5);
            for t in 0..10 {
                assert_eq!(book.members(t).len(), 4);
            }
        }
    }

    #[test]
    fn shadowing_variance_matches_model() {
        // delta_f = 0.5: Var(F) = 0.5 std^2 + 0.5 std^2 = std^2
        let c = SystemConfig { ap_count: 1, ue_count: 1, ..cfg() };
        let mut sum2 = 0.0;
        let n = 20_000;
        for seed in 0..n {
            let g = place_and_measure(&c, seed);
            let (_, f) = pathloss_and_shadowing(&c, &g, seed).unwrap();
            sum2 += f[0] * f[0];
        }
        let var = sum2 / n as f64;
        // standard error of a variance estimate is about sqrt(2/n) * var
        assert!((var - 64.0).abs() < 4.0 * (2.0 / n as f64).sqrt() * 64.0, "{var}");
    }

    #[test]
    fn drop_is_deterministic() {
        let c = cfg();
        let a = build_drop(&c, 77).unwrap();
        let b = build_drop(&c, 77).unwrap();
        assert_eq!(a, b);
        let other = build_drop(&c, 78).unwrap();
        assert_ne!(a.geometry, other.geometry);
    }

    #[test]
    fn random_orientation_changes_angles_only() {
        let c = cfg();
        let a = place_and_measure(&c, 3);
        let b = place_and_measure(&SystemConfig { array_orientation: ArrayOrientation::RandomPerAp, ..c }, 3);
        assert_eq!(a.distance, b.distance);
        assert_ne!(a.angle, b.angle);
    }
}
