//! Phase-aware MMSE, phase-aware element-wise MMSE and LMMSE channel
//! estimation.
//!
//! All three estimators are linear in the despread pilot observation:
//!
//! ```text
//! phase-aware:  hhat = hbar e^{j phi} + A (y - ybar)
//! LMMSE:        hhat = A y
//! ```
//!
//! with gain `A = sqrt(p_k) R Psi^-1` (MMSE), `sqrt(p_k) D Lambda^-1` (EW)
//! or `sqrt(p_k) R' Psi'^-1` (LMMSE). Their moments all follow from `A`,
//! the prior covariance and the observation covariance `tau_p Psi`, so the
//! statistics are built by one routine ([`linear_moments`]). This also makes
//! the EW and MMSE paths produce bit-identical numbers whenever their gains
//! coincide (single antenna, or diagonal correlation).

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelBlock;
use crate::config::SystemConfig;
use crate::linalg::{diag_matrix, solve_hpd, CMatrix, CVector, HermitianMatrix, NumericsError};
use crate::scenario::ScenarioStatistics;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Mmse,
    Ew,
    Lmmse,
}

impl Estimator {
    pub const ALL: [Estimator; 3] = [Estimator::Mmse, Estimator::Ew, Estimator::Lmmse];

    pub fn id(self) -> &'static str {
        match self {
            Estimator::Mmse => "mmse",
            Estimator::Ew => "ew",
            Estimator::Lmmse => "lmmse",
        }
    }

    /// Whether the estimator consumes the realized LoS phases.
    pub fn is_phase_aware(self) -> bool {
        !matches!(self, Estimator::Lmmse)
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Estimator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mmse" => Ok(Estimator::Mmse),
            "ew" | "ew-mmse" | "ew_mmse" => Ok(Estimator::Ew),
            "lmmse" => Ok(Estimator::Lmmse),
            other => Err(format!("unknown estimator `{other}` (expected mmse, ew or lmmse)")),
        }
    }
}

/// Moments of a linear estimator `A q` of a zero-mean component with prior
/// covariance `prior`, where `q` has covariance `tau_p * psi` and
/// `E{component q^H} = sqrt(p_k) tau_p prior`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMoments {
    /// Gain `A`.
    pub gain: CMatrix,
    /// `Cov{A q} = A (tau_p Psi) A^H`.
    pub estimate_cov: HermitianMatrix,
    /// Error covariance `prior - sqrt(p) tau_p (A prior + prior A^H) + Cov{A q}`.
    pub error_cov: HermitianMatrix,
}

/// Per-link statistics of all three estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkEstimatorStats {
    /// `Psi_mk = sum_{l in P_k} p_l tau_p R_ml + sigma^2 I`.
    pub psi: HermitianMatrix,
    /// `Omega_mk = R Psi^-1 R`.
    pub omega: HermitianMatrix,
    pub mmse: LinearMoments,
    /// Diagonal of `R_mk`.
    pub d: Vec<f64>,
    /// Diagonal of `Psi_mk`.
    pub lambda: Vec<f64>,
    /// `Sigma_mk = p tau_p D Lambda^-1 Psi Lambda^-1 D` is `ew.estimate_cov`.
    pub ew: LinearMoments,
    /// `R' = R + hbar hbar^H`.
    pub r_prime: HermitianMatrix,
    pub psi_prime: HermitianMatrix,
    /// `Omega' = R' Psi'^-1 R'`.
    pub omega_prime: HermitianMatrix,
    pub lmmse: LinearMoments,
}

impl LinkEstimatorStats {
    pub fn moments(&self, est: Estimator) -> &LinearMoments {
        match est {
            Estimator::Mmse => &self.mmse,
            Estimator::Ew => &self.ew,
            Estimator::Lmmse => &self.lmmse,
        }
    }

    pub fn c_mmse(&self) -> &HermitianMatrix {
        &self.mmse.error_cov
    }

    pub fn sigma(&self) -> &HermitianMatrix {
        &self.ew.estimate_cov
    }

    pub fn c_ew(&self) -> &HermitianMatrix {
        &self.ew.error_cov
    }

    pub fn c_lmmse(&self) -> &HermitianMatrix {
        &self.lmmse.error_cov
    }
}

/// Estimator statistics of a whole drop, indexed like [`ScenarioStatistics`].
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorStatistics {
    pub ap_count: usize,
    pub ue_count: usize,
    pub links: Vec<LinkEstimatorStats>,
}

impl EstimatorStatistics {
    pub fn link(&self, m: usize, k: usize) -> &LinkEstimatorStats {
        &self.links[m * self.ue_count + k]
    }

    pub fn error_cov(&self, est: Estimator, m: usize, k: usize) -> &HermitianMatrix {
        &self.link(m, k).moments(est).error_cov
    }
}

/// Builds [`LinearMoments`] for gain `A`, prior covariance `prior` and
/// observation covariance `tau_p * psi`.
pub fn linear_moments(
    gain: CMatrix,
    prior: &HermitianMatrix,
    psi: &HermitianMatrix,
    pilot_power: f64,
    tau_p: f64,
) -> Result<LinearMoments, NumericsError> {
    let estimate_cov = HermitianMatrix::from_symmetrized(&gain * psi.matrix() * gain.adjoint() * Complex64::new(tau_p, 0.0));
    let cross = &gain * prior.matrix() * Complex64::new(pilot_power.sqrt() * tau_p, 0.0);
    let raw = prior.matrix() - &cross - cross.adjoint() + estimate_cov.matrix();
    let scale = prior.eigen().0.iter().fold(0.0_f64, |a, v| a.max(*v));
    let (error_cov, _) = HermitianMatrix::from_symmetrized(raw).clamp_psd_scaled(scale)?;
    Ok(LinearMoments {
        gain,
        estimate_cov,
        error_cov,
    })
}

/// `sqrt(p) (Psi^-1 X)^H = sqrt(p) X Psi^-1` for Hermitian `X`, `Psi`.
fn whitened_gain(x: &HermitianMatrix, psi: &HermitianMatrix, pilot_power: f64) -> Result<CMatrix, NumericsError> {
    Ok(solve_hpd(psi.matrix(), x.matrix())?.adjoint() * Complex64::new(pilot_power.sqrt(), 0.0))
}

/// Precomputes every per-link estimator statistic of a drop.
pub fn build_statistics(stats: &ScenarioStatistics, cfg: &SystemConfig) -> Result<EstimatorStatistics, NumericsError> {
    let n = stats.antennas;
    let tau_p = cfg.pilot_len as f64;
    let sigma2 = cfg.sigma2();
    let noise = HermitianMatrix::from_real_diagonal(&vec![sigma2; n]);
    let mut links = Vec::with_capacity(stats.ap_count * stats.ue_count);
    for m in 0..stats.ap_count {
        let mut psi_by_pilot = Vec::with_capacity(cfg.pilot_len);
        for t in 0..cfg.pilot_len {
            let mut psi = noise.matrix().clone();
            let mut psi_prime = noise.matrix().clone();
            for l in stats.pilots.members(t) {
                let w = Complex64::new(cfg.pilot_power(l) * tau_p, 0.0);
                let r = stats.r(m, l).matrix();
                let los = stats.los(m, l);
                psi += r * w;
                psi_prime += (r + los * los.adjoint()) * w;
            }
            psi_by_pilot.push((HermitianMatrix::from_symmetrized(psi), HermitianMatrix::from_symmetrized(psi_prime)));
        }
        for k in 0..stats.ue_count {
            let (psi, psi_prime) = &psi_by_pilot[stats.pilots.pilot_of[k]];
            let p = cfg.pilot_power(k);
            let r = stats.r(m, k);
            let los = stats.los(m, k);

            let omega = HermitianMatrix::from_symmetrized(r.matrix() * solve_hpd(psi.matrix(), r.matrix())?);
            let mmse = linear_moments(whitened_gain(r, psi, p)?, r, psi, p, tau_p)?;

            let d = r.real_diagonal();
            let lambda = psi.real_diagonal();
            let d_mat = HermitianMatrix::from_real_diagonal(&d);
            let lambda_mat = HermitianMatrix::from_real_diagonal(&lambda);
            let ew = linear_moments(whitened_gain(&d_mat, &lambda_mat, p)?, r, psi, p, tau_p)?;

            let r_prime = HermitianMatrix::from_symmetrized(r.matrix() + los * los.adjoint());
            let omega_prime =
                HermitianMatrix::from_symmetrized(r_prime.matrix() * solve_hpd(psi_prime.matrix(), r_prime.matrix())?);
            let lmmse = linear_moments(whitened_gain(&r_prime, psi_prime, p)?, &r_prime, psi_prime, p, tau_p)?;

            links.push(LinkEstimatorStats {
                psi: psi.clone(),
                omega,
                mmse,
                d,
                lambda,
                ew,
                r_prime,
                psi_prime: psi_prime.clone(),
                omega_prime,
                lmmse,
            });
        }
    }
    Ok(EstimatorStatistics {
        ap_count: stats.ap_count,
        ue_count: stats.ue_count,
        links,
    })
}

/// Channel estimates for one block, flattened like [`ChannelBlock`].
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateBlock {
    pub estimator: Estimator,
    pub ap_count: usize,
    pub ue_count: usize,
    pub antennas: usize,
    pub hhat: Vec<Complex64>,
}

impl EstimateBlock {
    pub fn zeros(estimator: Estimator, stats: &ScenarioStatistics) -> Self {
        Self {
            estimator,
            ap_count: stats.ap_count,
            ue_count: stats.ue_count,
            antennas: stats.antennas,
            hhat: vec![Complex64::new(0.0, 0.0); stats.ap_count * stats.ue_count * stats.antennas],
        }
    }

    pub fn hhat(&self, m: usize, k: usize) -> &[Complex64] {
        let start = (m * self.ue_count + k) * self.antennas;
        &self.hhat[start..start + self.antennas]
    }

    pub fn hhat_vector(&self, m: usize, k: usize) -> CVector {
        CVector::from_column_slice(self.hhat(m, k))
    }
}

/// Estimates every link of `block` with `est`, reusing `out`'s buffer.
pub fn estimate_into(
    out: &mut EstimateBlock,
    est: Estimator,
    block: &ChannelBlock,
    est_stats: &EstimatorStatistics,
    stats: &ScenarioStatistics,
    cfg: &SystemConfig,
) {
    out.estimator = est;
    let n_ant = stats.antennas;
    let tau_p = cfg.pilot_len as f64;
    let zero = Complex64::new(0.0, 0.0);
    // LoS part of the despread observation, per pilot: sum_l sqrt(p_l) tau_p hbar_ml e^{j phi_ml}
    let mut ybar = vec![zero; cfg.pilot_len * n_ant];
    let mut resid = vec![zero; n_ant];
    for m in 0..stats.ap_count {
        if est.is_phase_aware() {
            ybar.fill(zero);
            for l in 0..stats.ue_count {
                let t = stats.pilots.pilot_of[l];
                let rot = Complex64::from_polar(cfg.pilot_power(l).sqrt() * tau_p, block.phi(m, l));
                let los = stats.los(m, l);
                for n in 0..n_ant {
                    ybar[t * n_ant + n] += los[n] * rot;
                }
            }
        }
        for k in 0..stats.ue_count {
            let link = stats.link(m, k);
            let gain = &est_stats.links[link].moments(est).gain;
            let y = block.ypk(m, k);
            let base = link * n_ant;
            let out_slice = &mut out.hhat[base..base + n_ant];
            if est.is_phase_aware() {
                let t = stats.pilots.pilot_of[k];
                for n in 0..n_ant {
                    resid[n] = y[n] - ybar[t * n_ant + n];
                }
                let rot = Complex64::from_polar(1.0, block.phi(m, k));
                let los = stats.los(m, k);
                for i in 0..n_ant {
                    let mut acc = los[i] * rot;
                    for j in 0..n_ant {
                        acc += gain[(i, j)] * resid[j];
                    }
                    out_slice[i] = acc;
                }
            } else {
                for i in 0..n_ant {
                    let mut acc = zero;
                    for j in 0..n_ant {
                        acc += gain[(i, j)] * y[j];
                    }
                    out_slice[i] = acc;
                }
            }
        }
    }
}

pub fn estimate(
    est: Estimator,
    block: &ChannelBlock,
    est_stats: &EstimatorStatistics,
    stats: &ScenarioStatistics,
    cfg: &SystemConfig,
) -> EstimateBlock {
    let mut out = EstimateBlock::zeros(est, stats);
    estimate_into(&mut out, est, block, est_stats, stats, cfg);
    out
}

pub fn estimate_mmse(
    block: &ChannelBlock,
    est_stats: &EstimatorStatistics,
    stats: &ScenarioStatistics,
    cfg: &SystemConfig,
) -> EstimateBlock {
    estimate(Estimator::Mmse, block, est_stats, stats, cfg)
}

pub fn estimate_ew(
    block: &ChannelBlock,
    est_stats: &EstimatorStatistics,
    stats: &ScenarioStatistics,
    cfg: &SystemConfig,
) -> EstimateBlock {
    estimate(Estimator::Ew, block, est_stats, stats, cfg)
}

pub fn estimate_lmmse(
    block: &ChannelBlock,
    est_stats: &EstimatorStatistics,
    stats: &ScenarioStatistics,
    cfg: &SystemConfig,
) -> EstimateBlock {
    estimate(Estimator::Lmmse, block, est_stats, stats, cfg)
}

/// `diag(d)` helper re-exported for tests that build EW matrices by hand.
pub fn diagonal(d: &[f64]) -> CMatrix {
    diag_matrix(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::draw_block;
    use crate::scenario::build_drop;

    fn rel(a: &CMatrix, b: &CMatrix) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    fn small(n: usize) -> (SystemConfig, ScenarioStatistics) {
        let cfg = SystemConfig {
            ap_count: 3,
            ue_count: 4,
            antennas: n,
            pilot_len: 2,
            ..SystemConfig::default()
        };
        let stats = build_drop(&cfg, 31).unwrap();
        (cfg, stats)
    }

    #[test]
    fn statistics_match_closed_formulas() {
        let (cfg, stats) = small(4);
        let es = build_statistics(&stats, &cfg).unwrap();
        let tau_p = cfg.pilot_len as f64;
        for m in 0..3 {
            for k in 0..4 {
                let l = es.link(m, k);
                let p = cfg.pilot_power(k);
                let w = Complex64::new(p * tau_p, 0.0);
                let r = stats.r(m, k).matrix();
                // Psi definition
                let mut psi = CMatrix::identity(4, 4) * Complex64::new(cfg.sigma2(), 0.0);
                for q in stats.coset(k) {
                    psi += stats.r(m, q).matrix() * Complex64::new(cfg.pilot_power(q) * tau_p, 0.0);
                }
                assert!(rel(l.psi.matrix(), &psi) < 1e-12);
                // p tau Omega and C_mmse
                assert!(rel(l.mmse.estimate_cov.matrix(), &(l.omega.matrix() * w)) < 1e-9);
                let c = r - l.omega.matrix() * w;
                assert!((l.c_mmse().matrix() - &c).norm() < 1e-9 * r.norm());
                assert!(l.c_mmse().trace_re() <= stats.r(m, k).trace_re());
                // Lambda = diag(Psi), D = diag(R)
                for n in 0..4 {
                    assert_eq!(l.lambda[n], l.psi[(n, n)].re);
                    assert_eq!(l.d[n], r[(n, n)].re);
                    assert!(l.lambda[n] > 0.0 && l.d[n] > 0.0);
                }
                // Sigma = p tau D Lambda^-1 Psi Lambda^-1 D
                let dl = diagonal(&l.d.iter().zip(&l.lambda).map(|(d, lam)| d / lam).collect::<Vec<_>>());
                let sigma = &dl * l.psi.matrix() * &dl * w;
                assert!(rel(l.sigma().matrix(), &sigma) < 1e-12);
                // C_ew with both cross terms subtracted
                let cross = r * &dl * w;
                let c_ew = r - &cross - cross.adjoint() + &sigma;
                assert!((l.c_ew().matrix() - &c_ew).norm() < 1e-9 * r.norm());
                // R' exactly
                let los = stats.los(m, k);
                assert_eq!(l.r_prime.matrix(), &HermitianMatrix::from_symmetrized(r + los * los.adjoint()).into_inner());
                assert!(rel(l.lmmse.estimate_cov.matrix(), &(l.omega_prime.matrix() * w)) < 1e-9);
                // MSE dominance
                let t = l.c_mmse().trace_re();
                assert!(t <= l.c_ew().trace_re() * (1.0 + 1e-12));
                assert!(t <= l.c_lmmse().trace_re() * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn perfect_estimation_limit() {
        let cfg = SystemConfig {
            ap_count: 2,
            ue_count: 2,
            antennas: 2,
            pilot_len: 2,
            noise_dbm: -250.0,
            ..SystemConfig::default()
        };
        let stats = build_drop(&cfg, 4).unwrap();
        let es = build_statistics(&stats, &cfg).unwrap();
        for (l, r) in es.links.iter().zip(&stats.correlation) {
            assert!(l.c_mmse().trace_re() < 1e-6 * r.trace_re());
        }
        for m in 0..2 {
            for k in 0..2 {
                let l = es.link(m, k);
                let w = Complex64::new(cfg.pilot_power_mw * cfg.pilot_len as f64, 0.0);
                assert!(rel(&(l.omega.matrix() * w), stats.r(m, k).matrix()) < 1e-6);
            }
        }
    }

    #[test]
    fn single_antenna_ew_equals_mmse_bitwise() {
        let (cfg, stats) = small(1);
        let es = build_statistics(&stats, &cfg).unwrap();
        for l in &es.links {
            assert_eq!(l.ew, l.mmse);
        }
        let block = draw_block(&stats, &cfg, 3, 0).unwrap();
        assert_eq!(estimate_ew(&block, &es, &stats, &cfg).hhat, estimate_mmse(&block, &es, &stats, &cfg).hhat);
    }

    #[test]
    fn diagonal_correlation_ew_equals_mmse() {
        let (cfg, stats) = small(3);
        let cfg = SystemConfig {
            correlation: crate::config::CorrelationModel::Uncorrelated,
            ..cfg
        };
        let stats = build_drop(&cfg, stats.ap_count as u64).unwrap();
        let es = build_statistics(&stats, &cfg).unwrap();
        for l in &es.links {
            assert_eq!(l.ew.gain, l.mmse.gain);
        }
        let block = draw_block(&stats, &cfg, 3, 0).unwrap();
        assert_eq!(estimate_ew(&block, &es, &stats, &cfg).hhat, estimate_mmse(&block, &es, &stats, &cfg).hhat);
    }

    #[test]
    fn rayleigh_lmmse_statistics_equal_mmse() {
        let (cfg, stats) = small(3);
        let stats = stats.without_los();
        let es = build_statistics(&stats, &cfg).unwrap();
        for (l, r) in es.links.iter().zip(&stats.correlation) {
            assert_eq!(&l.r_prime, r);
            assert_eq!(l.lmmse, l.mmse);
            assert_eq!(l.psi_prime, l.psi);
        }
    }

    #[test]
    fn noiseless_uncontaminated_mmse_is_exact() {
        let cfg = SystemConfig {
            ap_count: 2,
            ue_count: 3,
            antennas: 3,
            pilot_len: 3,
            noise_dbm: -300.0,
            ..SystemConfig::default()
        };
        let stats = build_drop(&cfg, 8).unwrap();
        let es = build_statistics(&stats, &cfg).unwrap();
        let block = draw_block(&stats, &cfg, 6, 1).unwrap();
        let est = estimate_mmse(&block, &es, &stats, &cfg);
        for (a, b) in est.hhat.iter().zip(&block.h) {
            assert!((a - b).norm() < 1e-6 * b.norm());
        }
        // Rayleigh + noiseless: LMMSE is exact as well
        let stats = stats.without_los();
        let es = build_statistics(&stats, &cfg).unwrap();
        let block = draw_block(&stats, &cfg, 6, 1).unwrap();
        let est = estimate_lmmse(&block, &es, &stats, &cfg);
        for (a, b) in est.hhat.iter().zip(&block.h) {
            assert!((a - b).norm() < 1e-6 * b.norm());
        }
    }

    #[test]
    fn pure_los_mmse_returns_rotated_mean() {
        let (cfg, mut stats) = small(2);
        for r in &mut stats.correlation {
            *r = HermitianMatrix::zeros(2);
        }
        let es = build_statistics(&stats, &cfg).unwrap();
        let block = draw_block(&stats, &cfg, 1, 2).unwrap();
        let est = estimate_mmse(&block, &es, &stats, &cfg);
        for m in 0..3 {
            for k in 0..4 {
                let rot = Complex64::from_polar(1.0, block.phi(m, k));
                for n in 0..2 {
                    assert_eq!(est.hhat(m, k)[n], stats.los(m, k)[n] * rot);
                }
            }
        }
    }

    #[test]
    fn lmmse_is_linear_in_observation() {
        let (cfg, stats) = small(2);
        let es = build_statistics(&stats, &cfg).unwrap();
        let mut block = draw_block(&stats, &cfg, 1, 2).unwrap();
        block.ypk.fill(Complex64::new(0.0, 0.0));
        let est = estimate_lmmse(&block, &es, &stats, &cfg);
        assert!(est.hhat.iter().all(|z| *z == Complex64::new(0.0, 0.0)));
    }

    #[test]
    fn estimator_ids_round_trip() {
        for e in Estimator::ALL {
            assert_eq!(e.id().parse::<Estimator>().unwrap(), e);
        }
        assert!("foo".parse::<Estimator>().is_err());
    }
}
