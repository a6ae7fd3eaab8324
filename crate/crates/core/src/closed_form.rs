//! Closed-form UatF SE for MR combining under the three estimators.
//!
//! For MR combining `v_mk = hhat_mk` the LSFD statistics reduce to traces
//! of per-AP `N x N` matrices:
//!
//! ```text
//! [b_k]_m        = E{v_mk^H h_mk}
//! [Z_k]_mm       = E{||v_mk||^2}
//! [Gamma_kl]_mm' = E{v_mk^H h_ml (v_m'k^H h_m'l)^*}
//!                = diag(Gamma1_kl) + [l in P_k] Gamma2_kl
//! ```
//!
//! where `Gamma1` is the part that treats `v_mk` and `h_ml` as independent
//! and `Gamma2` collects the pilot-contamination correlation of UEs sharing
//! a pilot.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::SystemConfig;
use crate::estimation::{Estimator, EstimatorStatistics};
use crate::linalg::{hermitian_deviation, psd_sqrt, quad_form, solve_hpd, trace_product, CMatrix, CVector, HermitianMatrix, NumericsError};
use crate::receiver::{lsfd_sinrs, se_from_sinr, Combiner, GammaStore, LsfdStatistics, Method, ReceiverError, SeReport};
use crate::scenario::ScenarioStatistics;

/// Reading of the trace factor `tr((T1^H)^{1/2} R_ml^{1/2})` in the
/// LMMSE `Upsilon1` entries, and of the `(tr)^2` in `Upsilon2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TraceReading {
    /// `t = tr(T1^{1/2} R^{1/2})` with PSD square roots,
    /// `Upsilon2 = (p p tau^2) tr(R'_ml R'_mk Psi'^-1)^2` and `d = Upsilon2^{1/2}`
    /// (principal root).
    SqrtFactor,
    /// From the fourth-moment expansion: `t = tr(S^H R_ml)`,
    /// `d = sqrt(p_k p_l) tau tr(S^H R'_ml)` and `Upsilon2 = |d|^2`.
    #[default]
    Derived,
}

impl fmt::Display for TraceReading {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TraceReading::SqrtFactor => "sqrt_factor",
            TraceReading::Derived => "derived",
        })
    }
}

impl FromStr for TraceReading {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sqrt_factor" | "sqrt-factor" => Ok(TraceReading::SqrtFactor),
            "derived" => Ok(TraceReading::Derived),
            other => Err(format!("unknown trace reading `{other}` (expected sqrt_factor or derived)")),
        }
    }
}

/// Terms for a pair `(k, l)` with `l` in `P_k` (including `l = k`).
#[derive(Debug, Clone, PartialEq)]
pub struct CosetTerms {
    pub l: usize,
    /// `Gamma2_kl`, `M x M`.
    pub gamma2: CMatrix,
    /// Per-AP cross term: `sqrt(p_k p_l) tau z_kl` for the phase-aware
    /// estimators, `d_kl` for LMMSE.
    pub cross: CVector,
    /// LMMSE only: diagonal of `Upsilon1_kl`.
    pub upsilon1: Option<Vec<f64>>,
    /// LMMSE only: diagonal of `Upsilon2_kl` (complex under the square-root reading).
    pub upsilon2: Option<Vec<Complex64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UeTerms {
    pub b: CVector,
    /// Diagonal of `Z_k`.
    pub z: Vec<f64>,
    /// Diagonal of `L_k`: `||hbar_mk||^2`.
    pub los_norm: Vec<f64>,
    /// Diagonal of `Gamma1_kl`, indexed by `l`.
    pub gamma1: Vec<Vec<f64>>,
    pub coset: Vec<CosetTerms>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedFormTerms {
    pub estimator: Estimator,
    pub reading: TraceReading,
    pub ap_count: usize,
    pub ue_count: usize,
    pub ues: Vec<UeTerms>,
}

impl ClosedFormTerms {
    pub fn gamma(&self, k: usize, l: usize) -> CMatrix {
        let ue = &self.ues[k];
        let mut g = CMatrix::from_diagonal(&CVector::from_iterator(
            self.ap_count,
            ue.gamma1[l].iter().map(|x| Complex64::new(*x, 0.0)),
        ));
        if let Some(c) = ue.coset.iter().find(|c| c.l == l) {
            g += &c.gamma2;
        }
        g
    }

    /// Largest relative Hermitian deviation over all assembled `Gamma_kl`.
    pub fn max_hermitian_deviation(&self) -> f64 {
        let mut worst = 0.0_f64;
        for k in 0..self.ue_count {
            for c in &self.ues[k].coset {
                worst = worst.max(hermitian_deviation(&self.gamma(k, c.l)));
            }
        }
        worst
    }

    /// LSFD statistics with Hermitian-symmetrized `Gamma_kl`.
    pub fn to_lsfd(&self) -> LsfdStatistics {
        let gammas = (0..self.ue_count)
            .flat_map(|k| (0..self.ue_count).map(move |l| (k, l)))
            .map(|(k, l)| HermitianMatrix::from_symmetrized(self.gamma(k, l)).into_inner())
            .collect();
        LsfdStatistics {
            ap_count: self.ap_count,
            ue_count: self.ue_count,
            b: self.ues.iter().map(|u| u.b.clone()).collect(),
            z: self.ues.iter().map(|u| u.z.clone()).collect(),
            gamma: GammaStore::Full(gammas),
        }
    }
}

fn norm2(x: &CVector) -> f64 {
    x.norm_squared()
}

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

/// Phase-aware estimators: `hhat = hbar e^{j phi} + A (y - ybar)`.
fn phase_aware_terms(
    estimator: Estimator,
    stats: &ScenarioStatistics,
    est_stats: &EstimatorStatistics,
    cfg: &SystemConfig,
) -> ClosedFormTerms {
    let (mm, kk) = (stats.ap_count, stats.ue_count);
    let tau = cfg.pilot_len as f64;
    let ues = (0..kk)
        .into_par_iter()
        .map(|k| {
            let pk = cfg.pilot_power(k);
            let mut b = CVector::zeros(mm);
            let mut z = vec![0.0; mm];
            let mut los_norm = vec![0.0; mm];
            let mut gamma1 = vec![vec![0.0; mm]; kk];
            for m in 0..mm {
                let mom = est_stats.link(m, k).moments(estimator);
                let a = &mom.gain;
                let q = mom.estimate_cov.matrix();
                let hk = stats.los(m, k);
                let l2 = norm2(hk);
                los_norm[m] = l2;
                b[m] = c(l2 + pk.sqrt() * tau * trace_product(&a.adjoint(), stats.r(m, k).matrix()).re);
                z[m] = l2 + mom.estimate_cov.trace_re();
                for (l, g1) in gamma1.iter_mut().enumerate() {
                    let r = stats.r(m, l).matrix();
                    let hl = stats.los(m, l);
                    g1[m] = trace_product(r, q).re + quad_form(hk, r, hk).re + quad_form(hl, q, hl).re + hk.dotc(hl).norm_sqr();
                }
            }
            let coset = stats
                .coset(k)
                .into_iter()
                .map(|l| {
                    let pl = cfg.pilot_power(l);
                    let cross = CVector::from_iterator(
                        mm,
                        (0..mm).map(|m| {
                            let a = &est_stats.link(m, k).moments(estimator).gain;
                            trace_product(&a.adjoint(), stats.r(m, l).matrix()) * (pl.sqrt() * tau)
                        }),
                    );
                    let gamma2 = if l == k {
                        let mut g = &b * b.adjoint();
                        for m in 0..mm {
                            g[(m, m)] -= c(los_norm[m] * los_norm[m]);
                        }
                        g
                    } else {
                        &cross * cross.adjoint()
                    };
                    CosetTerms {
                        l,
                        gamma2,
                        cross,
                        upsilon1: None,
                        upsilon2: None,
                    }
                })
                .collect();
            UeTerms {
                b,
                z,
                los_norm,
                gamma1,
                coset,
            }
        })
        .collect();
    ClosedFormTerms {
        estimator,
        reading: TraceReading::default(),
        ap_count: mm,
        ue_count: kk,
        ues,
    }
}

pub fn cf_terms_mmse(stats: &ScenarioStatistics, est_stats: &EstimatorStatistics, cfg: &SystemConfig) -> ClosedFormTerms {
    phase_aware_terms(Estimator::Mmse, stats, est_stats, cfg)
}

pub fn cf_terms_ew(stats: &ScenarioStatistics, est_stats: &EstimatorStatistics, cfg: &SystemConfig) -> ClosedFormTerms {
    phase_aware_terms(Estimator::Ew, stats, est_stats, cfg)
}

/// Per-AP quantities of one LMMSE coset pair.
struct LmmsePair {
    upsilon1: f64,
    upsilon2: Complex64,
    d: Complex64,
}

#[allow(clippy::too_many_arguments)]
fn lmmse_pair(
    s: &CMatrix,
    psi_prime: &CMatrix,
    r_l: &HermitianMatrix,
    r_prime_l: &CMatrix,
    hl: &CVector,
    gamma1: f64,
    pk: f64,
    pl: f64,
    tau: f64,
    reading: TraceReading,
) -> Result<LmmsePair, NumericsError> {
    let sh = s.adjoint();
    let t1 = s * r_l.matrix() * &sh;
    let t2 = s * psi_prime * &sh * c(tau) - s * r_prime_l * &sh * c(pl * tau * tau);
    let t = match reading {
        TraceReading::Derived => trace_product(&sh, r_l.matrix()),
        TraceReading::SqrtFactor => {
            let t1h = psd_sqrt(&HermitianMatrix::from_symmetrized(t1.adjoint()))?;
            let rh = psd_sqrt(r_l)?;
            trace_product(t1h.matrix(), rh.matrix())
        }
    };
    let shs = quad_form(hl, &sh, hl);
    let inner = t.norm_sqr()
        + trace_product(r_l.matrix(), &t1).re
        + quad_form(hl, &t1.adjoint(), hl).re
        + quad_form(hl, &(&sh * r_l.matrix() * s), hl).re
        + shs.norm_sqr()
        + 2.0 * (t * quad_form(hl, s, hl)).re;
    let outer = trace_product(r_l.matrix(), &t2).re + quad_form(hl, &t2.adjoint(), hl).re;
    let upsilon1 = pk * pl * tau * tau * inner + pk * outer - gamma1;
    let scale = (pk * pl).sqrt() * tau;
    let (d, upsilon2) = match reading {
        TraceReading::Derived => {
            let d = trace_product(&sh, r_prime_l) * scale;
            (d, c(d.norm_sqr()))
        }
        TraceReading::SqrtFactor => {
            let tr = trace_product(r_prime_l, s);
            let u2 = tr * tr * c(pk * pl * tau * tau);
            (u2.sqrt(), u2)
        }
    };
    Ok(LmmsePair { upsilon1, upsilon2, d })
}

pub fn cf_terms_lmmse(
    stats: &ScenarioStatistics,
    est_stats: &EstimatorStatistics,
    cfg: &SystemConfig,
    reading: TraceReading,
) -> Result<ClosedFormTerms, NumericsError> {
    let (mm, kk) = (stats.ap_count, stats.ue_count);
    let tau = cfg.pilot_len as f64;
    let ues = (0..kk)
        .into_par_iter()
        .map(|k| -> Result<UeTerms, NumericsError> {
            let pk = cfg.pilot_power(k);
            let mut b = CVector::zeros(mm);
            let mut z = vec![0.0; mm];
            let mut los_norm = vec![0.0; mm];
            let mut gamma1 = vec![vec![0.0; mm]; kk];
            let mut s_mats = Vec::with_capacity(mm);
            for m in 0..mm {
                let link = est_stats.link(m, k);
                let q = link.lmmse.estimate_cov.matrix();
                let tq = link.lmmse.estimate_cov.trace_re();
                los_norm[m] = norm2(stats.los(m, k));
                b[m] = c(tq);
                z[m] = tq;
                for (l, g1) in gamma1.iter_mut().enumerate() {
                    let r = stats.r(m, l).matrix();
                    let hl = stats.los(m, l);
                    g1[m] = trace_product(r, q).re + quad_form(hl, q, hl).re;
                }
                s_mats.push(solve_hpd(link.psi_prime.matrix(), link.r_prime.matrix())?.adjoint());
            }
            let mut coset = Vec::new();
            for l in stats.coset(k) {
                let pl = cfg.pilot_power(l);
                let mut ups1 = vec![0.0; mm];
                let mut ups2 = vec![c(0.0); mm];
                let mut d = CVector::zeros(mm);
                for m in 0..mm {
                    let pair = lmmse_pair(
                        &s_mats[m],
                        est_stats.link(m, k).psi_prime.matrix(),
                        stats.r(m, l),
                        est_stats.link(m, l).r_prime.matrix(),
                        stats.los(m, l),
                        gamma1[l][m],
                        pk,
                        pl,
                        tau,
                        reading,
                    )?;
                    ups1[m] = pair.upsilon1;
                    ups2[m] = pair.upsilon2;
                    d[m] = pair.d;
                }
                let mut gamma2 = &d * d.adjoint();
                for m in 0..mm {
                    gamma2[(m, m)] += c(ups1[m]) - ups2[m];
                }
                coset.push(CosetTerms {
                    l,
                    gamma2,
                    cross: d,
                    upsilon1: Some(ups1),
                    upsilon2: Some(ups2),
                });
            }
            Ok(UeTerms {
                b,
                z,
                los_norm,
                gamma1,
                coset,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ClosedFormTerms {
        estimator: Estimator::Lmmse,
        reading,
        ap_count: mm,
        ue_count: kk,
        ues,
    })
}

pub fn cf_terms(
    estimator: Estimator,
    stats: &ScenarioStatistics,
    est_stats: &EstimatorStatistics,
    cfg: &SystemConfig,
    reading: TraceReading,
) -> Result<ClosedFormTerms, NumericsError> {
    match estimator {
        Estimator::Mmse => Ok(cf_terms_mmse(stats, est_stats, cfg)),
        Estimator::Ew => Ok(cf_terms_ew(stats, est_stats, cfg)),
        Estimator::Lmmse => cf_terms_lmmse(stats, est_stats, cfg, reading),
    }
}

pub fn cf_se(terms: &ClosedFormTerms, cfg: &SystemConfig) -> Result<SeReport, ReceiverError> {
    let sinr = lsfd_sinrs(&terms.to_lsfd(), cfg)?;
    Ok(SeReport {
        method: Method::ClosedForm,
        estimator: terms.estimator,
        combiner: Combiner::Mr,
        n_blocks: 0,
        n_drops: 1,
        se: sinr.iter().map(|s| se_from_sinr(*s, cfg)).collect(),
        sinr,
        stderr: None,
    })
}

/// Closed-form SE of MR combining with `estimator` on one drop.
pub fn closed_form_se(
    estimator: Estimator,
    stats: &ScenarioStatistics,
    est_stats: &EstimatorStatistics,
    cfg: &SystemConfig,
    reading: TraceReading,
) -> Result<SeReport, ReceiverError> {
    cf_se(&cf_terms(estimator, stats, est_stats, cfg, reading)?, cfg)
}
