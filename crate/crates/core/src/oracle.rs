//! Brute-force sample moments used to check the analytic expressions.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::channel::{pilot_observation, ChannelBlock, ChannelSampler};
use crate::config::SystemConfig;
use crate::estimation::{estimate_into, EstimateBlock, Estimator, EstimatorStatistics};
use crate::linalg::{CMatrix, NumericsError};
use crate::scenario::ScenarioStatistics;

const CHUNK: usize = 4096;

/// Runs `per_block` over blocks `0..n_blocks` in fixed chunks and sums the
/// per-chunk accumulators in order.
fn sample<A, F>(
    stats: &ScenarioStatistics,
    est_stats: &EstimatorStatistics,
    cfg: &SystemConfig,
    estimator: Estimator,
    seed: u64,
    n_blocks: usize,
    zero: A,
    per_block: F,
) -> Result<A, NumericsError>
where
    A: Clone + Send + Sync + std::ops::AddAssign,
    F: Fn(&mut A, &ChannelBlock, &EstimateBlock) + Sync,
{
    let sampler = ChannelSampler::new(stats)?;
    let chunks: Vec<(usize, usize)> = (0..n_blocks).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(n_blocks))).collect();
    let parts: Vec<A> = chunks
        .par_iter()
        .map(|&(s, e)| {
            let mut acc = zero.clone();
            let mut block = ChannelBlock::empty(stats);
            let mut est = EstimateBlock::zeros(estimator, stats);
            for idx in s..e {
                sampler.realize_into(&mut block, stats, seed, idx as u64);
                pilot_observation(&mut block, stats, cfg, seed);
                estimate_into(&mut est, estimator, &block, est_stats, stats, cfg);
                per_block(&mut acc, &block, &est);
            }
            acc
        })
        .collect();
    let mut total = zero;
    for p in parts {
        total += p;
    }
    Ok(total)
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate<T> {
    pub mean: T,
    pub stderr: T,
}

impl Estimate<f64> {
    pub fn z(&self, value: f64) -> f64 {
        (value - self.mean) / self.stderr
    }
}

impl Estimate<Complex64> {
    /// Larger of the real and imaginary z-scores.
    pub fn z(&self, value: Complex64) -> f64 {
        let zr = (value.re - self.mean.re) / self.stderr.re;
        let zi = (value.im - self.mean.im) / self.stderr.im;
        zr.abs().max(zi.abs())
    }
}

#[derive(Debug, Clone, Default)]
struct RealSums {
    s1: f64,
    s2: f64,
}

impl RealSums {
    fn push(&mut self, x: f64) {
        self.s1 += x;
        self.s2 += x * x;
    }

    fn estimate(&self, n: f64) -> Estimate<f64> {
        let mean = self.s1 / n;
        let var = (self.s2 / n - mean * mean).max(0.0) * n / (n - 1.0);
        Estimate {
            mean,
            stderr: (var / n).sqrt(),
        }
    }
}

fn complex_estimate(re: &RealSums, im: &RealSums, n: f64) -> Estimate<Complex64> {
    let (r, i) = (re.estimate(n), im.estimate(n));
    Estimate {
        mean: Complex64::new(r.mean, i.mean),
        stderr: Complex64::new(r.stderr, i.stderr),
    }
}

#[derive(Debug, Clone)]
struct MomentSums {
    /// Per `(k, l, m)`: Re and Im of `G`, and `|G|^2`.
    re: Vec<RealSums>,
    im: Vec<RealSums>,
    abs2: Vec<RealSums>,
    /// `||v_mk||^2` per `(k, m)`.
    vnorm: Vec<RealSums>,
    /// Per `(k, l, m, m')`: Re and Im of `G_m G_m'^*`.
    cross_re: Vec<RealSums>,
    cross_im: Vec<RealSums>,
}

impl std::ops::AddAssign for MomentSums {
    fn add_assign(&mut self, o: Self) {
        for (a, b) in [
            (&mut self.re, &o.re),
            (&mut self.im, &o.im),
            (&mut self.abs2, &o.abs2),
            (&mut self.vnorm, &o.vnorm),
            (&mut self.cross_re, &o.cross_re),
            (&mut self.cross_im, &o.cross_im),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                x.s1 += y.s1;
                x.s2 += y.s2;
            }
        }
    }
}

/// Sample moments of `G_kl,m = v_mk^H h_ml` under MR combining.
#[derive(Debug, Clone)]
pub struct EffectiveMoments {
    pub ap_count: usize,
    pub ue_count: usize,
    pub n_blocks: usize,
    /// `E{G}`, index `(k*K + l)*M + m`.
    pub mean: Vec<Estimate<Complex64>>,
    /// `E{|G|^2}`, same index.
    pub abs2: Vec<Estimate<f64>>,
    /// `E{||v_mk||^2}`, index `k*M + m`.
    pub vnorm: Vec<Estimate<f64>>,
    /// `E{G_m G_m'^*}`, index `((k*K + l)*M + m)*M + m'`.
    pub cross: Vec<Estimate<Complex64>>,
}

impl EffectiveMoments {
    pub fn mean(&self, k: usize, l: usize, m: usize) -> Estimate<Complex64> {
        self.mean[(k * self.ue_count + l) * self.ap_count + m]
    }

    pub fn abs2(&self, k: usize, l: usize, m: usize) -> Estimate<f64> {
        self.abs2[(k * self.ue_count + l) * self.ap_count + m]
    }

    pub fn vnorm(&self, k: usize, m: usize) -> Estimate<f64> {
        self.vnorm[k * self.ap_count + m]
    }

    pub fn cross(&self, k: usize, l: usize, m: usize, mp: usize) -> Estimate<Complex64> {
        self.cross[((k * self.ue_count + l) * self.ap_count + m) * self.ap_count + mp]
    }
}

/// Brute-force moments of the MR effective channels. Memory grows as
/// `K^2 M^2`, so this is meant for small instances.
pub fn effective_moments(
    stats: &ScenarioStatistics,
    est_stats: &EstimatorStatistics,
    cfg: &SystemConfig,
    estimator: Estimator,
    seed: u64,
    n_blocks: usize,
) -> Result<EffectiveMoments, NumericsError> {
    let (mm, kk, nn) = (stats.ap_count, stats.ue_count, stats.antennas);
    let zero = MomentSums {
        re: vec![RealSums::default(); kk * kk * mm],
        im: vec![RealSums::default(); kk * kk * mm],
        abs2: vec![RealSums::default(); kk * kk * mm],
        vnorm: vec![RealSums::default(); kk * mm],
        cross_re: vec![RealSums::default(); kk * kk * mm * mm],
        cross_im: vec![RealSums::default(); kk * kk * mm * mm],
    };
    let sums = sample(stats, est_stats, cfg, estimator, seed, n_blocks, zero, |acc, block, est| {
        let mut g = vec![Complex64::new(0.0, 0.0); mm];
        for k in 0..kk {
            for m in 0..mm {
                let v = est.hhat(m, k);
                acc.vnorm[k * mm + m].push(v.iter().map(|x| x.norm_sqr()).sum());
            }
            for l in 0..kk {
                for (m, gm) in g.iter_mut().enumerate() {
                    let v = est.hhat(m, k);
                    let h = block.h(m, l);
                    *gm = (0..nn).map(|n| v[n].conj() * h[n]).sum();
                }
                let base = (k * kk + l) * mm;
                for m in 0..mm {
                    acc.re[base + m].push(g[m].re);
                    acc.im[base + m].push(g[m].im);
                    acc.abs2[base + m].push(g[m].norm_sqr());
                    for mp in 0..mm {
                        let x = g[m] * g[mp].conj();
                        acc.cross_re[(base + m) * mm + mp].push(x.re);
                        acc.cross_im[(base + m) * mm + mp].push(x.im);
                    }
                }
            }
        }
    })?;
    let n = n_blocks as f64;
    Ok(EffectiveMoments {
        ap_count: mm,
        ue_count: kk,
        n_blocks,
        mean: sums.re.iter().zip(&sums.im).map(|(r, i)| complex_estimate(r, i, n)).collect(),
        abs2: sums.abs2.iter().map(|s| s.estimate(n)).collect(),
        vnorm: sums.vnorm.iter().map(|s| s.estimate(n)).collect(),
        cross: sums.cross_re.iter().zip(&sums.cross_im).map(|(r, i)| complex_estimate(r, i, n)).collect(),
    })
}

#[derive(Debug, Clone)]
struct CovSums {
    est: CMatrix,
    err: CMatrix,
}

impl std::ops::AddAssign for CovSums {
    fn add_assign(&mut self, o: Self) {
        self.est += o.est;
        self.err += o.err;
    }
}

/// Sample covariances of the random part of the estimate and of the
/// estimation error on link `(m, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationCovariances {
    /// `Cov{hhat - hbar e^{j phi}}` for the phase-aware estimators,
    /// `Cov{hhat}` for LMMSE.
    pub estimate: CMatrix,
    /// `Cov{h - hhat}`.
    pub error: CMatrix,
}

#[allow(clippy::too_many_arguments)]
pub fn estimation_covariances(
    stats: &ScenarioStatistics,
    est_stats: &EstimatorStatistics,
    cfg: &SystemConfig,
    estimator: Estimator,
    m: usize,
    k: usize,
    seed: u64,
    n_blocks: usize,
) -> Result<EstimationCovariances, NumericsError> {
    let nn = stats.antennas;
    let zero = CovSums {
        est: CMatrix::zeros(nn, nn),
        err: CMatrix::zeros(nn, nn),
    };
    let los = stats.los(m, k).clone();
    let sums = sample(stats, est_stats, cfg, estimator, seed, n_blocks, zero, |acc, block, est| {
        let hhat = est.hhat(m, k);
        let h = block.h(m, k);
        let rot = Complex64::from_polar(1.0, block.phi(m, k));
        let centred: Vec<Complex64> = (0..nn)
            .map(|n| {
                if estimator.is_phase_aware() {
                    hhat[n] - los[n] * rot
                } else {
                    hhat[n]
                }
            })
            .collect();
        let err: Vec<Complex64> = (0..nn).map(|n| h[n] - hhat[n]).collect();
        for j in 0..nn {
            for i in 0..nn {
                acc.est[(i, j)] += centred[i] * centred[j].conj();
                acc.err[(i, j)] += err[i] * err[j].conj();
            }
        }
    })?;
    let inv = Complex64::new(1.0 / n_blocks as f64, 0.0);
    Ok(EstimationCovariances {
        estimate: sums.est * inv,
        error: sums.err * inv,
    })
}
