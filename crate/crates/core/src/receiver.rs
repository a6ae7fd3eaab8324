//! Uplink combining, LSFD at the CPU and Monte-Carlo UatF spectral efficiency.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{pilot_observation, ChannelBlock, ChannelSampler};
use crate::config::SystemConfig;
use crate::estimation::{estimate_into, EstimateBlock, Estimator, EstimatorStatistics};
use crate::linalg::{hpd_cholesky, CMatrix, CVector, HermitianMatrix, NumericsError};
use crate::scenario::ScenarioStatistics;

/// Relative bound on `Im{b^H a}` before the SINR is rejected.
pub const IMAG_RESIDUE_TOL: f64 = 1e-8;

/// Blocks per work item. Fixed so the reduction order does not depend on the
/// number of worker threads.
const CHUNK_BLOCKS: usize = 64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReceiverError {
    #[error("need at least {needed} blocks, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("LSFD denominator of UE {ue} is not positive definite")]
    IndefiniteDenominator { ue: usize },
    #[error("SINR of UE {ue} has imaginary residue {residue:e} (real part {real:e})")]
    ImaginarySinr { ue: usize, real: f64, residue: f64 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combiner {
    Mr,
    Lmmse,
}

impl Combiner {
    pub const ALL: [Combiner; 2] = [Combiner::Mr, Combiner::Lmmse];

    pub fn id(self) -> &'static str {
        match self {
            Combiner::Mr => "mr",
            Combiner::Lmmse => "lmmse",
        }
    }
}

impl fmt::Display for Combiner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Combiner {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mr" => Ok(Combiner::Mr),
            "lmmse" | "l-mmse" | "lmmse_local" => Ok(Combiner::Lmmse),
            other => Err(format!("unknown combiner `{other}` (expected mr or lmmse)")),
        }
    }
}

/// Local combining vectors, flattened like [`EstimateBlock`].
#[derive(Debug, Clone, PartialEq)]
pub struct CombinerBlock {
    pub scheme: Combiner,
    pub ue_count: usize,
    pub antennas: usize,
    pub v: Vec<Complex64>,
}

impl CombinerBlock {
    pub fn v(&self, m: usize, k: usize) -> &[Complex64] {
        let start = (m * self.ue_count + k) * self.antennas;
        &self.v[start..start + self.antennas]
    }
}

pub fn combine_mr(est: &EstimateBlock) -> CombinerBlock {
    CombinerBlock {
        scheme: Combiner::Mr,
        ue_count: est.ue_count,
        antennas: est.antennas,
        v: est.hhat.clone(),
    }
}

/// `sum_l p_l C_ml + sigma^2 I` per AP for the active estimator.
pub fn lmmse_regularizers(est: Estimator, est_stats: &EstimatorStatistics, cfg: &SystemConfig) -> Vec<CMatrix> {
    let n = cfg.antennas;
    (0..est_stats.ap_count)
        .map(|m| {
            let mut a = CMatrix::identity(n, n) * Complex64::new(cfg.sigma2(), 0.0);
            for l in 0..est_stats.ue_count {
                a += est_stats.error_cov(est, m, l).matrix() * Complex64::new(cfg.data_power(l), 0.0);
            }
            a
        })
        .collect()
}

/// L-MMSE combining with the regularizers precomputed by [`lmmse_regularizers`].
fn combine_lmmse_into(
    v: &mut [Complex64],
    est: &EstimateBlock,
    regularizers: &[CMatrix],
    powers: &[f64],
) -> Result<(), NumericsError> {
    let n = est.antennas;
    let k_count = est.ue_count;
    for (m, reg) in regularizers.iter().enumerate() {
        let mut a = reg.clone();
        for l in 0..k_count {
            let h = est.hhat(m, l);
            let p = powers[l];
            if p == 0.0 {
                continue;
            }
            for j in 0..n {
                let hj = h[j].conj() * p;
                for i in 0..n {
                    a[(i, j)] += h[i] * hj;
                }
            }
        }
        let chol = hpd_cholesky(a).ok_or(NumericsError::SingularMatrix)?;
        let mut rhs = CMatrix::from_column_slice(n, k_count, &est.hhat[m * k_count * n..(m + 1) * k_count * n]);
        chol.solve_mut(&mut rhs);
        for k in 0..k_count {
            let scale = Complex64::new(powers[k], 0.0);
            for i in 0..n {
                v[(m * k_count + k) * n + i] = rhs[(i, k)] * scale;
            }
        }
    }
    Ok(())
}

/// `v_mk = p_k (sum_l p_l (hhat hhat^H + C_ml) + sigma^2 I)^-1 hhat_mk`, one
/// factorization per AP.
pub fn combine_lmmse_local(
    est: &EstimateBlock,
    est_stats: &EstimatorStatistics,
    cfg: &SystemConfig,
) -> Result<CombinerBlock, ReceiverError> {
    let regs = lmmse_regularizers(est.estimator, est_stats, cfg);
    let mut v = vec![Complex64::new(0.0, 0.0); est.hhat.len()];
    combine_lmmse_into(&mut v, est, &regs, &cfg.data_powers())?;
    Ok(CombinerBlock {
        scheme: Combiner::Lmmse,
        ue_count: est.ue_count,
        antennas: est.antennas,
        v,
    })
}

/// How the `M x M` matrices `Gamma_kl = E{b_kl b_kl^H}` are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GammaEstimator {
    /// Sample mean of the full outer products.
    #[default]
    FullSample,
    /// Diagonal from sampled second moments, off-diagonal `E{b_m} E{b_m'}^*`.
    /// Exact in expectation because local combiners at different APs see
    /// independent channels; costs `O(M)` per pair instead of `O(M^2)`.
    ApFactorized,
}

/// Storage of `Gamma_kl` for all `(k, l)`, index `k * K + l`.
#[derive(Debug, Clone, PartialEq)]
pub enum GammaStore {
    Full(Vec<CMatrix>),
    Factorized { mean: Vec<CVector>, second: Vec<Vec<f64>> },
}

/// Second-order statistics of the effective channels `b_kl = [v_mk^H h_ml]_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct LsfdStatistics {
    pub ap_count: usize,
    pub ue_count: usize,
    /// `E{b_kk}` per UE.
    pub b: Vec<CVector>,
    /// Diagonal of `Z_k = E{diag(||v_mk||^2)}` per UE.
    pub z: Vec<Vec<f64>>,
    pub gamma: GammaStore,
}

impl LsfdStatistics {
    pub fn gamma(&self, k: usize, l: usize) -> CMatrix {
        let idx = k * self.ue_count + l;
        match &self.gamma {
            GammaStore::Full(g) => g[idx].clone(),
            GammaStore::Factorized { mean, second } => {
                let mu = &mean[idx];
                let mut g = mu * mu.adjoint();
                for m in 0..self.ap_count {
                    g[(m, m)] = Complex64::new(second[idx][m], 0.0);
                }
                g
            }
        }
    }

    /// `sum_l p_l Gamma_kl - p_k b b^H + sigma^2 Z_k`.
    pub fn denominator(&self, k: usize, powers: &[f64], sigma2: f64) -> CMatrix {
        let mut d = CMatrix::zeros(self.ap_count, self.ap_count);
        for (l, p) in powers.iter().enumerate() {
            if *p != 0.0 {
                d += self.gamma(k, l) * Complex64::new(*p, 0.0);
            }
        }
        let b = &self.b[k];
        d -= b * b.adjoint() * Complex64::new(powers[k], 0.0);
        for m in 0..self.ap_count {
            d[(m, m)] += Complex64::new(sigma2 * self.z[k][m], 0.0);
        }
        HermitianMatrix::from_symmetrized(d).into_inner()
    }
}

/// Optimal LSFD weights and SINR of one UE.
#[derive(Debug, Clone, PartialEq)]
pub struct LsfdSolution {
    pub weights: CVector,
    pub sinr: f64,
}

/// `a_k = Gamma_k^-1 b_k`, `gamma_k = p_k Re{b^H a}`.
pub fn optimal_lsfd(
    lsfd: &LsfdStatistics,
    k: usize,
    powers: &[f64],
    sigma2: f64,
) -> Result<LsfdSolution, ReceiverError> {
    let b = &lsfd.b[k];
    if powers[k] == 0.0 || b.iter().all(|x| *x == Complex64::new(0.0, 0.0)) {
        return Ok(LsfdSolution {
            weights: CVector::zeros(lsfd.ap_count),
            sinr: 0.0,
        });
    }
    let denom = lsfd.denominator(k, powers, sigma2);
    let chol = hpd_cholesky(denom).ok_or(ReceiverError::IndefiniteDenominator { ue: k })?;
    let a = chol.solve(b);
    let q = b.dotc(&a) * powers[k];
    if q.im.abs() > IMAG_RESIDUE_TOL * q.re.abs().max(f64::MIN_POSITIVE) {
        return Err(ReceiverError::ImaginarySinr {
            ue: k,
            real: q.re,
            residue: q.im,
        });
    }
    if q.re < 0.0 {
        return Err(ReceiverError::IndefiniteDenominator { ue: k });
    }
    Ok(LsfdSolution { weights: a, sinr: q.re })
}

/// Generalized Rayleigh quotient `p_k |a^H b|^2 / (a^H Gamma_k a)` for arbitrary weights.
pub fn sinr_with_weights(lsfd: &LsfdStatistics, k: usize, a: &CVector, powers: &[f64], sigma2: f64) -> f64 {
    let denom = lsfd.denominator(k, powers, sigma2);
    let num = powers[k] * a.dotc(&lsfd.b[k]).norm_sqr();
    let den = a.dotc(&(&denom * a)).re;
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// No-LSFD baseline: `a_k = 1`.
pub fn equal_weight_sinr(lsfd: &LsfdStatistics, k: usize, powers: &[f64], sigma2: f64) -> f64 {
    let ones = CVector::from_element(lsfd.ap_count, Complex64::new(1.0, 0.0));
    sinr_with_weights(lsfd, k, &ones, powers, sigma2)
}

/// Best single-AP baseline.
pub fn single_ap_sinr(lsfd: &LsfdStatistics, k: usize, powers: &[f64], sigma2: f64) -> f64 {
    (0..lsfd.ap_count)
        .map(|m| {
            let mut a = CVector::zeros(lsfd.ap_count);
            a[m] = Complex64::new(1.0, 0.0);
            sinr_with_weights(lsfd, k, &a, powers, sigma2)
        })
        .fold(0.0, f64::max)
}

pub fn se_from_sinr(sinr: f64, cfg: &SystemConfig) -> f64 {
    cfg.prelog() * (1.0 + sinr).log2()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mc,
    ClosedForm,
}

impl Method {
    pub fn id(self) -> &'static str {
        match self {
            Method::Mc => "mc",
            Method::ClosedForm => "closed_form",
        }
    }
}

/// Per-UE SINR and SE for one estimator/combiner pair on one drop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeReport {
    pub method: Method,
    pub estimator: Estimator,
    pub combiner: Combiner,
    pub n_blocks: usize,
    pub n_drops: usize,
    pub sinr: Vec<f64>,
    pub se: Vec<f64>,
    /// Jackknife standard errors (Monte-Carlo only).
    pub stderr: Option<Vec<f64>>,
}

impl SeReport {
    pub fn mean_se(&self) -> f64 {
        self.se.iter().sum::<f64>() / self.se.len() as f64
    }
}

/// SINRs of every UE from a set of statistics.
pub fn lsfd_sinrs(lsfd: &LsfdStatistics, cfg: &SystemConfig) -> Result<Vec<f64>, ReceiverError> {
    let powers = cfg.data_powers();
    let sigma2 = cfg.sigma2();
    (0..lsfd.ue_count)
        .map(|k| optimal_lsfd(lsfd, k, &powers, sigma2).map(|s| s.sinr))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McOptions {
    pub n_blocks: usize,
    /// Jackknife batches.
    pub batches: usize,
    pub gamma: GammaEstimator,
    /// Seed of the block-level random streams.
    pub seed: u64,
}

impl McOptions {
    pub fn new(n_blocks: usize, seed: u64) -> Self {
        Self {
            n_blocks,
            batches: 10,
            gamma: GammaEstimator::FullSample,
            seed,
        }
    }

    pub fn with_gamma(self, gamma: GammaEstimator) -> Self {
        Self { gamma, ..self }
    }
}

/// Running sums of the effective-channel moments for one pair.
#[derive(Debug, Clone)]
struct Accumulator {
    m: usize,
    k: usize,
    /// `sum G[m,k,k]`, index `k*M + m`.
    b: Vec<Complex64>,
    /// `sum ||v_mk||^2`, index `k*M + m`.
    z: Vec<f64>,
    /// `sum G[m,k,l]`, index `(k*K + l)*M + m`.
    mean: Vec<Complex64>,
    /// `sum |G[m,k,l]|^2`.
    second: Vec<f64>,
    /// `sum G G^H`, index `(k*K + l)*M*M + col*M + row` (column-major).
    full: Option<Vec<Complex64>>,
    count: usize,
}

impl Accumulator {
    fn new(m: usize, k: usize, gamma: GammaEstimator) -> Self {
        let zero = Complex64::new(0.0, 0.0);
        Self {
            m,
            k,
            b: vec![zero; k * m],
            z: vec![0.0; k * m],
            mean: vec![zero; k * k * m],
            second: vec![0.0; k * k * m],
            full: (gamma == GammaEstimator::FullSample).then(|| vec![zero; k * k * m * m]),
            count: 0,
        }
    }

    fn add(&mut self, other: &Accumulator) {
        fn add_c(a: &mut [Complex64], b: &[Complex64]) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        fn add_r(a: &mut [f64], b: &[f64]) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        add_c(&mut self.b, &other.b);
        add_r(&mut self.z, &other.z);
        add_c(&mut self.mean, &other.mean);
        add_r(&mut self.second, &other.second);
        if let (Some(a), Some(b)) = (self.full.as_mut(), other.full.as_ref()) {
            add_c(a, b);
        }
        self.count += other.count;
    }

    fn sub(&self, other: &Accumulator) -> Accumulator {
        let mut out = self.clone();
        out.b.iter_mut().zip(&other.b).for_each(|(x, y)| *x -= y);
        out.z.iter_mut().zip(&other.z).for_each(|(x, y)| *x -= y);
        out.mean.iter_mut().zip(&other.mean).for_each(|(x, y)| *x -= y);
        out.second.iter_mut().zip(&other.second).for_each(|(x, y)| *x -= y);
        if let (Some(a), Some(b)) = (out.full.as_mut(), other.full.as_ref()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x -= y);
        }
        out.count -= other.count;
        out
    }

    /// Adds one block given `G` (index `(m*K + k)*K + l`) and `||v||^2` (index `m*K + k`).
    fn push(&mut self, g: &[Complex64], vnorm: &[f64]) {
        let (mm, kk) = (self.m, self.k);
        for m in 0..mm {
            for k in 0..kk {
                let row = (m * kk + k) * kk;
                self.b[k * mm + m] += g[row + k];
                self.z[k * mm + m] += vnorm[m * kk + k];
                for l in 0..kk {
                    let x = g[row + l];
                    let idx = (k * kk + l) * mm + m;
                    self.mean[idx] += x;
                    self.second[idx] += x.norm_sqr();
                }
            }
        }
        if let Some(full) = self.full.as_mut() {
            for k in 0..kk {
                for l in 0..kk {
                    let base = (k * kk + l) * mm * mm;
                    for c in 0..mm {
                        let xc = g[(c * kk + k) * kk + l].conj();
                        let col = &mut full[base + c * mm..base + (c + 1) * mm];
                        for (r, slot) in col.iter_mut().enumerate() {
                            *slot += g[(r * kk + k) * kk + l] * xc;
                        }
                    }
                }
            }
        }
        self.count += 1;
    }

    fn statistics(&self) -> LsfdStatistics {
        let (mm, kk) = (self.m, self.k);
        let inv = 1.0 / self.count as f64;
        let b = (0..kk)
            .map(|k| CVector::from_iterator(mm, self.b[k * mm..(k + 1) * mm].iter().map(|x| x * inv)))
            .collect();
        let z = (0..kk).map(|k| self.z[k * mm..(k + 1) * mm].iter().map(|x| x * inv).collect()).collect();
        let gamma = match &self.full {
            Some(full) => GammaStore::Full(
                (0..kk * kk)
                    .map(|i| {
                        let g = CMatrix::from_iterator(mm, mm, full[i * mm * mm..(i + 1) * mm * mm].iter().map(|x| x * inv));
                        HermitianMatrix::from_symmetrized(g).into_inner()
                    })
                    .collect(),
            ),
            None => GammaStore::Factorized {
                mean: (0..kk * kk)
                    .map(|i| CVector::from_iterator(mm, self.mean[i * mm..(i + 1) * mm].iter().map(|x| x * inv)))
                    .collect(),
                second: (0..kk * kk).map(|i| self.second[i * mm..(i + 1) * mm].iter().map(|x| x * inv).collect()).collect(),
            },
        };
        LsfdStatistics {
            ap_count: mm,
            ue_count: kk,
            b,
            z,
            gamma,
        }
    }
}

/// Per-drop precomputation shared by all Monte-Carlo work items.
struct McContext<'a> {
    stats: &'a ScenarioStatistics,
    est_stats: &'a EstimatorStatistics,
    cfg: &'a SystemConfig,
    sampler: ChannelSampler,
    pairs: &'a [(Estimator, Combiner)],
    estimators: Vec<Estimator>,
    regularizers: Vec<Option<Vec<CMatrix>>>,
    powers: Vec<f64>,
    gamma: GammaEstimator,
    seed: u64,
}

impl<'a> McContext<'a> {
    fn new(
        stats: &'a ScenarioStatistics,
        est_stats: &'a EstimatorStatistics,
        cfg: &'a SystemConfig,
        pairs: &'a [(Estimator, Combiner)],
        opts: &McOptions,
    ) -> Result<Self, ReceiverError> {
        let mut estimators: Vec<Estimator> = pairs.iter().map(|p| p.0).collect();
        estimators.sort();
        estimators.dedup();
        let regularizers = Estimator::ALL
            .iter()
            .map(|e| {
                pairs
                    .iter()
                    .any(|p| p.0 == *e && p.1 == Combiner::Lmmse)
                    .then(|| lmmse_regularizers(*e, est_stats, cfg))
            })
            .collect();
        Ok(Self {
            stats,
            est_stats,
            cfg,
            sampler: ChannelSampler::new(stats)?,
            pairs,
            estimators,
            regularizers,
            powers: cfg.data_powers(),
            gamma: opts.gamma,
            seed: opts.seed,
        })
    }

    fn run_range(&self, start: usize, end: usize) -> Result<Vec<Accumulator>, NumericsError> {
        let (mm, kk, nn) = (self.stats.ap_count, self.stats.ue_count, self.stats.antennas);
        let mut accs: Vec<Accumulator> = self.pairs.iter().map(|_| Accumulator::new(mm, kk, self.gamma)).collect();
        let mut block = ChannelBlock::empty(self.stats);
        let mut ests: Vec<EstimateBlock> = self.estimators.iter().map(|e| EstimateBlock::zeros(*e, self.stats)).collect();
        let mut v = vec![Complex64::new(0.0, 0.0); mm * kk * nn];
        let mut g = vec![Complex64::new(0.0, 0.0); mm * kk * kk];
        let mut vnorm = vec![0.0; mm * kk];
        for idx in start..end {
            self.sampler.realize_into(&mut block, self.stats, self.seed, idx as u64);
            pilot_observation(&mut block, self.stats, self.cfg, self.seed);
            for est in ests.iter_mut() {
                let e = est.estimator;
                estimate_into(est, e, &block, self.est_stats, self.stats, self.cfg);
            }
            for (pair, acc) in self.pairs.iter().zip(accs.iter_mut()) {
                let est = &ests[self.estimators.iter().position(|e| *e == pair.0).unwrap()];
                let vv: &[Complex64] = match pair.1 {
                    Combiner::Mr => &est.hhat,
                    Combiner::Lmmse => {
                        let regs = self.regularizers[pair.0 as usize].as_ref().unwrap();
                        combine_lmmse_into(&mut v, est, regs, &self.powers)?;
                        &v
                    }
                };
                effective_channels(vv, &block, mm, kk, nn, &mut g, &mut vnorm);
                acc.push(&g, &vnorm);
            }
        }
        Ok(accs)
    }
}

/// `G[(m*K + k)*K + l] = v_mk^H h_ml` and `||v_mk||^2`.
fn effective_channels(
    v: &[Complex64],
    block: &ChannelBlock,
    mm: usize,
    kk: usize,
    nn: usize,
    g: &mut [Complex64],
    vnorm: &mut [f64],
) {
    for m in 0..mm {
        for k in 0..kk {
            let vk = &v[(m * kk + k) * nn..(m * kk + k + 1) * nn];
            vnorm[m * kk + k] = vk.iter().map(|x| x.norm_sqr()).sum();
            for l in 0..kk {
                let h = block.h(m, l);
                let mut acc = Complex64::new(0.0, 0.0);
                for n in 0..nn {
                    acc += vk[n].conj() * h[n];
                }
                g[(m * kk + k) * kk + l] = acc;
            }
        }
    }
}

/// Accumulates blocks `[start, end)` in fixed-size chunks on the rayon pool
/// and folds them in index order.
fn accumulate(ctx: &McContext<'_>, start: usize, end: usize) -> Result<Vec<Accumulator>, ReceiverError> {
    let chunks: Vec<(usize, usize)> = (start..end)
        .step_by(CHUNK_BLOCKS)
        .map(|s| (s, (s + CHUNK_BLOCKS).min(end)))
        .collect();
    let parts: Vec<Result<Vec<Accumulator>, NumericsError>> =
        chunks.par_iter().map(|(s, e)| ctx.run_range(*s, *e)).collect();
    let mut total: Option<Vec<Accumulator>> = None;
    for part in parts {
        let part = part?;
        match total.as_mut() {
            None => total = Some(part),
            Some(t) => t.iter_mut().zip(&part).for_each(|(a, b)| a.add(b)),
        }
    }
    Ok(total.unwrap_or_default())
}

/// Sample statistics of `b_kl`, `Gamma_kl`, `Z_k` over `n_blocks` blocks
/// (full-sample `Gamma`).
pub fn mc_lsfd_statistics(
    stats: &ScenarioStatistics,
    est_stats: &EstimatorStatistics,
    cfg: &SystemConfig,
    estimator: Estimator,
    combiner: Combiner,
    n_blocks: usize,
    seed: u64,
) -> Result<LsfdStatistics, ReceiverError> {
    if n_blocks < 2 {
        return Err(ReceiverError::InsufficientSamples {
            needed: 2,
            got: n_blocks,
        });
    }
    let pairs = [(estimator, combiner)];
    let opts = McOptions::new(n_blocks, seed);
    let ctx = McContext::new(stats, est_stats, cfg, &pairs, &opts)?;
    let acc = accumulate(&ctx, 0, n_blocks)?;
    Ok(acc[0].statistics())
}

/// Monte-Carlo UatF SE of several estimator/combiner pairs on one drop.
///
/// All pairs see the same channel blocks. Standard errors are delete-one
/// jackknife estimates over `opts.batches` contiguous block batches.
pub fn mc_se_pairs(
    stats: &ScenarioStatistics,
    est_stats: &EstimatorStatistics,
    cfg: &SystemConfig,
    pairs: &[(Estimator, Combiner)],
    opts: &McOptions,
) -> Result<Vec<SeReport>, ReceiverError> {
    let batches = opts.batches.max(2);
    if opts.n_blocks < 2 * batches {
        return Err(ReceiverError::InsufficientSamples {
            needed: 2 * batches,
            got: opts.n_blocks,
        });
    }
    let ctx = McContext::new(stats, est_stats, cfg, pairs, opts)?;
    let mut per_batch = Vec::with_capacity(batches);
    for b in 0..batches {
        let start = b * opts.n_blocks / batches;
        let end = (b + 1) * opts.n_blocks / batches;
        per_batch.push(accumulate(&ctx, start, end)?);
    }
    let mut total = per_batch[0].clone();
    for part in &per_batch[1..] {
        total.iter_mut().zip(part).for_each(|(a, b)| a.add(b));
    }
    let mut reports = Vec::with_capacity(pairs.len());
    for (i, (estimator, combiner)) in pairs.iter().enumerate() {
        let sinr = lsfd_sinrs(&total[i].statistics(), cfg)?;
        let se: Vec<f64> = sinr.iter().map(|s| se_from_sinr(*s, cfg)).collect();
        let mut loo = Vec::with_capacity(batches);
        for part in &per_batch {
            let s = lsfd_sinrs(&total[i].sub(&part[i]).statistics(), cfg)?;
            loo.push(s.iter().map(|s| se_from_sinr(*s, cfg)).collect::<Vec<f64>>());
        }
        let bf = batches as f64;
        let stderr = (0..stats.ue_count)
            .map(|k| {
                let mean = loo.iter().map(|r| r[k]).sum::<f64>() / bf;
                let ss: f64 = loo.iter().map(|r| (r[k] - mean).powi(2)).sum();
                ((bf - 1.0) / bf * ss).sqrt()
            })
            .collect();
        reports.push(SeReport {
            method: Method::Mc,
            estimator: *estimator,
            combiner: *combiner,
            n_blocks: opts.n_blocks,
            n_drops: 1,
            sinr,
            se,
            stderr: Some(stderr),
        });
    }
    Ok(reports)
}

pub fn mc_se(
    stats: &ScenarioStatistics,
    est_stats: &EstimatorStatistics,
    cfg: &SystemConfig,
    estimator: Estimator,
    combiner: Combiner,
    opts: &McOptions,
) -> Result<SeReport, ReceiverError> {
    Ok(mc_se_pairs(stats, est_stats, cfg, &[(estimator, combiner)], opts)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::draw_block;
    use crate::estimation::{build_statistics, estimate};
    use crate::scenario::build_drop;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn small() -> (SystemConfig, ScenarioStatistics, EstimatorStatistics) {
        let cfg = SystemConfig {
            ap_count: 3,
            antennas: 2,
            ue_count: 4,
            pilot_len: 2,
            area_side_m: 300.0,
            ..SystemConfig::default()
        };
        let stats = build_drop(&cfg, 5).unwrap();
        let es = build_statistics(&stats, &cfg).unwrap();
        (cfg, stats, es)
    }

    #[test]
    fn mr_is_the_estimate() {
        let (cfg, stats, es) = small();
        let block = draw_block(&stats, &cfg, 1, 0).unwrap();
        let est = estimate(Estimator::Mmse, &block, &es, &stats, &cfg);
        let v = combine_mr(&est);
        assert_eq!(v.v, est.hhat);
        let mut zero = est.clone();
        zero.hhat.fill(c(0.0, 0.0));
        assert!(combine_mr(&zero).v.iter().all(|x| *x == c(0.0, 0.0)));
    }

    #[test]
    fn lmmse_scalar_receiver() {
        let cfg = SystemConfig {
            ap_count: 1,
            antennas: 1,
            ue_count: 1,
            pilot_len: 1,
            ..SystemConfig::default()
        };
        let est = EstimateBlock {
            estimator: Estimator::Mmse,
            ap_count: 1,
            ue_count: 1,
            antennas: 1,
            hhat: vec![c(0.3, -0.4)],
        };
        let regs = vec![CMatrix::from_element(1, 1, c(cfg.sigma2(), 0.0))];
        let mut v = vec![c(0.0, 0.0)];
        combine_lmmse_into(&mut v, &est, &regs, &[cfg.data_power_mw]).unwrap();
        let p = cfg.data_power_mw;
        let expect = est.hhat[0] * p / (p * 0.25 + cfg.sigma2());
        assert!((v[0] - expect).norm() < 1e-12 * expect.norm());
    }

    #[test]
    fn lmmse_noise_limit_is_scaled_mr() {
        let (cfg, stats, _) = small();
        let cfg = SystemConfig { noise_dbm: 60.0, ..cfg };
        let es = build_statistics(&stats, &cfg).unwrap();
        let block = draw_block(&stats, &cfg, 1, 0).unwrap();
        let est = estimate(Estimator::Ew, &block, &es, &stats, &cfg);
        let v = combine_lmmse_local(&est, &es, &cfg).unwrap();
        let scale = cfg.data_power_mw / cfg.sigma2();
        for (a, h) in v.v.iter().zip(&est.hhat) {
            assert!((a - h * scale).norm() <= 1e-6 * (h * scale).norm());
        }
    }

    #[test]
    fn lmmse_locally_minimizes_empirical_mse() {
        let cfg = SystemConfig {
            ap_count: 1,
            antennas: 2,
            ue_count: 2,
            pilot_len: 2,
            area_side_m: 100.0,
            ..SystemConfig::default()
        };
        let stats = build_drop(&cfg, 3).unwrap();
        let es = build_statistics(&stats, &cfg).unwrap();
        let block = draw_block(&stats, &cfg, 2, 0).unwrap();
        let est = estimate(Estimator::Mmse, &block, &es, &stats, &cfg);
        let v = combine_lmmse_local(&est, &es, &cfg).unwrap();
        // conditional MSE given the estimates: E|s_k - v^H y|^2
        let p = cfg.data_power_mw;
        let mut a = CMatrix::identity(2, 2) * c(cfg.sigma2(), 0.0);
        for l in 0..2 {
            let h = est.hhat_vector(0, l);
            a += (&h * h.adjoint() + es.error_cov(Estimator::Mmse, 0, l).matrix()) * c(p, 0.0);
        }
        for k in 0..2 {
            let h = est.hhat_vector(0, k);
            let mse = |w: &CVector| 1.0 - 2.0 * (w.dotc(&h) * p.sqrt()).re + w.dotc(&(&a * w)).re;
            // MSE_mk with the sqrt(p_k)-normalized combiner
            let w0 = CVector::from_column_slice(v.v(0, k)) / c(p.sqrt(), 0.0);
            let best = mse(&w0);
            let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
            for _ in 0..200 {
                let d = CVector::from_fn(2, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
                let w = &w0 + d * c(1e-3 * w0.norm(), 0.0);
                assert!(mse(&w) >= best - 1e-12 * best.abs());
            }
        }
    }

    fn random_lsfd(seed: u64, m: usize) -> (LsfdStatistics, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rc = || c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let b = CVector::from_fn(m, |_, _| rc());
        let x = CMatrix::from_fn(m, m + 2, |_, _| rc());
        let g = &b * b.adjoint() + &x * x.adjoint();
        let lsfd = LsfdStatistics {
            ap_count: m,
            ue_count: 1,
            b: vec![b],
            z: vec![vec![1.0; m]],
            gamma: GammaStore::Full(vec![g]),
        };
        (lsfd, vec![1.0])
    }

    #[test]
    fn optimal_lsfd_beats_random_weights() {
        let (lsfd, powers) = random_lsfd(9, 4);
        let opt = optimal_lsfd(&lsfd, 0, &powers, 0.1).unwrap();
        let at_opt = sinr_with_weights(&lsfd, 0, &opt.weights, &powers, 0.1);
        assert!((at_opt - opt.sinr).abs() < 1e-10 * opt.sinr);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let a = CVector::from_fn(4, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
            assert!(sinr_with_weights(&lsfd, 0, &a, &powers, 0.1) <= opt.sinr + 1e-12 * opt.sinr);
            let scaled = &a * c(-2.5, 0.7);
            let s1 = sinr_with_weights(&lsfd, 0, &a, &powers, 0.1);
            let s2 = sinr_with_weights(&lsfd, 0, &scaled, &powers, 0.1);
            assert!((s1 - s2).abs() < 1e-12 * s1);
        }
        assert!(equal_weight_sinr(&lsfd, 0, &powers, 0.1) <= opt.sinr);
        assert!(single_ap_sinr(&lsfd, 0, &powers, 0.1) <= opt.sinr);
    }

    #[test]
    fn single_ap_rank_one_quotient() {
        let lsfd = LsfdStatistics {
            ap_count: 1,
            ue_count: 2,
            b: vec![CVector::from_element(1, c(2.0, 1.0)), CVector::from_element(1, c(1.0, 0.0))],
            z: vec![vec![3.0], vec![1.0]],
            gamma: GammaStore::Full(vec![
                CMatrix::from_element(1, 1, c(7.0, 0.0)),
                CMatrix::from_element(1, 1, c(0.5, 0.0)),
                CMatrix::from_element(1, 1, c(0.2, 0.0)),
                CMatrix::from_element(1, 1, c(2.0, 0.0)),
            ]),
        };
        let powers = [2.0, 4.0];
        let s = optimal_lsfd(&lsfd, 0, &powers, 0.5).unwrap().sinr;
        let expect = 2.0 * 5.0 / (2.0 * 7.0 + 4.0 * 0.5 - 2.0 * 5.0 + 0.5 * 3.0);
        assert!((s - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn indefinite_denominator_is_reported() {
        let lsfd = LsfdStatistics {
            ap_count: 1,
            ue_count: 1,
            b: vec![CVector::from_element(1, c(2.0, 0.0))],
            z: vec![vec![0.0]],
            gamma: GammaStore::Full(vec![CMatrix::from_element(1, 1, c(1.0, 0.0))]),
        };
        assert_eq!(
            optimal_lsfd(&lsfd, 0, &[1.0], 1.0),
            Err(ReceiverError::IndefiniteDenominator { ue: 0 })
        );
    }

    #[test]
    fn factorized_gamma_matches_full_sample() {
        let (cfg, stats, es) = small();
        let pairs = [(Estimator::Mmse, Combiner::Mr), (Estimator::Lmmse, Combiner::Lmmse)];
        let full = mc_se_pairs(&stats, &es, &cfg, &pairs, &McOptions::new(4000, 3)).unwrap();
        let fact = mc_se_pairs(
            &stats,
            &es,
            &cfg,
            &pairs,
            &McOptions::new(4000, 3).with_gamma(GammaEstimator::ApFactorized),
        )
        .unwrap();
        for (f, g) in full.iter().zip(&fact) {
            for k in 0..4 {
                let tol = 4.0 * (f.stderr.as_ref().unwrap()[k] + g.stderr.as_ref().unwrap()[k]);
                assert!((f.se[k] - g.se[k]).abs() <= tol, "{k}: {} vs {}", f.se[k], g.se[k]);
            }
        }
    }

    #[test]
    fn mc_is_thread_count_independent() {
        let (cfg, stats, es) = small();
        let pairs = [(Estimator::Ew, Combiner::Lmmse)];
        let opts = McOptions::new(700, 11);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a = one.install(|| mc_se_pairs(&stats, &es, &cfg, &pairs, &opts)).unwrap();
        let b = three.install(|| mc_se_pairs(&stats, &es, &cfg, &pairs, &opts)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampled_statistics_invariants() {
        let (cfg, stats, es) = small();
        let lsfd = mc_lsfd_statistics(&stats, &es, &cfg, Estimator::Mmse, Combiner::Mr, 500, 2).unwrap();
        for k in 0..4 {
            let g = HermitianMatrix::new(lsfd.gamma(k, k)).unwrap();
            assert!(g.min_relative_eigenvalue() > -1e-12);
            assert!(lsfd.z[k].iter().all(|z| *z >= 0.0));
            assert!(HermitianMatrix::new(lsfd.denominator(k, &cfg.data_powers(), cfg.sigma2()))
                .unwrap()
                .min_relative_eigenvalue()
                > 0.0);
        }
        assert_eq!(
            mc_lsfd_statistics(&stats, &es, &cfg, Estimator::Mmse, Combiner::Mr, 1, 2),
            Err(ReceiverError::InsufficientSamples { needed: 2, got: 1 })
        );
    }

    #[test]
    fn no_prelog_means_no_se() {
        let (cfg, stats, es) = small();
        let cfg = SystemConfig {
            coherence_len: cfg.pilot_len,
            ..cfg
        };
        let r = mc_se(&stats, &es, &cfg, Estimator::Mmse, Combiner::Mr, &McOptions::new(100, 1)).unwrap();
        assert!(r.se.iter().all(|s| *s == 0.0));
        assert!(r.sinr.iter().all(|s| *s > 0.0));
    }

    #[test]
    fn combiner_ids_round_trip() {
        for c in Combiner::ALL {
            assert_eq!(c.id().parse::<Combiner>().unwrap(), c);
        }
        assert!("zf".parse::<Combiner>().is_err());
    }
}
