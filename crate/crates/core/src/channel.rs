//! Per-coherence-block channel realizations and despread pilot observations.

use num_complex::Complex64;

use crate::config::SystemConfig;
use crate::linalg::{chol_sample_factor, CMatrix, NumericsError};
use crate::rng::{complex_normal, uniform_phase, Purpose, StreamSource};
use crate::scenario::ScenarioStatistics;

/// One coherence block. Vectors are flattened as `((m * K) + k) * N + n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelBlock {
    pub ap_count: usize,
    pub ue_count: usize,
    pub antennas: usize,
    pub block_index: u64,
    /// LoS phase per link, in `[-pi, pi)`.
    pub phi: Vec<f64>,
    /// NLoS component per link.
    pub g: Vec<Complex64>,
    /// Full channel `hbar e^{j phi} + g` per link.
    pub h: Vec<Complex64>,
    /// Despread pilot observation `y^p_mk` per link.
    pub ypk: Vec<Complex64>,
}

impl ChannelBlock {
    pub fn empty(stats: &ScenarioStatistics) -> Self {
        let links = stats.ap_count * stats.ue_count;
        let len = links * stats.antennas;
        Self {
            ap_count: stats.ap_count,
            ue_count: stats.ue_count,
            antennas: stats.antennas,
            block_index: 0,
            phi: vec![0.0; links],
            g: vec![Complex64::new(0.0, 0.0); len],
            h: vec![Complex64::new(0.0, 0.0); len],
            ypk: vec![Complex64::new(0.0, 0.0); len],
        }
    }

    #[inline]
    fn range(&self, m: usize, k: usize) -> std::ops::Range<usize> {
        let start = (m * self.ue_count + k) * self.antennas;
        start..start + self.antennas
    }

    pub fn h(&self, m: usize, k: usize) -> &[Complex64] {
        &self.h[self.range(m, k)]
    }

    pub fn g(&self, m: usize, k: usize) -> &[Complex64] {
        &self.g[self.range(m, k)]
    }

    pub fn ypk(&self, m: usize, k: usize) -> &[Complex64] {
        &self.ypk[self.range(m, k)]
    }

    pub fn phi(&self, m: usize, k: usize) -> f64 {
        self.phi[m * self.ue_count + k]
    }
}

/// Orthogonal pilot book with `||phi_t||^2 = tau_p`; column `t` is pilot `t`.
#[derive(Debug, Clone)]
pub struct PilotSequences(pub CMatrix);

impl PilotSequences {
    /// `sqrt(tau_p) e_t`: the book the simulator despreads with.
    pub fn canonical(tau_p: usize) -> Self {
        Self(CMatrix::identity(tau_p, tau_p) * Complex64::new((tau_p as f64).sqrt(), 0.0))
    }

    /// Unnormalized DFT columns.
    pub fn dft(tau_p: usize) -> Self {
        let n = tau_p as f64;
        Self(CMatrix::from_fn(tau_p, tau_p, |i, t| {
            Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * (i * t) as f64 / n)
        }))
    }
}

/// Sampling factors `L_mk` with `L L^H = R_mk`, computed once per drop.
#[derive(Debug, Clone)]
pub struct ChannelSampler {
    factors: Vec<CMatrix>,
}

impl ChannelSampler {
    pub fn new(stats: &ScenarioStatistics) -> Result<Self, NumericsError> {
        let factors = stats.correlation.iter().map(chol_sample_factor).collect::<Result<_, _>>()?;
        Ok(Self { factors })
    }

    /// Draws phases and NLoS components and assembles `h`; leaves `ypk` untouched.
    pub fn realize_into(&self, block: &mut ChannelBlock, stats: &ScenarioStatistics, seed: u64, block_index: u64) {
        let src = StreamSource::new(seed, block_index);
        let n_ant = stats.antennas;
        block.block_index = block_index;
        let mut z = Vec::with_capacity(n_ant);
        for m in 0..stats.ap_count {
            for k in 0..stats.ue_count {
                let link = stats.link(m, k);
                let phi = uniform_phase(&mut src.stream(Purpose::Phase, m, k));
                block.phi[link] = phi;
                let rot = Complex64::from_polar(1.0, phi);
                let factor = &self.factors[link];
                let mut rng = src.stream(Purpose::Nlos, m, k);
                z.clear();
                z.extend((0..factor.ncols()).map(|_| complex_normal(&mut rng)));
                let base = link * n_ant;
                let los = &stats.los[link];
                for n in 0..n_ant {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for (c, zc) in z.iter().enumerate() {
                        acc += factor[(n, c)] * zc;
                    }
                    block.g[base + n] = acc;
                    block.h[base + n] = los[n] * rot + acc;
                }
            }
        }
    }
}

/// Draws a full block: phases, NLoS components, channels and pilot observations.
pub fn draw_block(
    stats: &ScenarioStatistics,
    cfg: &SystemConfig,
    seed: u64,
    block_index: u64,
) -> Result<ChannelBlock, NumericsError> {
    let sampler = ChannelSampler::new(stats)?;
    let mut block = ChannelBlock::empty(stats);
    sampler.realize_into(&mut block, stats, seed, block_index);
    pilot_observation(&mut block, stats, cfg, seed);
    Ok(block)
}

/// Raw pilot-phase noise `n^p_m` (N x tau_p, i.i.d. `N_C(0, sigma^2)`).
pub fn raw_pilot_noise(cfg: &SystemConfig, seed: u64, block_index: u64, m: usize) -> CMatrix {
    let mut rng = StreamSource::new(seed, block_index).stream(Purpose::PilotNoise, m, 0);
    let std = cfg.sigma2().sqrt();
    CMatrix::from_fn(cfg.antennas, cfg.pilot_len, |_, _| complex_normal(&mut rng) * std)
}

/// Fills `block.ypk` with `y_m^p phi_k^*` for the canonical pilot book.
///
/// UEs on the same pilot see the same despread signal, noise included; UEs
/// on different pilots see independent noise.
pub fn pilot_observation(block: &mut ChannelBlock, stats: &ScenarioStatistics, cfg: &SystemConfig, seed: u64) {
    let n_ant = stats.antennas;
    let tau_p = cfg.pilot_len as f64;
    let noise_scale = Complex64::new(tau_p.sqrt(), 0.0);
    let amp: Vec<f64> = (0..stats.ue_count).map(|l| cfg.pilot_power(l).sqrt() * tau_p).collect();
    let mut per_pilot = vec![Complex64::new(0.0, 0.0); cfg.pilot_len * n_ant];
    for m in 0..stats.ap_count {
        let noise = raw_pilot_noise(cfg, seed, block.block_index, m);
        for t in 0..cfg.pilot_len {
            for n in 0..n_ant {
                per_pilot[t * n_ant + n] = noise[(n, t)] * noise_scale;
            }
        }
        for l in 0..stats.ue_count {
            let t = stats.pilots.pilot_of[l];
            let h = block.h(m, l);
            for n in 0..n_ant {
                per_pilot[t * n_ant + n] += h[n] * amp[l];
            }
        }
        for k in 0..stats.ue_count {
            let t = stats.pilots.pilot_of[k];
            let base = stats.link(m, k) * n_ant;
            block.ypk[base..base + n_ant].copy_from_slice(&per_pilot[t * n_ant..(t + 1) * n_ant]);
        }
    }
}

/// Received pilot signal `y_m^p = sum_k sqrt(p_k) h_mk phi_k^T + n_m^p` for an
/// arbitrary orthogonal pilot book.
pub fn received_pilot_signal(
    block: &ChannelBlock,
    stats: &ScenarioStatistics,
    cfg: &SystemConfig,
    noise: &CMatrix,
    book: &PilotSequences,
    m: usize,
) -> CMatrix {
    let mut y = noise.clone();
    for k in 0..stats.ue_count {
        let pilot = book.0.column(stats.pilots.pilot_of[k]);
        let h = nalgebra::DVector::from_column_slice(block.h(m, k));
        y += (h * pilot.transpose()) * Complex64::new(cfg.pilot_power(k).sqrt(), 0.0);
    }
    y
}

/// `y phi_t^*`.
pub fn despread(y: &CMatrix, book: &PilotSequences, pilot: usize) -> nalgebra::DVector<Complex64> {
    y * book.0.column(pilot).map(|z| z.conj())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SystemConfig;
    use crate::linalg::HermitianMatrix;
    use crate::scenario::build_drop;

    fn small() -> (SystemConfig, ScenarioStatistics) {
        let cfg = SystemConfig {
            ap_count: 3,
            ue_count: 4,
            antennas: 2,
            pilot_len: 2,
            ..SystemConfig::default()
        };
        let stats = build_drop(&cfg, 9).unwrap();
        (cfg, stats)
    }

    #[test]
    fn channel_is_los_plus_nlos() {
        let (cfg, stats) = small();
        let block = draw_block(&stats, &cfg, 5, 17).unwrap();
        for m in 0..3 {
            for k in 0..4 {
                let rot = Complex64::from_polar(1.0, block.phi(m, k));
                for n in 0..2 {
                    let expect = stats.los(m, k)[n] * rot + block.g(m, k)[n];
                    assert_eq!(block.h(m, k)[n], expect);
                }
                let phi = block.phi(m, k);
                assert!((-std::f64::consts::PI..std::f64::consts::PI).contains(&phi));
            }
        }
    }

    #[test]
    fn pure_los_and_pure_nlos() {
        let (cfg, mut stats) = small();
        for r in &mut stats.correlation {
            *r = HermitianMatrix::zeros(2);
        }
        let block = draw_block(&stats, &cfg, 5, 0).unwrap();
        for m in 0..3 {
            for k in 0..4 {
                let rot = Complex64::from_polar(1.0, block.phi(m, k));
                for n in 0..2 {
                    assert_eq!(block.h(m, k)[n], stats.los(m, k)[n] * rot);
                }
            }
        }
        let (cfg, stats) = small();
        let stats = stats.without_los();
        let block = draw_block(&stats, &cfg, 5, 0).unwrap();
        assert_eq!(block.h, block.g);
    }

    #[test]
    fn noiseless_uncontaminated_observation() {
        let (cfg, _) = small();
        let cfg = SystemConfig { pilot_len: 4, noise_dbm: -400.0, ..cfg };
        let stats = build_drop(&cfg, 9).unwrap();
        let block = draw_block(&stats, &cfg, 1, 3).unwrap();
        let scale = cfg.pilot_power_mw.sqrt() * 4.0;
        for m in 0..3 {
            for k in 0..4 {
                for n in 0..2 {
                    let expect = block.h(m, k)[n] * scale;
                    assert!((block.ypk(m, k)[n] - expect).norm() <= 1e-12 * expect.norm());
                }
            }
        }
    }

    #[test]
    fn coset_members_share_observation() {
        let (cfg, stats) = small();
        let block = draw_block(&stats, &cfg, 1, 3).unwrap();
        // pilot_len 2, K 4: UEs 0 and 2 share pilot 0
        for m in 0..3 {
            assert_eq!(block.ypk(m, 0), block.ypk(m, 2));
            assert_eq!(block.ypk(m, 1), block.ypk(m, 3));
            assert_ne!(block.ypk(m, 0), block.ypk(m, 1));
        }
    }

    #[test]
    fn despreading_full_pilot_matrix_matches_direct_route() {
        let (cfg, stats) = small();
        let seed = 21;
        for b in 0..5 {
            let block = draw_block(&stats, &cfg, seed, b).unwrap();
            let book = PilotSequences::canonical(cfg.pilot_len);
            for m in 0..3 {
                let noise = raw_pilot_noise(&cfg, seed, b, m);
                let y = received_pilot_signal(&block, &stats, &cfg, &noise, &book, m);
                for k in 0..4 {
                    let yk = despread(&y, &book, stats.pilots.pilot_of[k]);
                    for n in 0..2 {
                        let direct = block.ypk(m, k)[n];
                        assert!((yk[n] - direct).norm() <= 1e-12 * direct.norm(), "{} vs {}", yk[n], direct);
                    }
                }
            }
        }
    }

    #[test]
    fn dft_book_despreads_signal_part_identically() {
        // Signal part only: noise enters through a different (equally distributed) projection.
        let (cfg, stats) = small();
        let block = draw_block(&stats, &cfg, 2, 0).unwrap();
        let book = PilotSequences::dft(cfg.pilot_len);
        let zero_noise = CMatrix::zeros(cfg.antennas, cfg.pilot_len);
        let tau_p = cfg.pilot_len as f64;
        for m in 0..3 {
            let y = received_pilot_signal(&block, &stats, &cfg, &zero_noise, &book, m);
            for k in 0..4 {
                let yk = despread(&y, &book, stats.pilots.pilot_of[k]);
                for n in 0..2 {
                    let expect: Complex64 = stats
                        .coset(k)
                        .iter()
                        .map(|&l| block.h(m, l)[n] * (cfg.pilot_power(l).sqrt() * tau_p))
                        .sum();
                    assert!((yk[n] - expect).norm() <= 1e-12 * expect.norm());
                }
            }
        }
    }

    #[test]
    fn blocks_are_reproducible_and_distinct() {
        let (cfg, stats) = small();
        let a = draw_block(&stats, &cfg, 4, 10).unwrap();
        let b = draw_block(&stats, &cfg, 4, 10).unwrap();
        assert_eq!(a, b);
        let c = draw_block(&stats, &cfg, 4, 11).unwrap();
        assert_ne!(a.h, c.h);
    }
}
