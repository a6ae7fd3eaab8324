//! Structural invariant suite and the brute-force check of the LMMSE `Upsilon1` entries.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::channel::draw_block;
use crate::closed_form::{cf_terms, cf_terms_lmmse, cf_terms_mmse, ClosedFormTerms, TraceReading};
use crate::config::SystemConfig;
use crate::estimation::{build_statistics, estimate, Estimator, EstimatorStatistics};
use crate::experiment::{run_rows, summarize, ExperimentSpec, Mode};
use crate::linalg::{gauss_hermite_nodes, hermitian_deviation, CMatrix, CVector, HermitianMatrix, NumericsError};
use crate::oracle::effective_moments;
use crate::receiver::{
    equal_weight_sinr, mc_se_pairs, optimal_lsfd, single_ap_sinr, sinr_with_weights, Combiner, McOptions,
};
use crate::scenario::{build_drop, ScenarioStatistics};

/// Blocks used by the `Upsilon1` oracle.
pub const UPSILON_BLOCKS: usize = 1_000_000;
/// Agreement threshold in standard errors.
pub const UPSILON_Z_LIMIT: f64 = 3.0;
pub const UPSILON_DROP_SEED: u64 = 23;
pub const UPSILON_BLOCK_SEED: u64 = 2023;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReadingOutcome {
    pub reading: String,
    /// Largest |z| of the `Upsilon1` diagonal against `E{|G|^2} - Gamma1`.
    pub max_z_upsilon1: f64,
    /// Largest |z| of `d` against `E{G}`.
    pub max_z_d: f64,
    /// Largest |z| of the off-diagonal `Gamma2` against `E{G_m G_m'^*}`.
    pub max_z_offdiag: f64,
    pub matches: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpsilonVerdict {
    pub n_blocks: usize,
    pub readings: Vec<ReadingOutcome>,
}

impl UpsilonVerdict {
    pub fn outcome(&self, reading: TraceReading) -> &ReadingOutcome {
        let id = reading.to_string();
        self.readings.iter().find(|r| r.reading == id).expect("both readings evaluated")
    }

    pub fn any_matches(&self) -> bool {
        self.readings.iter().any(|r| r.matches)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
    pub verdict: UpsilonVerdict,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed) && self.verdict.any_matches()
    }
}

/// The fixed shared-pilot instance: `M = 2`, `N = 2`, `K = 2`, one pilot.
pub fn upsilon_instance() -> SystemConfig {
    SystemConfig {
        ap_count: 2,
        antennas: 2,
        ue_count: 2,
        pilot_len: 1,
        coherence_len: 200,
        area_side_m: 150.0,
        asd_deg: 20.0,
        ..SystemConfig::default()
    }
}

/// Compares the LMMSE coset terms of both readings with brute-force moments.
pub fn upsilon_verdict(n_blocks: usize) -> Result<UpsilonVerdict, NumericsError> {
    let cfg = upsilon_instance();
    let stats = build_drop(&cfg, UPSILON_DROP_SEED).map_err(|e| match e {
        crate::scenario::ScenarioError::Numerics(n) => n,
        _ => NumericsError::SingularMatrix,
    })?;
    let es = build_statistics(&stats, &cfg)?;
    let mc = effective_moments(&stats, &es, &cfg, Estimator::Lmmse, UPSILON_BLOCK_SEED, n_blocks)?;
    let mut readings = Vec::new();
    for reading in [TraceReading::SqrtFactor, TraceReading::Derived] {
        let t = cf_terms_lmmse(&stats, &es, &cfg, reading)?;
        let (mut zu, mut zd, mut zo) = (0.0_f64, 0.0_f64, 0.0_f64);
        for k in 0..cfg.ue_count {
            for c in &t.ues[k].coset {
                let ups1 = c.upsilon1.as_ref().expect("lmmse terms");
                for m in 0..cfg.ap_count {
                    let abs2 = mc.abs2(k, c.l, m);
                    let oracle_ups1 = crate::oracle::Estimate {
                        mean: abs2.mean - t.ues[k].gamma1[c.l][m],
                        stderr: abs2.stderr,
                    };
                    zu = zu.max(oracle_ups1.z(ups1[m]).abs());
                    zd = zd.max(mc.mean(k, c.l, m).z(c.cross[m]));
                    for mp in 0..cfg.ap_count {
                        if mp != m {
                            zo = zo.max(mc.cross(k, c.l, m, mp).z(c.gamma2[(m, mp)]));
                        }
                    }
                }
            }
        }
        readings.push(ReadingOutcome {
            reading: reading.to_string(),
            max_z_upsilon1: zu,
            max_z_d: zd,
            max_z_offdiag: zo,
            matches: zu < UPSILON_Z_LIMIT,
        });
    }
    Ok(UpsilonVerdict { n_blocks, readings })
}

fn check(name: &'static str, result: Result<String, String>) -> Check {
    match result {
        Ok(detail) => Check {
            name,
            passed: true,
            detail,
        },
        Err(detail) => Check {
            name,
            passed: false,
            detail,
        },
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn drops(cfg: &SystemConfig, seeds: std::ops::Range<u64>) -> Result<Vec<(ScenarioStatistics, EstimatorStatistics)>, String> {
    seeds
        .map(|s| {
            let stats = build_drop(cfg, s).map_err(|e| e.to_string())?;
            let es = build_statistics(&stats, cfg).map_err(|e| e.to_string())?;
            Ok((stats, es))
        })
        .collect()
}

fn suite_config() -> SystemConfig {
    SystemConfig {
        ap_count: 8,
        antennas: 4,
        ue_count: 6,
        pilot_len: 3,
        area_side_m: 500.0,
        ..SystemConfig::default()
    }
}

fn check_quadrature() -> Result<String, String> {
    let sqrt_pi = std::f64::consts::PI.sqrt();
    for order in [1, 2, 10, 100, 256] {
        let (x, w) = gauss_hermite_nodes(order).map_err(|e| e.to_string())?;
        let total: f64 = w.iter().sum();
        ensure((total - sqrt_pi).abs() <= 1e-12, || format!("order {order}: weight sum {total}"))?;
        if order >= 2 {
            let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
            ensure((m2 - sqrt_pi / 2.0).abs() <= 1e-12, || format!("order {order}: second moment {m2}"))?;
        }
    }
    Ok("weights and second moments within 1e-12".into())
}

fn check_hermitian_psd(set: &[(ScenarioStatistics, EstimatorStatistics)]) -> Result<String, String> {
    let mut count = 0;
    let mut check_psd = |what: &str, h: &HermitianMatrix, strict: bool| -> Result<(), String> {
        count += 1;
        let dev = hermitian_deviation(h.matrix());
        ensure(dev <= 1e-12, || format!("{what}: Hermitian deviation {dev:e}"))?;
        let lam = h.min_relative_eigenvalue();
        if strict {
            ensure(lam > 0.0, || format!("{what}: not positive definite ({lam:e})"))
        } else {
            ensure(lam >= -1e-10, || format!("{what}: min relative eigenvalue {lam:e}"))
        }
    };
    for (d, (stats, es)) in set.iter().enumerate() {
        for m in 0..stats.ap_count {
            for k in 0..stats.ue_count {
                check_psd(&format!("drop {d} R[{m},{k}]"), stats.r(m, k), false)?;
                let link = es.link(m, k);
                check_psd(&format!("drop {d} Psi[{m},{k}]"), &link.psi, true)?;
                check_psd(&format!("drop {d} Psi'[{m},{k}]"), &link.psi_prime, true)?;
                for est in Estimator::ALL {
                    check_psd(&format!("drop {d} C_{est}[{m},{k}]"), &link.moments(est).error_cov, false)?;
                }
            }
        }
    }
    Ok(format!("{count} matrices Hermitian within 1e-12, PSD within -1e-10 (Psi strictly PD)"))
}

fn check_beta_split(set: &[(ScenarioStatistics, EstimatorStatistics)]) -> Result<String, String> {
    for (stats, _) in set {
        for i in 0..stats.beta.len() {
            let (b, l, n) = (stats.beta[i], stats.beta_los[i], stats.beta_nlos[i]);
            ensure((l + n - b).abs() <= 1e-12 * b, || format!("link {i}: {l} + {n} != {b}"))?;
            let tr = stats.correlation[i].trace_re();
            let expect = stats.antennas as f64 * n;
            ensure((tr - expect).abs() <= 1e-12 * expect, || format!("link {i}: tr R = {tr}, N beta_nlos = {expect}"))?;
            let los2 = stats.los[i].norm_squared();
            ensure((los2 - stats.antennas as f64 * l).abs() <= 1e-12 * expect.max(los2), || {
                format!("link {i}: ||hbar||^2 = {los2}")
            })?;
        }
    }
    Ok("beta_los + beta_nlos = beta, tr R = N beta_nlos, ||hbar||^2 = N beta_los (1e-12 relative)".into())
}

fn same_terms(a: &ClosedFormTerms, b: &ClosedFormTerms) -> bool {
    a.ues == b.ues
}

fn check_ew_equals_mmse() -> Result<String, String> {
    let cfg = SystemConfig {
        antennas: 1,
        ..suite_config()
    };
    for (stats, es) in drops(&cfg, 0..2)? {
        for (i, link) in es.links.iter().enumerate() {
            ensure(link.ew == link.mmse, || format!("link {i}: EW statistics differ from MMSE"))?;
        }
        let block = draw_block(&stats, &cfg, 5, 0).map_err(|e| e.to_string())?;
        let a = estimate(Estimator::Mmse, &block, &es, &stats, &cfg);
        let b = estimate(Estimator::Ew, &block, &es, &stats, &cfg);
        ensure(a.hhat == b.hhat, || "estimates differ".into())?;
        let ta = cf_terms(Estimator::Mmse, &stats, &es, &cfg, TraceReading::Derived).map_err(|e| e.to_string())?;
        let tb = cf_terms(Estimator::Ew, &stats, &es, &cfg, TraceReading::Derived).map_err(|e| e.to_string())?;
        ensure(same_terms(&ta, &tb), || "closed-form terms differ".into())?;
    }
    Ok("statistics, estimates and closed-form terms bit-identical at N = 1".into())
}

fn rel(a: &CMatrix, b: &CMatrix) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

fn check_lmmse_collapse() -> Result<String, String> {
    let cfg = suite_config();
    let mut worst = 0.0_f64;
    for seed in 0..2 {
        let stats = build_drop(&cfg, seed).map_err(|e| e.to_string())?.without_los();
        let es = build_statistics(&stats, &cfg).map_err(|e| e.to_string())?;
        let a = cf_terms_mmse(&stats, &es, &cfg);
        let b = cf_terms_lmmse(&stats, &es, &cfg, TraceReading::Derived).map_err(|e| e.to_string())?;
        for k in 0..cfg.ue_count {
            worst = worst.max((&a.ues[k].b - &b.ues[k].b).norm() / a.ues[k].b.norm());
            for l in 0..cfg.ue_count {
                worst = worst.max(rel(&b.gamma(k, l), &a.gamma(k, l)));
            }
        }
    }
    ensure(worst <= 1e-10, || format!("relative deviation {worst:e}"))?;
    Ok(format!("LMMSE terms equal MMSE terms at hbar = 0 (max rel {worst:.1e})"))
}

fn check_mse_order(set: &[(ScenarioStatistics, EstimatorStatistics)]) -> Result<String, String> {
    for (stats, es) in set {
        for m in 0..stats.ap_count {
            for k in 0..stats.ue_count {
                let link = es.link(m, k);
                let t = link.c_mmse().trace_re();
                let slack = 1e-12 * stats.r(m, k).trace_re();
                ensure(t <= link.c_ew().trace_re() + slack, || format!("({m},{k}): MSE mmse > ew"))?;
                ensure(t <= link.c_lmmse().trace_re() + slack, || format!("({m},{k}): MSE mmse > lmmse"))?;
            }
        }
    }
    Ok("tr C_mmse <= tr C_ew, tr C_lmmse on every link".into())
}

fn check_denominators(set: &[(ScenarioStatistics, EstimatorStatistics)], cfg: &SystemConfig) -> Result<String, String> {
    let powers = cfg.data_powers();
    for (stats, es) in set {
        for est in Estimator::ALL {
            let t = cf_terms(est, stats, es, cfg, TraceReading::Derived).map_err(|e| e.to_string())?;
            let dev = t.max_hermitian_deviation();
            ensure(dev <= 1e-12, || format!("{est}: Gamma Hermitian deviation {dev:e}"))?;
            let lsfd = t.to_lsfd();
            for k in 0..stats.ue_count {
                let d = HermitianMatrix::new(lsfd.denominator(k, &powers, cfg.sigma2())).map_err(|e| e.to_string())?;
                let lam = d.min_relative_eigenvalue();
                ensure(lam > 0.0, || format!("{est} UE {k}: denominator eigenvalue {lam:e}"))?;
            }
        }
    }
    Ok("assembled Gamma_k Hermitian and positive definite".into())
}

fn check_lsfd_probes(set: &[(ScenarioStatistics, EstimatorStatistics)], cfg: &SystemConfig) -> Result<String, String> {
    let powers = cfg.data_powers();
    let sigma2 = cfg.sigma2();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (stats, es) = &set[0];
    let lsfd = cf_terms_mmse(stats, es, cfg).to_lsfd();
    let mm = stats.ap_count;
    for k in 0..stats.ue_count {
        let opt = optimal_lsfd(&lsfd, k, &powers, sigma2).map_err(|e| e.to_string())?;
        let at_opt = sinr_with_weights(&lsfd, k, &opt.weights, &powers, sigma2);
        ensure((at_opt - opt.sinr).abs() <= 1e-10 * opt.sinr, || format!("UE {k}: quotient at optimum {at_opt} vs {}", opt.sinr))?;
        ensure(equal_weight_sinr(&lsfd, k, &powers, sigma2) <= opt.sinr * (1.0 + 1e-12), || format!("UE {k}: equal weights beat optimum"))?;
        ensure(single_ap_sinr(&lsfd, k, &powers, sigma2) <= opt.sinr * (1.0 + 1e-12), || format!("UE {k}: single AP beats optimum"))?;
        for _ in 0..200 {
            let a = CVector::from_fn(mm, |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
            let s = sinr_with_weights(&lsfd, k, &a, &powers, sigma2);
            ensure(s <= opt.sinr * (1.0 + 1e-12), || format!("UE {k}: random weights beat optimum"))?;
            let c = Complex64::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let s2 = sinr_with_weights(&lsfd, k, &(&a * c), &powers, sigma2);
            ensure((s - s2).abs() <= 1e-12 * s, || format!("UE {k}: quotient not scale invariant ({s} vs {s2})"))?;
        }
    }
    Ok("optimum dominates random, equal-weight and single-AP weights; quotient scale invariant within 1e-12".into())
}

fn check_prelog(set: &[(ScenarioStatistics, EstimatorStatistics)], cfg: &SystemConfig) -> Result<String, String> {
    let (stats, es) = &set[0];
    let r = crate::closed_form::closed_form_se(Estimator::Ew, stats, es, cfg, TraceReading::Derived).map_err(|e| e.to_string())?;
    for k in 0..r.se.len() {
        ensure(r.sinr[k] >= 0.0, || format!("UE {k}: negative SINR"))?;
        ensure(r.se[k] == cfg.prelog() * (1.0 + r.sinr[k]).log2(), || format!("UE {k}: SE != prelog log2(1 + SINR)"))?;
    }
    Ok("SE = (tau_u / tau_c) log2(1 + SINR) exactly, SINR >= 0".into())
}

fn tiny_spec() -> ExperimentSpec {
    ExperimentSpec {
        name: "selftest".into(),
        base: SystemConfig {
            ue_count: 4,
            pilot_len: 2,
            area_side_m: 300.0,
            ..SystemConfig::desk()
        },
        ap_counts: vec![3],
        antennas: vec![2],
        asd_deg: vec![10.0],
        estimators: Estimator::ALL.to_vec(),
        combiners: Combiner::ALL.to_vec(),
        n_drops: 2,
        n_blocks: 200,
        mode: Mode::Both,
        ..ExperimentSpec::preset("desk").expect("desk preset")
    }
}

fn csv_bytes(rows: &[crate::experiment::ResultRow]) -> Result<Vec<u8>, String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| e.to_string())?;
    }
    w.into_inner().map_err(|e| e.to_string())
}

fn check_determinism() -> Result<String, String> {
    let spec = tiny_spec();
    let a = run_rows(&spec).map_err(|e| e.to_string())?;
    let b = run_rows(&spec).map_err(|e| e.to_string())?;
    ensure(csv_bytes(&a)? == csv_bytes(&b)?, || "CSV rows differ between reruns".into())?;
    let ja = serde_json::to_vec(&summarize(&spec, &a).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let jb = serde_json::to_vec(&summarize(&spec, &b).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure(ja == jb, || "summaries differ between reruns".into())?;
    let cfg = SystemConfig {
        ap_count: 3,
        ..spec.base.clone()
    };
    let stats = build_drop(&cfg, 4).map_err(|e| e.to_string())?;
    let es = build_statistics(&stats, &cfg).map_err(|e| e.to_string())?;
    let pairs = [(Estimator::Mmse, Combiner::Lmmse)];
    let opts = McOptions::new(300, 9);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| e.to_string())?
            .install(|| mc_se_pairs(&stats, &es, &cfg, &pairs, &opts))
            .map_err(|e| e.to_string())
    };
    ensure(run(1)? == run(3)?, || "Monte-Carlo output depends on thread count".into())?;
    Ok(format!("{} rows byte-identical across reruns; 1 vs 3 threads identical", a.len()))
}

/// Runs the structural invariants (fast, exact or tightly bounded).
pub fn structural_checks() -> Vec<Check> {
    let cfg = suite_config();
    let set = drops(&cfg, 0..3);
    let with_set = |f: &dyn Fn(&[(ScenarioStatistics, EstimatorStatistics)]) -> Result<String, String>| match &set {
        Ok(s) => f(s),
        Err(e) => Err(e.clone()),
    };
    vec![
        check("gauss_hermite_quadrature", check_quadrature()),
        check("hermitian_psd_matrices", with_set(&check_hermitian_psd)),
        check("large_scale_split", with_set(&check_beta_split)),
        check("ew_equals_mmse_single_antenna", check_ew_equals_mmse()),
        check("lmmse_equals_mmse_without_los", check_lmmse_collapse()),
        check("estimator_mse_order", with_set(&check_mse_order)),
        check("lsfd_denominator_pd", with_set(&|s| check_denominators(s, &cfg))),
        check("lsfd_optimality_and_scale", with_set(&|s| check_lsfd_probes(s, &cfg))),
        check("se_prelog", with_set(&|s| check_prelog(s, &cfg))),
        check("deterministic_reruns", check_determinism()),
    ]
}

pub fn run_selftest(oracle_blocks: usize) -> Result<SelftestReport, NumericsError> {
    Ok(SelftestReport {
        checks: structural_checks(),
        verdict: upsilon_verdict(oracle_blocks)?,
    })
}
