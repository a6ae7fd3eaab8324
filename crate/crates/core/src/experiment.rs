//! Batch experiments: sweep grids, drop loops, CSV rows and JSON summaries.
//!
//! The config file is flat TOML. Experiment keys (see [`EXPERIMENT_KEYS`])
//! drive the sweep; every other key is a [`SystemConfig`] field overriding
//! the preset. `ap_count`, `antennas` and `asd_deg` accept a scalar or a
//! list, lists being sweep axes.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::closed_form::{closed_form_se, TraceReading};
use crate::config::{ConfigError, SystemConfig};
use crate::estimation::{build_statistics, Estimator};
use crate::linalg::NumericsError;
use crate::receiver::{mc_se_pairs, Combiner, GammaEstimator, McOptions, ReceiverError, SeReport};
use crate::rng::child_seed;
use crate::scenario::{build_drop, ScenarioError};

pub const SCHEMA_VERSION: u32 = 1;

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.json";

pub const PRESETS: [&str; 3] = ["desk", "full", "full-cdf"];

/// Keys consumed by the experiment layer; the rest belong to [`SystemConfig`].
pub const EXPERIMENT_KEYS: [&str; 14] = [
    "name",
    "preset",
    "mode",
    "estimators",
    "combiners",
    "n_drops",
    "n_blocks",
    "batches",
    "master_seed",
    "output_dir",
    "gamma_estimator",
    "trace_reading",
    "record_timing",
    "schema_version",
];

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("config error{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Config { line: Option<usize>, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Receiver(#[from] ReceiverError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("no SE values to summarize")]
    EmptyInput,
}

impl ExperimentError {
    /// Whether the failure is the user's input rather than the numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            ExperimentError::Config { .. } | ExperimentError::Scenario(ScenarioError::Config(_))
        )
    }
}

impl From<ConfigError> for ExperimentError {
    fn from(e: ConfigError) -> Self {
        ExperimentError::Config {
            line: None,
            message: e.to_string(),
        }
    }
}

fn config_err(line: Option<usize>, message: impl Into<String>) -> ExperimentError {
    ExperimentError::Config {
        line,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    MonteCarlo,
    ClosedForm,
    #[default]
    Both,
}

impl Mode {
    fn runs_mc(self) -> bool {
        matches!(self, Mode::MonteCarlo | Mode::Both)
    }

    fn runs_cf(self) -> bool {
        matches!(self, Mode::ClosedForm | Mode::Both)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub base: SystemConfig,
    pub ap_counts: Vec<usize>,
    pub antennas: Vec<usize>,
    pub asd_deg: Vec<f64>,
    pub estimators: Vec<Estimator>,
    pub combiners: Vec<Combiner>,
    pub n_drops: usize,
    pub n_blocks: usize,
    /// Jackknife batches per Monte-Carlo run.
    pub batches: usize,
    pub master_seed: u64,
    pub output_dir: Option<PathBuf>,
    pub mode: Mode,
    pub gamma_estimator: GammaEstimator,
    pub trace_reading: TraceReading,
    /// Fill the `wall_ms` column (makes outputs run-dependent).
    pub record_timing: bool,
}

impl ExperimentSpec {
    /// Named preset. `desk` finishes in minutes; `full` (M up to 100, K = 40)
    /// and `full-cdf` take hours.
    pub fn preset(name: &str) -> Result<Self, ExperimentError> {
        let desk = Self {
            name: "desk".into(),
            base: SystemConfig::desk(),
            ap_counts: vec![20],
            antennas: vec![2],
            asd_deg: vec![15.0],
            estimators: Estimator::ALL.to_vec(),
            combiners: Combiner::ALL.to_vec(),
            n_drops: 20,
            n_blocks: 20_000,
            batches: 10,
            master_seed: 1,
            output_dir: None,
            mode: Mode::Both,
            gamma_estimator: GammaEstimator::FullSample,
            trace_reading: TraceReading::Derived,
            record_timing: false,
        };
        match name {
            "desk" => Ok(desk),
            "full" => Ok(Self {
                name: "full".into(),
                base: SystemConfig::default(),
                ap_counts: vec![20, 40, 60, 80, 100],
                antennas: vec![1, 2, 4],
                n_drops: 50,
                n_blocks: 1000,
                gamma_estimator: GammaEstimator::ApFactorized,
                ..desk
            }),
            "full-cdf" => Ok(Self {
                name: "full-cdf".into(),
                base: SystemConfig::default(),
                ap_counts: vec![100],
                antennas: vec![4],
                asd_deg: vec![5.0, 30.0],
                estimators: vec![Estimator::Mmse],
                n_drops: 50,
                n_blocks: 1000,
                gamma_estimator: GammaEstimator::ApFactorized,
                ..desk
            }),
            other => Err(config_err(
                None,
                format!("unknown preset `{other}` (expected one of {})", PRESETS.join(", ")),
            )),
        }
    }

    /// Parses a flat TOML config on top of `preset` (or the file's own
    /// `preset` key, or `desk`).
    pub fn from_toml_str(src: &str, preset: Option<&str>) -> Result<Self, ExperimentError> {
        let mut table: toml::Table = src.parse().map_err(|e: toml::de::Error| {
            let line = e.span().map(|s| src[..s.start.min(src.len())].matches('\n').count() + 1);
            config_err(line, e.message().to_string())
        })?;
        let take = |table: &mut toml::Table, key: &str| table.remove(key);
        let file_preset = match take(&mut table, "preset") {
            Some(v) => Some(parse_value::<String>(src, "preset", v)?),
            None => None,
        };
        let mut spec = Self::preset(preset.or(file_preset.as_deref()).unwrap_or("desk"))?;
        if let Some(v) = take(&mut table, "schema_version") {
            let version: u32 = parse_value(src, "schema_version", v)?;
            if version != SCHEMA_VERSION {
                return Err(config_err(
                    line_of(src, "schema_version"),
                    format!("unsupported schema_version {version} (expected {SCHEMA_VERSION})"),
                ));
            }
        }
        if let Some(v) = take(&mut table, "name") {
            spec.name = parse_value(src, "name", v)?;
        }
        if let Some(v) = take(&mut table, "mode") {
            spec.mode = parse_value(src, "mode", v)?;
        }
        if let Some(v) = take(&mut table, "estimators") {
            let ids: Vec<String> = parse_value(src, "estimators", v)?;
            spec.estimators = ids
                .iter()
                .map(|s| s.parse().map_err(|e: String| config_err(line_of(src, "estimators"), e)))
                .collect::<Result<_, _>>()?;
        }
        if let Some(v) = take(&mut table, "combiners") {
            let ids: Vec<String> = parse_value(src, "combiners", v)?;
            spec.combiners = ids
                .iter()
                .map(|s| s.parse().map_err(|e: String| config_err(line_of(src, "combiners"), e)))
                .collect::<Result<_, _>>()?;
        }
        if let Some(v) = take(&mut table, "n_drops") {
            spec.n_drops = parse_value(src, "n_drops", v)?;
        }
        if let Some(v) = take(&mut table, "n_blocks") {
            spec.n_blocks = parse_value(src, "n_blocks", v)?;
        }
        if let Some(v) = take(&mut table, "batches") {
            spec.batches = parse_value(src, "batches", v)?;
        }
        if let Some(v) = take(&mut table, "master_seed") {
            spec.master_seed = parse_value(src, "master_seed", v)?;
        }
        if let Some(v) = take(&mut table, "output_dir") {
            spec.output_dir = Some(PathBuf::from(parse_value::<String>(src, "output_dir", v)?));
        }
        if let Some(v) = take(&mut table, "gamma_estimator") {
            spec.gamma_estimator = parse_value(src, "gamma_estimator", v)?;
        }
        if let Some(v) = take(&mut table, "trace_reading") {
            let s: String = parse_value(src, "trace_reading", v)?;
            spec.trace_reading = s.parse().map_err(|e: String| config_err(line_of(src, "trace_reading"), e))?;
        }
        if let Some(v) = take(&mut table, "record_timing") {
            spec.record_timing = parse_value(src, "record_timing", v)?;
        }
        if let Some(v) = take(&mut table, "ap_count") {
            spec.ap_counts = parse_axis(src, "ap_count", v)?;
        }
        if let Some(v) = take(&mut table, "antennas") {
            spec.antennas = parse_axis(src, "antennas", v)?;
        }
        if let Some(v) = take(&mut table, "asd_deg") {
            spec.asd_deg = parse_axis(src, "asd_deg", v)?;
        }
        // remaining keys override the base system config
        let mut base = match toml::Value::try_from(&spec.base) {
            Ok(toml::Value::Table(t)) => t,
            _ => unreachable!("SystemConfig serializes to a table"),
        };
        let overridden: Vec<String> = table.keys().cloned().collect();
        for (k, v) in table {
            base.insert(k, v);
        }
        spec.base = SystemConfig::deserialize(toml::Value::Table(base)).map_err(|e| {
            let line = overridden.iter().find(|k| e.message().contains(&format!("`{k}`"))).and_then(|k| line_of(src, k));
            config_err(line, e.message().to_string())
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path, preset: Option<&str>) -> Result<Self, ExperimentError> {
        let src = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&src, preset)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        for (key, empty) in [
            ("ap_count", self.ap_counts.is_empty()),
            ("antennas", self.antennas.is_empty()),
            ("asd_deg", self.asd_deg.is_empty()),
            ("estimators", self.estimators.is_empty()),
            ("combiners", self.combiners.is_empty()),
        ] {
            if empty {
                return Err(config_err(None, format!("`{key}` must be nonempty")));
            }
        }
        if self.n_drops == 0 {
            return Err(config_err(None, "n_drops must be at least 1"));
        }
        if self.mode == Mode::ClosedForm && self.combiners.iter().any(|c| *c != Combiner::Mr) {
            return Err(config_err(None, "mode = \"closed_form\" requires combiners = [\"mr\"]"));
        }
        if self.mode.runs_mc() && (self.batches < 2 || self.n_blocks < 2 * self.batches) {
            return Err(config_err(
                None,
                format!("need batches >= 2 and n_blocks >= 2 * batches (got {} and {})", self.batches, self.n_blocks),
            ));
        }
        for point in self.points() {
            point.config.validate()?;
        }
        Ok(())
    }

    /// Cartesian product of the sweep axes, `M` outermost.
    pub fn points(&self) -> Vec<SweepPoint> {
        let mut out = Vec::new();
        for &m in &self.ap_counts {
            for &n in &self.antennas {
                for &asd in &self.asd_deg {
                    out.push(SweepPoint {
                        config: SystemConfig {
                            ap_count: m,
                            antennas: n,
                            asd_deg: asd,
                            ..self.base.clone()
                        },
                        seed: point_seed(self.master_seed, m),
                    });
                }
            }
        }
        out
    }

    /// `(estimator, combiner)` pairs evaluated by Monte-Carlo.
    pub fn mc_pairs(&self) -> Vec<(Estimator, Combiner)> {
        if !self.mode.runs_mc() {
            return Vec::new();
        }
        self.estimators
            .iter()
            .flat_map(|e| self.combiners.iter().map(move |c| (*e, *c)))
            .collect()
    }

    /// Estimators evaluated in closed form (MR only).
    pub fn cf_estimators(&self) -> Vec<Estimator> {
        if self.mode.runs_cf() && self.combiners.contains(&Combiner::Mr) {
            self.estimators.clone()
        } else {
            Vec::new()
        }
    }
}

fn line_of(src: &str, key: &str) -> Option<usize> {
    src.lines().position(|l| {
        let t = l.trim_start();
        t.strip_prefix(key).is_some_and(|rest| {
            let rest = rest.trim_start();
            rest.starts_with('=')
        })
    })
    .map(|i| i + 1)
}

fn parse_value<T: serde::de::DeserializeOwned>(src: &str, key: &str, v: toml::Value) -> Result<T, ExperimentError> {
    T::deserialize(v).map_err(|e| config_err(line_of(src, key), format!("`{key}`: {}", e.message())))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

fn parse_axis<T: serde::de::DeserializeOwned>(src: &str, key: &str, v: toml::Value) -> Result<Vec<T>, ExperimentError> {
    match parse_value::<OneOrMany<T>>(src, key, v)? {
        OneOrMany::One(x) => Ok(vec![x]),
        OneOrMany::Many(xs) => Ok(xs),
    }
}

/// Seed of a sweep point. Depends only on the master seed and `M`, so
/// points differing only in `N` or the ASD see the same drops (paired
/// comparison), and adding points leaves existing ones untouched.
pub fn point_seed(master: u64, ap_count: usize) -> u64 {
    child_seed(master, ap_count as u64)
}

/// Large-scale seed of drop `d` at a sweep point.
pub fn drop_seed(point_seed: u64, drop: usize) -> u64 {
    child_seed(point_seed, drop as u64)
}

/// Small-scale (block) seed of a drop.
pub fn realization_seed(drop_seed: u64) -> u64 {
    child_seed(drop_seed, 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub config: SystemConfig,
    pub seed: u64,
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub schema_version: u32,
    #[serde(rename = "M")]
    pub ap_count: usize,
    #[serde(rename = "N")]
    pub antennas: usize,
    #[serde(rename = "K")]
    pub ue_count: usize,
    pub tau_p: usize,
    pub sigma_phi_deg: f64,
    pub estimator: String,
    pub combiner: String,
    pub method: String,
    pub drop: usize,
    pub ue: usize,
    pub se_bits_per_use: f64,
    pub stderr: Option<f64>,
    pub wall_ms: Option<f64>,
}

/// Evaluates every configured method on one drop.
pub fn run_drop(
    spec: &ExperimentSpec,
    cfg: &SystemConfig,
    drop_seed: u64,
) -> Result<(Vec<SeReport>, Vec<f64>), ExperimentError> {
    let stats = build_drop(cfg, drop_seed)?;
    let est_stats = build_statistics(&stats, cfg)?;
    let mut reports = Vec::new();
    let mut times = Vec::new();
    for est in spec.cf_estimators() {
        let t = Instant::now();
        reports.push(closed_form_se(est, &stats, &est_stats, cfg, spec.trace_reading)?);
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let pairs = spec.mc_pairs();
    if !pairs.is_empty() {
        let opts = McOptions {
            n_blocks: spec.n_blocks,
            batches: spec.batches,
            gamma: spec.gamma_estimator,
            seed: realization_seed(drop_seed),
        };
        let t = Instant::now();
        let mc = mc_se_pairs(&stats, &est_stats, cfg, &pairs, &opts)?;
        // blocks are shared, so the cost is split evenly across pairs
        let per_pair = t.elapsed().as_secs_f64() * 1e3 / pairs.len() as f64;
        times.extend(std::iter::repeat_n(per_pair, mc.len()));
        reports.extend(mc);
    }
    Ok((reports, times))
}

fn rows_for(spec: &ExperimentSpec, cfg: &SystemConfig, drop: usize, reports: &[SeReport], times: &[f64]) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for (r, t) in reports.iter().zip(times) {
        for k in 0..r.se.len() {
            rows.push(ResultRow {
                schema_version: SCHEMA_VERSION,
                ap_count: cfg.ap_count,
                antennas: cfg.antennas,
                ue_count: cfg.ue_count,
                tau_p: cfg.pilot_len,
                sigma_phi_deg: cfg.asd_deg,
                estimator: r.estimator.id().into(),
                combiner: r.combiner.id().into(),
                method: r.method.id().into(),
                drop,
                ue: k,
                se_bits_per_use: r.se[k],
                stderr: r.stderr.as_ref().map(|s| s[k]),
                wall_ms: spec.record_timing.then_some(*t),
            });
        }
    }
    rows
}

/// Runs the whole sweep, handing each drop's rows to `sink` as soon as
/// they are ready.
pub fn run_with_sink(
    spec: &ExperimentSpec,
    mut sink: impl FnMut(&[ResultRow]) -> Result<(), ExperimentError>,
) -> Result<Vec<ResultRow>, ExperimentError> {
    spec.validate()?;
    let mut all = Vec::new();
    for point in spec.points() {
        for d in 0..spec.n_drops {
            let seed = drop_seed(point.seed, d);
            let (reports, times) = run_drop(spec, &point.config, seed)?;
            let rows = rows_for(spec, &point.config, d, &reports, &times);
            sink(&rows)?;
            all.extend(rows);
        }
    }
    Ok(all)
}

/// In-memory run.
pub fn run_rows(spec: &ExperimentSpec) -> Result<Vec<ResultRow>, ExperimentError> {
    run_with_sink(spec, |_| Ok(()))
}

/// Runs the experiment and writes `results.csv` (flushed per drop) and
/// `summary.json` into `out_dir`.
pub fn run_experiment(spec: &ExperimentSpec, out_dir: &Path) -> Result<Summary, ExperimentError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ExperimentError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let csv_path = out_dir.join(RESULTS_FILE);
    let file = File::create(&csv_path).map_err(io(&csv_path))?;
    let mut writer = csv::Writer::from_writer(BufWriter::new(file));
    let rows = run_with_sink(spec, |rows| {
        for r in rows {
            writer.serialize(r)?;
        }
        writer.flush().map_err(io(&csv_path))
    })?;
    if rows.is_empty() {
        // header only, so consumers still see the schema
        writer.write_record(CSV_COLUMNS)?;
    }
    writer.flush().map_err(io(&csv_path))?;
    let summary = summarize(spec, &rows)?;
    let json_path = out_dir.join(SUMMARY_FILE);
    let mut f = BufWriter::new(File::create(&json_path).map_err(io(&json_path))?);
    serde_json::to_writer_pretty(&mut f, &summary)?;
    f.write_all(b"\n").map_err(io(&json_path))?;
    f.flush().map_err(io(&json_path))?;
    Ok(summary)
}

pub const CSV_COLUMNS: [&str; 14] = [
    "schema_version",
    "M",
    "N",
    "K",
    "tau_p",
    "sigma_phi_deg",
    "estimator",
    "combiner",
    "method",
    "drop",
    "ue",
    "se_bits_per_use",
    "stderr",
    "wall_ms",
];

/// Empirical CDF of per-UE SE values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cdf {
    /// Sorted values.
    pub se: Vec<f64>,
    /// `(i - 0.5) / n`.
    pub level: Vec<f64>,
    /// 95%-likely SE: the `ceil(0.05 n)`-th smallest value.
    pub p5: f64,
}

pub fn summarize_cdf(values: &[f64]) -> Result<Cdf, ExperimentError> {
    if values.is_empty() {
        return Err(ExperimentError::EmptyInput);
    }
    let mut se = values.to_vec();
    se.sort_by(|a, b| a.total_cmp(b));
    let n = se.len();
    let level = (1..=n).map(|i| (i as f64 - 0.5) / n as f64).collect();
    let idx = ((0.05 * n as f64).ceil() as usize).max(1) - 1;
    Ok(Cdf { p5: se[idx], se, level })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    #[serde(rename = "M")]
    pub ap_count: usize,
    #[serde(rename = "N")]
    pub antennas: usize,
    #[serde(rename = "K")]
    pub ue_count: usize,
    pub tau_p: usize,
    pub sigma_phi_deg: f64,
    pub estimator: String,
    pub combiner: String,
    pub method: String,
    pub n_drops: usize,
    pub mean_se: f64,
    pub cdf: Cdf,
}

/// Largest per-UE relative gap between closed form and Monte-Carlo at a point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    #[serde(rename = "M")]
    pub ap_count: usize,
    #[serde(rename = "N")]
    pub antennas: usize,
    pub sigma_phi_deg: f64,
    pub estimator: String,
    pub max_rel_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub name: String,
    pub n_drops: usize,
    pub n_blocks: usize,
    pub points: Vec<PointSummary>,
    pub cross_validation: Vec<CrossValidation>,
}

type PointKey = (usize, usize, u64, String, String, String);

fn key_of(r: &ResultRow) -> PointKey {
    (
        r.ap_count,
        r.antennas,
        r.sigma_phi_deg.to_bits(),
        r.estimator.clone(),
        r.combiner.clone(),
        r.method.clone(),
    )
}

/// Per-point mean SE and CDF, in first-appearance order of the rows.
pub fn summarize(spec: &ExperimentSpec, rows: &[ResultRow]) -> Result<Summary, ExperimentError> {
    let mut keys: Vec<PointKey> = Vec::new();
    for r in rows {
        let k = key_of(r);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut points = Vec::with_capacity(keys.len());
    for key in &keys {
        let sel: Vec<&ResultRow> = rows.iter().filter(|r| key_of(r) == *key).collect();
        let values: Vec<f64> = sel.iter().map(|r| r.se_bits_per_use).collect();
        let first = sel[0];
        let n_drops = {
            let mut d: Vec<usize> = sel.iter().map(|r| r.drop).collect();
            d.dedup();
            d.len()
        };
        points.push(PointSummary {
            ap_count: first.ap_count,
            antennas: first.antennas,
            ue_count: first.ue_count,
            tau_p: first.tau_p,
            sigma_phi_deg: first.sigma_phi_deg,
            estimator: first.estimator.clone(),
            combiner: first.combiner.clone(),
            method: first.method.clone(),
            n_drops,
            mean_se: values.iter().sum::<f64>() / values.len() as f64,
            cdf: summarize_cdf(&values)?,
        });
    }
    let mut cross_validation = Vec::new();
    for r_cf in rows.iter().filter(|r| r.method == "closed_form") {
        let twin = rows.iter().find(|r| {
            r.method == "mc"
                && r.combiner == "mr"
                && r.estimator == r_cf.estimator
                && r.ap_count == r_cf.ap_count
                && r.antennas == r_cf.antennas
                && r.sigma_phi_deg.to_bits() == r_cf.sigma_phi_deg.to_bits()
                && r.drop == r_cf.drop
                && r.ue == r_cf.ue
        });
        let Some(twin) = twin else { continue };
        let gap = if r_cf.se_bits_per_use > 0.0 {
            (r_cf.se_bits_per_use - twin.se_bits_per_use).abs() / r_cf.se_bits_per_use
        } else {
            0.0
        };
        match cross_validation.iter_mut().find(|c: &&mut CrossValidation| {
            c.ap_count == r_cf.ap_count
                && c.antennas == r_cf.antennas
                && c.sigma_phi_deg.to_bits() == r_cf.sigma_phi_deg.to_bits()
                && c.estimator == r_cf.estimator
        }) {
            Some(c) => c.max_rel_gap = c.max_rel_gap.max(gap),
            None => cross_validation.push(CrossValidation {
                ap_count: r_cf.ap_count,
                antennas: r_cf.antennas,
                sigma_phi_deg: r_cf.sigma_phi_deg,
                estimator: r_cf.estimator.clone(),
                max_rel_gap: gap,
            }),
        }
    }
    Ok(Summary {
        schema_version: SCHEMA_VERSION,
        name: spec.name.clone(),
        n_drops: spec.n_drops,
        n_blocks: spec.n_blocks,
        points,
        cross_validation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentSpec {
        let src = r#"
            ap_count = 4
            antennas = 2
            ue_count = 3
            pilot_len = 2
            area_side_m = 300.0
            n_drops = 2
            n_blocks = 200
            combiners = ["mr"]
            estimators = ["mmse", "lmmse"]
        "#;
        ExperimentSpec::from_toml_str(src, None).unwrap()
    }

    #[test]
    fn cdf_small_sample_rules() {
        let c = summarize_cdf(&[2.5]).unwrap();
        assert_eq!((c.se[0], c.level[0], c.p5), (2.5, 0.5, 2.5));
        let c = summarize_cdf(&[4.0, 2.0, 3.0, 1.0]).unwrap();
        assert_eq!(c.p5, 1.0);
        assert_eq!(c.se, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(c.level, vec![0.125, 0.375, 0.625, 0.875]);
        let many: Vec<f64> = (0..40).map(|i| i as f64).collect();
        assert_eq!(summarize_cdf(&many).unwrap().p5, 1.0);
        assert!(matches!(summarize_cdf(&[]), Err(ExperimentError::EmptyInput)));
    }

    #[test]
    fn parses_flat_config_with_axes() {
        let src = r#"
            preset = "desk"
            mode = "monte_carlo"
            ap_count = [10, 20]
            asd_deg = [5, 30.0]
            ue_count = 6
            noise_dbm = -96.0
            n_drops = 3
        "#;
        let spec = ExperimentSpec::from_toml_str(src, None).unwrap();
        assert_eq!(spec.ap_counts, vec![10, 20]);
        assert_eq!(spec.antennas, vec![2]);
        assert_eq!(spec.asd_deg, vec![5.0, 30.0]);
        assert_eq!(spec.base.ue_count, 6);
        assert_eq!(spec.base.noise_dbm, -96.0);
        assert_eq!(spec.mode, Mode::MonteCarlo);
        assert_eq!(spec.points().len(), 4);
        assert!(spec.cf_estimators().is_empty());
    }

    #[test]
    fn config_errors_carry_lines() {
        let err = ExperimentSpec::from_toml_str("n_drops = 2\nbogus_key = 1\n", None).unwrap_err();
        match err {
            ExperimentError::Config { line, message } => {
                assert_eq!(line, Some(2));
                assert!(message.contains("bogus_key"));
            }
            other => panic!("{other:?}"),
        }
        let err = ExperimentSpec::from_toml_str("n_drops = 2\nn_blocks = \"x\"\n", None).unwrap_err();
        assert!(matches!(err, ExperimentError::Config { line: Some(2), .. }));
        let err = ExperimentSpec::from_toml_str("n_drops = [\n", None).unwrap_err();
        assert!(err.is_config());
        let err = ExperimentSpec::from_toml_str("mode = \"closed_form\"\n", None).unwrap_err();
        assert!(err.is_config());
        let err = ExperimentSpec::from_toml_str("n_drops = 0\n", None).unwrap_err();
        assert!(err.is_config());
        let err = ExperimentSpec::from_toml_str("pilot_len = 0\n", None).unwrap_err();
        assert!(err.is_config());
        let err = ExperimentSpec::from_toml_str("estimators = [\"zf\"]\n", None).unwrap_err();
        assert!(err.is_config());
        assert!(ExperimentSpec::from_toml_str("", Some("huge")).unwrap_err().is_config());
    }

    #[test]
    fn presets_validate() {
        for p in PRESETS {
            ExperimentSpec::preset(p).unwrap().validate().unwrap();
        }
        let desk = ExperimentSpec::preset("desk").unwrap();
        assert_eq!(
            (desk.base.ap_count, desk.base.ue_count, desk.base.antennas, desk.base.pilot_len),
            (20, 8, 2, 4)
        );
        assert_eq!((desk.n_drops, desk.n_blocks), (20, 20_000));
    }

    #[test]
    fn seeds_depend_only_on_coordinates() {
        let a = point_seed(5, 20);
        assert_eq!(a, point_seed(5, 20));
        assert_ne!(a, point_seed(5, 21));
        assert_ne!(a, point_seed(6, 20));
        let mut spec = tiny();
        let before = spec.points();
        spec.ap_counts.insert(0, 3);
        let after = spec.points();
        assert_eq!(before[0], after[1]);
        spec.asd_deg = vec![5.0, 30.0];
        spec.antennas = vec![1, 4];
        let pts = spec.points();
        assert!(pts.iter().filter(|p| p.config.ap_count == 4).all(|p| p.seed == pts[4].seed));
        assert_ne!(pts[0].seed, pts[4].seed);
    }

    #[test]
    fn rows_are_deterministic_and_well_formed() {
        let spec = tiny();
        let a = run_rows(&spec).unwrap();
        let b = run_rows(&spec).unwrap();
        assert_eq!(a, b);
        // 2 drops x (2 cf + 2 mc) x 3 UEs
        assert_eq!(a.len(), 2 * 4 * 3);
        for r in &a {
            assert!(r.se_bits_per_use >= 0.0);
            assert!(r.wall_ms.is_none());
            match r.method.as_str() {
                "closed_form" => assert!(r.stderr.is_none()),
                "mc" => assert!(r.stderr.unwrap() > 0.0),
                other => panic!("{other}"),
            }
        }
        let s = summarize(&spec, &a).unwrap();
        assert_eq!(s.points.len(), 4);
        assert_eq!(s.cross_validation.len(), 2);
    }

    #[test]
    fn writes_byte_identical_outputs() {
        let spec = tiny();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        run_experiment(&spec, d1.path()).unwrap();
        run_experiment(&spec, d2.path()).unwrap();
        for f in [RESULTS_FILE, SUMMARY_FILE] {
            let a = fs::read(d1.path().join(f)).unwrap();
            let b = fs::read(d2.path().join(f)).unwrap();
            assert_eq!(a, b, "{f}");
        }
        let text = fs::read_to_string(d1.path().join(RESULTS_FILE)).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
    }
}
