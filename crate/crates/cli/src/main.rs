//! Command-line driver for the cell-free uplink SE experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use cellfree::experiment::{run_experiment, ExperimentError, ExperimentSpec};
use cellfree::selftest::{run_selftest, UPSILON_BLOCKS};
use clap::{Args, Parser, Subcommand};

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERICS: u8 = 2;

#[derive(Parser)]
#[command(name = "cellfree", version, about = "Cell-free massive MIMO uplink SE simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a sweep and write results.csv and summary.json.
    Run {
        #[command(flatten)]
        source: Source,
        /// Output directory (overrides `output_dir`; default `results`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads.
        #[arg(long, env = "CELLFREE_THREADS")]
        threads: Option<usize>,
    },
    /// Parse and check a config without running it.
    Validate {
        #[command(flatten)]
        source: Source,
    },
    /// Run the invariant suite and the LMMSE closed-form oracle.
    Selftest {
        /// Blocks for the brute-force oracle.
        #[arg(long, default_value_t = UPSILON_BLOCKS)]
        blocks: usize,
        #[arg(long, env = "CELLFREE_THREADS")]
        threads: Option<usize>,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct Source {
    /// Config file (flat TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset the config is layered on: desk, full, full-cdf.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides `master_seed`.
    #[arg(long, env = "CELLFREE_SEED")]
    seed: Option<u64>,
}

impl Source {
    fn load(&self) -> Result<ExperimentSpec, ExperimentError> {
        let mut spec = match &self.config {
            Some(path) => ExperimentSpec::from_file(path, self.preset.as_deref())?,
            None => ExperimentSpec::preset(self.preset.as_deref().unwrap_or("desk"))?,
        };
        if let Some(seed) = self.seed {
            spec.master_seed = seed;
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn init_threads(threads: Option<usize>) -> Result<(), String> {
    if let Some(n) = threads {
        if n == 0 {
            return Err("--threads must be at least 1".into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn fail(e: &ExperimentError) -> ExitCode {
    eprintln!("error: {e}");
    if e.is_config() || matches!(e, ExperimentError::Io { .. }) {
        ExitCode::from(EXIT_CONFIG)
    } else {
        ExitCode::from(EXIT_NUMERICS)
    }
}

fn describe(spec: &ExperimentSpec) -> String {
    let points = spec.points().len();
    format!(
        "{}: {points} sweep point(s) x {} drop(s), {} blocks/drop, mode {:?}, seed {}",
        spec.name, spec.n_drops, spec.n_blocks, spec.mode, spec.master_seed
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { source, out, threads } => {
            if let Err(e) = init_threads(threads) {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_CONFIG);
            }
            let spec = match source.load() {
                Ok(s) => s,
                Err(e) => return fail(&e),
            };
            let dir = out
                .or_else(|| spec.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("results"));
            eprintln!("{}", describe(&spec));
            match run_experiment(&spec, &dir) {
                Ok(summary) => {
                    for p in &summary.points {
                        println!(
                            "M={} N={} sigma_phi={} {} {} {}: mean SE {:.4}, p5 {:.4}",
                            p.ap_count, p.antennas, p.sigma_phi_deg, p.estimator, p.combiner, p.method, p.mean_se, p.cdf.p5
                        );
                    }
                    for c in &summary.cross_validation {
                        println!(
                            "cross-check M={} N={} sigma_phi={} {}: max |cf - mc| / cf = {:.3}%",
                            c.ap_count,
                            c.antennas,
                            c.sigma_phi_deg,
                            c.estimator,
                            100.0 * c.max_rel_gap
                        );
                    }
                    println!("wrote {}", dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Validate { source } => match source.load() {
            Ok(spec) => {
                println!("ok {}", describe(&spec));
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Command::Selftest { blocks, threads, json } => {
            if let Err(e) = init_threads(threads) {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_CONFIG);
            }
            let report = match run_selftest(blocks) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_NUMERICS);
                }
            };
            if json {
                match serde_json::to_string_pretty(&report) {
                    Ok(s) => println!("{s}"),
                    Err(e) => {
                        eprintln!("error: {e}");
                        return ExitCode::from(EXIT_NUMERICS);
                    }
                }
            } else {
                for c in &report.checks {
                    println!("[{}] {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
                }
                let v = &report.verdict;
                for r in &v.readings {
                    println!(
                        "[{}] upsilon1 ({} reading, {} blocks): max |z| {:.2}; d max |z| {:.2}; off-diagonal max |z| {:.2}",
                        if r.matches { "match" } else { "mismatch" },
                        r.reading,
                        v.n_blocks,
                        r.max_z_upsilon1,
                        r.max_z_d,
                        r.max_z_offdiag
                    );
                }
            }
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_NUMERICS)
            }
        }
    }
}
