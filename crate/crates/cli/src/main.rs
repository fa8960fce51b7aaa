use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use holdout_cli::config::ExperimentConfig;
use holdout_cli::experiment::Aggregate;
use holdout_cli::run_experiment;
use holdout_cli::sweep::{parse_values, run_sweep, Axis};
use holdout_core::committee::{
    byz_majority_prob_exact, byz_majority_prob_mc, committee_size_bound, committee_size_bound_real,
    Population,
};
use holdout_verify::{Faults, Suite, CHECKS};

const DEFAULT_OUT_DIR: &str = "holdout-out";

#[derive(Parser)]
#[command(
    name = "holdout",
    version,
    about = "HoldOut SGD experiments and checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configured experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Base seed, replacing the config's seed and seed list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "HOLDOUT_OUT_DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Run an experiment once per value of one parameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// One of f, N_p, N_c, m_c, gamma, n.
        #[arg(long)]
        axis: Axis,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "HOLDOUT_OUT_DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Committee size bound and Byzantine-majority probabilities.
    Bound {
        /// Number of epochs T.
        #[arg(long = "epochs", short = 'T')]
        epochs: u64,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        f: f64,
        /// Population size; adds the exact and sampled majority probability.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the acceptance checks.
    Verify {
        #[arg(long, value_enum, default_value_t = SuiteArg::Fast)]
        suite: SuiteArg,
        /// Only these checks, by number.
        #[arg(long, value_delimiter = ',')]
        only: Vec<usize>,
        /// Deliberately break the union threshold (τ + N_c).
        #[arg(long)]
        inject_threshold_fault: bool,
        /// Also write the outcomes as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Fast,
    Full,
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        config.seed = s;
        config.seeds.clear();
    }
    config
        .validate()
        .with_context(|| format!("checking {}", path.display()))?;
    Ok(config)
}

/// Excess loss when the optimum is known, test metrics otherwise.
fn headline(m: &Aggregate) -> String {
    let quality = match (m.final_excess_loss, m.plateau_excess_loss) {
        (Some(last), Some(plateau)) => {
            format!("final excess loss {last:.4e}, plateau {plateau:.4e}")
        }
        _ => format!(
            "final test loss {:.6}, accuracy {}",
            m.final_test_loss,
            m.final_test_acc.map_or("n/a".into(), |a| format!("{a:.4}"))
        ),
    };
    format!("{quality}, mean byz_in_uc {:.3}", m.mean_byz_in_uc)
}

fn out_dir(flag: Option<PathBuf>, config: &ExperimentConfig) -> PathBuf {
    flag.or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Run {
            config,
            seed,
            out_dir: dir,
        } => {
            let config = load(&config, seed)?;
            let dir = out_dir(dir, &config);
            let summary = run_experiment(&config, &dir)?;
            let m = &summary.mean;
            println!(
                "{} repetition(s) -> {}; {}, messages {}",
                summary.repetitions.len(),
                dir.display(),
                headline(m),
                m.messages_total
            );
        }
        Command::Sweep {
            config,
            axis,
            values,
            seed,
            out_dir: dir,
        } => {
            let config = load(&config, seed)?;
            let dir = out_dir(dir, &config);
            let values = parse_values(&values)?;
            let summary = run_sweep(&config, axis, &values, &dir)?;
            for p in &summary.points {
                println!("{axis}={}: {}", p.value, headline(&p.mean));
            }
        }
        Command::Bound {
            epochs,
            delta,
            f,
            n,
            trials,
            seed,
        } => {
            let exact = committee_size_bound_real(epochs, delta, f)?;
            let size = committee_size_bound(epochs, delta, f)?;
            println!("N(T={epochs}, delta={delta}, f={f}) = {size} (unrounded {exact:.4})");
            if let Some(n) = n {
                let population = Population::new(n, f, seed)?;
                let byzantine = population.byzantine_count();
                if size > n {
                    println!("N exceeds the population of {n}; no probabilities");
                } else {
                    let p = byz_majority_prob_exact(n, byzantine, size)?;
                    let mc = byz_majority_prob_mc(&population, size, trials, seed)?;
                    println!("n={n}, K={byzantine}: P(X >= N/2) exact {p:.6e}, sampled {mc:.6e} over {trials} trials");
                }
            }
        }
        Command::Verify {
            suite,
            only,
            inject_threshold_fault,
            json,
        } => {
            let suite = match suite {
                SuiteArg::Fast => Suite::Fast,
                SuiteArg::Full => Suite::Full,
            };
            let faults = Faults {
                threshold_plus_voters: inject_threshold_fault,
            };
            let mut outcomes = Vec::new();
            for (i, check) in CHECKS.iter().enumerate() {
                if !only.is_empty() && !only.contains(&(i + 1)) {
                    continue;
                }
                let o = check(suite, faults);
                println!("{o}");
                outcomes.push(o);
            }
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            println!("{} passed, {failed} failed", outcomes.len() - failed);
            if let Some(path) = json {
                let file = std::fs::File::create(&path)
                    .with_context(|| format!("creating {}", path.display()))?;
                serde_json::to_writer_pretty(file, &outcomes)?;
            }
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
