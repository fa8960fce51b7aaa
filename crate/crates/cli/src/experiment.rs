//! Running a configured experiment and writing its CSV and JSON outputs.

use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use holdout_core::committee::Population;
use holdout_core::decentralized::DecentralizedRunner;
use holdout_core::orchestrator::{
    central_message_count, DistributedRunner, EpochRecord, HoldoutRunner, Workload,
};
use serde::Serialize;

use crate::config::{ExperimentConfig, Materialized, Variant};

pub const CSV_COLUMNS: [&str; 8] = [
    "t",
    "train_loss",
    "test_loss",
    "test_acc",
    "uc_size",
    "byz_in_uc",
    "gamma_used",
    "messages_sent",
];

/// Trailing epochs averaged into the plateau estimate.
const PLATEAU_WINDOW: usize = 100;

/// 17 significant digits, enough to re-parse the exact value.
pub fn fmt_float(x: f64) -> String {
    if x.is_nan() {
        "NaN".to_owned()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.to_owned()
    } else {
        format!("{x:.16e}")
    }
}

fn csv_row(r: &EpochRecord) -> [String; 8] {
    [
        r.t.to_string(),
        fmt_float(r.train_loss),
        fmt_float(r.test_loss),
        r.test_accuracy.map(fmt_float).unwrap_or_default(),
        r.uc_size.to_string(),
        r.byz_in_uc.to_string(),
        r.gamma_used.map(fmt_float).unwrap_or_default(),
        r.messages_sent.to_string(),
    ]
}

#[derive(Clone, Debug, Serialize)]
pub struct RepetitionSummary {
    pub repetition: usize,
    pub seed: u64,
    pub csv: PathBuf,
    pub epochs: usize,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    pub final_test_acc: Option<f64>,
    /// Quadratic model only.
    pub final_excess_loss: Option<f64>,
    /// Mean excess loss over the last 100 epochs (or all, if fewer).
    pub plateau_excess_loss: Option<f64>,
    pub mean_byz_in_uc: f64,
    pub messages_total: u64,
    pub forwarded_total: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub variant: Variant,
    pub config: ExperimentConfig,
    pub repetitions: Vec<RepetitionSummary>,
    pub mean: Aggregate,
}

/// Means across repetitions; `None` where a metric is missing.
#[derive(Clone, Debug, Serialize)]
pub struct Aggregate {
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    pub final_test_acc: Option<f64>,
    pub final_excess_loss: Option<f64>,
    pub plateau_excess_loss: Option<f64>,
    pub mean_byz_in_uc: f64,
    pub messages_total: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

fn mean_opt<'a>(
    reps: &'a [RepetitionSummary],
    get: impl Fn(&'a RepetitionSummary) -> Option<f64>,
) -> Option<f64> {
    let xs: Option<Vec<f64>> = reps.iter().map(get).collect();
    xs.map(|v| mean(v.into_iter()))
}

impl Aggregate {
    fn of(reps: &[RepetitionSummary]) -> Self {
        Self {
            final_train_loss: mean(reps.iter().map(|r| r.final_train_loss)),
            final_test_loss: mean(reps.iter().map(|r| r.final_test_loss)),
            final_test_acc: mean_opt(reps, |r| r.final_test_acc),
            final_excess_loss: mean_opt(reps, |r| r.final_excess_loss),
            plateau_excess_loss: mean_opt(reps, |r| r.plateau_excess_loss),
            mean_byz_in_uc: mean(reps.iter().map(|r| r.mean_byz_in_uc)),
            messages_total: mean(reps.iter().map(|r| r.messages_total as f64)),
        }
    }
}

enum Driver<'a> {
    Central(DistributedRunner<'a>),
    Holdout(HoldoutRunner<'a>),
    Decentralized(DecentralizedRunner<'a>),
}

impl Driver<'_> {
    /// One epoch, checked against the protocol invariants.
    fn step(&mut self) -> Result<EpochRecord> {
        match self {
            Driver::Central(r) => {
                let e = r.step()?;
                Ok(e.record)
            }
            Driver::Holdout(r) => {
                let e = r.step()?;
                let expected = central_message_count(
                    holdout_core::orchestrator::AggregationRule::Holdout,
                    e.proposals.len(),
                    e.voters.size(),
                );
                if (e.record.messages_sent, e.record.forwarded_payloads) != expected {
                    bail!("epoch {}: message count off the closed form", e.record.t);
                }
                if e.outcome.members.is_empty() {
                    bail!("epoch {}: empty union consensus", e.record.t);
                }
                Ok(e.record)
            }
            Driver::Decentralized(r) => {
                let e = r.step()?;
                if !e.agreement {
                    bail!("epoch {}: honest nodes disagree on the model", e.record.t);
                }
                Ok(e.record)
            }
        }
    }
}

/// Run all repetitions into `out_dir`, writing `rep-<r>.csv` files and
/// `summary.json`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<Summary> {
    config.validate()?;
    let resolved = config.resolved()?;
    let data = resolved.materialize()?;
    let population = resolved.population()?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let mut reps = Vec::new();
    for (r, &seed) in resolved.seeds.iter().enumerate() {
        let csv = out_dir.join(format!("rep-{r}.csv"));
        let summary = run_repetition(&resolved, &data, &population, r, seed, &csv)
            .with_context(|| format!("repetition {r} (seed {seed})"))?;
        reps.push(summary);
    }
    let summary = Summary {
        variant: resolved.variant,
        mean: Aggregate::of(&reps),
        config: resolved,
        repetitions: reps,
    };
    let path = out_dir.join("summary.json");
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(file, &summary)?;
    Ok(summary)
}

fn run_repetition(
    config: &ExperimentConfig,
    data: &Materialized,
    population: &Population,
    repetition: usize,
    seed: u64,
    csv_path: &Path,
) -> Result<RepetitionSummary> {
    let work = Workload::new(&data.model, &data.shards, &data.eval.examples);
    let mut driver = match config.variant {
        Variant::CentralSgd => {
            let rc = config.run_config(seed)?;
            rc.validate_with(population, &work)?;
            Driver::Central(DistributedRunner::new(&rc, population, work)?)
        }
        Variant::Holdout => {
            let rc = config.run_config(seed)?;
            rc.validate_with(population, &work)?;
            Driver::Holdout(HoldoutRunner::new(&rc, population, work)?)
        }
        Variant::Decentralized => {
            let dc = config.decentralized_config(seed)?;
            Driver::Decentralized(DecentralizedRunner::new(&dc, population, work)?)
        }
    };

    let mut writer = csv::Writer::from_path(csv_path)
        .with_context(|| format!("creating {}", csv_path.display()))?;
    writer.write_record(CSV_COLUMNS)?;
    let mut records = Vec::with_capacity(config.protocol.epochs);
    let outcome = (|| -> Result<()> {
        for _ in 0..config.protocol.epochs {
            let record = driver.step()?;
            writer.write_record(csv_row(&record))?;
            records.push(record);
        }
        Ok(())
    })();
    // Rows written before a failure stay on disk.
    writer.flush()?;
    outcome?;

    let last = records.last().context("no epochs were run")?;
    let excess: Option<Vec<f64>> = records.iter().map(|r| r.excess_loss).collect();
    let plateau = excess.map(|e| {
        let tail = &e[e.len().saturating_sub(PLATEAU_WINDOW)..];
        tail.iter().sum::<f64>() / tail.len() as f64
    });
    Ok(RepetitionSummary {
        repetition,
        seed,
        csv: csv_path.to_path_buf(),
        epochs: records.len(),
        final_train_loss: last.train_loss,
        final_test_loss: last.test_loss,
        final_test_acc: last.test_accuracy,
        final_excess_loss: last.excess_loss,
        plateau_excess_loss: plateau,
        mean_byz_in_uc: mean(records.iter().map(|r| r.byz_in_uc as f64)),
        messages_total: records.iter().map(|r| r.messages_sent).sum(),
        forwarded_total: records.iter().map(|r| r.forwarded_payloads).sum(),
    })
}
