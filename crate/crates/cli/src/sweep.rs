//! One-parameter sweeps over an experiment config.

use std::fmt;
use std::fs::File;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use holdout_core::adversary::AttackMode;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::experiment::{fmt_float, run_experiment, Aggregate};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Axis {
    #[serde(rename = "f")]
    F,
    #[serde(rename = "N_p")]
    NumProposers,
    #[serde(rename = "N_c")]
    NumVoters,
    #[serde(rename = "m_c")]
    HoldoutSize,
    #[serde(rename = "gamma")]
    Gamma,
    #[serde(rename = "n")]
    Nodes,
}

impl FromStr for Axis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "f" => Axis::F,
            "N_p" => Axis::NumProposers,
            "N_c" => Axis::NumVoters,
            "m_c" => Axis::HoldoutSize,
            "gamma" => Axis::Gamma,
            "n" => Axis::Nodes,
            other => bail!("unknown axis {other:?}; expected one of f, N_p, N_c, m_c, gamma, n"),
        })
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::F => "f",
            Axis::NumProposers => "N_p",
            Axis::NumVoters => "N_c",
            Axis::HoldoutSize => "m_c",
            Axis::Gamma => "gamma",
            Axis::Nodes => "n",
        })
    }
}

fn count(axis: Axis, value: f64) -> Result<usize> {
    if value >= 0.0 && value.fract() == 0.0 && value <= usize::MAX as f64 {
        Ok(value as usize)
    } else {
        bail!("{axis} takes non-negative integers, got {value}")
    }
}

/// `config` with `axis` set to `value`. A `gamma` value switches the attack
/// to a fixed γ, keeping its other settings.
pub fn apply(config: &ExperimentConfig, axis: Axis, value: f64) -> Result<ExperimentConfig> {
    let mut c = config.clone();
    let p = &mut c.protocol;
    match axis {
        Axis::F => p.f = value,
        Axis::NumProposers => p.num_proposers = count(axis, value)?,
        Axis::NumVoters => p.num_voters = Some(count(axis, value)?),
        Axis::HoldoutSize => p.m_c = Some(count(axis, value)?),
        Axis::Nodes => p.n = count(axis, value)?,
        Axis::Gamma => {
            p.attack.mode = AttackMode::GammaFixed;
            p.attack.gamma = Some(value);
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    pub dir: String,
    pub mean: Aggregate,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepSummary {
    pub axis: Axis,
    pub points: Vec<SweepPoint>,
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_float).unwrap_or_default()
}

/// Run the experiment once per value into `out_dir/<axis>=<value>/`, then
/// write `sweep.csv` and `sweep.json` keyed by value.
pub fn run_sweep(
    config: &ExperimentConfig,
    axis: Axis,
    values: &[f64],
    out_dir: &Path,
) -> Result<SweepSummary> {
    if values.is_empty() {
        bail!("--values: at least one value needed");
    }
    // Reject bad points before running any of them.
    let configs = values
        .iter()
        .map(|&v| {
            let c = apply(config, axis, v)?;
            c.validate().with_context(|| format!("{axis} = {v}"))?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut points = Vec::with_capacity(values.len());
    for (&value, c) in values.iter().zip(&configs) {
        let dir = format!("{axis}={value}");
        let summary =
            run_experiment(c, &out_dir.join(&dir)).with_context(|| format!("{axis} = {value}"))?;
        points.push(SweepPoint {
            value,
            dir,
            mean: summary.mean,
        });
    }

    let mut table = csv::Writer::from_path(out_dir.join("sweep.csv"))?;
    table.write_record([
        axis.to_string().as_str(),
        "final_train_loss",
        "final_test_loss",
        "final_test_acc",
        "final_excess_loss",
        "plateau_excess_loss",
        "mean_byz_in_uc",
        "messages_total",
    ])?;
    for p in &points {
        let m = &p.mean;
        table.write_record([
            p.value.to_string(),
            fmt_float(m.final_train_loss),
            fmt_float(m.final_test_loss),
            opt(m.final_test_acc),
            opt(m.final_excess_loss),
            opt(m.plateau_excess_loss),
            fmt_float(m.mean_byz_in_uc),
            fmt_float(m.messages_total),
        ])?;
    }
    table.flush()?;

    let summary = SweepSummary { axis, points };
    serde_json::to_writer_pretty(File::create(out_dir.join("sweep.json"))?, &summary)?;
    Ok(summary)
}

pub fn parse_values(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().with_context(|| format!("bad value {s:?}")))
        .collect()
}
