use holdout_core::adversary::AttackConfig;
use holdout_core::committee::Population;
use holdout_core::learnkit::{
    make_synthetic_dataset, partition, DatasetKind, DatasetSpec, LossModel, PartitionMode,
    Quadratic, Shard,
};
use holdout_core::orchestrator::{
    fit_rate_curve, run_holdout_sgd, AggregationRule, RunConfig, StepSchedule, Workload,
};
use holdout_core::{rng, ParamVector};
use rayon::prelude::*;

use crate::{mean_se, timed, CheckOutcome, Faults, Result, Suite, Verdict};

pub(crate) struct QuadraticTask {
    pub model: LossModel,
    pub shards: Vec<Shard>,
    pub alpha: f64,
}

/// Rotated quadratic with spectrum on `[1, 4]` and `per_node` noise samples
/// of amplitude `noise` per node.
pub(crate) fn quadratic_task(
    n: usize,
    d: usize,
    per_node: usize,
    noise: f64,
    seed: u64,
) -> Result<QuadraticTask> {
    let w_star = ParamVector::new((0..d).map(|i| 1.0 - 2.0 * (i % 2) as f64).collect());
    let quad = Quadratic::with_linear_spectrum(1.0, 4.0, w_star, Some(seed))?;
    let alpha = quad.alpha();
    let spec = DatasetSpec {
        kind: DatasetKind::QuadraticNoise,
        m: n * per_node,
        d,
        num_classes: 10,
        noise,
        separation: 1.0,
    };
    let data = make_synthetic_dataset(&spec, seed)?;
    Ok(QuadraticTask {
        model: LossModel::Quadratic(quad),
        shards: partition(&data, n, PartitionMode::UniformIid, seed)?,
        alpha,
    })
}

pub(crate) struct RateSetup {
    pub n: usize,
    pub d: usize,
    pub num_proposers: usize,
    pub num_voters: usize,
    pub f: f64,
    pub batch_size: usize,
    pub noise: f64,
    pub epochs: usize,
    pub seeds: usize,
    /// Trailing epochs averaged into the plateau estimate.
    pub tail: usize,
}

pub(crate) struct RateCurve {
    pub m_c: usize,
    /// Mean excess loss per epoch across seeds.
    pub mean: Vec<f64>,
    /// Per-seed mean excess over the tail window.
    pub tails: Vec<f64>,
}

pub(crate) fn rate_curve(setup: &RateSetup, task: &QuadraticTask, m_c: usize) -> Result<RateCurve> {
    let pop = Population::new(setup.n, 0.0, 1)?;
    let runs = (0..setup.seeds)
        .into_par_iter()
        .map(|s| -> Result<Vec<f64>> {
            let config = RunConfig {
                epochs: setup.epochs,
                n: setup.n,
                num_proposers: setup.num_proposers,
                num_voters: setup.num_voters,
                f: setup.f,
                actual_f: 0.0,
                batch_size: setup.batch_size,
                m_c,
                eta: StepSchedule::Inverse(task.alpha),
                rule: AggregationRule::Holdout,
                attack: AttackConfig::default(),
                seed: rng::child_seed(6, "rate-seed", &[s as u64]),
            };
            let (_, records) =
                run_holdout_sgd(&config, &pop, Workload::new(&task.model, &task.shards, &[]))?;
            Ok(records
                .iter()
                .map(|r| r.excess_loss.unwrap_or(f64::NAN))
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = (0..setup.epochs)
        .map(|t| runs.iter().map(|r| r[t]).sum::<f64>() / runs.len() as f64)
        .collect();
    let tails = runs
        .iter()
        .map(|r| r[setup.epochs - setup.tail..].iter().sum::<f64>() / setup.tail as f64)
        .collect();
    Ok(RateCurve { m_c, mean, tails })
}

pub(crate) fn setup(suite: Suite) -> RateSetup {
    RateSetup {
        n: 20,
        d: 20,
        num_proposers: 10,
        num_voters: 10,
        f: 0.3,
        batch_size: 1,
        noise: 3.0,
        epochs: 1000,
        seeds: suite.pick(8, 24),
        tail: 100,
    }
}

/// Criterion 6: with `η_t = 1/(2αt)` the excess loss follows
/// `plateau + C log t / t`, and the plateau shrinks as `m_c` grows.
pub fn convergence_shape(suite: Suite, _faults: Faults) -> CheckOutcome {
    timed(6, "convergence-rate shape", || {
        let s = setup(suite);
        let task = quadratic_task(s.n, s.d, 1000, s.noise, 6)?;
        let mut parts = Vec::new();
        let mut plateaus = Vec::new();
        let mut fits_ok = true;
        for m_c in [10, 100, 1000] {
            let curve = rate_curve(&s, &task, m_c)?;
            let points: Vec<(f64, f64)> = (10..=s.epochs)
                .map(|t| (t as f64, curve.mean[t - 1]))
                .collect();
            let fit = fit_rate_curve(&points);
            let (plateau, se) = mean_se(&curve.tails);
            fits_ok &= fit.r_squared >= 0.9 && fit.c > 0.0;
            plateaus.push(plateau);
            parts.push(format!(
                "m_c={}: plateau {plateau:.3e}±{se:.1e}, C={:.3}, R²={:.3}",
                curve.m_c, fit.c, fit.r_squared
            ));
        }
        let ordered = plateaus.windows(2).all(|w| w[0] > w[1]);
        Ok(Verdict::new(ordered && fits_ok, parts.join("; ")))
    })
}
