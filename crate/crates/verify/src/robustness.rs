use holdout_core::adversary::AttackConfig;
use holdout_core::committee::Population;
use holdout_core::learnkit::{
    make_synthetic_dataset, partition, Dataset, DatasetKind, DatasetSpec, LossModel, PartitionMode,
    Shard, SoftmaxRegression,
};
use holdout_core::orchestrator::{run, AggregationRule, RunConfig, StepSchedule, Workload};
use holdout_core::rng;
use rayon::prelude::*;

use crate::{mean_se, timed, CheckOutcome, Faults, Result, Suite, Verdict};

pub(crate) struct MixtureSetup {
    pub n: usize,
    pub features: usize,
    pub classes: usize,
    pub per_node: usize,
    pub eval: usize,
    pub noise: f64,
    pub separation: f64,
    pub committee: usize,
    /// Byzantine fraction the rules are configured to tolerate.
    pub f: f64,
    pub batch_size: usize,
    pub m_c: usize,
    pub eta: f64,
    pub epochs: usize,
    pub seeds: usize,
}

pub(crate) fn setup(suite: Suite) -> MixtureSetup {
    MixtureSetup {
        n: 100,
        features: 50,
        classes: 10,
        per_node: 60,
        eval: 2000,
        noise: 1.0,
        separation: 0.5,
        committee: 30,
        f: 0.45,
        batch_size: 30,
        m_c: 30,
        eta: 0.7,
        epochs: suite.pick(60, 200),
        seeds: suite.pick(4, 10),
    }
}

pub(crate) struct MixtureTask {
    pub model: LossModel,
    pub shards: Vec<Shard>,
    pub eval: Dataset,
}

pub(crate) fn mixture_task(s: &MixtureSetup, seed: u64) -> Result<MixtureTask> {
    let spec = DatasetSpec {
        kind: DatasetKind::GaussianMixture,
        m: s.n * s.per_node + s.eval,
        d: s.features,
        num_classes: s.classes,
        noise: s.noise,
        separation: s.separation,
    };
    let mut data = make_synthetic_dataset(&spec, seed)?;
    let eval = data.split_off(s.eval);
    Ok(MixtureTask {
        model: LossModel::Softmax(SoftmaxRegression {
            features: s.features,
            classes: s.classes,
            l2: 0.0,
        }),
        shards: partition(&data, s.n, PartitionMode::UniformIid, seed)?,
        eval,
    })
}

/// Final test accuracy of one rule, one seed.
pub(crate) fn final_accuracy(
    s: &MixtureSetup,
    rule: AggregationRule,
    attacked: bool,
    seed: u64,
) -> Result<f64> {
    let task = mixture_task(s, rng::child_seed(seed, "mixture-data", &[]))?;
    let actual_f = if attacked { 1.0 / 3.0 } else { 0.0 };
    let pop = Population::new(
        s.n,
        actual_f,
        rng::child_seed(seed, "mixture-population", &[]),
    )?;
    let config = RunConfig {
        epochs: s.epochs,
        n: s.n,
        num_proposers: s.committee,
        num_voters: s.committee,
        f: s.f,
        actual_f,
        batch_size: s.batch_size,
        m_c: s.m_c,
        eta: StepSchedule::Constant(s.eta),
        rule,
        attack: if attacked {
            AttackConfig::gamma_search()
        } else {
            AttackConfig::default()
        },
        seed,
    };
    let (_, records) = run(
        &config,
        &pop,
        Workload::new(&task.model, &task.shards, &task.eval.examples),
    )?;
    Ok(records
        .last()
        .and_then(|r| r.test_accuracy)
        .unwrap_or(f64::NAN))
}

fn separated(a: (f64, f64), b: (f64, f64)) -> (bool, f64) {
    let z = (a.0 - b.0) / (a.1 * a.1 + b.1 * b.1).sqrt().max(f64::MIN_POSITIVE);
    (z >= 3.0, z)
}

/// Criterion 8: under the γ-search attack HoldOut beats trimmed mean, which
/// beats Krum, each by 3 standard errors across seeds, and HoldOut under
/// attack stays within 5 points of unattacked averaging.
pub fn robustness_ordering(suite: Suite, _faults: Faults) -> CheckOutcome {
    timed(8, "robustness ordering", || {
        let s = setup(suite);
        let arms = [
            ("holdout", AggregationRule::Holdout, true),
            ("trimmed", AggregationRule::TrimmedMean, true),
            ("krum", AggregationRule::Krum, true),
            ("average/no attack", AggregationRule::Average, false),
        ];
        let stats = arms
            .iter()
            .map(|&(_, rule, attacked)| -> Result<(f64, f64)> {
                let accs = (0..s.seeds)
                    .into_par_iter()
                    .map(|i| final_accuracy(&s, rule, attacked, 800 + i as u64))
                    .collect::<Result<Vec<_>>>()?;
                Ok(mean_se(&accs))
            })
            .collect::<Result<Vec<_>>>()?;
        let (ho_tm, z1) = separated(stats[0], stats[1]);
        let (tm_krum, z2) = separated(stats[1], stats[2]);
        let gap = stats[3].0 - stats[0].0;
        let close = gap <= 0.05;
        let summary = arms
            .iter()
            .zip(&stats)
            .map(|((name, _, _), (m, se))| format!("{name} {:.1}±{:.1}%", 100.0 * m, 100.0 * se))
            .collect::<Vec<_>>()
            .join(", ");
        Ok(Verdict::new(
            ho_tm && tm_krum && close,
            format!(
                "{summary}; z(holdout−trimmed)={z1:.1}, z(trimmed−krum)={z2:.1}, average−holdout={:.1} pts ({} seeds, {} epochs)",
                100.0 * gap,
                s.seeds,
                s.epochs
            ),
        ))
    })
}
