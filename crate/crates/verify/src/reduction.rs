use holdout_core::adversary::AttackConfig;
use holdout_core::committee::Population;
use holdout_core::orchestrator::{
    AggregationRule, DistributedRunner, HoldoutRunner, RunConfig, StepSchedule, Workload,
};

use crate::convergence::quadratic_task;
use crate::{timed, CheckOutcome, Faults, Suite, Verdict};

/// Criterion 2: HoldOut at `f = 0` retraces big-batch SGD with averaging bit
/// for bit.
pub fn f_zero_reduction(_suite: Suite, _faults: Faults) -> CheckOutcome {
    timed(2, "f=0 reduction", || {
        let n = 40;
        let task = quadratic_task(n, 20, 200, 1.0, 3)?;
        let pop = Population::new(n, 0.0, 1)?;
        let config = |rule| RunConfig {
            epochs: 50,
            n,
            num_proposers: 16,
            num_voters: 12,
            f: 0.0,
            actual_f: 0.0,
            batch_size: 8,
            m_c: 20,
            eta: StepSchedule::Inverse(task.alpha),
            rule,
            attack: AttackConfig::default(),
            seed: 2024,
        };
        let work = || Workload::new(&task.model, &task.shards, &[]);
        let mut holdout = HoldoutRunner::new(&config(AggregationRule::Holdout), &pop, work())?;
        let mut average = DistributedRunner::new(&config(AggregationRule::Average), &pop, work())?;
        let mut first_split = None;
        for t in 1..=50 {
            holdout.step()?;
            average.step()?;
            if first_split.is_none() && !holdout.params().bit_eq(average.params()) {
                first_split = Some(t);
            }
        }
        Ok(Verdict::new(
            first_split.is_none(),
            match first_split {
                None => "50/50 epochs bitwise identical (d=20)".to_string(),
                Some(t) => format!("trajectories diverge at epoch {t}"),
            },
        ))
    })
}
