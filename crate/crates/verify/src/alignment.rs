use holdout_core::adversary::AttackConfig;
use holdout_core::committee::Population;
use holdout_core::orchestrator::{
    check_alignment, AggregationRule, RunConfig, StepSchedule, Workload,
};

use crate::convergence::quadratic_task;
use crate::{timed, CheckOutcome, Faults, Suite, Verdict};

/// Criterion 7: endorsed proposals align with honest voters' holdout
/// gradients at least as much as `‖∇L‖² − ½ β G² η_t`, within 3 standard
/// errors, with and without a colluding third of the nodes.
pub fn alignment_check(suite: Suite, _faults: Faults) -> CheckOutcome {
    timed(7, "holdout alignment", || {
        let n = 30;
        let task = quadratic_task(n, 10, 60, 1.0, 7)?;
        let repetitions = suite.pick(30, 100);
        let sample = [1, 2, 5, 10, 20, 40];
        let mut parts = Vec::new();
        let mut passed = true;
        for (f, attack) in [
            (0.0, AttackConfig::default()),
            (1.0 / 3.0, AttackConfig::gamma_search()),
        ] {
            let pop = Population::new(n, f, 7)?;
            let config = RunConfig {
                epochs: 40,
                n,
                num_proposers: 12,
                num_voters: 12,
                f,
                actual_f: f,
                batch_size: 4,
                m_c: 20,
                eta: StepSchedule::Inverse(task.alpha),
                rule: AggregationRule::Holdout,
                attack,
                seed: 77,
            };
            let report = check_alignment(
                &config,
                &pop,
                &Workload::new(&task.model, &task.shards, &[]),
                &sample,
                repetitions,
            )?;
            passed &= report.passed();
            let worst = report
                .epochs
                .iter()
                .map(|e| e.mean_margin / e.std_error.max(f64::MIN_POSITIVE))
                .fold(f64::INFINITY, f64::min);
            parts.push(format!(
                "f={f:.3}: {}/{} epochs pass, worst margin {worst:+.1} SE (G={:.2})",
                report.epochs.iter().filter(|e| e.passed).count(),
                report.epochs.len(),
                report.gradient_bound
            ));
        }
        Ok(Verdict::new(
            passed,
            format!("{repetitions} repetitions; {}", parts.join("; ")),
        ))
    })
}
