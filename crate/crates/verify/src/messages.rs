use holdout_core::adversary::{AttackConfig, EquivocationMode};
use holdout_core::committee::Population;
use holdout_core::decentralized::{
    decentralized_message_count, DecentralizedConfig, DecentralizedRunner,
};
use holdout_core::orchestrator::{
    central_message_count, run, AggregationRule, RunConfig, StepSchedule, Workload,
};

use crate::convergence::quadratic_task;
use crate::{timed, CheckOutcome, Faults, Result, Suite, Verdict};

fn central_mismatches(epochs: usize) -> Result<(usize, usize)> {
    let n = 40;
    let task = quadratic_task(n, 8, 40, 1.0, 10)?;
    let pop = Population::new(n, 0.25, 10)?;
    let mut checked = 0;
    let mut mismatches = 0;
    for rule in [
        AggregationRule::Average,
        AggregationRule::Krum,
        AggregationRule::TrimmedMean,
        AggregationRule::Holdout,
    ] {
        for (np, nc) in [(12, 9), (20, 20), (9, 15)] {
            let config = RunConfig {
                epochs,
                n,
                num_proposers: np,
                num_voters: nc,
                f: 0.25,
                actual_f: 0.25,
                batch_size: 4,
                m_c: 10,
                eta: StepSchedule::Inverse(task.alpha),
                rule,
                attack: AttackConfig::gamma_search(),
                seed: 1010,
            };
            let (_, records) = run(&config, &pop, Workload::new(&task.model, &task.shards, &[]))?;
            let expected = central_message_count(rule, np, nc);
            for r in &records {
                checked += 1;
                mismatches += usize::from((r.messages_sent, r.forwarded_payloads) != expected);
            }
        }
    }
    Ok((checked, mismatches))
}

fn decentralized_mismatches(epochs: usize) -> Result<(usize, usize)> {
    let n = 45;
    let task = quadratic_task(n, 8, 30, 1.0, 11)?;
    let pop = Population::new(n, 0.3, 11)?;
    let config = DecentralizedConfig {
        epochs,
        n,
        q1: 0.3,
        q2: 0.25,
        q3: 0.6,
        f: 0.3,
        actual_f: 0.3,
        batch_size: 4,
        m_c: 10,
        eta: StepSchedule::Inverse(task.alpha),
        attack: AttackConfig {
            equivocation: EquivocationMode::PerRecipientNoise,
            ..AttackConfig::gamma_fixed(1.0)
        },
        seed: 1111,
        trace: false,
    };
    let mut runner =
        DecentralizedRunner::new(&config, &pop, Workload::new(&task.model, &task.shards, &[]))?;
    let mut mismatches = 0;
    let mut expected_total = 0;
    for _ in 0..epochs {
        let e = runner.step()?;
        let expected =
            decentralized_message_count(n, e.proposers.len(), e.voters.len(), e.committee.len());
        expected_total += expected;
        mismatches += usize::from(e.record.messages_sent != expected);
    }
    mismatches += usize::from(runner.network().messages_sent() != expected_total);
    Ok((epochs, mismatches))
}

/// Criterion 10: counted messages equal the closed forms `N_p + 2 N_c`
/// (central HoldOut, `N_p` for the baselines) and
/// `n (|P| + |V| + |C|)` (decentralized).
pub fn message_audit(suite: Suite, _faults: Faults) -> CheckOutcome {
    timed(10, "message-complexity audit", || {
        let epochs = suite.pick(5, 20);
        let (central, central_bad) = central_mismatches(epochs)?;
        let (dec, dec_bad) = decentralized_mismatches(2 * epochs)?;
        Ok(Verdict::new(
            central_bad == 0 && dec_bad == 0,
            format!("central: {central_bad}/{central} epochs off; decentralized: {dec_bad}/{dec} epochs off"),
        ))
    })
}
