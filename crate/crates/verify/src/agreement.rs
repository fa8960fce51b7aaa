use holdout_core::adversary::{AttackConfig, EquivocationMode};
use holdout_core::committee::Population;
use holdout_core::decentralized::{run_decentralized, ConsensusPath, DecentralizedConfig};
use holdout_core::orchestrator::{StepSchedule, Workload};
use holdout_core::rng;
use rayon::prelude::*;

use crate::convergence::quadratic_task;
use crate::{timed, CheckOutcome, Faults, Result, Suite, Verdict};

#[derive(Default)]
struct Tally {
    epochs: usize,
    disagreements: usize,
    failures: usize,
    recovered: usize,
    equivocators_caught: usize,
}

/// Decentralized run at `n = 60` with 19 Byzantine nodes that equivocate as
/// voters, attack as proposers and vote for a poison hash in consensus.
fn byzantine_run(seed: u64, epochs: usize) -> Result<Tally> {
    let n = 60;
    let task = quadratic_task(n, 10, 30, 1.0, seed)?;
    let pop = Population::new(n, 19.0 / 60.0, seed)?;
    debug_assert_eq!(pop.byzantine_count(), 19);
    let (q1, q2, q3) = DecentralizedConfig::default_probabilities(n, 20, 20, epochs, 0.01, 0.32)?;
    let config = DecentralizedConfig {
        epochs,
        n,
        q1,
        q2,
        q3,
        f: 0.32,
        actual_f: 19.0 / 60.0,
        batch_size: 4,
        m_c: 10,
        eta: StepSchedule::Inverse(task.alpha),
        attack: AttackConfig {
            equivocation: EquivocationMode::PerRecipientNoise,
            ..AttackConfig::gamma_search()
        },
        seed: rng::child_seed(seed, "agreement-run", &[]),
        trace: false,
    };
    let (_, records) =
        run_decentralized(&config, &pop, Workload::new(&task.model, &task.shards, &[]))?;
    let mut tally = Tally::default();
    for e in &records {
        tally.epochs += 1;
        tally.disagreements += usize::from(!e.agreement);
        tally.failures += usize::from(e.path == ConsensusPath::Failed);
        tally.recovered += usize::from(e.path == ConsensusPath::Recovered);
        tally.equivocators_caught += e.equivocators.len();
    }
    Ok(tally)
}

/// Criterion 9: honest nodes agree bitwise after every epoch and consensus
/// never fails.
pub fn decentralized_agreement(suite: Suite, _faults: Faults) -> CheckOutcome {
    timed(9, "decentralized agreement", || {
        let seeds = suite.pick(5, 20);
        let epochs = suite.pick(20, 50);
        let tallies = (0..seeds as u64)
            .into_par_iter()
            .map(|s| byzantine_run(900 + s, epochs))
            .collect::<Result<Vec<_>>>()?;
        let total = tallies.iter().fold(Tally::default(), |mut acc, t| {
            acc.epochs += t.epochs;
            acc.disagreements += t.disagreements;
            acc.failures += t.failures;
            acc.recovered += t.recovered;
            acc.equivocators_caught += t.equivocators_caught;
            acc
        });
        Ok(Verdict::new(
            total.disagreements == 0 && total.failures == 0,
            format!(
                "{} epochs ({seeds} seeds × {epochs}): {} disagreements, {} consensus failures, {} recovered epochs, {} equivocators excluded",
                total.epochs, total.disagreements, total.failures, total.recovered, total.equivocators_caught
            ),
        ))
    })
}
