use holdout_core::aggregation::{
    ballot_size, union_consensus, union_consensus_with_threshold, union_threshold,
    GradientProposal, VoteBallot,
};
use holdout_core::{rng, ParamVector};
use rand::seq::index;
use rand::Rng;

use crate::{timed, CheckOutcome, Faults, Result, Suite, Verdict};

struct Matrix {
    num_proposals: usize,
    f: f64,
    ballots: Vec<VoteBallot>,
}

fn random_matrix(seed: u64, i: u64) -> Matrix {
    let mut r = rng::stream(seed, "vote-matrix", &[i]);
    let np = r.random_range(3..=60);
    let nc = r.random_range(3..=60);
    let f = r.random_range(0.0..0.49);
    let k = ballot_size(np, f);
    let ballots = (0..nc)
        .map(|voter| VoteBallot {
            voter,
            endorsed: index::sample(&mut r, np, k).into_vec(),
        })
        .collect();
    Matrix {
        num_proposals: np,
        f,
        ballots,
    }
}

/// Endorsements dealt round-robin so every tally is within one of the mean,
/// starting at a random offset.
fn spreading_matrix(seed: u64, i: u64) -> Matrix {
    let mut r = rng::stream(seed, "spread-matrix", &[i]);
    let np = r.random_range(3..=60);
    let nc = r.random_range(3..=60);
    let f = r.random_range(0.0..0.49);
    let k = ballot_size(np, f);
    let offset = r.random_range(0..np);
    let ballots = (0..nc)
        .map(|voter| VoteBallot {
            voter,
            endorsed: (0..k).map(|j| (offset + voter * k + j) % np).collect(),
        })
        .collect();
    Matrix {
        num_proposals: np,
        f,
        ballots,
    }
}

fn union_is_empty(m: &Matrix, faults: Faults) -> Result<bool> {
    let proposals: Vec<GradientProposal> = (0..m.num_proposals)
        .map(|i| GradientProposal::new(i, ParamVector::filled(1, i as f64)))
        .collect();
    let members = if faults.threshold_plus_voters {
        let k = ballot_size(m.num_proposals, m.f);
        let tau = union_threshold(m.ballots.len(), k, m.num_proposals) + m.ballots.len();
        union_consensus_with_threshold(&m.ballots, &proposals, k, tau)?.members
    } else {
        union_consensus(&m.ballots, &proposals, m.f)?.members
    };
    Ok(members.is_empty())
}

/// Criterion 1: no vote matrix with complete ballots yields an empty union.
pub fn union_non_empty(suite: Suite, faults: Faults) -> CheckOutcome {
    timed(1, "union non-emptiness", || {
        let random = suite.pick(2_000, 10_000);
        let spreading = 100;
        let mut empty = 0usize;
        for i in 0..random {
            empty += usize::from(union_is_empty(&random_matrix(1, i), faults)?);
        }
        for i in 0..spreading {
            empty += usize::from(union_is_empty(&spreading_matrix(2, i), faults)?);
        }
        Ok(Verdict::new(
            empty == 0,
            format!("{empty} empty unions in {random} random + {spreading} spreading matrices"),
        ))
    })
}
