//! Gradient aggregation rules: plain average, Krum, coordinate-wise trimmed
//! mean, holdout voting and the union-consensus reducer.
//!
//! Proposals are addressed by their position in the proposal list ("proposer
//! index"). All means sum in ascending proposer index, and every tie is broken
//! toward the lower index, so identical inputs give bitwise-identical outputs.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learnkit::{Example, LearnError, LossModel};
use crate::params::ParamVector;
use crate::NodeId;

#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("no proposals to aggregate")]
    Empty,
    #[error("proposal {index} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("krum needs at least one neighbour: {proposals} proposals with f = {f}")]
    TooFewForKrum { proposals: usize, f: f64 },
    #[error("trimming {trim} per side leaves nothing of {proposals} proposals")]
    TrimsEverything { proposals: usize, trim: usize },
    #[error("no valid ballots")]
    NoValidBallots,
    #[error(transparent)]
    Learn(#[from] LearnError),
}

pub type Result<T, E = AggregationError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientProposal {
    pub proposer: NodeId,
    pub grad: ParamVector,
}

impl GradientProposal {
    pub fn new(proposer: NodeId, grad: ParamVector) -> Self {
        Self { proposer, grad }
    }
}

/// A voter's endorsements, as indices into the proposal list, best first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteBallot {
    pub voter: NodeId,
    pub endorsed: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusOutcome {
    /// `v_t`, the mean of the members' gradients.
    pub update: ParamVector,
    /// `UC_t`, ascending proposer indices.
    pub members: Vec<usize>,
    pub vote_counts: Vec<usize>,
    pub threshold: usize,
    /// Ballots dropped as malformed, with the reason.
    pub rejected: Vec<(NodeId, BallotDefect)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BallotDefect {
    WrongCardinality { expected: usize, got: usize },
    Duplicate(usize),
    OutOfRange(usize),
}

// Protocol fractions like 1/3 are not exact in binary; nudge products that sit
// within rounding noise of an integer onto it before ceil/floor.
const ROUNDING_SLACK: f64 = 1e-9;

/// `ceil(x)` tolerant of representation error.
pub fn ceil_count(x: f64) -> usize {
    (x - ROUNDING_SLACK).ceil().max(0.0) as usize
}

/// `floor(x)` tolerant of representation error.
pub fn floor_count(x: f64) -> usize {
    (x + ROUNDING_SLACK).floor().max(0.0) as usize
}

/// Ballot size `k = ceil(N_p (1 − f))`.
pub fn ballot_size(num_proposals: usize, f: f64) -> usize {
    ceil_count(num_proposals as f64 * (1.0 - f)).min(num_proposals)
}

/// Union threshold `τ = ceil(N_c k / N_p)`, exact integer arithmetic.
pub fn union_threshold(num_voters: usize, k: usize, num_proposals: usize) -> usize {
    (num_voters * k).div_ceil(num_proposals)
}

fn check_dims(proposals: &[GradientProposal]) -> Result<usize> {
    let first = proposals.first().ok_or(AggregationError::Empty)?;
    let d = first.grad.dim();
    for (index, p) in proposals.iter().enumerate() {
        if p.grad.dim() != d {
            return Err(AggregationError::DimensionMismatch {
                index,
                expected: d,
                got: p.grad.dim(),
            });
        }
    }
    Ok(d)
}

/// Mean of the selected proposals, summed sequentially in the given order.
pub(crate) fn mean_of<'a>(dim: usize, grads: impl Iterator<Item = &'a ParamVector>) -> ParamVector {
    let mut acc = ParamVector::zeros(dim);
    let mut count = 0usize;
    for g in grads {
        acc.add_assign(g);
        count += 1;
    }
    acc.scale(1.0 / count as f64);
    acc
}

pub fn aggregate_average(proposals: &[GradientProposal]) -> Result<ParamVector> {
    let d = check_dims(proposals)?;
    Ok(mean_of(d, proposals.iter().map(|p| &p.grad)))
}

/// Index of the proposal Krum selects: minimal sum of squared distances to
/// its `N_p − ceil(f N_p) − 2` nearest other proposals.
pub fn krum_select(proposals: &[GradientProposal], f: f64) -> Result<usize> {
    check_dims(proposals)?;
    let n = proposals.len();
    let neighbours = n as i64 - ceil_count(f * n as f64) as i64 - 2;
    if n < 3 || neighbours < 1 {
        return Err(AggregationError::TooFewForKrum { proposals: n, f });
    }
    let neighbours = neighbours as usize;
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = proposals[i].grad.dist_sq(&proposals[j].grad);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut best = (f64::INFINITY, 0usize);
    let mut row = Vec::with_capacity(n - 1);
    for i in 0..n {
        row.clear();
        row.extend((0..n).filter(|&j| j != i).map(|j| dist[i * n + j]));
        row.sort_by(f64::total_cmp);
        let score: f64 = row[..neighbours].iter().sum();
        if score < best.0 {
            best = (score, i);
        }
    }
    Ok(best.1)
}

pub fn aggregate_krum(proposals: &[GradientProposal], f: f64) -> Result<ParamVector> {
    let i = krum_select(proposals, f)?;
    Ok(proposals[i].grad.clone())
}

/// Per coordinate, drop the `floor(f N_p)` largest and smallest values and
/// average the rest. With nothing to trim this is exactly
/// [`aggregate_average`].
pub fn aggregate_trimmed_mean(proposals: &[GradientProposal], f: f64) -> Result<ParamVector> {
    let d = check_dims(proposals)?;
    let n = proposals.len();
    let trim = floor_count(f * n as f64);
    if n <= 2 * trim {
        return Err(AggregationError::TrimsEverything { proposals: n, trim });
    }
    if trim == 0 {
        return aggregate_average(proposals);
    }
    let kept = (n - 2 * trim) as f64;
    let mut column = vec![0.0; n];
    let out = (0..d)
        .map(|c| {
            for (slot, p) in column.iter_mut().zip(proposals) {
                *slot = p.grad[c];
            }
            column.sort_by(f64::total_cmp);
            column[trim..n - trim].iter().sum::<f64>() / kept
        })
        .collect();
    Ok(ParamVector::new(out))
}

/// Indices of the `k` smallest values, ascending by value then index.
pub fn k_smallest(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Holdout loss `L_c(w_t − η g_j)` of every proposal on the voter's batch.
pub fn holdout_losses(
    proposals: &[GradientProposal],
    w: &ParamVector,
    eta: f64,
    model: &LossModel,
    holdout: &[Example],
) -> Result<Vec<f64>> {
    check_dims(proposals)?;
    if holdout.is_empty() {
        return Err(LearnError::EmptyBatch.into());
    }
    proposals
        .iter()
        .map(|p| {
            if p.grad.dim() != w.dim() {
                return Err(LearnError::DimensionMismatch {
                    expected: w.dim(),
                    got: p.grad.dim(),
                }
                .into());
            }
            Ok(model.loss(&w.step(eta, &p.grad), holdout)?)
        })
        .collect()
}

/// An honest voter's ballot: the `ceil(N_p (1 − f))` proposals with the
/// smallest holdout loss.
pub fn holdout_votes(
    voter: NodeId,
    proposals: &[GradientProposal],
    w: &ParamVector,
    eta: f64,
    model: &LossModel,
    holdout: &[Example],
    f: f64,
) -> Result<VoteBallot> {
    let losses = holdout_losses(proposals, w, eta, model, holdout)?;
    Ok(VoteBallot {
        voter,
        endorsed: k_smallest(&losses, ballot_size(proposals.len(), f)),
    })
}

fn ballot_defect(ballot: &VoteBallot, k: usize, num_proposals: usize) -> Option<BallotDefect> {
    if ballot.endorsed.len() != k {
        return Some(BallotDefect::WrongCardinality {
            expected: k,
            got: ballot.endorsed.len(),
        });
    }
    let mut seen = BTreeSet::new();
    for &i in &ballot.endorsed {
        if i >= num_proposals {
            return Some(BallotDefect::OutOfRange(i));
        }
        if !seen.insert(i) {
            return Some(BallotDefect::Duplicate(i));
        }
    }
    None
}

/// Union consensus with `k = ceil(N_p (1 − f))` and `τ = ceil(N_c k / N_p)`
/// where `N_c` counts every submitted ballot.
///
/// Malformed ballots are dropped and reported in
/// [`ConsensusOutcome::rejected`]. If dropping them empties the union, the
/// threshold is recomputed over the valid ballots only, for which the
/// pigeonhole bound holds again.
pub fn union_consensus(
    ballots: &[VoteBallot],
    proposals: &[GradientProposal],
    f: f64,
) -> Result<ConsensusOutcome> {
    check_dims(proposals)?;
    let k = ballot_size(proposals.len(), f);
    let tau = union_threshold(ballots.len(), k, proposals.len());
    let outcome = union_consensus_with_threshold(ballots, proposals, k, tau)?;
    if !outcome.members.is_empty() {
        return Ok(outcome);
    }
    let valid = ballots.len() - outcome.rejected.len();
    if valid == 0 {
        return Err(AggregationError::NoValidBallots);
    }
    let tau = union_threshold(valid, k, proposals.len());
    union_consensus_with_threshold(ballots, proposals, k, tau)
}

/// Tally with an explicit ballot size and threshold. May return an empty
/// union (with a zero update) if `tau` is set above the pigeonhole bound.
pub fn union_consensus_with_threshold(
    ballots: &[VoteBallot],
    proposals: &[GradientProposal],
    k: usize,
    tau: usize,
) -> Result<ConsensusOutcome> {
    let d = check_dims(proposals)?;
    let mut counts = vec![0usize; proposals.len()];
    let mut rejected = Vec::new();
    for ballot in ballots {
        if let Some(defect) = ballot_defect(ballot, k, proposals.len()) {
            rejected.push((ballot.voter, defect));
            continue;
        }
        for &i in &ballot.endorsed {
            counts[i] += 1;
        }
    }
    let members: Vec<usize> = (0..proposals.len()).filter(|&i| counts[i] >= tau).collect();
    let update = if members.is_empty() {
        ParamVector::zeros(d)
    } else {
        mean_of(d, members.iter().map(|&i| &proposals[i].grad))
    };
    Ok(ConsensusOutcome {
        update,
        members,
        vote_counts: counts,
        threshold: tau,
        rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learnkit::{Label, Quadratic};

    fn props(vs: &[&[f64]]) -> Vec<GradientProposal> {
        vs.iter()
            .enumerate()
            .map(|(i, v)| GradientProposal::new(i, ParamVector::new(v.to_vec())))
            .collect()
    }

    #[test]
    fn average_examples() {
        let g: &[f64] = &[1.5, -2.0];
        assert_eq!(aggregate_average(&props(&[g, g, g])).unwrap().as_slice(), g);
        assert_eq!(
            aggregate_average(&props(&[&[1.0, 0.0], &[0.0, 1.0]]))
                .unwrap()
                .as_slice(),
            &[0.5, 0.5]
        );
        assert_eq!(
            aggregate_average(&props(&[&[2.0, 2.0], &[-2.0, -2.0], &[0.0, 0.0]]))
                .unwrap()
                .as_slice(),
            &[0.0, 0.0]
        );
        assert!(matches!(
            aggregate_average(&[]),
            Err(AggregationError::Empty)
        ));
        assert!(matches!(
            aggregate_average(&props(&[&[1.0], &[1.0, 2.0]])),
            Err(AggregationError::DimensionMismatch { index: 1, .. })
        ));
    }

    #[test]
    fn krum_examples() {
        let g: &[f64] = &[3.0, 1.0];
        assert_eq!(aggregate_krum(&props(&[g; 5]), 0.2).unwrap().as_slice(), g);

        let z: &[f64] = &[0.0, 0.0];
        let ps = props(&[z, z, z, z, &[100.0, 100.0]]);
        // Brute force: 2 neighbours each; zeros score 0, outlier 2 * 20000.
        let scores: Vec<f64> = (0..5)
            .map(|i| {
                let mut d: Vec<f64> = (0..5)
                    .filter(|&j| j != i)
                    .map(|j| ps[i].grad.dist_sq(&ps[j].grad))
                    .collect();
                d.sort_by(f64::total_cmp);
                d[..2].iter().sum()
            })
            .collect();
        assert_eq!(scores, vec![0.0, 0.0, 0.0, 0.0, 40000.0]);
        assert_eq!(krum_select(&ps, 0.2).unwrap(), 0);
        assert_eq!(aggregate_krum(&ps, 0.2).unwrap().as_slice(), z);

        // Two mirrored clusters score equally; lowest index wins.
        let ps = props(&[
            &[10.0, 0.0],
            &[10.0, 1.0],
            &[10.0, -1.0],
            &[-10.0, 0.0],
            &[-10.0, 1.0],
            &[-10.0, -1.0],
        ]);
        assert_eq!(krum_select(&ps, 0.0).unwrap(), 0);

        assert!(matches!(
            krum_select(&props(&[z, z, z]), 0.34),
            Err(AggregationError::TooFewForKrum { .. })
        ));
    }

    #[test]
    fn trimmed_mean_examples() {
        let ps = props(&[&[1.0], &[2.0], &[3.0], &[4.0], &[100.0]]);
        assert_eq!(aggregate_trimmed_mean(&ps, 0.2).unwrap().as_slice(), &[3.0]);
        let g: &[f64] = &[0.1, 7.0];
        assert_eq!(
            aggregate_trimmed_mean(&props(&[g; 6]), 0.3)
                .unwrap()
                .as_slice(),
            g
        );
        let ps = props(&[&[0.1, 0.7], &[0.2, 0.3], &[1e-3, 5.0]]);
        assert!(aggregate_trimmed_mean(&ps, 0.0)
            .unwrap()
            .bit_eq(&aggregate_average(&ps).unwrap()));
        assert!(matches!(
            aggregate_trimmed_mean(&props(&[&[1.0], &[2.0]]), 0.5),
            Err(AggregationError::TrimsEverything { .. })
        ));
    }

    #[test]
    fn rounding_helpers() {
        assert_eq!(ballot_size(30, 1.0 / 3.0), 20);
        assert_eq!(ballot_size(3, 1.0 / 3.0), 2);
        assert_eq!(ballot_size(7, 0.0), 7);
        assert_eq!(union_threshold(30, 20, 30), 20);
        assert_eq!(floor_count(0.33 * 30.0), 9);
        assert_eq!(floor_count(30.0 / 3.0), 10);
    }

    fn quad_model() -> (LossModel, ParamVector) {
        let q = Quadratic::with_linear_spectrum(1.0, 3.0, ParamVector::zeros(4), None).unwrap();
        (
            LossModel::Quadratic(q),
            ParamVector::new(vec![1.0, -1.0, 0.5, 2.0]),
        )
    }

    #[test]
    fn holdout_prefers_descent_direction() {
        let (model, w) = quad_model();
        let quiet = vec![Example {
            features: vec![0.0; 4],
            label: Label::Value(0.0),
        }];
        let exact = model.gradient(&w, &quiet).unwrap();
        let ps = vec![
            GradientProposal::new(10, exact.scaled(-1.0)),
            GradientProposal::new(11, exact.clone()),
        ];
        let losses = holdout_losses(&ps, &w, 0.01, &model, &quiet).unwrap();
        // L(w − ηg) = L(w) − η‖g‖² + O(η²) versus L(w) + η‖g‖² + O(η²).
        assert!(losses[1] < losses[0]);
        let ballot = holdout_votes(3, &ps, &w, 0.01, &model, &quiet, 0.5).unwrap();
        assert_eq!(ballot.endorsed, vec![1]);
        let all = holdout_votes(3, &ps, &w, 0.01, &model, &quiet, 0.0).unwrap();
        assert_eq!(all.endorsed, vec![1, 0]);
        assert!(holdout_votes(3, &ps, &w, 0.01, &model, &[], 0.0).is_err());
    }

    #[test]
    fn ballot_cardinality_three_proposals() {
        let (model, w) = quad_model();
        let quiet = vec![Example {
            features: vec![0.0; 4],
            label: Label::Value(0.0),
        }];
        let g = ParamVector::new(vec![0.1; 4]);
        let ps: Vec<_> = (0..3)
            .map(|i| GradientProposal::new(i, g.clone()))
            .collect();
        let b = holdout_votes(0, &ps, &w, 0.1, &model, &quiet, 1.0 / 3.0).unwrap();
        // Equal losses resolve to the lowest indices.
        assert_eq!(b.endorsed, vec![0, 1]);
    }

    #[test]
    fn unanimous_ballots() {
        let ps = props(&[&[1.0], &[2.0], &[4.0], &[8.0]]);
        let ballots: Vec<_> = (0..5)
            .map(|v| VoteBallot {
                voter: v,
                endorsed: vec![3, 1, 0],
            })
            .collect();
        let out = union_consensus(&ballots, &ps, 0.25).unwrap();
        assert_eq!(out.members, vec![0, 1, 3]);
        assert_eq!(out.update.as_slice(), &[11.0 / 3.0]);
        assert_eq!(out.threshold, 4);
    }

    #[test]
    fn malformed_ballots_are_dropped() {
        let ps = props(&[&[1.0], &[2.0], &[3.0]]);
        let ballots = vec![
            VoteBallot {
                voter: 0,
                endorsed: vec![0, 1],
            },
            VoteBallot {
                voter: 1,
                endorsed: vec![0, 0],
            },
            VoteBallot {
                voter: 2,
                endorsed: vec![0, 7],
            },
            VoteBallot {
                voter: 3,
                endorsed: vec![2],
            },
        ];
        let out = union_consensus(&ballots, &ps, 1.0 / 3.0).unwrap();
        assert_eq!(out.rejected.len(), 3);
        assert_eq!(out.rejected[0], (1, BallotDefect::Duplicate(0)));
        assert_eq!(out.rejected[1], (2, BallotDefect::OutOfRange(7)));
        // τ over 4 submitted ballots is 3 and nothing reaches it; the valid
        // ballot alone re-establishes τ = 1.
        assert_eq!(out.threshold, 1);
        assert_eq!(out.members, vec![0, 1]);

        let junk = vec![VoteBallot {
            voter: 9,
            endorsed: vec![],
        }];
        assert!(matches!(
            union_consensus(&junk, &ps, 1.0 / 3.0),
            Err(AggregationError::NoValidBallots)
        ));
    }
}
