//! Agreement on `w_{t+1}`: a single-shot hash vote among the consensus
//! committee, and the union tally keyed by proposer node id.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::wire::candidate_hash;
use crate::aggregation::{self, ballot_size};
use crate::params::ParamVector;
use crate::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConsensusPath {
    /// A candidate held by more than 2/3 of the committee.
    Quorum,
    /// The smallest hash held by more than 1/3 of the committee.
    Plurality,
    /// No quorum; rebuilt from the committee's shared view.
    Recovered,
    /// No decision; the epoch keeps `w_t`.
    Failed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusDecision {
    pub value: ParamVector,
    pub hash: [u8; 32],
    pub path: ConsensusPath,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConsensusError {
    #[error("no candidate is held by more than a third of the committee")]
    NoQuorum,
    #[error("empty committee")]
    EmptyCommittee,
}

/// Hash vote over committee members' candidates. Votes from non-members are
/// ignored, as are repeat votes from the same member.
pub fn consensus_round(
    candidates: &[(NodeId, ParamVector)],
    committee: &BTreeSet<NodeId>,
) -> Result<ConsensusDecision, ConsensusError> {
    let size = committee.len();
    if size == 0 {
        return Err(ConsensusError::EmptyCommittee);
    }
    let mut voted = BTreeSet::new();
    let mut tally: BTreeMap<[u8; 32], (usize, &ParamVector)> = BTreeMap::new();
    for (member, v) in candidates {
        if !committee.contains(member) || !voted.insert(*member) {
            continue;
        }
        tally.entry(candidate_hash(v)).or_insert((0, v)).0 += 1;
    }
    if let Some((hash, (_, v))) = tally.iter().find(|(_, (c, _))| 3 * c > 2 * size) {
        return Ok(ConsensusDecision {
            value: (*v).clone(),
            hash: *hash,
            path: ConsensusPath::Quorum,
        });
    }
    // BTreeMap iterates hashes in lexicographic order.
    match tally.iter().find(|(_, (c, _))| 3 * c > size) {
        Some((hash, (_, v))) => Ok(ConsensusDecision {
            value: (*v).clone(),
            hash: *hash,
            path: ConsensusPath::Plurality,
        }),
        None => Err(ConsensusError::NoQuorum),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnionResult {
    pub update: ParamVector,
    /// Proposer node ids, ascending.
    pub members: Vec<NodeId>,
    pub threshold: usize,
}

/// Union consensus over proposals keyed by proposer id. `proposers` is the
/// number of proposers the voters saw, which exceeds `proposals.len()` when
/// some were discarded afterwards. Endorsements of ids outside `proposals`
/// are ignored, ballots with repeated ids or more than
/// `ceil(proposers (1 − f))` entries are dropped, and the threshold is the
/// mean tally `ceil(total endorsements / |proposals|)`. With complete ballots
/// this is the usual `ceil(N_c k / N_p)`.
pub fn id_union_consensus(
    proposals: &BTreeMap<NodeId, ParamVector>,
    ballots: &[(NodeId, Vec<NodeId>)],
    proposers: usize,
    f: f64,
) -> Option<UnionResult> {
    if proposals.is_empty() {
        return None;
    }
    let k = ballot_size(proposers.max(proposals.len()), f);
    let mut tally: BTreeMap<NodeId, usize> = proposals.keys().map(|&id| (id, 0)).collect();
    let mut total = 0usize;
    for (_, endorsed) in ballots {
        let distinct: BTreeSet<NodeId> = endorsed.iter().copied().collect();
        if distinct.len() != endorsed.len() || endorsed.len() > k {
            continue;
        }
        for id in &distinct {
            if let Some(c) = tally.get_mut(id) {
                *c += 1;
                total += 1;
            }
        }
    }
    if total == 0 {
        return None;
    }
    let threshold = total.div_ceil(proposals.len());
    let members: Vec<NodeId> = tally
        .iter()
        .filter(|(_, c)| **c >= threshold)
        .map(|(id, _)| *id)
        .collect();
    let dim = proposals.values().next().map_or(0, ParamVector::dim);
    let update = aggregation::mean_of(dim, members.iter().map(|id| &proposals[id]));
    Some(UnionResult {
        update,
        members,
        threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: f64) -> ParamVector {
        ParamVector::filled(3, x)
    }

    #[test]
    fn unanimity() {
        let committee: BTreeSet<_> = (0..5).collect();
        let votes: Vec<_> = (0..5).map(|i| (i, v(1.0))).collect();
        let d = consensus_round(&votes, &committee).unwrap();
        assert!(d.value.bit_eq(&v(1.0)));
        assert_eq!(d.path, ConsensusPath::Quorum);
    }

    #[test]
    fn two_thirds_plus_one_wins() {
        let committee: BTreeSet<_> = (0..9).collect();
        let mut votes: Vec<_> = (0..7).map(|i| (i, v(2.0))).collect();
        votes.push((7, v(-1.0)));
        votes.push((8, v(5.0)));
        let d = consensus_round(&votes, &committee).unwrap();
        assert!(d.value.bit_eq(&v(2.0)));
    }

    #[test]
    fn three_way_split_fails() {
        let committee: BTreeSet<_> = (0..9).collect();
        let votes: Vec<_> = (0..9).map(|i| (i, v((i % 3) as f64))).collect();
        assert_eq!(
            consensus_round(&votes, &committee),
            Err(ConsensusError::NoQuorum)
        );
    }

    #[test]
    fn plurality_takes_smallest_hash() {
        let committee: BTreeSet<_> = (0..6).collect();
        let mut votes: Vec<_> = (0..3).map(|i| (i, v(1.0))).collect();
        votes.extend((3..6).map(|i| (i, v(2.0))));
        let d = consensus_round(&votes, &committee).unwrap();
        assert_eq!(d.path, ConsensusPath::Plurality);
        assert_eq!(d.hash, candidate_hash(&v(1.0)).min(candidate_hash(&v(2.0))));
    }

    #[test]
    fn outsiders_and_repeats_ignored() {
        let committee: BTreeSet<_> = (0..3).collect();
        let votes = vec![
            (0, v(1.0)),
            (0, v(9.0)),
            (0, v(9.0)),
            (7, v(9.0)),
            (8, v(9.0)),
            (1, v(1.0)),
            (2, v(3.0)),
        ];
        let d = consensus_round(&votes, &committee).unwrap();
        assert!(d.value.bit_eq(&v(1.0)));
    }

    #[test]
    fn id_union_matches_positional_union() {
        let proposals: BTreeMap<NodeId, ParamVector> = [(3, v(1.0)), (8, v(2.0)), (11, v(4.0))]
            .into_iter()
            .collect();
        let ballots = vec![(0, vec![3, 8]), (1, vec![8, 11]), (2, vec![8, 3])];
        let u = id_union_consensus(&proposals, &ballots, proposals.len(), 1.0 / 3.0).unwrap();
        assert_eq!(u.threshold, 2);
        assert_eq!(u.members, vec![3, 8]);
        assert!(u.update.bit_eq(&v(1.5)));
        // Oversized and duplicate ballots are ignored.
        let ballots = vec![(0, vec![3, 8, 11]), (1, vec![11, 11]), (2, vec![11, 3])];
        let u = id_union_consensus(&proposals, &ballots, proposals.len(), 1.0 / 3.0).unwrap();
        assert_eq!(u.members, vec![3, 11]);
        assert!(id_union_consensus(&proposals, &[], proposals.len(), 0.2).is_none());
    }

    #[test]
    fn discarded_proposers_keep_ballot_limit() {
        // Four proposers were seen; 9 was discarded, so ballots of size
        // ceil(4 · 2/3) = 3 are still complete.
        let proposals: BTreeMap<NodeId, ParamVector> = [(3, v(1.0)), (8, v(2.0)), (11, v(4.0))]
            .into_iter()
            .collect();
        let ballots = vec![(0, vec![3, 8, 9]), (1, vec![8, 9, 11])];
        assert!(id_union_consensus(&proposals, &ballots, 3, 1.0 / 3.0).is_none());
        let u = id_union_consensus(&proposals, &ballots, 4, 1.0 / 3.0).unwrap();
        assert_eq!(u.threshold, 2);
        assert_eq!(u.members, vec![8]);
    }
}
