//! Fully decentralized HoldOut SGD: nodes self-select into roles by keyed
//! sortition, exchange signed proposals and ballots over a broadcast network,
//! compute their own candidate `w_{t+1}`, and agree on one candidate through a
//! consensus committee.
//!
//! Each consensus message carries the member's candidate plus, as attachments,
//! the proposal and ballot messages it accepted. When no candidate reaches
//! quorum, every node rebuilds the update from the union of those attachments,
//! discarding senders caught with two differently signed messages in a round.
//! Consensus messages are assumed to reach all nodes identically, standing in
//! for the agreement primitive of the full protocol.

mod consensus;
mod network;
mod wire;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{
    self, coalition_ballot, equivocate, AdversaryError, AttackConfig, ByzantineMessage,
    EquivocationMode, HoldoutSimulation, RuleContext,
};
use crate::aggregation::{ballot_size, k_smallest, AggregationError};
use crate::committee::{
    committee_size_bound_real, sortition, verify_sortition, CommitteeError, KeyRegistry,
    Population, Role, SecretKey, SortitionTicket,
};
use crate::learnkit::{sample_batch, Example, LearnError, Shard};
use crate::orchestrator::{evaluate, EpochRecord, OrchestratorError, StepSchedule, Workload};
use crate::params::ParamVector;
use crate::rng;
use crate::NodeId;

pub use consensus::{
    consensus_round, id_union_consensus, ConsensusDecision, ConsensusError, ConsensusPath,
    UnionResult,
};
pub use network::{NetMessage, Network, RoundTag};
pub use wire::{
    candidate_hash, decode_ballot, decode_consensus, decode_proposal, encode_ballot,
    encode_consensus, encode_proposal, ConsensusPayload,
};

#[derive(Debug, Error)]
pub enum DecentralizedError {
    #[error("invalid config: {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("sender {0} is not registered")]
    UnregisteredSender(NodeId),
    #[error("message from {found} broadcast as {declared}")]
    SenderMismatch { declared: NodeId, found: NodeId },
    #[error("epoch {epoch}: no usable role assignment after {attempts} reseeds")]
    SortitionExhausted { epoch: usize, attempts: usize },
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
    #[error(transparent)]
    Committee(#[from] CommitteeError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
}

pub type Result<T, E = DecentralizedError> = std::result::Result<T, E>;

fn invalid(field: &'static str, reason: impl Into<String>) -> DecentralizedError {
    DecentralizedError::InvalidConfig {
        field,
        reason: reason.into(),
    }
}

const MAX_RESEEDS: usize = 1000;

/// Candidate every disruptive consensus member proposes.
fn poison(dim: usize) -> ParamVector {
    ParamVector::filled(dim, 1e9)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecentralizedConfig {
    #[serde(rename = "T")]
    pub epochs: usize,
    pub n: usize,
    /// Sortition probabilities for the proposer, voter and consensus roles.
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub f: f64,
    #[serde(default)]
    pub actual_f: f64,
    #[serde(rename = "B")]
    pub batch_size: usize,
    pub m_c: usize,
    pub eta: StepSchedule,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub seed: u64,
    /// Keep a per-message trace in the network.
    #[serde(default)]
    pub trace: bool,
}

impl DecentralizedConfig {
    /// Role probabilities whose expected committee sizes are `N_p`, `N_c`, and
    /// the committee-size bound for `(epochs, delta, f)`.
    pub fn default_probabilities(
        n: usize,
        num_proposers: usize,
        num_voters: usize,
        epochs: usize,
        delta: f64,
        f: f64,
    ) -> Result<(f64, f64, f64)> {
        let n = n as f64;
        let bound = committee_size_bound_real(epochs.max(1) as u64, delta, f)?.ceil();
        Ok((
            (num_proposers as f64 / n).min(1.0),
            (num_voters as f64 / n).min(1.0),
            (bound / n).min(1.0),
        ))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(invalid("n", "must be positive"));
        }
        for (field, q) in [("q1", self.q1), ("q2", self.q2), ("q3", self.q3)] {
            if !(q > 0.0 && q <= 1.0) {
                return Err(invalid(field, "must lie in (0, 1]"));
            }
        }
        if !(0.0..1.0 / 3.0).contains(&self.f) {
            return Err(invalid(
                "f",
                "must lie in [0, 1/3) for the decentralized variant",
            ));
        }
        if !(0.0..1.0 / 3.0).contains(&self.actual_f) {
            return Err(invalid("actual_f", "must lie in [0, 1/3)"));
        }
        if self.batch_size == 0 {
            return Err(invalid("B", "must be positive"));
        }
        if self.m_c == 0 {
            return Err(invalid("m_c", "must be positive"));
        }
        let eta_ok = match self.eta {
            StepSchedule::Constant(c) | StepSchedule::Inverse(c) => c.is_finite() && c > 0.0,
        };
        if !eta_ok {
            return Err(invalid("eta", "must be positive and finite"));
        }
        Ok(())
    }
}

/// Closed-form per-epoch message count: every role holder broadcasts once.
pub fn decentralized_message_count(
    n: usize,
    proposers: usize,
    voters: usize,
    committee: usize,
) -> u64 {
    (n * (proposers + voters + committee)) as u64
}

#[derive(Clone, Debug)]
pub struct NodeState {
    pub id: NodeId,
    pub w: ParamVector,
    key: SecretKey,
    pub byzantine: bool,
    pub inbox: Vec<Arc<NetMessage>>,
}

impl NodeState {
    pub fn new(id: NodeId, w: ParamVector, key: SecretKey, byzantine: bool) -> Self {
        Self {
            id,
            w,
            key,
            byzantine,
            inbox: Vec::new(),
        }
    }

    pub fn key(&self) -> &SecretKey {
        &self.key
    }

    /// Drain the inbox in `(epoch, round, sender)` order.
    fn drain(&mut self) -> Vec<Arc<NetMessage>> {
        let mut msgs = std::mem::take(&mut self.inbox);
        msgs.sort_by_key(|m| (m.epoch, m.round, m.sender));
        msgs
    }
}

#[derive(Clone, Debug)]
pub struct DecentralizedEpoch {
    pub record: EpochRecord,
    pub proposers: Vec<NodeId>,
    pub voters: Vec<NodeId>,
    pub committee: Vec<NodeId>,
    /// Sortition rounds discarded for leaving a role empty.
    pub reseeds: usize,
    pub path: ConsensusPath,
    /// All honest nodes hold bitwise-identical parameters after the epoch.
    pub agreement: bool,
    pub distinct_honest_candidates: usize,
    /// Senders the recovery path caught equivocating.
    pub equivocators: Vec<NodeId>,
}

/// What one node accepted in a round, with the accepted messages for its view.
#[derive(Default)]
struct Accepted<T> {
    items: BTreeMap<NodeId, T>,
    msgs: Vec<Arc<NetMessage>>,
}

/// Distinct authentic messages from one sender in one round, by digest.
type ByDigest<'a> = BTreeMap<[u8; 32], &'a Arc<NetMessage>>;

/// Verification context shared by all receivers in an epoch.
struct Verifier<'a> {
    registry: &'a KeyRegistry,
    epoch: u64,
    seed: [u8; 32],
    q: [f64; 3],
    dim: usize,
}

impl Verifier<'_> {
    fn role_ok(&self, msg: &NetMessage, role: Role, proof: [u8; 32]) -> bool {
        let q = self.q[match role {
            Role::Proposer => 0,
            Role::Voter => 1,
            Role::Consensus => 2,
        }];
        let ticket = SortitionTicket {
            selected: true,
            proof,
        };
        verify_sortition(
            self.registry,
            msg.sender,
            role.tag(),
            &self.seed,
            self.epoch,
            q,
            &ticket,
        )
    }

    fn authentic(&self, msg: &NetMessage, round: RoundTag) -> bool {
        msg.round == round && msg.epoch == self.epoch && msg.verify(self.registry)
    }

    fn proposal(&self, msg: &NetMessage) -> Option<ParamVector> {
        if !self.authentic(msg, RoundTag::Proposal) {
            return None;
        }
        let (proof, g) = decode_proposal(msg.payload())?;
        (g.dim() == self.dim && g.is_finite() && self.role_ok(msg, Role::Proposer, proof))
            .then_some(g)
    }

    fn ballot(&self, msg: &NetMessage) -> Option<Vec<NodeId>> {
        if !self.authentic(msg, RoundTag::Vote) {
            return None;
        }
        let (proof, ids) = decode_ballot(msg.payload())?;
        self.role_ok(msg, Role::Voter, proof).then_some(ids)
    }

    fn consensus(&self, msg: &NetMessage) -> Option<ConsensusPayload> {
        if !self.authentic(msg, RoundTag::Consensus) {
            return None;
        }
        let c = decode_consensus(msg.payload())?;
        let attached: Vec<[u8; 32]> = msg.attachments().iter().map(|m| m.digest()).collect();
        (c.candidate.dim() == self.dim
            && attached == c.attachment_digests
            && self.role_ok(msg, Role::Consensus, c.proof))
        .then_some(c)
    }

    fn accept_proposals(&self, inbox: &[Arc<NetMessage>]) -> Accepted<ParamVector> {
        let mut out = Accepted::default();
        for m in inbox {
            if out.items.contains_key(&m.sender) {
                continue;
            }
            if let Some(g) = self.proposal(m) {
                out.items.insert(m.sender, g);
                out.msgs.push(Arc::clone(m));
            }
        }
        out
    }

    fn accept_ballots(&self, inbox: &[Arc<NetMessage>]) -> Accepted<Vec<NodeId>> {
        let mut out = Accepted::default();
        for m in inbox {
            if out.items.contains_key(&m.sender) {
                continue;
            }
            if let Some(ids) = self.ballot(m) {
                out.items.insert(m.sender, ids);
                out.msgs.push(Arc::clone(m));
            }
        }
        out
    }

    /// Rebuild the update from the attachments of all accepted consensus
    /// messages, skipping senders with two distinct authentic messages in the
    /// same round.
    fn recover(&self, messages: &[Arc<NetMessage>], f: f64) -> (Option<UnionResult>, Vec<NodeId>) {
        let mut seen: BTreeMap<(RoundTag, NodeId), ByDigest<'_>> = BTreeMap::new();
        for m in messages {
            for a in m.attachments() {
                seen.entry((a.round, a.sender))
                    .or_default()
                    .entry(a.digest())
                    .or_insert(a);
            }
        }
        let mut proposals = BTreeMap::new();
        let mut proposers = BTreeSet::new();
        let mut ballots = Vec::new();
        let mut equivocators = BTreeSet::new();
        for ((round, sender), variants) in &seen {
            let authentic: Vec<&Arc<NetMessage>> = variants
                .values()
                .copied()
                .filter(|a| self.authentic(a, *round))
                .collect();
            if *round == RoundTag::Proposal && !authentic.is_empty() {
                proposers.insert(*sender);
            }
            if authentic.len() > 1 {
                equivocators.insert(*sender);
                continue;
            }
            let Some(a) = authentic.first() else { continue };
            match round {
                RoundTag::Proposal => {
                    if let Some(g) = self.proposal(a) {
                        proposals.insert(*sender, g);
                    }
                }
                RoundTag::Vote => {
                    if let Some(ids) = self.ballot(a) {
                        ballots.push((*sender, ids));
                    }
                }
                RoundTag::Consensus => {}
            }
        }
        (
            id_union_consensus(&proposals, &ballots, proposers.len(), f),
            equivocators.into_iter().collect(),
        )
    }
}

struct Decision {
    value: Option<ParamVector>,
    path: ConsensusPath,
    hash: Option<[u8; 32]>,
    recovered: Option<UnionResult>,
    equivocators: Vec<NodeId>,
}

pub struct DecentralizedRunner<'a> {
    config: DecentralizedConfig,
    population: &'a Population,
    work: Workload<'a>,
    nodes: Vec<NodeState>,
    network: Network,
    epoch_seed: [u8; 32],
    t: usize,
    pool: Vec<Example>,
}

impl<'a> DecentralizedRunner<'a> {
    pub fn new(
        config: &DecentralizedConfig,
        population: &'a Population,
        work: Workload<'a>,
    ) -> Result<Self> {
        config.validate()?;
        if population.n() != config.n {
            return Err(invalid(
                "n",
                format!("population has {} nodes", population.n()),
            ));
        }
        if work.shards.len() != config.n {
            return Err(invalid(
                "n",
                format!("{} shards supplied", work.shards.len()),
            ));
        }
        let min_shard = work.shards.iter().map(Shard::len).min().unwrap_or(0);
        if config.batch_size > min_shard {
            return Err(invalid(
                "B",
                format!("exceeds the smallest shard ({min_shard})"),
            ));
        }
        if config.m_c > min_shard {
            return Err(invalid(
                "m_c",
                format!("exceeds the smallest shard ({min_shard})"),
            ));
        }
        let registry = KeyRegistry::generate(config.n, config.seed);
        let w = work.initial.clone().unwrap_or_else(|| {
            work.model
                .initial_params(rng::child_seed(config.seed, "init", &[]))
        });
        if w.dim() != work.model.dim() {
            return Err(invalid("initial", "dimension does not match the model"));
        }
        let nodes = (0..config.n)
            .map(|i| {
                NodeState::new(
                    i,
                    w.clone(),
                    registry.secret(i).clone(),
                    population.is_byzantine(i),
                )
            })
            .collect();
        let pool = if config.attack.mode == adversary::AttackMode::GammaSearch {
            work.shards
                .iter()
                .flat_map(|s| s.examples.iter().cloned())
                .collect()
        } else {
            Vec::new()
        };
        let mut first = b"initial-epoch-seed".to_vec();
        first.extend_from_slice(&config.seed.to_be_bytes());
        Ok(Self {
            config: config.clone(),
            population,
            work,
            nodes,
            network: Network::new(registry, config.trace),
            epoch_seed: network::sha256(&first),
            t: 0,
            pool,
        })
    }

    pub fn nodes(&self) -> &[NodeState] {
        &self.nodes
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn epoch_seed(&self) -> [u8; 32] {
        self.epoch_seed
    }

    pub fn epoch(&self) -> usize {
        self.t
    }

    /// Parameters of the lowest-id honest node.
    pub fn params(&self) -> &ParamVector {
        let node = self
            .nodes
            .iter()
            .find(|n| !n.byzantine)
            .unwrap_or(&self.nodes[0]);
        &node.w
    }

    pub fn honest_agree(&self) -> bool {
        let w = self.params();
        self.nodes
            .iter()
            .filter(|n| !n.byzantine)
            .all(|n| n.w.bit_eq(w))
    }

    fn attacking(&self) -> bool {
        self.config.attack.is_active()
    }

    fn roles(&self, seed: &[u8; 32], epoch: u64) -> [Vec<(NodeId, [u8; 32])>; 3] {
        let q = [self.config.q1, self.config.q2, self.config.q3];
        let roles = [Role::Proposer, Role::Voter, Role::Consensus];
        roles.map(|role| {
            let q = q[role_index(role)];
            self.nodes
                .iter()
                .filter_map(|node| {
                    let ticket = sortition(role.tag(), seed, &node.key, epoch, q);
                    ticket.selected.then_some((node.id, ticket.proof))
                })
                .collect()
        })
    }

    /// One epoch of the protocol.
    pub fn step(&mut self) -> Result<DecentralizedEpoch> {
        let started = Instant::now();
        let t = self.t + 1;
        let epoch = t as u64;
        let n = self.config.n;
        let seed = self.config.seed;
        let f = self.config.f;
        let dim = self.work.model.dim();
        let attacking = self.attacking();
        let coalition = attacking && self.config.attack.coalition;
        let equivocation = if attacking {
            self.config.attack.equivocation
        } else {
            EquivocationMode::Consistent
        };

        let mut reseeds = 0;
        let [proposers, voters, committee] = loop {
            let roles = self.roles(&self.epoch_seed, epoch);
            if roles.iter().all(|r| !r.is_empty()) {
                break roles;
            }
            reseeds += 1;
            if reseeds > MAX_RESEEDS {
                return Err(DecentralizedError::SortitionExhausted {
                    epoch: t,
                    attempts: reseeds,
                });
            }
            let mut next = self.epoch_seed.to_vec();
            next.extend_from_slice(b"reseed");
            self.epoch_seed = network::sha256(&next);
        };
        let epoch_seed = self.epoch_seed;
        let sent_before = self.network.messages_sent();
        let w = self.params().clone();
        let eta = self.config.eta.at(t);
        let is_byz = |id: NodeId| self.population.is_byzantine(id);

        // Proposing round.
        let computed = proposers
            .par_iter()
            .map(|&(id, _)| -> Result<Option<(ParamVector, f64)>> {
                if is_byz(id) && attacking {
                    return Ok(None);
                }
                let mut rng = rng::stream(seed, "batch", &[epoch, id as u64]);
                let batch = sample_batch(
                    &self.work.shards[id].examples,
                    self.config.batch_size,
                    &mut rng,
                )?;
                Ok(Some((
                    self.work.model.gradient(&w, &batch)?,
                    self.work.model.loss(&w, &batch)?,
                )))
            })
            .collect::<Result<Vec<_>>>()?;
        let losses: Vec<f64> = computed.iter().flatten().map(|(_, l)| *l).collect();
        let train_loss = if losses.is_empty() {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        let layout: Vec<bool> = proposers.iter().map(|&(id, _)| is_byz(id)).collect();
        let honest_grads: Vec<ParamVector> = computed
            .iter()
            .zip(&layout)
            .filter(|(_, b)| !**b)
            .filter_map(|(c, _)| c.as_ref().map(|(g, _)| g.clone()))
            .collect();
        let byz_voters = voters.iter().filter(|(id, _)| is_byz(*id)).count();
        let attack = {
            let cfg = &self.config;
            let pool = &self.pool;
            let model = self.work.model;
            let w = &w;
            adversary::craft_attack(&cfg.attack, honest_grads, layout.clone(), dim, |honest| {
                let (sim_voters, sim_byz) = if coalition {
                    (voters.len() - byz_voters, byz_voters)
                } else {
                    (voters.len(), 0)
                };
                let batches = (0..sim_voters)
                    .map(|i| {
                        let mut rng = rng::stream(seed, "adversary-holdout", &[epoch, i as u64]);
                        sample_batch(pool, cfg.m_c, &mut rng)
                    })
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                let sim = HoldoutSimulation::new(model, w, eta, f, batches, sim_byz, honest)?;
                Ok::<_, DecentralizedError>(RuleContext::Holdout(sim))
            })?
        };

        for (slot, &(id, proof)) in proposers.iter().enumerate() {
            let key = self.nodes[id].key.clone();
            match (&computed[slot], &attack) {
                (Some((g, _)), _) => {
                    let msg = NetMessage::sign(
                        id,
                        epoch,
                        RoundTag::Proposal,
                        encode_proposal(&proof, g),
                        &key,
                    );
                    self.network.broadcast(&mut self.nodes, msg)?;
                }
                (None, Some((v, _))) => {
                    let base = ByzantineMessage::Gradient(v.clone());
                    let eq_seed = rng::child_seed(seed, "equivocate", &[epoch, id as u64]);
                    let uniform = Arc::new(NetMessage::sign(
                        id,
                        epoch,
                        RoundTag::Proposal,
                        encode_proposal(&proof, v),
                        &key,
                    ));
                    self.network.broadcast_each(&mut self.nodes, id, |r| {
                        if equivocation == EquivocationMode::Consistent {
                            return Arc::clone(&uniform);
                        }
                        let ByzantineMessage::Gradient(g) =
                            equivocate(&base, r, equivocation, eq_seed)
                        else {
                            unreachable!("gradient in, gradient out")
                        };
                        Arc::new(NetMessage::sign(
                            id,
                            epoch,
                            RoundTag::Proposal,
                            encode_proposal(&proof, &g),
                            &key,
                        ))
                    })?;
                }
                (None, None) => unreachable!("Byzantine proposer without attack vector"),
            }
        }

        let registry = self.network.registry().clone();
        let verifier = Verifier {
            registry: &registry,
            epoch,
            seed: epoch_seed,
            q: [self.config.q1, self.config.q2, self.config.q3],
            dim,
        };
        let inboxes: Vec<Vec<Arc<NetMessage>>> =
            self.nodes.iter_mut().map(NodeState::drain).collect();
        let received: Vec<Accepted<ParamVector>> = inboxes
            .par_iter()
            .map(|inbox| verifier.accept_proposals(inbox))
            .collect();

        // Voting round.
        let proposer_ids: Vec<NodeId> = proposers.iter().map(|(id, _)| *id).collect();
        let byz_proposer_ids: Vec<NodeId> = proposer_ids
            .iter()
            .copied()
            .filter(|&i| is_byz(i))
            .collect();
        let honest_proposer_ids: Vec<NodeId> = proposer_ids
            .iter()
            .copied()
            .filter(|&i| !is_byz(i))
            .collect();
        let ballots = voters
            .par_iter()
            .map(|&(c, _)| -> Result<Vec<NodeId>> {
                if coalition && is_byz(c) {
                    let k = ballot_size(proposer_ids.len(), f);
                    let mut rng = rng::stream(seed, "coalition", &[epoch, c as u64]);
                    let b =
                        coalition_ballot(c, &byz_proposer_ids, &honest_proposer_ids, k, &mut rng)?;
                    return Ok(b.endorsed);
                }
                let props = &received[c].items;
                if props.is_empty() {
                    return Ok(Vec::new());
                }
                let mut rng = rng::stream(seed, "holdout", &[epoch, c as u64]);
                let batch = sample_batch(&self.work.shards[c].examples, self.config.m_c, &mut rng)?;
                let ids: Vec<NodeId> = props.keys().copied().collect();
                let losses = props
                    .values()
                    .map(|g| self.work.model.loss(&w.step(eta, g), &batch))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                Ok(k_smallest(&losses, ballot_size(ids.len(), f))
                    .into_iter()
                    .map(|i| ids[i])
                    .collect())
            })
            .collect::<Result<Vec<_>>>()?;
        for (&(c, proof), endorsed) in voters.iter().zip(&ballots) {
            let key = self.nodes[c].key.clone();
            if is_byz(c) && equivocation == EquivocationMode::PerRecipientNoise {
                let base = ByzantineMessage::Ballot {
                    endorsed: endorsed.clone(),
                    candidates: proposer_ids.clone(),
                };
                let eq_seed = rng::child_seed(seed, "equivocate", &[epoch, c as u64]);
                self.network.broadcast_each(&mut self.nodes, c, |r| {
                    let ByzantineMessage::Ballot { endorsed, .. } =
                        equivocate(&base, r, equivocation, eq_seed)
                    else {
                        unreachable!("ballot in, ballot out")
                    };
                    Arc::new(NetMessage::sign(
                        c,
                        epoch,
                        RoundTag::Vote,
                        encode_ballot(&proof, &endorsed),
                        &key,
                    ))
                })?;
            } else {
                let msg = NetMessage::sign(
                    c,
                    epoch,
                    RoundTag::Vote,
                    encode_ballot(&proof, endorsed),
                    &key,
                );
                self.network.broadcast(&mut self.nodes, msg)?;
            }
        }

        // Each node's own candidate.
        let inboxes: Vec<Vec<Arc<NetMessage>>> =
            self.nodes.iter_mut().map(NodeState::drain).collect();
        let locals: Vec<(Accepted<Vec<NodeId>>, Option<UnionResult>, ParamVector)> = inboxes
            .par_iter()
            .zip(&received)
            .map(|(inbox, props)| {
                let votes = verifier.accept_ballots(inbox);
                let list: Vec<(NodeId, Vec<NodeId>)> =
                    votes.items.iter().map(|(k, v)| (*k, v.clone())).collect();
                let union = id_union_consensus(&props.items, &list, props.items.len(), f);
                let candidate = match &union {
                    Some(u) => w.step(eta, &u.update),
                    None => w.clone(),
                };
                (votes, union, candidate)
            })
            .collect();

        // Consensus round.
        for &(m, proof) in &committee {
            let key = self.nodes[m].key.clone();
            let msg = if attacking && is_byz(m) {
                let payload = encode_consensus(&proof, &poison(dim), &[]);
                NetMessage::sign(m, epoch, RoundTag::Consensus, payload, &key)
            } else {
                let (votes, _, candidate) = &locals[m];
                let attachments: Vec<Arc<NetMessage>> = received[m]
                    .msgs
                    .iter()
                    .chain(&votes.msgs)
                    .cloned()
                    .collect();
                let digests: Vec<[u8; 32]> = attachments.iter().map(|a| a.digest()).collect();
                let payload = encode_consensus(&proof, candidate, &digests);
                NetMessage::sign_with(m, epoch, RoundTag::Consensus, payload, attachments, &key)
            };
            self.network.broadcast(&mut self.nodes, msg)?;
        }

        let inboxes: Vec<Vec<Arc<NetMessage>>> =
            self.nodes.iter_mut().map(NodeState::drain).collect();
        // A node's decision depends only on the consensus messages it accepted,
        // so nodes with identical accepted sets share one evaluation.
        let accepted: Vec<Vec<(Arc<NetMessage>, ConsensusPayload)>> = inboxes
            .par_iter()
            .map(|inbox| {
                let mut seen = BTreeSet::new();
                inbox
                    .iter()
                    .filter_map(|m| {
                        let c = verifier.consensus(m)?;
                        seen.insert(m.sender).then(|| (Arc::clone(m), c))
                    })
                    .collect()
            })
            .collect();
        let keys: Vec<Vec<[u8; 32]>> = accepted
            .iter()
            .map(|a| a.iter().map(|(m, _)| m.digest()).collect())
            .collect();
        let mut groups: HashMap<&Vec<[u8; 32]>, usize> = HashMap::new();
        let mut representatives = Vec::new();
        for (node, key) in keys.iter().enumerate() {
            groups.entry(key).or_insert_with(|| {
                representatives.push(node);
                representatives.len() - 1
            });
        }
        let decisions: Vec<Decision> = representatives
            .par_iter()
            .map(|&node| decide(&verifier, &accepted[node], f, &w, eta))
            .collect();

        for (node, key) in self.nodes.iter_mut().zip(&keys) {
            if let Some(v) = &decisions[groups[key]].value {
                node.w = v.clone();
            }
        }
        self.t = t;

        let honest: Vec<NodeId> = (0..n).filter(|&i| !is_byz(i)).collect();
        let reference = honest.first().copied().unwrap_or(0);
        let decision = &decisions[groups[&keys[reference]]];
        let agreement = self.honest_agree();
        let distinct_honest_candidates = honest
            .iter()
            .map(|&i| candidate_hash(&locals[i].2))
            .collect::<BTreeSet<_>>()
            .len();
        let union = match decision.path {
            ConsensusPath::Recovered => decision.recovered.clone(),
            ConsensusPath::Failed => None,
            _ => honest
                .iter()
                .find(|&&i| Some(candidate_hash(&locals[i].2)) == decision.hash)
                .and_then(|&i| locals[i].1.clone()),
        };

        let next = self.params().clone();
        let mut seed_bytes = next.to_le_bytes();
        seed_bytes.extend_from_slice(&epoch.to_be_bytes());
        self.epoch_seed = network::sha256(&seed_bytes);

        let mut record = EpochRecord {
            t,
            train_loss,
            test_loss: f64::NAN,
            test_accuracy: None,
            excess_loss: self.work.model.as_quadratic().map(|q| q.risk(&next)),
            uc_size: union.as_ref().map_or(0, |u| u.members.len()),
            byz_in_uc: union
                .as_ref()
                .map_or(0, |u| u.members.iter().filter(|&&i| is_byz(i)).count()),
            byz_proposers: layout.iter().filter(|b| **b).count(),
            byz_voters,
            byz_majority: [&proposers, &voters, &committee].iter().any(|r| {
                let b = r.iter().filter(|(id, _)| is_byz(*id)).count();
                2 * b >= r.len()
            }),
            gamma_used: attack.as_ref().map(|(_, g)| *g),
            messages_sent: self.network.messages_sent() - sent_before,
            forwarded_payloads: 0,
            wall_time: Default::default(),
        };
        if !self.work.eval.is_empty() {
            let e = evaluate(self.work.model, &next, self.work.eval)?;
            record.test_loss = e.loss;
            record.test_accuracy = e.accuracy;
        }
        record.wall_time = started.elapsed();
        Ok(DecentralizedEpoch {
            record,
            proposers: proposer_ids,
            voters: voters.iter().map(|(id, _)| *id).collect(),
            committee: committee.iter().map(|(id, _)| *id).collect(),
            reseeds,
            path: decision.path,
            agreement,
            distinct_honest_candidates,
            equivocators: decision.equivocators.clone(),
        })
    }
}

fn role_index(role: Role) -> usize {
    match role {
        Role::Proposer => 0,
        Role::Voter => 1,
        Role::Consensus => 2,
    }
}

fn decide(
    verifier: &Verifier<'_>,
    accepted: &[(Arc<NetMessage>, ConsensusPayload)],
    f: f64,
    w: &ParamVector,
    eta: f64,
) -> Decision {
    let committee: BTreeSet<NodeId> = accepted.iter().map(|(m, _)| m.sender).collect();
    let votes: Vec<(NodeId, ParamVector)> = accepted
        .iter()
        .map(|(m, c)| (m.sender, c.candidate.clone()))
        .collect();
    match consensus_round(&votes, &committee) {
        Ok(d) => Decision {
            value: Some(d.value),
            path: d.path,
            hash: Some(d.hash),
            recovered: None,
            equivocators: Vec::new(),
        },
        Err(_) => {
            let msgs: Vec<Arc<NetMessage>> = accepted.iter().map(|(m, _)| Arc::clone(m)).collect();
            let (union, equivocators) = verifier.recover(&msgs, f);
            match union {
                Some(u) => {
                    let value = w.step(eta, &u.update);
                    Decision {
                        hash: Some(candidate_hash(&value)),
                        value: Some(value),
                        path: ConsensusPath::Recovered,
                        recovered: Some(u),
                        equivocators,
                    }
                }
                None => Decision {
                    value: None,
                    path: ConsensusPath::Failed,
                    hash: None,
                    recovered: None,
                    equivocators,
                },
            }
        }
    }
}

/// Run `config.epochs` epochs; returns the agreed final parameters and the
/// per-epoch outcomes.
pub fn run_decentralized(
    config: &DecentralizedConfig,
    population: &Population,
    work: Workload<'_>,
) -> Result<(ParamVector, Vec<DecentralizedEpoch>)> {
    let mut runner = DecentralizedRunner::new(config, population, work)?;
    let mut epochs = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        epochs.push(runner.step()?);
    }
    Ok((runner.params().clone(), epochs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::AttackMode;
    use crate::learnkit::{
        make_synthetic_dataset, partition, DatasetKind, DatasetSpec, LossModel, PartitionMode,
        Quadratic,
    };
    use crate::orchestrator::{run_holdout_sgd, AggregationRule, RunConfig};

    fn setup(n: usize) -> (LossModel, Vec<Shard>) {
        let d = 5;
        let quad = Quadratic::with_linear_spectrum(1.0, 3.0, ParamVector::filled(d, 1.0), Some(2))
            .unwrap();
        let spec = DatasetSpec {
            kind: DatasetKind::QuadraticNoise,
            m: n * 12,
            d,
            num_classes: 10,
            noise: 1.0,
            separation: 1.0,
        };
        let data = make_synthetic_dataset(&spec, 3).unwrap();
        (
            LossModel::Quadratic(quad),
            partition(&data, n, PartitionMode::UniformIid, 4).unwrap(),
        )
    }

    fn config(n: usize) -> DecentralizedConfig {
        DecentralizedConfig {
            epochs: 4,
            n,
            q1: 1.0,
            q2: 1.0,
            q3: 1.0,
            f: 0.0,
            actual_f: 0.0,
            batch_size: 3,
            m_c: 5,
            eta: StepSchedule::Constant(0.1),
            attack: AttackConfig::default(),
            seed: 21,
            trace: false,
        }
    }

    #[test]
    fn full_participation_matches_central_holdout() {
        let n = 9;
        let (model, shards) = setup(n);
        let pop = Population::new(n, 0.0, 1).unwrap();
        let cfg = config(n);
        let (w_dec, epochs) =
            run_decentralized(&cfg, &pop, Workload::new(&model, &shards, &[])).unwrap();
        let central = RunConfig {
            epochs: cfg.epochs,
            n,
            num_proposers: n,
            num_voters: n,
            f: 0.0,
            actual_f: 0.0,
            batch_size: cfg.batch_size,
            m_c: cfg.m_c,
            eta: cfg.eta,
            rule: AggregationRule::Holdout,
            attack: AttackConfig::default(),
            seed: cfg.seed,
        };
        let (w_central, _) =
            run_holdout_sgd(&central, &pop, Workload::new(&model, &shards, &[])).unwrap();
        assert!(w_dec.bit_eq(&w_central));
        for e in &epochs {
            assert_eq!(e.path, ConsensusPath::Quorum);
            assert!(e.agreement);
            assert_eq!(
                e.record.messages_sent,
                decentralized_message_count(n, n, n, n)
            );
        }
    }

    #[test]
    fn equivocation_keeps_honest_nodes_in_agreement() {
        let n = 24;
        let (model, shards) = setup(n);
        let pop = Population::new(n, 0.25, 2).unwrap();
        let mut cfg = config(n);
        cfg.f = 0.25;
        cfg.actual_f = 0.25;
        cfg.q1 = 0.5;
        cfg.q2 = 0.5;
        cfg.q3 = 0.6;
        cfg.attack = AttackConfig {
            equivocation: EquivocationMode::PerRecipientNoise,
            ..AttackConfig::gamma_fixed(2.0)
        };
        let (_, epochs) =
            run_decentralized(&cfg, &pop, Workload::new(&model, &shards, &[])).unwrap();
        for e in &epochs {
            assert!(
                e.agreement,
                "epoch {} diverged via {:?}",
                e.record.t, e.path
            );
            let counted = decentralized_message_count(
                n,
                e.proposers.len(),
                e.voters.len(),
                e.committee.len(),
            );
            assert_eq!(e.record.messages_sent, counted);
        }
    }

    #[test]
    fn consistent_attack_is_quorum() {
        let n = 18;
        let (model, shards) = setup(n);
        let pop = Population::new(n, 0.2, 2).unwrap();
        let mut cfg = config(n);
        cfg.f = 0.2;
        cfg.actual_f = 0.2;
        cfg.attack = AttackConfig::gamma_fixed(1.0);
        assert_eq!(cfg.attack.mode, AttackMode::GammaFixed);
        let (_, epochs) =
            run_decentralized(&cfg, &pop, Workload::new(&model, &shards, &[])).unwrap();
        for e in &epochs {
            assert!(e.agreement);
            assert_eq!(e.path, ConsensusPath::Quorum);
            assert_eq!(e.distinct_honest_candidates, 1);
        }
    }

    #[test]
    fn forged_messages_are_ignored() {
        let n = 6;
        let (model, shards) = setup(n);
        let pop = Population::new(n, 0.0, 1).unwrap();
        let cfg = config(n);
        let mut clean =
            DecentralizedRunner::new(&cfg, &pop, Workload::new(&model, &shards, &[])).unwrap();
        let mut forged =
            DecentralizedRunner::new(&cfg, &pop, Workload::new(&model, &shards, &[])).unwrap();
        clean.step().unwrap();
        // A proposal claiming node 2's identity, tagged with node 5's key.
        let bogus = encode_proposal(&[0; 32], &ParamVector::filled(5, 1e6));
        let key = forged.nodes[5].key.clone();
        let msg = Arc::new(NetMessage::sign(2, 1, RoundTag::Proposal, bogus, &key));
        for node in &mut forged.nodes {
            node.inbox.push(Arc::clone(&msg));
        }
        forged.step().unwrap();
        assert!(clean.params().bit_eq(forged.params()));
    }

    #[test]
    fn seeds_chain_from_parameters() {
        let n = 6;
        let (model, shards) = setup(n);
        let pop = Population::new(n, 0.0, 1).unwrap();
        let mut r = DecentralizedRunner::new(&config(n), &pop, Workload::new(&model, &shards, &[]))
            .unwrap();
        let mut first = b"initial-epoch-seed".to_vec();
        first.extend_from_slice(&21u64.to_be_bytes());
        assert_eq!(r.epoch_seed(), network::sha256(&first));
        r.step().unwrap();
        let mut next = r.params().to_le_bytes();
        next.extend_from_slice(&1u64.to_be_bytes());
        assert_eq!(r.epoch_seed(), network::sha256(&next));
    }

    #[test]
    fn validation() {
        let mut cfg = config(4);
        cfg.q2 = 0.0;
        assert!(matches!(
            cfg.validate(),
            Err(DecentralizedError::InvalidConfig { field: "q2", .. })
        ));
        let mut cfg = config(4);
        cfg.f = 0.34;
        assert!(cfg.validate().is_err());
    }
}
