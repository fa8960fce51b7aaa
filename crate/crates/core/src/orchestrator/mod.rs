//! Central-server protocol runners: distributed SGD with a pluggable
//! aggregation rule, and HoldOut SGD with voting committees.

mod analysis;

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{
    self, coalition_ballot, AdversaryError, AttackConfig, AttackMode, HoldoutSimulation,
    RuleContext,
};
use crate::aggregation::{
    self, ballot_size, AggregationError, ConsensusOutcome, GradientProposal, VoteBallot,
};
use crate::committee::{draw_committee, CommitteeDraw, CommitteeError, Population, Role};
use crate::learnkit::{sample_batch, Example, LearnError, LossModel, Shard};
use crate::params::ParamVector;
use crate::rng;
use crate::NodeId;

pub use analysis::{
    check_alignment, evaluate, fit_rate_curve, AlignmentEpoch, AlignmentReport, Evaluation, RateFit,
};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid config: {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("this check needs a quadratic model")]
    NotQuadratic,
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Committee(#[from] CommitteeError),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
}

pub type Result<T, E = OrchestratorError> = std::result::Result<T, E>;

fn invalid(field: &'static str, reason: impl Into<String>) -> OrchestratorError {
    OrchestratorError::InvalidConfig {
        field,
        reason: reason.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    Constant(f64),
    /// `η_t = 1 / (2 α t)`.
    Inverse(f64),
}

impl StepSchedule {
    /// Step size for 1-based epoch `t`.
    pub fn at(self, t: usize) -> f64 {
        match self {
            Self::Constant(c) => c,
            Self::Inverse(alpha) => 1.0 / (2.0 * alpha * t as f64),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationRule {
    Average,
    Krum,
    TrimmedMean,
    Holdout,
}

impl AggregationRule {
    pub fn name(self) -> &'static str {
        match self {
            Self::Average => "average",
            Self::Krum => "krum",
            Self::TrimmedMean => "trimmed_mean",
            Self::Holdout => "holdout",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(rename = "T")]
    pub epochs: usize,
    pub n: usize,
    #[serde(rename = "N_p")]
    pub num_proposers: usize,
    #[serde(rename = "N_c")]
    pub num_voters: usize,
    /// Byzantine fraction the protocol is configured to tolerate.
    pub f: f64,
    /// True Byzantine fraction of the population.
    #[serde(default)]
    pub actual_f: f64,
    #[serde(rename = "B")]
    pub batch_size: usize,
    pub m_c: usize,
    pub eta: StepSchedule,
    pub rule: AggregationRule,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    /// Shape checks that need no data.
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(invalid("n", "must be positive"));
        }
        if self.num_proposers == 0 || self.num_proposers > self.n {
            return Err(invalid("N_p", format!("must be in 1..={}", self.n)));
        }
        if self.rule == AggregationRule::Holdout
            && (self.num_voters == 0 || self.num_voters > self.n)
        {
            return Err(invalid("N_c", format!("must be in 1..={}", self.n)));
        }
        if !(0.0..0.5).contains(&self.f) {
            return Err(invalid("f", "must lie in [0, 1/2)"));
        }
        if !(0.0..1.0).contains(&self.actual_f) {
            return Err(invalid("actual_f", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(invalid("B", "must be positive"));
        }
        if self.m_c == 0 {
            return Err(invalid("m_c", "must be positive"));
        }
        let eta_ok = match self.eta {
            StepSchedule::Constant(c) => c.is_finite() && c > 0.0,
            StepSchedule::Inverse(a) => a.is_finite() && a > 0.0,
        };
        if !eta_ok {
            return Err(invalid("eta", "must be positive and finite"));
        }
        if self.rule == AggregationRule::Krum {
            let neighbours = self
                .num_proposers
                .checked_sub(aggregation::ceil_count(self.f * self.num_proposers as f64) + 2);
            if neighbours.unwrap_or(0) == 0 {
                return Err(invalid("N_p", "too small for krum at this f"));
            }
        }
        let a = &self.attack;
        if a.mode == AttackMode::GammaFixed && !a.gamma.is_some_and(|g| g.is_finite() && g >= 0.0) {
            return Err(invalid(
                "attack.gamma",
                "gamma_fixed needs a finite gamma ≥ 0",
            ));
        }
        if !(a.gamma_hi.is_finite() && a.gamma_hi > 0.0) {
            return Err(invalid("attack.gamma_hi", "must be positive"));
        }
        if !(a.tol.is_finite() && a.tol > 0.0) {
            return Err(invalid("attack.tol", "must be positive"));
        }
        if !(0.0..=1.0).contains(&a.trimmed_coverage) {
            return Err(invalid("attack.trimmed_coverage", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Full check against the population and the data.
    pub fn validate_with(&self, population: &Population, work: &Workload<'_>) -> Result<()> {
        self.validate()?;
        if population.n() != self.n {
            return Err(invalid(
                "n",
                format!("population has {} nodes", population.n()),
            ));
        }
        if work.shards.len() != self.n {
            return Err(invalid(
                "n",
                format!("{} shards supplied", work.shards.len()),
            ));
        }
        let min_shard = work.shards.iter().map(Shard::len).min().unwrap_or(0);
        if self.batch_size > min_shard {
            return Err(invalid(
                "B",
                format!("exceeds the smallest shard ({min_shard})"),
            ));
        }
        if self.rule == AggregationRule::Holdout && self.m_c > min_shard {
            return Err(invalid(
                "m_c",
                format!("exceeds the smallest shard ({min_shard})"),
            ));
        }
        if let Some(w) = &work.initial {
            if w.dim() != work.model.dim() {
                return Err(invalid("initial", "dimension does not match the model"));
            }
        }
        Ok(())
    }
}

/// Model, per-node data and evaluation set of a run.
#[derive(Clone, Debug)]
pub struct Workload<'a> {
    pub model: &'a LossModel,
    /// Indexed by node id.
    pub shards: &'a [Shard],
    /// Held-aside evaluation set; may be empty.
    pub eval: &'a [Example],
    /// `w_1`; defaults to the model's initial parameters.
    pub initial: Option<ParamVector>,
}

impl<'a> Workload<'a> {
    pub fn new(model: &'a LossModel, shards: &'a [Shard], eval: &'a [Example]) -> Self {
        Self {
            model,
            shards,
            eval,
            initial: None,
        }
    }

    pub fn with_initial(mut self, w: ParamVector) -> Self {
        self.initial = Some(w);
        self
    }

    fn start(&self, seed: u64) -> ParamVector {
        self.initial.clone().unwrap_or_else(|| {
            self.model
                .initial_params(rng::child_seed(seed, "init", &[]))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub t: usize,
    /// Mean batch loss of the proposers that computed real gradients.
    pub train_loss: f64,
    /// At `w_{t+1}`; NaN without an evaluation set.
    pub test_loss: f64,
    pub test_accuracy: Option<f64>,
    /// `L(w_{t+1}) − L(w*)`, for the quadratic model.
    pub excess_loss: Option<f64>,
    /// Proposals that entered the update.
    pub uc_size: usize,
    pub byz_in_uc: usize,
    pub byz_proposers: usize,
    pub byz_voters: usize,
    /// Some drawn committee had `X ≥ N/2` Byzantine members.
    pub byz_majority: bool,
    pub gamma_used: Option<f64>,
    pub messages_sent: u64,
    /// Proposal payloads relayed by the server to voters, counted apart.
    pub forwarded_payloads: u64,
    #[serde(skip)]
    pub wall_time: Duration,
}

/// Closed-form per-epoch message count of the central protocols:
/// `(messages, forwarded proposal payloads)`.
pub fn central_message_count(
    rule: AggregationRule,
    num_proposers: usize,
    num_voters: usize,
) -> (u64, u64) {
    let (p, c) = (num_proposers as u64, num_voters as u64);
    match rule {
        AggregationRule::Holdout => (p + 2 * c, p * c),
        _ => (p, 0),
    }
}

/// Everything one HoldOut epoch produced, for audits beyond the record.
#[derive(Clone, Debug)]
pub struct HoldoutEpoch {
    pub record: EpochRecord,
    pub w_before: ParamVector,
    pub eta: f64,
    pub proposers: CommitteeDraw,
    pub voters: CommitteeDraw,
    pub proposals: Vec<GradientProposal>,
    pub ballots: Vec<VoteBallot>,
    pub outcome: ConsensusOutcome,
    /// Holdout samples of the voters that voted honestly.
    pub holdout_batches: Vec<(NodeId, Vec<Example>)>,
}

#[derive(Clone, Debug)]
pub struct DistributedEpoch {
    pub record: EpochRecord,
    pub w_before: ParamVector,
    pub eta: f64,
    pub proposers: CommitteeDraw,
    pub proposals: Vec<GradientProposal>,
    pub update: ParamVector,
}

struct ProposerPhase {
    draw: CommitteeDraw,
    /// Per slot: gradient and batch loss if computed honestly.
    computed: Vec<Option<(ParamVector, f64)>>,
    layout: Vec<bool>,
}

impl ProposerPhase {
    fn train_loss(&self) -> f64 {
        let losses: Vec<f64> = self.computed.iter().flatten().map(|(_, l)| *l).collect();
        if losses.is_empty() {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        }
    }

    fn honest_gradients(&self) -> Vec<ParamVector> {
        self.computed
            .iter()
            .zip(&self.layout)
            .filter(|(_, b)| !**b)
            .filter_map(|(c, _)| c.as_ref().map(|(g, _)| g.clone()))
            .collect()
    }

    fn proposals(&self, byz: Option<&ParamVector>) -> Vec<GradientProposal> {
        self.draw
            .members
            .iter()
            .zip(&self.computed)
            .map(|(&id, c)| {
                let grad = match (c, byz) {
                    (Some((g, _)), _) => g.clone(),
                    (None, Some(v)) => v.clone(),
                    (None, None) => unreachable!("attack vector missing"),
                };
                GradientProposal::new(id, grad)
            })
            .collect()
    }
}

/// State shared by both central runners.
struct Engine<'a> {
    config: RunConfig,
    population: &'a Population,
    work: Workload<'a>,
    w: ParamVector,
    t: usize,
}

impl<'a> Engine<'a> {
    fn new(config: &RunConfig, population: &'a Population, work: Workload<'a>) -> Result<Self> {
        config.validate_with(population, &work)?;
        let w = work.start(config.seed);
        Ok(Self {
            config: config.clone(),
            population,
            work,
            w,
            t: 0,
        })
    }

    fn attacking(&self) -> bool {
        self.config.attack.is_active()
    }

    fn draw(&self, role: Role, size: usize, t: usize) -> Result<CommitteeDraw> {
        let label = match role {
            Role::Proposer => "proposers",
            Role::Voter => "voters",
            Role::Consensus => "consensus",
        };
        let mut rng = rng::stream(self.config.seed, label, &[t as u64]);
        Ok(draw_committee(
            self.population,
            size,
            role,
            t as u64,
            &mut rng,
        )?)
    }

    fn proposer_phase(&self, t: usize) -> Result<ProposerPhase> {
        let draw = self.draw(Role::Proposer, self.config.num_proposers, t)?;
        let layout: Vec<bool> = draw
            .members
            .iter()
            .map(|&id| self.population.is_byzantine(id))
            .collect();
        let attacking = self.attacking();
        let computed = draw
            .members
            .par_iter()
            .zip(&layout)
            .map(|(&id, &byz)| -> Result<Option<(ParamVector, f64)>> {
                if byz && attacking {
                    return Ok(None);
                }
                let mut rng = rng::stream(self.config.seed, "batch", &[t as u64, id as u64]);
                let batch = sample_batch(
                    &self.work.shards[id].examples,
                    self.config.batch_size,
                    &mut rng,
                )?;
                let g = self.work.model.gradient(&self.w, &batch)?;
                let loss = self.work.model.loss(&self.w, &batch)?;
                Ok(Some((g, loss)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ProposerPhase {
            draw,
            computed,
            layout,
        })
    }

    fn attack_vector<'s>(
        &'s self,
        phase: &ProposerPhase,
        context: impl FnOnce(&[ParamVector]) -> Result<RuleContext<'s>>,
    ) -> Result<Option<(ParamVector, f64)>> {
        if !self.attacking() {
            return Ok(None);
        }
        adversary::craft_attack(
            &self.config.attack,
            phase.honest_gradients(),
            phase.layout.clone(),
            self.work.model.dim(),
            context,
        )
    }

    fn finish_record(&self, mut record: EpochRecord, started: Instant) -> Result<EpochRecord> {
        if !self.work.eval.is_empty() {
            let e = evaluate(self.work.model, &self.w, self.work.eval)?;
            record.test_loss = e.loss;
            record.test_accuracy = e.accuracy;
        }
        record.excess_loss = self.work.model.as_quadratic().map(|q| q.risk(&self.w));
        record.wall_time = started.elapsed();
        Ok(record)
    }
}

fn blank_record(t: usize) -> EpochRecord {
    EpochRecord {
        t,
        train_loss: f64::NAN,
        test_loss: f64::NAN,
        test_accuracy: None,
        excess_loss: None,
        uc_size: 0,
        byz_in_uc: 0,
        byz_proposers: 0,
        byz_voters: 0,
        byz_majority: false,
        gamma_used: None,
        messages_sent: 0,
        forwarded_payloads: 0,
        wall_time: Duration::ZERO,
    }
}

/// Distributed SGD: each epoch draws `N_p` proposers and aggregates their
/// gradients with the configured baseline rule.
pub struct DistributedRunner<'a> {
    engine: Engine<'a>,
}

impl<'a> DistributedRunner<'a> {
    pub fn new(config: &RunConfig, population: &'a Population, work: Workload<'a>) -> Result<Self> {
        if config.rule == AggregationRule::Holdout {
            return Err(invalid(
                "rule",
                "distributed SGD takes average, krum or trimmed_mean",
            ));
        }
        Ok(Self {
            engine: Engine::new(config, population, work)?,
        })
    }

    pub fn params(&self) -> &ParamVector {
        &self.engine.w
    }

    pub fn epoch(&self) -> usize {
        self.engine.t
    }

    pub fn step(&mut self) -> Result<DistributedEpoch> {
        let started = Instant::now();
        let e = &self.engine;
        let t = e.t + 1;
        let cfg = &e.config;
        let phase = e.proposer_phase(t)?;
        let attack = e.attack_vector(&phase, |_| {
            Ok(match cfg.rule {
                AggregationRule::Krum => RuleContext::Krum { f: cfg.f },
                AggregationRule::TrimmedMean => RuleContext::TrimmedMean {
                    f: cfg.f,
                    coverage: cfg.attack.trimmed_coverage,
                },
                _ => RuleContext::Average,
            })
        })?;
        let proposals = phase.proposals(attack.as_ref().map(|(v, _)| v));
        let byz_proposers = phase.layout.iter().filter(|b| **b).count();
        let (update, uc_size, byz_in_uc) = match cfg.rule {
            AggregationRule::Krum => {
                let i = aggregation::krum_select(&proposals, cfg.f)?;
                (proposals[i].grad.clone(), 1, usize::from(phase.layout[i]))
            }
            AggregationRule::TrimmedMean => (
                aggregation::aggregate_trimmed_mean(&proposals, cfg.f)?,
                proposals.len(),
                byz_proposers,
            ),
            _ => (
                aggregation::aggregate_average(&proposals)?,
                proposals.len(),
                byz_proposers,
            ),
        };
        let eta = cfg.eta.at(t);
        let (messages, forwards) = central_message_count(cfg.rule, proposals.len(), 0);
        let mut record = blank_record(t);
        record.train_loss = phase.train_loss();
        record.uc_size = uc_size;
        record.byz_in_uc = byz_in_uc;
        record.byz_proposers = byz_proposers;
        record.byz_majority = phase.draw.has_byzantine_majority(e.population);
        record.gamma_used = attack.as_ref().map(|(_, g)| *g);
        record.messages_sent = messages;
        record.forwarded_payloads = forwards;

        let w_before = std::mem::replace(&mut self.engine.w, ParamVector::zeros(0));
        self.engine.w = w_before.step(eta, &update);
        self.engine.t = t;
        let record = self.engine.finish_record(record, started)?;
        Ok(DistributedEpoch {
            record,
            w_before,
            eta,
            proposers: phase.draw,
            proposals,
            update,
        })
    }
}

/// HoldOut SGD: proposers and voters drawn independently each epoch; voters
/// endorse the proposals with the best holdout loss and the union of the
/// well-endorsed proposals is averaged.
pub struct HoldoutRunner<'a> {
    engine: Engine<'a>,
    /// Union of all shards, for the adversary's simulated voters.
    pool: Vec<Example>,
}

impl<'a> HoldoutRunner<'a> {
    pub fn new(config: &RunConfig, population: &'a Population, work: Workload<'a>) -> Result<Self> {
        if config.rule != AggregationRule::Holdout {
            return Err(invalid("rule", "HoldOut SGD needs rule = holdout"));
        }
        let engine = Engine::new(config, population, work)?;
        let pool = if config.attack.mode == AttackMode::GammaSearch {
            engine
                .work
                .shards
                .iter()
                .flat_map(|s| s.examples.iter().cloned())
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self { engine, pool })
    }

    pub fn params(&self) -> &ParamVector {
        &self.engine.w
    }

    pub fn epoch(&self) -> usize {
        self.engine.t
    }

    pub fn step(&mut self) -> Result<HoldoutEpoch> {
        let started = Instant::now();
        let e = &self.engine;
        let cfg = &e.config;
        let t = e.t + 1;
        let eta = cfg.eta.at(t);
        let phase = e.proposer_phase(t)?;
        let voters = e.draw(Role::Voter, cfg.num_voters, t)?;
        let attacking = e.attacking();
        let coalition = attacking && cfg.attack.coalition;
        let byz_voters = voters.byzantine_count(e.population);

        let pool = &self.pool;
        let attack = e.attack_vector(&phase, |honest| {
            let (sim_voters, sim_byz) = if coalition {
                (voters.size() - byz_voters, byz_voters)
            } else {
                (voters.size(), 0)
            };
            let batches = (0..sim_voters)
                .map(|i| {
                    let mut rng = rng::stream(cfg.seed, "adversary-holdout", &[t as u64, i as u64]);
                    sample_batch(pool, cfg.m_c, &mut rng)
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let sim =
                HoldoutSimulation::new(e.work.model, &e.w, eta, cfg.f, batches, sim_byz, honest)?;
            Ok(RuleContext::Holdout(sim))
        })?;
        let proposals = phase.proposals(attack.as_ref().map(|(v, _)| v));

        let byz_slots: Vec<usize> = (0..proposals.len()).filter(|&i| phase.layout[i]).collect();
        let honest_slots: Vec<usize> = (0..proposals.len()).filter(|&i| !phase.layout[i]).collect();
        let k = ballot_size(proposals.len(), cfg.f);
        let votes = voters
            .members
            .par_iter()
            .map(|&c| -> Result<(VoteBallot, Option<Vec<Example>>)> {
                if coalition && e.population.is_byzantine(c) {
                    let mut rng = rng::stream(cfg.seed, "coalition", &[t as u64, c as u64]);
                    let b = coalition_ballot(c, &byz_slots, &honest_slots, k, &mut rng)?;
                    return Ok((b, None));
                }
                let mut rng = rng::stream(cfg.seed, "holdout", &[t as u64, c as u64]);
                let batch = sample_batch(&e.work.shards[c].examples, cfg.m_c, &mut rng)?;
                let b = aggregation::holdout_votes(
                    c,
                    &proposals,
                    &e.w,
                    eta,
                    e.work.model,
                    &batch,
                    cfg.f,
                )?;
                Ok((b, Some(batch)))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut ballots = Vec::with_capacity(votes.len());
        let mut holdout_batches = Vec::new();
        for (b, batch) in votes {
            if let Some(batch) = batch {
                holdout_batches.push((b.voter, batch));
            }
            ballots.push(b);
        }
        let outcome = aggregation::union_consensus(&ballots, &proposals, cfg.f)?;

        let (messages, forwards) = counted_messages(&proposals, &voters, &ballots);
        let mut record = blank_record(t);
        record.train_loss = phase.train_loss();
        record.uc_size = outcome.members.len();
        record.byz_in_uc = outcome.members.iter().filter(|&&i| phase.layout[i]).count();
        record.byz_proposers = byz_slots.len();
        record.byz_voters = byz_voters;
        record.byz_majority = phase.draw.has_byzantine_majority(e.population)
            || voters.has_byzantine_majority(e.population);
        record.gamma_used = attack.as_ref().map(|(_, g)| *g);
        record.messages_sent = messages;
        record.forwarded_payloads = forwards;

        let w_before = std::mem::replace(&mut self.engine.w, ParamVector::zeros(0));
        self.engine.w = w_before.step(eta, &outcome.update);
        self.engine.t = t;
        let record = self.engine.finish_record(record, started)?;
        Ok(HoldoutEpoch {
            record,
            w_before,
            eta,
            proposers: phase.draw,
            voters,
            proposals,
            ballots,
            outcome,
            holdout_batches,
        })
    }
}

/// Messages actually exchanged in a central HoldOut epoch: one upload per
/// proposal, one proposal bundle to each voter, one ballot back per voter.
fn counted_messages(
    proposals: &[GradientProposal],
    voters: &CommitteeDraw,
    ballots: &[VoteBallot],
) -> (u64, u64) {
    let uploads = proposals.len() as u64;
    let bundles = voters.size() as u64;
    let forwards = bundles * proposals.len() as u64;
    (uploads + bundles + ballots.len() as u64, forwards)
}

pub fn run_distributed_sgd(
    config: &RunConfig,
    population: &Population,
    work: Workload<'_>,
) -> Result<(ParamVector, Vec<EpochRecord>)> {
    let mut runner = DistributedRunner::new(config, population, work)?;
    let mut records = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        records.push(runner.step()?.record);
    }
    Ok((runner.engine.w, records))
}

pub fn run_holdout_sgd(
    config: &RunConfig,
    population: &Population,
    work: Workload<'_>,
) -> Result<(ParamVector, Vec<EpochRecord>)> {
    let mut runner = HoldoutRunner::new(config, population, work)?;
    let mut records = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        records.push(runner.step()?.record);
    }
    Ok((runner.engine.w, records))
}

/// Dispatch on `config.rule`.
pub fn run(
    config: &RunConfig,
    population: &Population,
    work: Workload<'_>,
) -> Result<(ParamVector, Vec<EpochRecord>)> {
    match config.rule {
        AggregationRule::Holdout => run_holdout_sgd(config, population, work),
        _ => run_distributed_sgd(config, population, work),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learnkit::{
        make_synthetic_dataset, partition, DatasetKind, DatasetSpec, PartitionMode, Quadratic,
    };

    fn quadratic_setup(n: usize, per_node: usize) -> (LossModel, Vec<Shard>) {
        let d = 6;
        let w_star = ParamVector::filled(d, 1.0);
        let model = LossModel::Quadratic(
            Quadratic::with_linear_spectrum(1.0, 3.0, w_star, Some(4)).unwrap(),
        );
        let spec = DatasetSpec {
            kind: DatasetKind::QuadraticNoise,
            m: n * per_node,
            d,
            num_classes: 10,
            noise: 1.0,
            separation: 1.0,
        };
        let data = make_synthetic_dataset(&spec, 5).unwrap();
        let shards = partition(&data, n, PartitionMode::UniformIid, 6).unwrap();
        (model, shards)
    }

    fn config(rule: AggregationRule) -> RunConfig {
        RunConfig {
            epochs: 5,
            n: 12,
            num_proposers: 6,
            num_voters: 5,
            f: 0.0,
            actual_f: 0.0,
            batch_size: 4,
            m_c: 8,
            eta: StepSchedule::Constant(0.1),
            rule,
            attack: AttackConfig::default(),
            seed: 17,
        }
    }

    #[test]
    fn schedules() {
        assert_eq!(StepSchedule::Constant(0.1).at(7), 0.1);
        assert_eq!(StepSchedule::Inverse(2.0).at(5), 0.05);
    }

    #[test]
    fn zero_epochs_returns_start() {
        let (model, shards) = quadratic_setup(12, 10);
        let pop = Population::new(12, 0.0, 1).unwrap();
        let mut cfg = config(AggregationRule::Average);
        cfg.epochs = 0;
        let (w, records) =
            run_distributed_sgd(&cfg, &pop, Workload::new(&model, &shards, &[])).unwrap();
        assert!(records.is_empty());
        assert!(w.bit_eq(&model.initial_params(0)));
    }

    #[test]
    fn validation_names_fields() {
        let (model, shards) = quadratic_setup(12, 10);
        let pop = Population::new(12, 0.0, 1).unwrap();
        let work = || Workload::new(&model, &shards, &[]);
        let mut cfg = config(AggregationRule::Holdout);
        cfg.m_c = 11;
        let err = run_holdout_sgd(&cfg, &pop, work()).unwrap_err();
        assert!(err.to_string().contains("m_c"), "{err}");
        let mut cfg = config(AggregationRule::Holdout);
        cfg.f = 0.5;
        assert!(matches!(
            run_holdout_sgd(&cfg, &pop, work()),
            Err(OrchestratorError::InvalidConfig { field: "f", .. })
        ));
        let mut cfg = config(AggregationRule::Krum);
        cfg.num_proposers = 3;
        cfg.f = 0.25;
        assert!(run_distributed_sgd(&cfg, &pop, work()).is_err());
        assert!(run_distributed_sgd(&config(AggregationRule::Holdout), &pop, work()).is_err());
    }

    #[test]
    fn holdout_records_are_consistent() {
        let (model, shards) = quadratic_setup(12, 10);
        let pop = Population::new(12, 0.25, 3).unwrap();
        let mut cfg = config(AggregationRule::Holdout);
        cfg.f = 0.25;
        cfg.actual_f = 0.25;
        cfg.attack = AttackConfig::gamma_search();
        let mut runner =
            HoldoutRunner::new(&cfg, &pop, Workload::new(&model, &shards, &[])).unwrap();
        for _ in 0..5 {
            let ep = runner.step().unwrap();
            let r = &ep.record;
            assert!(r.uc_size >= 1 && r.byz_in_uc <= r.uc_size);
            assert_eq!(r.messages_sent, 6 + 2 * 5);
            assert_eq!(r.forwarded_payloads, 30);
            let expected = ep.w_before.step(ep.eta, &ep.outcome.update);
            assert!(runner.params().bit_eq(&expected));
            for &m in &ep.outcome.members {
                assert!(ep.outcome.vote_counts[m] >= ep.outcome.threshold);
            }
        }
    }
}
