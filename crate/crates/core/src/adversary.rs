//! Byzantine behaviours: the omniscient parameter-space attack `μ + γσ` with
//! per-rule γ search, coalition voting and per-recipient equivocation.

use rand::seq::{index, IndexedRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{
    self, ballot_size, k_smallest, union_threshold, GradientProposal, VoteBallot,
};
use crate::learnkit::{Example, LossModel};
use crate::params::ParamVector;
use crate::rng;
use crate::NodeId;

#[derive(Debug, Error, PartialEq)]
pub enum AdversaryError {
    #[error("no honest gradients to estimate from")]
    NoHonestGradients,
    #[error("need {needed} proposers for a ballot of size {needed}, have {available}")]
    InsufficientProposers { needed: usize, available: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    /// Byzantine nodes follow the protocol.
    #[default]
    None,
    /// Use `gamma` every epoch.
    GammaFixed,
    /// Largest accepted γ per epoch, by bisection.
    GammaSearch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EquivocationMode {
    Consistent,
    PerRecipientNoise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default)]
    pub mode: AttackMode,
    /// Required by `gamma_fixed`.
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Byzantine voters endorse every Byzantine proposer first.
    #[serde(default = "default_true")]
    pub coalition: bool,
    #[serde(default = "default_equivocation")]
    pub equivocation: EquivocationMode,
    #[serde(default = "default_gamma_hi")]
    pub gamma_hi: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Fraction of coordinates that must survive trimming.
    #[serde(default = "default_coverage")]
    pub trimmed_coverage: f64,
}

fn default_true() -> bool {
    true
}
fn default_equivocation() -> EquivocationMode {
    EquivocationMode::Consistent
}
fn default_gamma_hi() -> f64 {
    100.0
}
fn default_tol() -> f64 {
    1e-3
}
fn default_coverage() -> f64 {
    0.99
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            mode: AttackMode::None,
            gamma: None,
            coalition: true,
            equivocation: EquivocationMode::Consistent,
            gamma_hi: default_gamma_hi(),
            tol: default_tol(),
            trimmed_coverage: default_coverage(),
        }
    }
}

impl AttackConfig {
    pub fn gamma_search() -> Self {
        Self {
            mode: AttackMode::GammaSearch,
            ..Self::default()
        }
    }

    pub fn gamma_fixed(value: f64) -> Self {
        Self {
            mode: AttackMode::GammaFixed,
            gamma: Some(value),
            ..Self::default()
        }
    }

    pub fn is_active(&self) -> bool {
        !matches!(self.mode, AttackMode::None)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackState {
    pub mu: ParamVector,
    pub sigma: ParamVector,
    pub gamma: f64,
}

/// Coordinate-wise mean and population standard deviation. A single input
/// yields `σ = 0`.
pub fn estimate_honest_stats(
    honest: &[ParamVector],
) -> Result<(ParamVector, ParamVector), AdversaryError> {
    let first = honest.first().ok_or(AdversaryError::NoHonestGradients)?;
    let d = first.dim();
    let n = honest.len() as f64;
    let mut mu = ParamVector::zeros(d);
    for g in honest {
        mu.add_assign(g);
    }
    mu.scale(1.0 / n);
    let mut var = vec![0.0; d];
    for g in honest {
        for (v, (x, m)) in var.iter_mut().zip(g.iter().zip(mu.iter())) {
            let dev = x - m;
            *v += dev * dev;
        }
    }
    let sigma = var.into_iter().map(|v| (v / n).sqrt()).collect::<Vec<_>>();
    Ok((mu, ParamVector::new(sigma)))
}

/// `μ + γ σ`, shared verbatim by every colluding proposer.
pub fn byzantine_update(state: &AttackState) -> ParamVector {
    let mut v = state.mu.clone();
    if state.gamma != 0.0 {
        v.axpy(state.gamma, &state.sigma);
    }
    v
}

/// The adversary's replica of an honest voting committee, used to decide
/// whether a candidate vector would still make it into the union.
#[derive(Clone, Debug)]
pub struct HoldoutSimulation<'a> {
    model: &'a LossModel,
    w: &'a ParamVector,
    eta: f64,
    f: f64,
    batches: Vec<Vec<Example>>,
    byzantine_voters: usize,
    /// `honest_losses[v][i]`: simulated voter `v`'s loss for honest gradient `i`.
    honest_losses: Vec<Vec<f64>>,
}

impl<'a> HoldoutSimulation<'a> {
    /// `batches` are the holdout samples of the simulated honest voters.
    pub fn new(
        model: &'a LossModel,
        w: &'a ParamVector,
        eta: f64,
        f: f64,
        batches: Vec<Vec<Example>>,
        byzantine_voters: usize,
        honest: &[ParamVector],
    ) -> Result<Self, aggregation::AggregationError> {
        let proposals: Vec<GradientProposal> = honest
            .iter()
            .enumerate()
            .map(|(i, g)| GradientProposal::new(i, g.clone()))
            .collect();
        let honest_losses = batches
            .iter()
            .map(|b| aggregation::holdout_losses(&proposals, w, eta, model, b))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            model,
            w,
            eta,
            f,
            batches,
            byzantine_voters,
            honest_losses,
        })
    }
}

/// Rule under attack plus what the adversary knows about the epoch.
#[derive(Clone, Debug)]
pub enum RuleContext<'a> {
    Average,
    Krum { f: f64 },
    TrimmedMean { f: f64, coverage: f64 },
    Holdout(HoldoutSimulation<'a>),
}

/// Attack acceptance problem for one epoch: honest gradients, the slots the
/// Byzantine copies occupy in the proposal list, and the rule.
#[derive(Clone, Debug)]
pub struct GammaProblem<'a> {
    honest: Vec<ParamVector>,
    /// `layout[i]` is true if proposal slot `i` is Byzantine.
    layout: Vec<bool>,
    mu: ParamVector,
    sigma: ParamVector,
    rule: RuleContext<'a>,
}

impl<'a> GammaProblem<'a> {
    /// Byzantine copies appended after the honest proposals.
    pub fn new(
        honest: Vec<ParamVector>,
        byzantine_copies: usize,
        rule: RuleContext<'a>,
    ) -> Result<Self, AdversaryError> {
        let mut layout = vec![false; honest.len()];
        layout.extend(std::iter::repeat_n(true, byzantine_copies));
        Self::with_layout(honest, layout, rule)
    }

    /// Explicit slot layout; honest gradients fill the `false` slots in order.
    pub fn with_layout(
        honest: Vec<ParamVector>,
        layout: Vec<bool>,
        rule: RuleContext<'a>,
    ) -> Result<Self, AdversaryError> {
        let (mu, sigma) = estimate_honest_stats(&honest)?;
        debug_assert_eq!(layout.iter().filter(|b| !**b).count(), honest.len());
        Ok(Self {
            honest,
            layout,
            mu,
            sigma,
            rule,
        })
    }

    pub fn state(&self, gamma: f64) -> AttackState {
        AttackState {
            mu: self.mu.clone(),
            sigma: self.sigma.clone(),
            gamma,
        }
    }

    pub fn vector(&self, gamma: f64) -> ParamVector {
        byzantine_update(&self.state(gamma))
    }

    fn proposals(&self, byz: &ParamVector) -> Vec<GradientProposal> {
        let mut honest = self.honest.iter();
        self.layout
            .iter()
            .enumerate()
            .map(|(slot, &is_byz)| {
                let g = if is_byz {
                    byz.clone()
                } else {
                    honest.next().expect("layout matches honest count").clone()
                };
                GradientProposal::new(slot, g)
            })
            .collect()
    }

    /// Would the rule still "choose" `μ + γσ`?
    pub fn accepts(&self, gamma: f64) -> bool {
        let v = self.vector(gamma);
        if !self.layout.iter().any(|b| *b) {
            return false;
        }
        match &self.rule {
            RuleContext::Average => true,
            RuleContext::Krum { f } => match aggregation::krum_select(&self.proposals(&v), *f) {
                Ok(i) => self.layout[i],
                Err(_) => false,
            },
            RuleContext::TrimmedMean { f, coverage } => self.survives_trimming(&v, *f, *coverage),
            RuleContext::Holdout(sim) => self.enters_union(&v, sim),
        }
    }

    fn survives_trimming(&self, v: &ParamVector, f: f64, coverage: f64) -> bool {
        let n = self.layout.len();
        let trim = aggregation::floor_count(f * n as f64);
        if trim == 0 {
            return true;
        }
        if n <= 2 * trim {
            return false;
        }
        let mut column: Vec<(f64, bool)> = Vec::with_capacity(n);
        let mut kept = 0usize;
        for c in 0..v.dim() {
            column.clear();
            let mut honest = self.honest.iter();
            for &is_byz in &self.layout {
                if is_byz {
                    column.push((v[c], true));
                } else {
                    column.push((honest.next().expect("layout")[c], false));
                }
            }
            // Stable: equal values keep slot order.
            column.sort_by(|a, b| a.0.total_cmp(&b.0));
            if column[trim..n - trim].iter().any(|(_, b)| *b) {
                kept += 1;
            }
        }
        kept as f64 >= coverage * v.dim() as f64
    }

    fn enters_union(&self, v: &ParamVector, sim: &HoldoutSimulation<'_>) -> bool {
        let n = self.layout.len();
        let k = ballot_size(n, sim.f);
        let voters = sim.batches.len() + sim.byzantine_voters;
        if voters == 0 {
            return false;
        }
        let tau = union_threshold(voters, k, n);
        let byz_slots: Vec<usize> = (0..n).filter(|&i| self.layout[i]).collect();
        let mut tally = vec![0usize; n];
        // Coalition ballots endorse the Byzantine slots first (ascending); the
        // random honest fill does not touch Byzantine tallies.
        for &slot in byz_slots.iter().take(k) {
            tally[slot] += sim.byzantine_voters;
        }
        let moved = sim.w.step(sim.eta, v);
        for (batch, honest_losses) in sim.batches.iter().zip(&sim.honest_losses) {
            let byz_loss = match sim.model.loss(&moved, batch) {
                Ok(l) => l,
                Err(_) => return false,
            };
            let mut honest = honest_losses.iter();
            let losses: Vec<f64> = self
                .layout
                .iter()
                .map(|&b| {
                    if b {
                        byz_loss
                    } else {
                        *honest.next().expect("layout")
                    }
                })
                .collect();
            for i in k_smallest(&losses, k) {
                tally[i] += 1;
            }
        }
        byz_slots.iter().any(|&s| tally[s] >= tau)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaSearch {
    pub gamma: f64,
    /// Set when even `γ = 0` is rejected.
    pub flagged: bool,
    pub evaluations: usize,
}

/// Largest `γ ∈ [0, gamma_hi]`, to within `tol`, that the rule still accepts.
///
/// The result satisfies `accepts(γ)` and, unless `γ = gamma_hi`,
/// `!accepts(γ + tol)`, also for rules whose acceptance region is not an
/// interval.
pub fn search_gamma(problem: &GammaProblem<'_>, gamma_hi: f64, tol: f64) -> GammaSearch {
    let mut evaluations = 0;
    let mut accepts = |g: f64| {
        evaluations += 1;
        problem.accepts(g)
    };
    if !accepts(0.0) {
        return GammaSearch {
            gamma: 0.0,
            flagged: true,
            evaluations,
        };
    }
    if accepts(gamma_hi) {
        return GammaSearch {
            gamma: gamma_hi,
            flagged: false,
            evaluations,
        };
    }
    let mut lo = 0.0;
    loop {
        let mut hi = gamma_hi;
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            if accepts(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let next = lo + tol;
        if next < gamma_hi && accepts(next) {
            lo = next;
            continue;
        }
        break;
    }
    GammaSearch {
        gamma: lo,
        flagged: false,
        evaluations,
    }
}

/// The shared Byzantine vector for one epoch and the γ it used, per the
/// configured mode. `layout` marks the Byzantine proposal slots; `context`
/// builds the rule simulation and is only called in search mode. Without
/// honest gradients to imitate the coalition submits a zero vector (γ = NaN).
pub fn craft_attack<'s, E: From<AdversaryError>>(
    attack: &AttackConfig,
    honest: Vec<ParamVector>,
    layout: Vec<bool>,
    dim: usize,
    context: impl FnOnce(&[ParamVector]) -> Result<RuleContext<'s>, E>,
) -> Result<Option<(ParamVector, f64)>, E> {
    if !attack.is_active() || !layout.iter().any(|b| *b) {
        return Ok(None);
    }
    if honest.is_empty() {
        return Ok(Some((ParamVector::zeros(dim), f64::NAN)));
    }
    match attack.mode {
        AttackMode::None => Ok(None),
        AttackMode::GammaFixed => {
            let (mu, sigma) = estimate_honest_stats(&honest)?;
            let gamma = attack.gamma.unwrap_or(0.0);
            Ok(Some((
                byzantine_update(&AttackState { mu, sigma, gamma }),
                gamma,
            )))
        }
        AttackMode::GammaSearch => {
            let ctx = context(&honest)?;
            let problem = GammaProblem::with_layout(honest, layout, ctx)?;
            let found = search_gamma(&problem, attack.gamma_hi, attack.tol);
            Ok(Some((problem.vector(found.gamma), found.gamma)))
        }
    }
}

/// Coalition ballot: every Byzantine proposer first, then uniformly random
/// honest proposers up to `k`.
pub fn coalition_ballot<R: Rng + ?Sized>(
    voter: NodeId,
    byzantine: &[usize],
    honest: &[usize],
    k: usize,
    rng: &mut R,
) -> Result<VoteBallot, AdversaryError> {
    if byzantine.len() + honest.len() < k {
        return Err(AdversaryError::InsufficientProposers {
            needed: k,
            available: byzantine.len() + honest.len(),
        });
    }
    let mut endorsed: Vec<usize> = byzantine.iter().copied().take(k).collect();
    let fill = k - endorsed.len();
    endorsed.extend(
        index::sample(rng, honest.len(), fill)
            .into_iter()
            .map(|i| honest[i]),
    );
    Ok(VoteBallot { voter, endorsed })
}

/// Payloads a Byzantine sender may vary per recipient.
#[derive(Clone, Debug, PartialEq)]
pub enum ByzantineMessage {
    Gradient(ParamVector),
    /// Endorsed proposer ids plus the proposer ids the sender could have picked.
    Ballot {
        endorsed: Vec<NodeId>,
        candidates: Vec<NodeId>,
    },
}

/// Per-recipient variant of `base`. `Consistent` is the identity; noise mode
/// flips the sign of a random non-empty coordinate subset of a gradient, or
/// swaps one endorsed id of a ballot for a non-endorsed candidate.
pub fn equivocate(
    base: &ByzantineMessage,
    recipient: NodeId,
    mode: EquivocationMode,
    seed: u64,
) -> ByzantineMessage {
    if mode == EquivocationMode::Consistent {
        return base.clone();
    }
    let mut rng = rng::stream(seed, "equivocate", &[recipient as u64]);
    match base {
        ByzantineMessage::Gradient(g) => {
            let mut out = g.clone();
            let d = out.dim();
            if d == 0 {
                return ByzantineMessage::Gradient(out);
            }
            let mut flipped = false;
            for i in 0..d {
                if rng.random_bool(0.5) {
                    out[i] = -out[i];
                    flipped |= g[i] != 0.0;
                }
            }
            if !flipped {
                let i = (0..d)
                    .find(|&i| g[i] != 0.0)
                    .unwrap_or(rng.random_range(0..d));
                out[i] = if g[i] == 0.0 { 1.0 } else { -g[i] };
            }
            ByzantineMessage::Gradient(out)
        }
        ByzantineMessage::Ballot {
            endorsed,
            candidates,
        } => {
            let mut out = endorsed.clone();
            let spare: Vec<NodeId> = candidates
                .iter()
                .copied()
                .filter(|c| !endorsed.contains(c))
                .collect();
            if !out.is_empty() {
                let slot = rng.random_range(0..out.len());
                if let Some(&swap_in) = spare.choose(&mut rng) {
                    out[slot] = swap_in;
                } else if out.len() > 1 {
                    let len = out.len();
                    out.rotate_left(1 + slot % (len - 1));
                }
            }
            ByzantineMessage::Ballot {
                endorsed: out,
                candidates: candidates.clone(),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec())
    }

    #[test]
    fn stats_examples() {
        let (mu, sigma) = estimate_honest_stats(&[pv(&[1.0, 1.0]), pv(&[3.0, 3.0])]).unwrap();
        assert_eq!(mu.as_slice(), &[2.0, 2.0]);
        assert_eq!(sigma.as_slice(), &[1.0, 1.0]);
        let (_, sigma) = estimate_honest_stats(&vec![pv(&[4.0, -1.0]); 3]).unwrap();
        assert_eq!(sigma.as_slice(), &[0.0, 0.0]);
        let (mu, sigma) = estimate_honest_stats(&[pv(&[4.0, -1.0])]).unwrap();
        assert_eq!(mu.as_slice(), &[4.0, -1.0]);
        assert_eq!(sigma.as_slice(), &[0.0, 0.0]);
        assert_eq!(
            estimate_honest_stats(&[]),
            Err(AdversaryError::NoHonestGradients)
        );
    }

    #[test]
    fn update_examples() {
        let s = AttackState {
            mu: ParamVector::zeros(3),
            sigma: ParamVector::filled(3, 1.0),
            gamma: 1.75,
        };
        assert_eq!(byzantine_update(&s).as_slice(), &[1.75; 3]);
        let s = AttackState {
            mu: pv(&[0.3, -0.1]),
            sigma: pv(&[2.0, 5.0]),
            gamma: 0.0,
        };
        assert!(byzantine_update(&s).bit_eq(&s.mu));
        let s = AttackState {
            mu: pv(&[0.3, -0.1]),
            sigma: ParamVector::zeros(2),
            gamma: 42.0,
        };
        assert!(byzantine_update(&s).bit_eq(&s.mu));
    }

    #[test]
    fn average_rule_is_unconstrained() {
        let honest = vec![pv(&[1.0, 0.0]), pv(&[0.0, 1.0]), pv(&[0.5, 0.5])];
        let p = GammaProblem::new(honest, 2, RuleContext::Average).unwrap();
        let s = search_gamma(&p, 100.0, 1e-3);
        assert_eq!(s.gamma, 100.0);
        assert!(!s.flagged);
    }

    #[test]
    fn one_step_search() {
        let mut rng = rng::SimRng::seed_from_u64(3);
        let honest: Vec<_> = (0..8)
            .map(|_| pv(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]))
            .collect();
        let p = GammaProblem::new(honest, 2, RuleContext::Krum { f: 0.2 }).unwrap();
        let s = search_gamma(&p, 10.0, 10.0);
        assert!(s.gamma == 0.0 || s.gamma == 10.0);
    }

    #[test]
    fn coalition_examples() {
        let mut rng = rng::SimRng::seed_from_u64(1);
        let byz = [1, 4, 6, 9];
        let honest = [0, 2, 3, 5, 7, 8, 10, 11];
        let b = coalition_ballot(0, &byz, &honest, 8, &mut rng).unwrap();
        assert_eq!(&b.endorsed[..4], &byz);
        assert!(b.endorsed[4..].iter().all(|i| honest.contains(i)));
        let mut sorted = b.endorsed.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 8);

        let b = coalition_ballot(0, &[], &honest, 5, &mut rng).unwrap();
        assert_eq!(b.endorsed.len(), 5);
        assert!(b.endorsed.iter().all(|i| honest.contains(i)));

        let b = coalition_ballot(0, &byz, &honest, 4, &mut rng).unwrap();
        assert_eq!(b.endorsed, byz.to_vec());

        assert!(coalition_ballot(0, &byz, &[0], 6, &mut rng).is_err());
    }

    #[test]
    fn equivocation_modes() {
        let g = ByzantineMessage::Gradient(pv(&[1.0, -2.0, 3.0, 0.5]));
        assert_eq!(equivocate(&g, 3, EquivocationMode::Consistent, 9), g);
        let a = equivocate(&g, 3, EquivocationMode::PerRecipientNoise, 9);
        let b = equivocate(&g, 4, EquivocationMode::PerRecipientNoise, 9);
        assert_ne!(a, g);
        assert_ne!(b, g);
        assert_ne!(a, b);

        let ballot = ByzantineMessage::Ballot {
            endorsed: vec![3, 5, 8],
            candidates: vec![1, 3, 5, 8, 13],
        };
        let a = equivocate(&ballot, 0, EquivocationMode::PerRecipientNoise, 2);
        let b = equivocate(&ballot, 1, EquivocationMode::PerRecipientNoise, 2);
        assert_ne!(a, ballot);
        assert_ne!(b, ballot);
        assert_ne!(a, b);
        let ByzantineMessage::Ballot { endorsed, .. } = a else {
            unreachable!()
        };
        assert_eq!(endorsed.len(), 3);
    }
}
