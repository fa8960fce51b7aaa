//! Committee selection and honest-majority analysis.

use std::collections::BTreeSet;

use hmac::{Hmac, Mac};
use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::seq::index;
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

use crate::aggregation::floor_count;
use crate::rng;
use crate::NodeId;

#[derive(Debug, Error, PartialEq)]
pub enum CommitteeError {
    #[error("committee of {size} exceeds population of {n}")]
    TooLarge { size: usize, n: usize },
    #[error("committee size bound diverges for f = {f} (need 0 <= f < 1/2)")]
    BoundDiverges { f: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = CommitteeError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Proposer,
    Voter,
    Consensus,
}

impl Role {
    pub fn tag(self) -> &'static [u8] {
        match self {
            Role::Proposer => b"P",
            Role::Voter => b"V",
            Role::Consensus => b"C",
        }
    }

    fn index(self) -> u64 {
        match self {
            Role::Proposer => 0,
            Role::Voter => 1,
            Role::Consensus => 2,
        }
    }
}

/// The node pool with a fixed Byzantine subset.
#[derive(Clone, Debug, PartialEq)]
pub struct Population {
    n: usize,
    byzantine: Vec<bool>,
}

impl Population {
    /// `floor(f n)` Byzantine nodes chosen uniformly at random.
    pub fn new(n: usize, f: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&f) {
            return Err(CommitteeError::InvalidArgument(format!(
                "byzantine fraction {f} outside [0, 1]"
            )));
        }
        let count = floor_count(f * n as f64).min(n);
        let mut rng = rng::stream(seed, "population", &[]);
        let ids = index::sample(&mut rng, n, count).into_vec();
        Ok(Self::with_byzantine(n, ids))
    }

    pub fn with_byzantine(n: usize, ids: impl IntoIterator<Item = NodeId>) -> Self {
        let mut byzantine = vec![false; n];
        for id in ids {
            byzantine[id] = true;
        }
        Self { n, byzantine }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_byzantine(&self, id: NodeId) -> bool {
        self.byzantine[id]
    }

    pub fn byzantine_count(&self) -> usize {
        self.byzantine.iter().filter(|b| **b).count()
    }

    pub fn byzantine_ids(&self) -> Vec<NodeId> {
        (0..self.n).filter(|&i| self.byzantine[i]).collect()
    }

    pub fn honest_ids(&self) -> Vec<NodeId> {
        (0..self.n).filter(|&i| !self.byzantine[i]).collect()
    }

    pub fn fraction(&self) -> f64 {
        self.byzantine_count() as f64 / self.n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommitteeDraw {
    pub epoch: u64,
    pub role: Role,
    /// Ascending node ids.
    pub members: Vec<NodeId>,
}

impl CommitteeDraw {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn byzantine_count(&self, population: &Population) -> usize {
        self.members
            .iter()
            .filter(|&&m| population.is_byzantine(m))
            .count()
    }

    /// `X ≥ N/2`: ties count as a Byzantine majority.
    pub fn has_byzantine_majority(&self, population: &Population) -> bool {
        2 * self.byzantine_count(population) >= self.size() && self.size() > 0
    }
}

/// Uniform draw of `size` distinct nodes.
pub fn draw_committee<R: Rng + ?Sized>(
    population: &Population,
    size: usize,
    role: Role,
    epoch: u64,
    rng: &mut R,
) -> Result<CommitteeDraw> {
    if size > population.n() {
        return Err(CommitteeError::TooLarge {
            size,
            n: population.n(),
        });
    }
    let mut members = index::sample(rng, population.n(), size).into_vec();
    members.sort_unstable();
    Ok(CommitteeDraw {
        epoch,
        role,
        members,
    })
}

/// Convenience: draw from the run's deterministic stream for `(role, epoch)`.
pub fn draw_committee_seeded(
    population: &Population,
    size: usize,
    role: Role,
    epoch: u64,
    seed: u64,
) -> Result<CommitteeDraw> {
    let mut rng = rng::stream(seed, "committee", &[role.index(), epoch]);
    draw_committee(population, size, role, epoch, &mut rng)
}

/// Unrounded `N(T, δ) = 2 (1 + 2f) / (1 − 2f)² · ln(T / δ)`.
pub fn committee_size_bound_real(epochs: u64, delta: f64, f: f64) -> Result<f64> {
    if !(0.0..0.5).contains(&f) {
        return Err(CommitteeError::BoundDiverges { f });
    }
    if epochs == 0 {
        return Err(CommitteeError::InvalidArgument("T must be >= 1".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(CommitteeError::InvalidArgument(format!(
            "delta {delta} outside (0, 1)"
        )));
    }
    let spread = 1.0 - 2.0 * f;
    Ok(2.0 * (1.0 + 2.0 * f) / (spread * spread) * (epochs as f64 / delta).ln())
}

/// Committee size guaranteeing honest majorities in all `T` draws with
/// probability at least `1 − δ`.
pub fn committee_size_bound(epochs: u64, delta: f64, f: f64) -> Result<usize> {
    Ok(committee_size_bound_real(epochs, delta, f)?.ceil().max(0.0) as usize)
}

/// Single-draw Chernoff bound `exp(−((1 − 2f)² / (1 + 2f)) · N / 2)`.
pub fn chernoff_majority_bound(f: f64, size: usize) -> f64 {
    let spread = 1.0 - 2.0 * f;
    (-(spread * spread) / (1.0 + 2.0 * f) * size as f64 / 2.0).exp()
}

fn binomial(n: usize, k: usize) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc *= BigUint::from(n - i);
        acc /= BigUint::from(i + 1);
    }
    acc
}

/// Exact `P(X ≥ N/2)` for `X ~ Hypergeometric(n, K, N)` as a reduced fraction.
pub fn byz_majority_prob_ratio(n: usize, byzantine: usize, size: usize) -> Result<BigRational> {
    if byzantine > n || size > n {
        return Err(CommitteeError::InvalidArgument(format!(
            "need K <= n and N <= n, got n={n} K={byzantine} N={size}"
        )));
    }
    let threshold = size.div_ceil(2);
    let honest = n - byzantine;
    let mut favourable = BigUint::zero();
    for x in threshold..=size.min(byzantine) {
        favourable += binomial(byzantine, x) * binomial(honest, size - x);
    }
    Ok(BigRational::new(
        favourable.into(),
        binomial(n, size).into(),
    ))
}

pub fn byz_majority_prob_exact(n: usize, byzantine: usize, size: usize) -> Result<f64> {
    let ratio = byz_majority_prob_ratio(n, byzantine, size)?;
    Ok(ratio.to_f64().unwrap_or(0.0))
}

/// Monte-Carlo estimate of `P(X ≥ N/2)` from `trials` uniform draws.
pub fn byz_majority_prob_mc(
    population: &Population,
    size: usize,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if trials == 0 {
        return Err(CommitteeError::InvalidArgument(
            "trials must be >= 1".into(),
        ));
    }
    if size > population.n() {
        return Err(CommitteeError::TooLarge {
            size,
            n: population.n(),
        });
    }
    let hits: usize = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng::stream(seed, "majority-mc", &[t as u64]);
            let draw = draw_committee(population, size, Role::Voter, 0, &mut rng)
                .expect("size checked above");
            usize::from(draw.has_byzantine_majority(population))
        })
        .sum();
    Ok(hits as f64 / trials as f64)
}

/// Fraction of trials in which at least one of `draws` independent
/// committees has a Byzantine majority.
pub fn any_majority_rate_mc(
    population: &Population,
    size: usize,
    draws: usize,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if size > population.n() {
        return Err(CommitteeError::TooLarge {
            size,
            n: population.n(),
        });
    }
    let failures: usize = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng::stream(seed, "union-mc", &[t as u64]);
            let bad = (0..draws).any(|e| {
                draw_committee(population, size, Role::Voter, e as u64, &mut rng)
                    .expect("size checked above")
                    .has_byzantine_majority(population)
            });
            usize::from(bad)
        })
        .sum();
    Ok(failures as f64 / trials.max(1) as f64)
}

type HmacSha256 = Hmac<Sha256>;

/// A node's 32-byte signing secret in the simulated key setup.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey(pub [u8; 32]);

impl std::fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

impl SecretKey {
    pub fn generate<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        Self(bytes)
    }

    /// Keyed hash over length-prefixed parts.
    pub fn mac(&self, parts: &[&[u8]]) -> [u8; 32] {
        keyed_hash(&self.0, parts)
    }
}

pub(crate) fn keyed_hash(key: &[u8], parts: &[&[u8]]) -> [u8; 32] {
    let mut mac = HmacSha256::new_from_slice(key).expect("HMAC accepts any key length");
    for p in parts {
        mac.update(&(p.len() as u64).to_be_bytes());
        mac.update(p);
    }
    mac.finalize().into_bytes().into()
}

/// Simulated public-key infrastructure: verification recomputes the keyed
/// hash with the registered key of the claimed node.
#[derive(Clone, Debug)]
pub struct KeyRegistry {
    keys: Vec<SecretKey>,
}

impl KeyRegistry {
    pub fn generate(n: usize, seed: u64) -> Self {
        let keys = (0..n)
            .map(|i| SecretKey::generate(&mut rng::stream(seed, "node-key", &[i as u64])))
            .collect();
        Self { keys }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn contains(&self, node: NodeId) -> bool {
        node < self.keys.len()
    }

    pub fn secret(&self, node: NodeId) -> &SecretKey {
        &self.keys[node]
    }

    pub fn verify(&self, node: NodeId, parts: &[&[u8]], tag: &[u8; 32]) -> bool {
        self.contains(node) && self.keys[node].mac(parts) == *tag
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SortitionTicket {
    pub selected: bool,
    pub proof: [u8; 32],
}

impl SortitionTicket {
    /// The proof's leading 8 bytes as a fraction of `2^64`.
    pub fn fraction(&self) -> f64 {
        proof_value(&self.proof) as f64 / 2f64.powi(64)
    }
}

fn proof_value(proof: &[u8; 32]) -> u64 {
    u64::from_be_bytes(proof[..8].try_into().expect("8 bytes"))
}

fn below(value: u64, q: f64) -> bool {
    if q >= 1.0 {
        true
    } else if q > 0.0 {
        (value as u128) < (q * 2f64.powi(64)) as u128
    } else {
        false
    }
}

/// Self-selection: keyed hash of `(epoch_seed, role_tag, epoch)` under the
/// node's secret, selected iff its leading 8 bytes, read as a fraction of
/// `2^64`, fall below `q`.
pub fn sortition(
    role_tag: &[u8],
    epoch_seed: &[u8],
    node_secret: &SecretKey,
    epoch: u64,
    q: f64,
) -> SortitionTicket {
    let proof = node_secret.mac(&[epoch_seed, role_tag, &epoch.to_be_bytes()]);
    SortitionTicket {
        selected: below(proof_value(&proof), q),
        proof,
    }
}

pub fn verify_sortition(
    registry: &KeyRegistry,
    node: NodeId,
    role_tag: &[u8],
    epoch_seed: &[u8],
    epoch: u64,
    q: f64,
    ticket: &SortitionTicket,
) -> bool {
    registry.verify(
        node,
        &[epoch_seed, role_tag, &epoch.to_be_bytes()],
        &ticket.proof,
    ) && ticket.selected == below(proof_value(&ticket.proof), q)
}

/// Nodes selecting themselves for `role` this epoch.
pub fn sortition_committee(
    registry: &KeyRegistry,
    role: Role,
    epoch_seed: &[u8],
    epoch: u64,
    q: f64,
) -> BTreeSet<NodeId> {
    (0..registry.len())
        .filter(|&i| sortition(role.tag(), epoch_seed, registry.secret(i), epoch, q).selected)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn full_draw_is_population() {
        let pop = Population::new(20, 0.25, 1).unwrap();
        assert_eq!(pop.byzantine_count(), 5);
        let mut rng = rng::SimRng::seed_from_u64(0);
        let draw = draw_committee(&pop, 20, Role::Proposer, 0, &mut rng).unwrap();
        assert_eq!(draw.members, (0..20).collect::<Vec<_>>());
        assert_eq!(
            draw_committee(&pop, 21, Role::Proposer, 0, &mut rng),
            Err(CommitteeError::TooLarge { size: 21, n: 20 })
        );
    }

    #[test]
    fn seeded_draws_repeat() {
        let pop = Population::new(100, 0.3, 2).unwrap();
        let a = draw_committee_seeded(&pop, 30, Role::Voter, 4, 99).unwrap();
        let b = draw_committee_seeded(&pop, 30, Role::Voter, 4, 99).unwrap();
        let c = draw_committee_seeded(&pop, 30, Role::Proposer, 4, 99).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.members, c.members);
    }

    #[test]
    fn bound_formula() {
        assert_eq!(committee_size_bound(1, 0.5, 0.0).unwrap(), 2);
        assert_eq!(committee_size_bound(100, 0.01, 1.0 / 3.0).unwrap(), 277);
        let raw = committee_size_bound_real(100, 0.01, 1.0 / 3.0).unwrap();
        assert!((raw - 30.0 * 1e4f64.ln()).abs() < 1e-9);
        assert_eq!(
            committee_size_bound(10, 0.1, 0.5),
            Err(CommitteeError::BoundDiverges { f: 0.5 })
        );
        assert!(committee_size_bound(0, 0.1, 0.1).is_err());
        assert!(committee_size_bound(10, 1.0, 0.1).is_err());
    }

    #[test]
    fn exact_probability_edges() {
        let r = byz_majority_prob_ratio(10, 3, 4).unwrap();
        assert_eq!(r, BigRational::new(1.into(), 3.into()));
        assert_eq!(byz_majority_prob_exact(50, 0, 10).unwrap(), 0.0);
        assert_eq!(byz_majority_prob_exact(50, 50, 10).unwrap(), 1.0);
        assert!(byz_majority_prob_exact(5, 6, 2).is_err());
    }

    #[test]
    fn single_trial_is_indicator() {
        let pop = Population::new(10, 0.4, 3).unwrap();
        for seed in 0..20 {
            let p = byz_majority_prob_mc(&pop, 4, 1, seed).unwrap();
            assert!(p == 0.0 || p == 1.0);
        }
    }

    #[test]
    fn sortition_thresholds() {
        let key = SecretKey([7u8; 32]);
        for epoch in 0..200 {
            assert!(!sortition(b"P", b"seed", &key, epoch, 0.0).selected);
            assert!(sortition(b"P", b"seed", &key, epoch, 1.0).selected);
        }
    }

    #[test]
    fn sortition_verifies() {
        let reg = KeyRegistry::generate(4, 1);
        let t = sortition(b"V", b"s", reg.secret(2), 5, 0.5);
        assert!(verify_sortition(&reg, 2, b"V", b"s", 5, 0.5, &t));
        assert!(!verify_sortition(&reg, 1, b"V", b"s", 5, 0.5, &t));
        assert!(!verify_sortition(&reg, 2, b"V", b"s", 6, 0.5, &t));
        let mut forged = t.clone();
        forged.selected = !forged.selected;
        assert!(!verify_sortition(&reg, 2, b"V", b"s", 5, 0.5, &forged));
    }
}
