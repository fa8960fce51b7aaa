use holdout_core::committee::{
    any_majority_rate_mc, byz_majority_prob_mc, byz_majority_prob_ratio, committee_size_bound,
    Population,
};
use num_rational::BigRational;

use crate::{timed, CheckOutcome, Faults, Suite, Verdict};

/// `⌈2 (1 + 2f) / (1 − 2f)² · ln(T / δ)⌉` with `f = num / den` kept as a
/// ratio of integers.
fn bound_oracle(epochs: u64, delta: f64, num: u64, den: u64) -> usize {
    let (num, den) = (num as f64, den as f64);
    let spread = den - 2.0 * num;
    let coeff = 2.0 * (den + 2.0 * num) * den / (spread * spread);
    (coeff * (epochs as f64 / delta).ln()).ceil() as usize
}

/// Count the `size`-subsets of `n` nodes (the first `byzantine` of them
/// Byzantine) in which Byzantine nodes are at least half.
fn enumerate(n: usize, byzantine: usize, size: usize) -> (u64, u64) {
    let mut favourable = 0;
    let mut total = 0;
    for mask in 0u32..1 << n {
        if mask.count_ones() as usize != size {
            continue;
        }
        total += 1;
        if 2 * (mask & ((1 << byzantine) - 1)).count_ones() as usize >= size {
            favourable += 1;
        }
    }
    (favourable, total)
}

/// Criterion 3: committees of size `N(100, 0.01, 1/3)` keep honest majorities
/// in all 100 draws with probability at least 0.99.
pub fn bound_soundness(suite: Suite, _faults: Faults) -> CheckOutcome {
    timed(3, "committee bound soundness", || {
        let size = committee_size_bound(100, 0.01, 1.0 / 3.0)?;
        let oracle = bound_oracle(100, 0.01, 1, 3);
        let n = 10_000;
        let pop = Population::new(n, 1.0 / 3.0, 3)?;
        let trials = suite.pick(1_000, 10_000);
        let rate = any_majority_rate_mc(&pop, size, 100, trials, 33)?;
        let delta = 0.01;
        let limit = delta + 3.0 * (delta * (1.0 - delta) / trials as f64).sqrt();
        Ok(Verdict::new(
            size == 277 && size == oracle && rate <= limit,
            format!(
                "N={size} (oracle {oracle}); any-majority rate {rate:.5} over {trials} trials of 100 draws (limit {limit:.5})"
            ),
        ))
    })
}

/// Criterion 4: the exact majority probability matches enumeration, equals
/// 1/3 at `(10, 3, 4)`, and Monte Carlo agrees within 3 standard errors.
pub fn hypergeometric_oracle(suite: Suite, _faults: Faults) -> CheckOutcome {
    timed(4, "exact hypergeometric oracle", || {
        let exact = byz_majority_prob_ratio(10, 3, 4)?;
        let (fav, total) = enumerate(10, 3, 4);
        let enumerated = BigRational::new(fav.into(), total.into());
        let third = BigRational::new(1.into(), 3.into());
        let pop = Population::with_byzantine(10, 0..3);
        let trials = suite.pick(20_000, 100_000);
        let est = byz_majority_prob_mc(&pop, 4, trials, 44)?;
        let p = 1.0 / 3.0;
        let se = (p * (1.0 - p) / trials as f64).sqrt();
        let z = (est - p) / se;
        Ok(Verdict::new(
            exact == third && enumerated == third && z.abs() <= 3.0,
            format!("exact {exact} (enumeration {fav}/{total}); MC {est:.5} over {trials} trials, z={z:+.2}"),
        ))
    })
}
