use holdout_core::adversary::{
    byzantine_update, estimate_honest_stats, search_gamma, AttackState, GammaProblem,
    HoldoutSimulation, RuleContext,
};
use holdout_core::aggregation::{
    aggregate_average, aggregate_krum, aggregate_trimmed_mean, GradientProposal,
};
use holdout_core::learnkit::{Example, Label, LossModel, Quadratic};
use holdout_core::{rng, ParamVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn honest_gradients(seed: u64, count: usize, d: usize) -> Vec<ParamVector> {
    let mut r = rng::stream(seed, "honest", &[]);
    let centre: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
    (0..count)
        .map(|_| {
            ParamVector::new(
                centre
                    .iter()
                    .map(|c| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        c + 0.5 * z
                    })
                    .collect(),
            )
        })
        .collect()
}

fn holdout_batches(seed: u64, voters: usize, d: usize) -> Vec<Vec<Example>> {
    let mut r = rng::stream(seed, "voter-batches", &[]);
    (0..voters)
        .map(|_| {
            (0..5)
                .map(|_| Example {
                    features: (0..d).map(|_| r.random_range(-1.0..1.0)).collect(),
                    label: Label::Value(0.0),
                })
                .collect()
        })
        .collect()
}

fn assert_bracket(problem: &GammaProblem<'_>, gamma_hi: f64, tol: f64) {
    let found = search_gamma(problem, gamma_hi, tol);
    if found.flagged {
        assert!(!problem.accepts(0.0));
        return;
    }
    assert!(problem.accepts(found.gamma), "γ={} rejected", found.gamma);
    if found.gamma < gamma_hi {
        assert!(
            !problem.accepts(found.gamma + tol),
            "γ+tol={} accepted",
            found.gamma + tol
        );
    }
}

#[test]
fn krum_bracket_on_random_snapshots() {
    for seed in 0..50 {
        let honest = honest_gradients(seed, 14, 6);
        let problem = GammaProblem::new(honest, 6, RuleContext::Krum { f: 0.3 }).unwrap();
        assert_bracket(&problem, 100.0, 1e-3);
    }
}

#[test]
fn holdout_bracket_on_random_snapshots() {
    let d = 6;
    let quad =
        Quadratic::with_linear_spectrum(1.0, 3.0, ParamVector::filled(d, 1.0), Some(5)).unwrap();
    let model = LossModel::Quadratic(quad);
    let w = ParamVector::zeros(d);
    for seed in 0..50 {
        let honest = honest_gradients(seed, 10, d);
        let sim = HoldoutSimulation::new(
            &model,
            &w,
            0.1,
            1.0 / 3.0,
            holdout_batches(seed, 8, d),
            4,
            &honest,
        )
        .unwrap();
        let problem = GammaProblem::new(honest, 5, RuleContext::Holdout(sim)).unwrap();
        assert_bracket(&problem, 100.0, 1e-3);
    }
}

#[test]
fn trimmed_mean_bracket() {
    for seed in 0..20 {
        let honest = honest_gradients(seed, 10, 8);
        let rule = RuleContext::TrimmedMean {
            f: 0.3,
            coverage: 0.99,
        };
        let problem = GammaProblem::new(honest, 4, rule).unwrap();
        assert_bracket(&problem, 100.0, 1e-3);
    }
}

proptest! {
    #[test]
    fn gamma_zero_is_neutral(seed in any::<u64>(), count in 3usize..12, byz in 1usize..5) {
        let honest = honest_gradients(seed, count, 4);
        let (mu, sigma) = estimate_honest_stats(&honest).unwrap();
        let v = byzantine_update(&AttackState { mu: mu.clone(), sigma, gamma: 0.0 });
        prop_assert!(v.bit_eq(&mu));
        // Replacing `byz` honest proposals by μ leaves the mean of the
        // full set unchanged up to rounding.
        let mut with_attack: Vec<GradientProposal> = honest
            .iter()
            .enumerate()
            .map(|(i, g)| GradientProposal::new(i, g.clone()))
            .collect();
        let mut padded = with_attack.clone();
        for j in 0..byz {
            with_attack.push(GradientProposal::new(count + j, v.clone()));
            padded.push(GradientProposal::new(count + j, mu.clone()));
        }
        let a = aggregate_average(&with_attack).unwrap();
        let b = aggregate_average(&padded).unwrap();
        prop_assert!(a.bit_eq(&b));
        let f = 0.2;
        if let (Ok(a), Ok(b)) = (aggregate_trimmed_mean(&with_attack, f), aggregate_trimmed_mean(&padded, f)) {
            prop_assert!(a.bit_eq(&b));
        }
        if let (Ok(a), Ok(b)) = (aggregate_krum(&with_attack, f), aggregate_krum(&padded, f)) {
            prop_assert!(a.bit_eq(&b));
        }
    }

    #[test]
    fn update_is_mean_plus_gamma_sigma(seed in any::<u64>(), gamma in 0.0f64..10.0) {
        let honest = honest_gradients(seed, 6, 3);
        let (mu, sigma) = estimate_honest_stats(&honest).unwrap();
        // Oracle: population standard deviation per coordinate.
        for c in 0..3 {
            let xs: Vec<f64> = honest.iter().map(|g| g[c]).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let s = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
            prop_assert!((mu[c] - m).abs() <= 1e-12);
            prop_assert!((sigma[c] - s).abs() <= 1e-12);
        }
        let v = byzantine_update(&AttackState { mu: mu.clone(), sigma: sigma.clone(), gamma });
        for c in 0..3 {
            prop_assert!((v[c] - (mu[c] + gamma * sigma[c])).abs() <= 1e-12);
        }
    }
}
