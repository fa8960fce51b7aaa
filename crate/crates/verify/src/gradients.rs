use holdout_core::learnkit::{
    finite_difference_gradient, Example, Label, LossModel, Quadratic, SoftmaxRegression, TinyMlp,
};
use holdout_core::{rng, ParamVector};
use rand::Rng;

use crate::{timed, CheckOutcome, Faults, Result, Suite, Verdict};

/// Below this magnitude errors are measured in absolute terms.
const RELATIVE_FLOOR: f64 = 1e-4;

fn relative_error(analytic: &ParamVector, numeric: &ParamVector) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR))
        .fold(0.0, f64::max)
}

fn models() -> Result<Vec<LossModel>> {
    let w_star = ParamVector::new((0..8).map(|i| 0.25 * i as f64 - 1.0).collect());
    Ok(vec![
        LossModel::Quadratic(Quadratic::with_linear_spectrum(0.5, 5.0, w_star, Some(8))?),
        LossModel::Softmax(SoftmaxRegression {
            features: 6,
            classes: 4,
            l2: 1e-3,
        }),
        LossModel::Mlp(TinyMlp {
            features: 5,
            hidden: 7,
            classes: 3,
            sharpness: 4.0,
            l2: 1e-3,
        }),
    ])
}

fn probe_batch(model: &LossModel, r: &mut impl Rng) -> Vec<Example> {
    (0..6)
        .map(|_| Example {
            features: (0..model.feature_dim())
                .map(|_| r.random_range(-1.5..1.5))
                .collect(),
            label: match model.num_classes() {
                Some(c) => Label::Class(r.random_range(0..c)),
                None => Label::Value(0.0),
            },
        })
        .collect()
}

/// Criterion 5: analytic gradients agree with central differences.
pub fn gradient_correctness(suite: Suite, _faults: Faults) -> CheckOutcome {
    timed(5, "gradient correctness", || {
        let probes = suite.pick(30, 100);
        let mut worst = Vec::new();
        for (m, model) in models()?.iter().enumerate() {
            let mut r = rng::stream(5, "gradient-probe", &[m as u64]);
            let mut max_err: f64 = 0.0;
            for _ in 0..probes {
                let w = ParamVector::new(
                    (0..model.dim())
                        .map(|_| r.random_range(-1.0..1.0))
                        .collect(),
                );
                let batch = probe_batch(model, &mut r);
                let analytic = model.gradient(&w, &batch)?;
                let numeric = finite_difference_gradient(model, &w, &batch, 1e-5)?;
                max_err = max_err.max(relative_error(&analytic, &numeric));
            }
            worst.push((model.kind(), max_err));
        }
        let passed = worst.iter().all(|(_, e)| *e <= 1e-5);
        let detail = worst
            .iter()
            .map(|(k, e)| format!("{k:?} {e:.1e}"))
            .collect::<Vec<_>>()
            .join(", ");
        Ok(Verdict::new(
            passed,
            format!("max relative error over {probes} probes: {detail}"),
        ))
    })
}
