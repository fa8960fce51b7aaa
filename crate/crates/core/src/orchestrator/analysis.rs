//! Evaluation and the statistical checks built on top of the runners.

use rayon::prelude::*;

use super::{HoldoutRunner, OrchestratorError, Result, RunConfig, Workload};
use crate::committee::Population;
use crate::learnkit::{Example, Label, LossModel};
use crate::params::ParamVector;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// Fraction of argmax-correct predictions; classification models only.
    pub accuracy: Option<f64>,
}

pub fn evaluate(model: &LossModel, w: &ParamVector, eval: &[Example]) -> Result<Evaluation> {
    if eval.is_empty() {
        return Err(OrchestratorError::EmptyEvalSet);
    }
    let loss = model.loss(w, eval)?;
    let accuracy = model.num_classes().map(|_| {
        let correct = eval
            .iter()
            .filter(|e| match e.label {
                Label::Class(c) => model.predict(w, &e.features) == Some(c),
                Label::Value(_) => false,
            })
            .count();
        correct as f64 / eval.len() as f64
    });
    Ok(Evaluation { loss, accuracy })
}

/// Alignment check at one sampled epoch, across repetitions.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentEpoch {
    pub t: usize,
    /// Mean over repetitions of the mean `∇L_{j(c)} · ∇L_c` over honest
    /// voters `c` and the proposals `j(c)` they endorsed.
    pub mean_lhs: f64,
    /// Mean over repetitions of `‖∇L(w_t)‖² − ½ β G² η_t`.
    pub mean_rhs: f64,
    pub mean_margin: f64,
    pub std_error: f64,
    /// Fraction of repetitions with a negative margin.
    pub violation_rate: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentReport {
    pub beta: f64,
    /// Per-example gradient bound over the region the runs visited.
    pub gradient_bound: f64,
    pub repetitions: usize,
    pub epochs: Vec<AlignmentEpoch>,
}

impl AlignmentReport {
    pub fn passed(&self) -> bool {
        self.epochs.iter().all(|e| e.passed)
    }
}

struct RepSample {
    lhs: f64,
    grad_norm_sq: f64,
    eta: f64,
}

/// Run `repetitions` independent HoldOut runs (seeds derived from
/// `config.seed`) and compare the empirical alignment between endorsed
/// proposals and voters' holdout gradients with `‖∇L‖² − ½ β G² η_t` at each
/// sampled epoch. An epoch passes if the mean margin is at least −3 standard
/// errors.
pub fn check_alignment(
    config: &RunConfig,
    population: &Population,
    work: &Workload<'_>,
    sample_epochs: &[usize],
    repetitions: usize,
) -> Result<AlignmentReport> {
    let quad = work
        .model
        .as_quadratic()
        .ok_or(OrchestratorError::NotQuadratic)?;
    let last = sample_epochs.iter().copied().max().unwrap_or(0);
    let runs = (0..repetitions)
        .into_par_iter()
        .map(|r| -> Result<(Vec<RepSample>, f64)> {
            let mut cfg = config.clone();
            cfg.seed = rng::child_seed(config.seed, "repetition", &[r as u64]);
            cfg.epochs = last;
            let mut runner = HoldoutRunner::new(&cfg, population, work.clone())?;
            let mut samples = Vec::with_capacity(sample_epochs.len());
            let mut radius = runner.params().sub(quad.minimizer()).norm();
            for t in 1..=last {
                let ep = runner.step()?;
                radius = radius.max(runner.params().sub(quad.minimizer()).norm());
                if !sample_epochs.contains(&t) {
                    continue;
                }
                let mut sum = 0.0;
                let mut count = 0usize;
                for (voter, batch) in &ep.holdout_batches {
                    let g_c = work.model.gradient(&ep.w_before, batch)?;
                    let ballot = ep
                        .ballots
                        .iter()
                        .find(|b| b.voter == *voter)
                        .expect("every holdout batch belongs to a ballot");
                    for &j in &ballot.endorsed {
                        sum += ep.proposals[j].grad.dot(&g_c);
                        count += 1;
                    }
                }
                samples.push(RepSample {
                    lhs: if count == 0 {
                        f64::NAN
                    } else {
                        sum / count as f64
                    },
                    grad_norm_sq: quad.risk_gradient(&ep.w_before).norm_sq(),
                    eta: ep.eta,
                });
            }
            Ok((samples, radius))
        })
        .collect::<Result<Vec<_>>>()?;

    let noise_norm = work
        .shards
        .iter()
        .flat_map(|s| &s.examples)
        .map(|e| e.features.iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let radius = runs.iter().map(|(_, r)| *r).fold(0.0, f64::max);
    let beta = quad.beta();
    let g = quad.gradient_bound(radius, noise_norm);

    let mut sampled: Vec<usize> = sample_epochs.iter().copied().filter(|&t| t >= 1).collect();
    sampled.sort_unstable();
    sampled.dedup();
    let epochs = sampled
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let mut lhs = Vec::new();
            let mut rhs = Vec::new();
            let mut margins = Vec::new();
            for (samples, _) in &runs {
                let s = &samples[i];
                if s.lhs.is_nan() {
                    continue;
                }
                let bound = s.grad_norm_sq - 0.5 * beta * g * g * s.eta;
                lhs.push(s.lhs);
                rhs.push(bound);
                margins.push(s.lhs - bound);
            }
            let (mean_margin, std_error) = mean_and_se(&margins);
            let violations = margins.iter().filter(|m| **m < 0.0).count();
            AlignmentEpoch {
                t,
                mean_lhs: mean_and_se(&lhs).0,
                mean_rhs: mean_and_se(&rhs).0,
                mean_margin,
                std_error,
                violation_rate: violations as f64 / margins.len().max(1) as f64,
                passed: !margins.is_empty() && mean_margin >= -3.0 * std_error,
            }
        })
        .collect();
    Ok(AlignmentReport {
        beta,
        gradient_bound: g,
        repetitions,
        epochs,
    })
}

/// Sample mean and standard error of the mean.
pub(crate) fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Least-squares fit of `y(t) ≈ plateau + c · ln t / t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateFit {
    pub plateau: f64,
    pub c: f64,
    pub r_squared: f64,
}

pub fn fit_rate_curve(points: &[(f64, f64)]) -> RateFit {
    let xs: Vec<f64> = points.iter().map(|(t, _)| t.ln() / t).collect();
    let ys: Vec<f64> = points.iter().map(|(_, y)| *y).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let c = sxy / sxx;
    let plateau = my - c * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - plateau - c * x).powi(2))
        .sum();
    RateFit {
        plateau,
        c,
        r_squared: 1.0 - ss_res / ss_tot,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learnkit::{Quadratic, SoftmaxRegression};

    #[test]
    fn evaluation_examples() {
        let model = LossModel::Softmax(SoftmaxRegression {
            features: 2,
            classes: 2,
            l2: 0.0,
        });
        // Class 0 iff x0 > x1.
        let w = ParamVector::new(vec![5.0, -5.0, -5.0, 5.0, 0.0, 0.0]);
        let eval: Vec<Example> = (0..20)
            .map(|i| {
                let x = (i as f64 + 0.5) / 10.0 - 1.0;
                Example {
                    features: vec![x, -x],
                    label: Label::Class(usize::from(x <= 0.0)),
                }
            })
            .collect();
        let e = evaluate(&model, &w, &eval).unwrap();
        assert_eq!(e.accuracy, Some(1.0));

        let quad =
            Quadratic::with_linear_spectrum(1.0, 2.0, ParamVector::filled(3, 0.5), None).unwrap();
        let w_star = quad.minimizer().clone();
        let model = LossModel::Quadratic(quad);
        let eval = vec![Example {
            features: vec![0.0; 3],
            label: Label::Value(0.0),
        }];
        let e = evaluate(&model, &w_star, &eval).unwrap();
        assert_eq!(e.loss, 0.0);
        assert_eq!(e.accuracy, None);
        assert!(matches!(
            evaluate(&model, &w_star, &[]),
            Err(OrchestratorError::EmptyEvalSet)
        ));
    }

    #[test]
    fn chance_level_accuracy() {
        let model = LossModel::Softmax(SoftmaxRegression {
            features: 10,
            classes: 10,
            l2: 0.0,
        });
        // Identity weights: predicts the argmax feature, which is random.
        let mut w = vec![0.0; 110];
        for c in 0..10 {
            w[c * 10 + c] = 1.0;
        }
        let w = ParamVector::new(w);
        let mut r = rng::stream(1, "chance", &[]);
        use rand::Rng;
        let eval: Vec<Example> = (0..5000)
            .map(|_| Example {
                features: (0..10).map(|_| r.random::<f64>()).collect(),
                label: Label::Class(r.random_range(0..10)),
            })
            .collect();
        let acc = evaluate(&model, &w, &eval).unwrap().accuracy.unwrap();
        assert!((acc - 0.1).abs() <= 0.02, "{acc}");
    }

    #[test]
    fn rate_fit_recovers_exact_curve() {
        let pts: Vec<(f64, f64)> = (10..=1000)
            .map(|t| {
                let t = t as f64;
                (t, 0.25 + 3.0 * t.ln() / t)
            })
            .collect();
        let fit = fit_rate_curve(&pts);
        assert!((fit.plateau - 0.25).abs() < 1e-9);
        assert!((fit.c - 3.0).abs() < 1e-9);
        assert!(fit.r_squared > 1.0 - 1e-12);
    }

    #[test]
    fn se_of_constant_is_zero() {
        assert_eq!(mean_and_se(&[2.0, 2.0, 2.0]), (2.0, 0.0));
    }
}
