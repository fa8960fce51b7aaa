//! Acceptance checks. Each check runs at one of two scales and reports a
//! pass/fail verdict with the measured values.

mod agreement;
mod alignment;
mod bracket;
mod committee;
mod convergence;
mod gradients;
mod messages;
mod reduction;
mod robustness;
mod union;

use std::fmt;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

pub use agreement::decentralized_agreement;
pub use alignment::alignment_check;
pub use bracket::attack_bracket;
pub use committee::{bound_soundness, hypergeometric_oracle};
pub use convergence::convergence_shape;
pub use gradients::gradient_correctness;
pub use messages::message_audit;
pub use reduction::f_zero_reduction;
pub use robustness::robustness_ordering;
pub use union::union_non_empty;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Orchestrator(#[from] holdout_core::orchestrator::OrchestratorError),
    #[error(transparent)]
    Decentralized(#[from] holdout_core::decentralized::DecentralizedError),
    #[error(transparent)]
    Committee(#[from] holdout_core::committee::CommitteeError),
    #[error(transparent)]
    Aggregation(#[from] holdout_core::aggregation::AggregationError),
    #[error(transparent)]
    Adversary(#[from] holdout_core::adversary::AdversaryError),
    #[error(transparent)]
    Learn(#[from] holdout_core::learnkit::LearnError),
}

pub type Result<T, E = VerifyError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// Reduced sample sizes, for quick feedback.
    Fast,
    /// Sample sizes and tolerances of the acceptance criteria.
    Full,
}

impl Suite {
    fn pick<T>(self, fast: T, full: T) -> T {
        match self {
            Suite::Fast => fast,
            Suite::Full => full,
        }
    }
}

/// Deliberate defects for checking that the checks can fail.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Faults {
    /// Raise the union threshold from `τ` to `τ + N_c`.
    pub threshold_plus_voters: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    /// Measured values, human readable.
    pub detail: String,
    #[serde(serialize_with = "seconds")]
    pub elapsed: Duration,
}

fn seconds<S: serde::Serializer>(d: &Duration, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(d.as_secs_f64())
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:>2} {:<28} {:>7.2}s  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

/// A check's verdict before timing is attached.
pub(crate) struct Verdict {
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

pub(crate) fn timed(
    id: u8,
    name: &'static str,
    body: impl FnOnce() -> Result<Verdict>,
) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = match body() {
        Ok(v) => (v.passed, v.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    CheckOutcome {
        id,
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

pub type CheckFn = fn(Suite, Faults) -> CheckOutcome;

/// All checks in criterion order.
pub const CHECKS: [CheckFn; 11] = [
    union_non_empty,
    f_zero_reduction,
    bound_soundness,
    hypergeometric_oracle,
    gradient_correctness,
    convergence_shape,
    alignment_check,
    robustness_ordering,
    decentralized_agreement,
    message_audit,
    attack_bracket,
];

pub fn run_all(suite: Suite, faults: Faults) -> Vec<CheckOutcome> {
    CHECKS.iter().map(|check| check(suite, faults)).collect()
}

/// Sample mean and standard error of the mean.
pub(crate) fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

impl std::str::FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "fast" => Ok(Suite::Fast),
            "full" => Ok(Suite::Full),
            other => Err(format!("unknown suite {other:?}, expected fast or full")),
        }
    }
}
