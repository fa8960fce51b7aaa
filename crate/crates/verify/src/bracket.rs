use holdout_core::adversary::{
    search_gamma, AttackConfig, GammaProblem, HoldoutSimulation, RuleContext,
};
use holdout_core::aggregation::GradientProposal;
use holdout_core::committee::Population;
use holdout_core::learnkit::{sample_batch, Example};
use holdout_core::orchestrator::{
    AggregationRule, DistributedRunner, HoldoutRunner, RunConfig, StepSchedule, Workload,
};
use holdout_core::{rng, ParamVector};

use crate::robustness::{mixture_task, MixtureSetup};
use crate::{timed, CheckOutcome, Faults, Suite, Verdict};

/// Tolerated fractions for the two rules; the population is one-third
/// Byzantine. Above `f N_p` Byzantine proposers HoldOut voters must endorse
/// some of them whatever γ is, so its snapshots use the wider margin.
const KRUM_F: f64 = 1.0 / 3.0;
const HOLDOUT_F: f64 = 0.45;
const ACTUAL_F: f64 = 1.0 / 3.0;

#[derive(Default)]
struct Bracket {
    snapshots: usize,
    violations: usize,
    saturated: usize,
}

impl Bracket {
    /// `pred(γ) ∧ ¬pred(γ + tol)`, or only `pred(γ)` at the top of the range.
    fn record(&mut self, problem: &GammaProblem<'_>, attack: &AttackConfig) {
        let found = search_gamma(problem, attack.gamma_hi, attack.tol);
        self.snapshots += 1;
        let holds = !found.flagged && problem.accepts(found.gamma);
        let tight = if found.gamma >= attack.gamma_hi {
            self.saturated += 1;
            true
        } else {
            !problem.accepts(found.gamma + attack.tol)
        };
        self.violations += usize::from(!(holds && tight));
    }
}

fn split(proposals: &[GradientProposal], pop: &Population) -> (Vec<ParamVector>, Vec<bool>) {
    let layout: Vec<bool> = proposals
        .iter()
        .map(|p| pop.is_byzantine(p.proposer))
        .collect();
    let honest = proposals
        .iter()
        .zip(&layout)
        .filter(|(_, b)| !**b)
        .map(|(p, _)| p.grad.clone())
        .collect();
    (honest, layout)
}

fn snapshot_config(rule: AggregationRule, f: f64, epochs: usize, seed: u64) -> RunConfig {
    RunConfig {
        epochs,
        n: 60,
        num_proposers: 18,
        num_voters: 18,
        f,
        actual_f: ACTUAL_F,
        batch_size: 8,
        m_c: 20,
        eta: StepSchedule::Constant(0.5),
        rule,
        attack: AttackConfig::gamma_search(),
        seed,
    }
}

fn snapshot_setup() -> MixtureSetup {
    MixtureSetup {
        n: 60,
        features: 20,
        classes: 5,
        per_node: 40,
        eval: 0,
        noise: 1.0,
        separation: 0.5,
        committee: 18,
        f: HOLDOUT_F,
        batch_size: 8,
        m_c: 20,
        eta: 0.5,
        epochs: 0,
        seeds: 0,
    }
}

/// Criterion 11: on epoch snapshots from attacked runs, the γ returned by the
/// search is accepted by the Krum and HoldOut predicates and `γ + 10⁻³` is
/// not.
pub fn attack_bracket(suite: Suite, _faults: Faults) -> CheckOutcome {
    timed(11, "attack-search bracket", || {
        let epochs = suite.pick(20, 50);
        let s = snapshot_setup();
        let task = mixture_task(&s, 1100)?;
        let pop = Population::new(s.n, ACTUAL_F, 1100)?;
        let work = Workload::new(&task.model, &task.shards, &[]);
        let attack = AttackConfig::gamma_search();

        let mut krum = Bracket::default();
        let config = snapshot_config(AggregationRule::Krum, KRUM_F, epochs, 1101);
        let mut runner = DistributedRunner::new(&config, &pop, work.clone())?;
        for _ in 0..epochs {
            let e = runner.step()?;
            let (honest, layout) = split(&e.proposals, &pop);
            let problem =
                GammaProblem::with_layout(honest, layout, RuleContext::Krum { f: KRUM_F })?;
            krum.record(&problem, &attack);
        }

        let mut holdout = Bracket::default();
        let pool: Vec<Example> = task
            .shards
            .iter()
            .flat_map(|s| s.examples.iter().cloned())
            .collect();
        let config = snapshot_config(AggregationRule::Holdout, HOLDOUT_F, epochs, 1102);
        let mut runner = HoldoutRunner::new(&config, &pop, work.clone())?;
        for _ in 0..epochs {
            let e = runner.step()?;
            let (honest, layout) = split(&e.proposals, &pop);
            let byz_voters = e.record.byz_voters;
            let batches = (0..e.voters.size() - byz_voters)
                .map(|i| {
                    let mut r =
                        rng::stream(1103, "bracket-holdout", &[e.record.t as u64, i as u64]);
                    sample_batch(&pool, config.m_c, &mut r)
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let sim = HoldoutSimulation::new(
                &task.model,
                &e.w_before,
                e.eta,
                HOLDOUT_F,
                batches,
                byz_voters,
                &honest,
            )?;
            let problem = GammaProblem::with_layout(honest, layout, RuleContext::Holdout(sim))?;
            holdout.record(&problem, &attack);
        }

        Ok(Verdict::new(
            krum.violations == 0 && holdout.violations == 0,
            format!(
                "krum: {}/{} snapshots off ({} at γ_max); holdout: {}/{} off ({} at γ_max)",
                krum.violations,
                krum.snapshots,
                krum.saturated,
                holdout.violations,
                holdout.snapshots,
                holdout.saturated
            ),
        ))
    })
}
