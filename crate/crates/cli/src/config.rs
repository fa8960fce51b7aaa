//! Experiment configuration: one TOML document with `[dataset]`, `[model]`,
//! `[population]` and `[protocol]` sections.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use holdout_core::adversary::AttackConfig;
use holdout_core::committee::Population;
use holdout_core::decentralized::DecentralizedConfig;
use holdout_core::learnkit::{
    load_idx, make_synthetic_dataset, partition, Dataset, DatasetKind, DatasetSpec, LossModel,
    PartitionMode, Quadratic, Shard, SoftmaxRegression, TinyMlp,
};
use holdout_core::orchestrator::{AggregationRule, RunConfig, StepSchedule};
use holdout_core::{rng, NodeId, ParamVector};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Parameter-server SGD with a baseline aggregation rule.
    CentralSgd,
    Holdout,
    Decentralized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: Variant,
    /// Base seed; repetition seeds derive from it unless `seeds` is given.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub repetitions: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    #[serde(default)]
    pub population: PopulationSection,
    pub protocol: ProtocolSection,
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    GaussianMixture,
    LinearRegression,
    QuadraticNoise,
    /// IDX image and label files.
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DataKind,
    /// Training examples, synthetic kinds only.
    #[serde(default)]
    pub m: usize,
    #[serde(default)]
    pub d: usize,
    #[serde(default = "ten")]
    pub num_classes: usize,
    #[serde(default)]
    pub noise: f64,
    #[serde(default = "unit")]
    pub separation: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    /// Examples held back from the shards for test metrics.
    #[serde(default)]
    pub eval: usize,
    /// Defaults to the experiment seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "uniform")]
    pub partition: PartitionMode,
}

fn ten() -> usize {
    10
}
fn unit() -> f64 {
    1.0
}
fn uniform() -> PartitionMode {
    PartitionMode::UniformIid
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSection {
    /// Eigenvalues spread linearly over `[alpha, beta]`.
    Quadratic {
        alpha: f64,
        beta: f64,
        /// Defaults to all ones.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        minimizer: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rotation_seed: Option<u64>,
    },
    SoftmaxRegression {
        #[serde(default)]
        l2: f64,
    },
    TinyMlp {
        hidden: usize,
        #[serde(default = "sharpness")]
        sharpness: f64,
        #[serde(default)]
        l2: f64,
    },
}

fn sharpness() -> f64 {
    10.0
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSection {
    /// Explicit Byzantine node ids; otherwise `floor(actual_f · n)` random ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub byzantine: Option<Vec<NodeId>>,
    /// Defaults to the experiment seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    #[serde(rename = "T")]
    pub epochs: usize,
    pub n: usize,
    #[serde(rename = "N_p")]
    pub num_proposers: usize,
    #[serde(rename = "N_c", default, skip_serializing_if = "Option::is_none")]
    pub num_voters: Option<usize>,
    pub f: f64,
    #[serde(default)]
    pub actual_f: f64,
    #[serde(rename = "B")]
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_c: Option<usize>,
    pub eta: StepSchedule,
    /// `central_sgd` only; defaults to `average`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<AggregationRule>,
    #[serde(default)]
    pub attack: AttackConfig,
    /// Sortition probabilities, `decentralized` only. Missing ones default to
    /// `N_p / n`, `N_c / n` and the committee bound over `n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q3: Option<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_delta() -> f64 {
    0.01
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        Ok(config)
    }

    /// Seeds of all repetitions.
    pub fn repetition_seeds(&self) -> Result<Vec<u64>> {
        if self.repetitions == 0 {
            bail!("repetitions: must be at least 1");
        }
        if self.seeds.is_empty() {
            return Ok((0..self.repetitions as u64)
                .map(|r| rng::child_seed(self.seed, "repetition", &[r]))
                .collect());
        }
        if self.seeds.len() != self.repetitions {
            bail!(
                "seeds: {} listed for {} repetitions",
                self.seeds.len(),
                self.repetitions
            );
        }
        Ok(self.seeds.clone())
    }

    /// Copy with the repetition seeds written out, as echoed in summaries.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        c.seeds = self.repetition_seeds()?;
        c.dataset.seed.get_or_insert(self.seed);
        c.population.seed.get_or_insert(self.seed);
        Ok(c)
    }

    pub fn rule(&self) -> Result<AggregationRule> {
        match (self.variant, self.protocol.rule) {
            (Variant::CentralSgd, None) => Ok(AggregationRule::Average),
            (Variant::CentralSgd, Some(AggregationRule::Holdout)) => {
                bail!("protocol.rule: use variant = \"holdout\" for HoldOut SGD")
            }
            (Variant::CentralSgd, Some(r)) => Ok(r),
            (_, None | Some(AggregationRule::Holdout)) => Ok(AggregationRule::Holdout),
            (v, Some(r)) => bail!(
                "protocol.rule: {} does not apply to variant {v:?}",
                r.name()
            ),
        }
    }

    fn needs_voters(&self) -> bool {
        self.variant != Variant::CentralSgd
    }

    fn num_voters(&self) -> Result<usize> {
        match (self.protocol.num_voters, self.needs_voters()) {
            (Some(c), _) => Ok(c),
            (None, false) => Ok(0),
            (None, true) => bail!("N_c: required for variant {:?}", self.variant),
        }
    }

    fn m_c(&self) -> Result<usize> {
        match (self.protocol.m_c, self.needs_voters()) {
            (Some(m), _) => Ok(m),
            (None, false) => Ok(1),
            (None, true) => bail!("m_c: required for variant {:?}", self.variant),
        }
    }

    /// Actual Byzantine fraction, from the explicit id list when present.
    fn actual_f(&self) -> f64 {
        match &self.population.byzantine {
            Some(ids) if self.protocol.n > 0 => ids.len() as f64 / self.protocol.n as f64,
            _ => self.protocol.actual_f,
        }
    }

    pub fn run_config(&self, seed: u64) -> Result<RunConfig> {
        let p = &self.protocol;
        let config = RunConfig {
            epochs: p.epochs,
            n: p.n,
            num_proposers: p.num_proposers,
            num_voters: self.num_voters()?,
            f: p.f,
            actual_f: self.actual_f(),
            batch_size: p.batch_size,
            m_c: self.m_c()?,
            eta: p.eta,
            rule: self.rule()?,
            attack: p.attack.clone(),
            seed,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn decentralized_config(&self, seed: u64) -> Result<DecentralizedConfig> {
        let p = &self.protocol;
        let (d1, d2, d3) = DecentralizedConfig::default_probabilities(
            p.n,
            p.num_proposers,
            self.num_voters()?,
            p.epochs,
            p.delta,
            p.f,
        )?;
        let config = DecentralizedConfig {
            epochs: p.epochs,
            n: p.n,
            q1: p.q1.unwrap_or(d1),
            q2: p.q2.unwrap_or(d2),
            q3: p.q3.unwrap_or(d3),
            f: p.f,
            actual_f: self.actual_f(),
            batch_size: p.batch_size,
            m_c: self.m_c()?,
            eta: p.eta,
            attack: p.attack.clone(),
            seed,
            trace: false,
        };
        config.validate()?;
        Ok(config)
    }

    /// Shape checks that need no data, for every repetition.
    pub fn validate(&self) -> Result<()> {
        self.rule()?;
        for seed in self.repetition_seeds()? {
            match self.variant {
                Variant::Decentralized => {
                    self.decentralized_config(seed)?;
                }
                _ => {
                    self.run_config(seed)?;
                }
            }
        }
        if let Some(ids) = &self.population.byzantine {
            if let Some(bad) = ids.iter().find(|&&i| i >= self.protocol.n) {
                bail!(
                    "population.byzantine: id {bad} is not below n = {}",
                    self.protocol.n
                );
            }
        }
        Ok(())
    }

    pub fn population(&self) -> Result<Population> {
        let n = self.protocol.n;
        Ok(match &self.population.byzantine {
            Some(ids) => Population::with_byzantine(n, ids.iter().copied()),
            None => Population::new(
                n,
                self.protocol.actual_f,
                self.population.seed.unwrap_or(self.seed),
            )?,
        })
    }

    /// Training shards, evaluation set and model.
    pub fn materialize(&self) -> Result<Materialized> {
        let ds = &self.dataset;
        let seed = ds.seed.unwrap_or(self.seed);
        let mut data = match ds.kind {
            DataKind::Idx => {
                let (Some(images), Some(labels)) = (&ds.images, &ds.labels) else {
                    bail!("dataset.images and dataset.labels: required for kind idx");
                };
                load_idx(images, labels)?
            }
            kind => {
                let spec = DatasetSpec {
                    kind: match kind {
                        DataKind::GaussianMixture => DatasetKind::GaussianMixture,
                        DataKind::LinearRegression => DatasetKind::LinearRegression,
                        _ => DatasetKind::QuadraticNoise,
                    },
                    m: ds.m + ds.eval,
                    d: ds.d,
                    num_classes: ds.num_classes,
                    noise: ds.noise,
                    separation: ds.separation,
                };
                make_synthetic_dataset(&spec, seed)?
            }
        };
        if ds.eval >= data.examples.len() {
            bail!(
                "dataset.eval: {} leaves no training data out of {}",
                ds.eval,
                data.examples.len()
            );
        }
        let eval = data.split_off(ds.eval);
        let model = self.model(&data)?;
        let shards = partition(&data, self.protocol.n, ds.partition, seed)?;
        Ok(Materialized {
            model,
            shards,
            eval,
        })
    }

    fn model(&self, data: &Dataset) -> Result<LossModel> {
        let features = data.feature_dim;
        let classes = || {
            data.num_classes
                .context("model: classification needs a labelled dataset")
        };
        Ok(match &self.model {
            ModelSection::Quadratic {
                alpha,
                beta,
                minimizer,
                rotation_seed,
            } => {
                let w_star = match minimizer {
                    Some(w) if w.len() == features => ParamVector::new(w.clone()),
                    Some(w) => bail!(
                        "model.minimizer: {} entries for dimension {features}",
                        w.len()
                    ),
                    None => ParamVector::filled(features, 1.0),
                };
                LossModel::Quadratic(Quadratic::with_linear_spectrum(
                    *alpha,
                    *beta,
                    w_star,
                    *rotation_seed,
                )?)
            }
            ModelSection::SoftmaxRegression { l2 } => LossModel::Softmax(SoftmaxRegression {
                features,
                classes: classes()?,
                l2: *l2,
            }),
            ModelSection::TinyMlp {
                hidden,
                sharpness,
                l2,
            } => LossModel::Mlp(TinyMlp {
                features,
                hidden: *hidden,
                classes: classes()?,
                sharpness: *sharpness,
                l2: *l2,
            }),
        })
    }
}

pub struct Materialized {
    pub model: LossModel,
    pub shards: Vec<Shard>,
    pub eval: Dataset,
}
