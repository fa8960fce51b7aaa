use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{LearnError, Result};
use crate::rng::{self, SimRng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Value(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: Label,
}

/// What the generator knows about the distribution it sampled from.
#[derive(Clone, Debug, PartialEq)]
pub enum GroundTruth {
    None,
    RegressionWeights(Vec<f64>),
    ClassMeans(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub feature_dim: usize,
    /// `Some(c)` for classification data with labels in `[0, c)`.
    pub num_classes: Option<usize>,
    pub truth: GroundTruth,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Split off the last `count` examples as a separate dataset sharing the
    /// same metadata.
    pub fn split_off(&mut self, count: usize) -> Dataset {
        let at = self.examples.len().saturating_sub(count);
        Dataset {
            examples: self.examples.split_off(at),
            feature_dim: self.feature_dim,
            num_classes: self.num_classes,
            truth: self.truth.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    GaussianMixture,
    LinearRegression,
    /// Zero-mean gradient-noise samples, uniform in `[-noise, noise]^d`, for
    /// the quadratic model.
    QuadraticNoise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub m: usize,
    pub d: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default)]
    pub noise: f64,
    /// Scale of the class means for the Gaussian mixture.
    #[serde(default = "default_separation")]
    pub separation: f64,
}

fn default_classes() -> usize {
    10
}

fn default_separation() -> f64 {
    1.0
}

pub fn make_synthetic_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    if spec.m == 0 {
        return Err(LearnError::InvalidSpec("m must be positive".into()));
    }
    if spec.d == 0 {
        return Err(LearnError::InvalidSpec("d must be positive".into()));
    }
    if !(spec.noise.is_finite() && spec.noise >= 0.0) {
        return Err(LearnError::InvalidSpec(
            "noise must be finite and >= 0".into(),
        ));
    }
    let mut rng = rng::stream(seed, "dataset", &[]);
    let d = spec.d;
    let gauss = |rng: &mut SimRng| -> f64 { StandardNormal.sample(rng) };

    match spec.kind {
        DatasetKind::GaussianMixture => {
            if spec.num_classes < 2 {
                return Err(LearnError::InvalidSpec(
                    "classification needs at least 2 classes".into(),
                ));
            }
            let means: Vec<Vec<f64>> = (0..spec.num_classes)
                .map(|_| (0..d).map(|_| spec.separation * gauss(&mut rng)).collect())
                .collect();
            let examples = (0..spec.m)
                .map(|_| {
                    let class = rng.random_range(0..spec.num_classes);
                    let features = means[class]
                        .iter()
                        .map(|mu| mu + spec.noise * gauss(&mut rng))
                        .collect();
                    Example {
                        features,
                        label: Label::Class(class),
                    }
                })
                .collect();
            Ok(Dataset {
                examples,
                feature_dim: d,
                num_classes: Some(spec.num_classes),
                truth: GroundTruth::ClassMeans(means),
            })
        }
        DatasetKind::LinearRegression => {
            let weights: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
            let examples = (0..spec.m)
                .map(|_| {
                    let features: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
                    let clean: f64 = features.iter().zip(&weights).map(|(x, w)| x * w).sum();
                    let target = if spec.noise > 0.0 {
                        clean + spec.noise * gauss(&mut rng)
                    } else {
                        clean
                    };
                    Example {
                        features,
                        label: Label::Value(target),
                    }
                })
                .collect();
            Ok(Dataset {
                examples,
                feature_dim: d,
                num_classes: None,
                truth: GroundTruth::RegressionWeights(weights),
            })
        }
        DatasetKind::QuadraticNoise => {
            let examples = (0..spec.m)
                .map(|_| Example {
                    features: (0..d)
                        .map(|_| spec.noise * rng.random_range(-1.0..=1.0))
                        .collect(),
                    label: Label::Value(0.0),
                })
                .collect();
            Ok(Dataset {
                examples,
                feature_dim: d,
                num_classes: None,
                truth: GroundTruth::None,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Shard {
    pub owner: usize,
    pub examples: Vec<Example>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    UniformIid,
}

/// Shuffle and deal the dataset into `n` disjoint shards whose sizes differ by
/// at most one; the first `m mod n` shards get the extra example.
pub fn partition(
    dataset: &Dataset,
    n: usize,
    mode: PartitionMode,
    seed: u64,
) -> Result<Vec<Shard>> {
    let PartitionMode::UniformIid = mode;
    let m = dataset.len();
    if n == 0 || m == 0 || n > m {
        return Err(LearnError::TooManyShards {
            nodes: n,
            examples: m,
        });
    }
    let mut rng = rng::stream(seed, "partition", &[]);
    let order = index::sample(&mut rng, m, m).into_vec();
    let base = m / n;
    let extra = m % n;
    let mut shards = Vec::with_capacity(n);
    let mut cursor = 0;
    for owner in 0..n {
        let size = base + usize::from(owner < extra);
        let examples = order[cursor..cursor + size]
            .iter()
            .map(|&i| dataset.examples[i].clone())
            .collect();
        cursor += size;
        shards.push(Shard { owner, examples });
    }
    Ok(shards)
}

/// Each node draws `per_node` examples uniformly with replacement from the
/// pool, independently of the others.
pub fn sample_node_datasets(
    dataset: &Dataset,
    n: usize,
    per_node: usize,
    seed: u64,
) -> Result<Vec<Shard>> {
    if dataset.is_empty() || n == 0 || per_node == 0 {
        return Err(LearnError::TooManyShards {
            nodes: n,
            examples: dataset.len(),
        });
    }
    Ok((0..n)
        .map(|owner| {
            let mut rng = rng::stream(seed, "node-dataset", &[owner as u64]);
            let examples = (0..per_node)
                .map(|_| dataset.examples[rng.random_range(0..dataset.len())].clone())
                .collect();
            Shard { owner, examples }
        })
        .collect())
}

/// Draw `batch` distinct examples uniformly without replacement.
pub fn sample_batch<R: Rng + ?Sized>(
    shard: &[Example],
    batch: usize,
    rng: &mut R,
) -> Result<Vec<Example>> {
    if batch > shard.len() {
        return Err(LearnError::BatchTooLarge {
            batch,
            available: shard.len(),
        });
    }
    Ok(index::sample(rng, shard.len(), batch)
        .into_iter()
        .map(|i| shard[i].clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mixture(m: usize) -> DatasetSpec {
        DatasetSpec {
            kind: DatasetKind::GaussianMixture,
            m,
            d: 50,
            num_classes: 10,
            noise: 1.0,
            separation: 1.0,
        }
    }

    #[test]
    fn mixture_shape_contract() {
        let ds = make_synthetic_dataset(&mixture(1000), 7).unwrap();
        assert_eq!(ds.len(), 1000);
        assert!(ds.examples.iter().all(|e| e.features.len() == 50));
        assert!(ds
            .examples
            .iter()
            .all(|e| matches!(e.label, Label::Class(c) if c < 10)));
    }

    #[test]
    fn zero_noise_regression_is_exact() {
        let spec = DatasetSpec {
            kind: DatasetKind::LinearRegression,
            m: 100,
            d: 20,
            num_classes: 0,
            noise: 0.0,
            separation: 1.0,
        };
        let ds = make_synthetic_dataset(&spec, 1).unwrap();
        let GroundTruth::RegressionWeights(w) = &ds.truth else {
            panic!("regression data must expose its weights")
        };
        for e in &ds.examples {
            let y: f64 = e.features.iter().zip(w).map(|(x, w)| x * w).sum();
            assert_eq!(e.label, Label::Value(y));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = make_synthetic_dataset(&mixture(200), 3).unwrap();
        let b = make_synthetic_dataset(&mixture(200), 3).unwrap();
        assert_eq!(a, b);
        let c = make_synthetic_dataset(&mixture(200), 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = mixture(0);
        assert!(matches!(
            make_synthetic_dataset(&spec, 0),
            Err(LearnError::InvalidSpec(_))
        ));
        spec.m = 10;
        spec.d = 0;
        assert!(make_synthetic_dataset(&spec, 0).is_err());
        spec.d = 3;
        spec.num_classes = 1;
        assert!(make_synthetic_dataset(&spec, 0).is_err());
    }

    #[test]
    fn partition_sizes() {
        let ds = make_synthetic_dataset(&mixture(100), 0).unwrap();
        let shards = partition(&ds, 4, PartitionMode::UniformIid, 1).unwrap();
        assert!(shards.iter().all(|s| s.len() == 25));

        let ds = make_synthetic_dataset(&mixture(101), 0).unwrap();
        let shards = partition(&ds, 4, PartitionMode::UniformIid, 1).unwrap();
        let sizes: Vec<_> = shards.iter().map(Shard::len).collect();
        assert_eq!(sizes, vec![26, 25, 25, 25]);

        assert!(matches!(
            partition(&ds, 102, PartitionMode::UniformIid, 1),
            Err(LearnError::TooManyShards { .. })
        ));
    }

    #[test]
    fn mnist_shaped_node_datasets() {
        let ds = make_synthetic_dataset(&mixture(5000), 0).unwrap();
        let shards = sample_node_datasets(&ds, 100, 2000, 9).unwrap();
        assert_eq!(shards.len(), 100);
        assert!(shards.iter().all(|s| s.len() == 2000));
    }

    #[test]
    fn batches() {
        use rand::SeedableRng;
        let ds = make_synthetic_dataset(&mixture(2000), 0).unwrap();
        let mut rng = SimRng::seed_from_u64(5);
        let full = sample_batch(&ds.examples[..10], 10, &mut rng).unwrap();
        assert_eq!(full.len(), 10);
        for e in &ds.examples[..10] {
            assert!(full.contains(e));
        }

        let batch = sample_batch(&ds.examples, 83, &mut rng).unwrap();
        assert_eq!(batch.len(), 83);
        for (i, a) in batch.iter().enumerate() {
            assert!(batch[i + 1..].iter().all(|b| b != a));
        }

        let mut r1 = SimRng::seed_from_u64(11);
        let mut r2 = SimRng::seed_from_u64(11);
        assert_eq!(
            sample_batch(&ds.examples, 20, &mut r1).unwrap(),
            sample_batch(&ds.examples, 20, &mut r2).unwrap()
        );
        assert!(matches!(
            sample_batch(&ds.examples[..5], 6, &mut rng),
            Err(LearnError::BatchTooLarge { .. })
        ));
    }
}
