use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use super::DpsgdError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MinibatchSampler {
    /// Each record joins the batch independently with probability `rate`.
    Poisson { rate: f64 },
    /// Exactly `batch` records drawn uniformly without replacement.
    FixedSize { batch: usize },
}

impl MinibatchSampler {
    pub fn validate(&self, population: usize) -> Result<(), DpsgdError> {
        match *self {
            MinibatchSampler::Poisson { rate } if rate > 0.0 && rate <= 1.0 => Ok(()),
            MinibatchSampler::Poisson { rate } => Err(DpsgdError::InvalidArgument(format!(
                "Poisson rate must lie in (0, 1], got {rate}"
            ))),
            MinibatchSampler::FixedSize { batch } if batch >= 1 && batch <= population => Ok(()),
            MinibatchSampler::FixedSize { batch } => Err(DpsgdError::InvalidArgument(format!(
                "fixed batch of {batch} does not fit a population of {population}"
            ))),
        }
    }

    /// One minibatch of indices into `0..population`, sorted.
    pub fn sample<R: Rng + ?Sized>(&self, population: usize, rng: &mut R) -> Vec<usize> {
        let size = match *self {
            // Binomial size then a uniform subset of that size: the same law
            // as independent per-record inclusion.
            MinibatchSampler::Poisson { rate } => {
                if rate >= 1.0 {
                    population
                } else {
                    Binomial::new(population as u64, rate)
                        .expect("validated rate")
                        .sample(rng) as usize
                }
            }
            MinibatchSampler::FixedSize { batch } => batch.min(population),
        };
        let mut idx = rand::seq::index::sample(rng, population, size).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Per-step memory use in abstract units: `base + per_example · batch`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryProfile {
    pub per_step_batch_sizes: Vec<usize>,
    pub base_units: u64,
    pub per_example_units: u64,
    pub peak_units: u64,
}

impl MemoryProfile {
    pub fn from_sizes(sizes: Vec<usize>, base_units: u64, per_example_units: u64) -> Self {
        let largest = sizes.iter().copied().max().unwrap_or(0) as u64;
        Self {
            per_step_batch_sizes: sizes,
            base_units,
            per_example_units,
            peak_units: base_units + per_example_units * largest,
        }
    }

    pub fn units_at(&self, step: usize) -> u64 {
        self.base_units + self.per_example_units * self.per_step_batch_sizes[step] as u64
    }

    pub fn mean_batch(&self) -> f64 {
        let n = self.per_step_batch_sizes.len();
        if n == 0 {
            return 0.0;
        }
        self.per_step_batch_sizes.iter().map(|&s| s as f64).sum::<f64>() / n as f64
    }

    /// Unbiased sample variance of the batch sizes.
    pub fn batch_variance(&self) -> f64 {
        let n = self.per_step_batch_sizes.len();
        if n < 2 {
            return 0.0;
        }
        let mean = self.mean_batch();
        self.per_step_batch_sizes
            .iter()
            .map(|&s| (s as f64 - mean).powi(2))
            .sum::<f64>()
            / (n - 1) as f64
    }

    pub fn min_batch(&self) -> usize {
        self.per_step_batch_sizes.iter().copied().min().unwrap_or(0)
    }

    pub fn max_batch(&self) -> usize {
        self.per_step_batch_sizes.iter().copied().max().unwrap_or(0)
    }
}

/// Draws `steps` minibatches and records the memory profile
/// (one unit per parameter, one unit per example slot).
pub fn sample_minibatches<R: Rng + ?Sized>(
    sampler: &MinibatchSampler,
    population: usize,
    steps: usize,
    base_units: u64,
    rng: &mut R,
) -> Result<(Vec<Vec<usize>>, MemoryProfile), DpsgdError> {
    if steps == 0 {
        return Err(DpsgdError::InvalidArgument("need at least one step".into()));
    }
    sampler.validate(population)?;
    let batches: Vec<Vec<usize>> = (0..steps).map(|_| sampler.sample(population, rng)).collect();
    let sizes = batches.iter().map(Vec::len).collect();
    Ok((batches, MemoryProfile::from_sizes(sizes, base_units, 1)))
}
