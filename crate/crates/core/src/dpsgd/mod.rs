//! Client-side DP-SGD: per-example clipping, Gaussian noise per step or per
//! round, minibatch sampling and the memory profile of each sampler.

mod data;
mod model;
mod sampler;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use data::{BlobSpec, Dataset};
pub use model::{Architecture, Model};
pub use sampler::{sample_minibatches, MemoryProfile, MinibatchSampler};

use crate::rng::{self, Purpose};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DpsgdError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("clipped gradient norm {norm} exceeds clipping threshold {clip}")]
    ClipViolation { norm: f64, clip: f64 },
    #[error("non-finite parameters after step {step}")]
    NonFinite { step: u64 },
}

/// Where the Gaussian noise enters local training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseInjectionMode {
    /// Standard DP-SGD: noise on every aggregated minibatch gradient.
    PerStep,
    /// Noise of std `σ·C/L` added once to the client's round output.
    #[default]
    PerRound,
}

/// What per-round noise is added to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoundNoiseTarget {
    #[default]
    Delta,
    Weights,
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `g / max(1, ‖g‖₂ / C)`.
pub fn clip_gradient(g: &[f64], clip: f64) -> Result<Vec<f64>, DpsgdError> {
    if !(clip > 0.0) || !clip.is_finite() {
        return Err(DpsgdError::InvalidArgument(format!(
            "clipping threshold must be finite and positive, got {clip}"
        )));
    }
    if g.iter().any(|x| !x.is_finite()) {
        return Err(DpsgdError::InvalidArgument(
            "gradient has non-finite entries".into(),
        ));
    }
    let scale = (l2_norm(g) / clip).max(1.0);
    Ok(g.iter().map(|x| x / scale).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepParams {
    pub clip: f64,
    pub sigma: f64,
    pub learning_rate: f64,
    /// Divisor of the noisy gradient sum; the nominal batch size `L`.
    pub denominator: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub batch_size: usize,
    pub max_clipped_norm: f64,
    pub skipped: bool,
}

/// Sum of clipped per-example gradients, reduced in batch order.
pub fn clipped_gradient_sum(
    model: &Model,
    data: &Dataset,
    batch: &[usize],
    clip: f64,
) -> Result<(Vec<f64>, f64), DpsgdError> {
    let clipped: Vec<Vec<f64>> = batch
        .par_iter()
        .map(|&i| clip_gradient(&model.gradient(data.row(i), data.label(i)), clip))
        .collect::<Result<_, _>>()?;
    let mut sum = vec![0.0; model.parameters.len()];
    let mut max_norm: f64 = 0.0;
    for g in &clipped {
        let norm = l2_norm(g);
        if norm > clip * (1.0 + 1e-12) {
            return Err(DpsgdError::ClipViolation { norm, clip });
        }
        max_norm = max_norm.max(norm);
        for (s, x) in sum.iter_mut().zip(g) {
            *s += x;
        }
    }
    Ok((sum, max_norm))
}

/// One DP-SGD update:
/// `w ← w − lr · (Σ clip(∇ℓ(xᵢ)) + N(0, σ²C²I)) / L`.
///
/// An empty batch leaves the model untouched and reports `skipped`.
pub fn noisy_step<R: Rng + ?Sized>(
    model: &mut Model,
    data: &Dataset,
    batch: &[usize],
    params: &StepParams,
    rng: &mut R,
) -> Result<StepReport, DpsgdError> {
    if !(params.sigma >= 0.0) || !(params.denominator > 0.0) {
        return Err(DpsgdError::InvalidArgument(format!(
            "need sigma >= 0 and a positive denominator, got {} and {}",
            params.sigma, params.denominator
        )));
    }
    if batch.is_empty() {
        return Ok(StepReport {
            batch_size: 0,
            max_clipped_norm: 0.0,
            skipped: true,
        });
    }
    let (mut sum, max_clipped_norm) = clipped_gradient_sum(model, data, batch, params.clip)?;
    if params.sigma > 0.0 {
        let noise = Normal::new(0.0, params.sigma * params.clip)
            .map_err(|e| DpsgdError::InvalidArgument(e.to_string()))?;
        for s in sum.iter_mut() {
            *s += noise.sample(rng);
        }
    }
    let step = params.learning_rate / params.denominator;
    for (w, g) in model.parameters.iter_mut().zip(&sum) {
        *w -= step * g;
    }
    Ok(StepReport {
        batch_size: batch.len(),
        max_clipped_norm,
        skipped: false,
    })
}

/// Adds `N(0, (σC/L)²)` independently to every coordinate.
pub fn per_round_inject<R: Rng + ?Sized>(
    update: &mut [f64],
    sigma: f64,
    clip: f64,
    batch_size: usize,
    rng: &mut R,
) -> Result<(), DpsgdError> {
    if batch_size == 0 {
        return Err(DpsgdError::InvalidArgument("batch size must be >= 1".into()));
    }
    if sigma == 0.0 {
        return Ok(());
    }
    let std = per_round_noise_std(sigma, clip, batch_size);
    let noise = Normal::new(0.0, std).map_err(|e| DpsgdError::InvalidArgument(e.to_string()))?;
    for u in update.iter_mut() {
        *u += noise.sample(rng);
    }
    Ok(())
}

pub fn per_round_noise_std(sigma: f64, clip: f64, batch_size: usize) -> f64 {
    sigma * clip / batch_size as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerChoice {
    Poisson,
    FixedSize,
}

impl SamplerChoice {
    /// The sampler for a partition of `population` records at nominal batch `batch`.
    pub fn sampler(self, batch: usize, population: usize) -> MinibatchSampler {
        match self {
            SamplerChoice::Poisson => MinibatchSampler::Poisson {
                rate: batch as f64 / population as f64,
            },
            SamplerChoice::FixedSize => MinibatchSampler::FixedSize { batch },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip: f64,
    pub sigma: f64,
    pub injection: NoiseInjectionMode,
    pub round_noise_target: RoundNoiseTarget,
    pub sampler: SamplerChoice,
}

impl LocalConfig {
    pub fn steps_per_round(&self, population: usize) -> u64 {
        u64::from(self.epochs) * (population as u64).div_ceil(self.batch_size as u64)
    }
}

/// Identifies the RNG streams of one client in one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey {
    pub master_seed: u64,
    pub client: u32,
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalOutcome {
    pub model: Model,
    pub steps: u64,
    pub skipped_steps: u64,
    pub profile: MemoryProfile,
    pub max_clipped_norm: f64,
}

/// One round of local DP training starting from `global`.
pub fn train_local(
    global: &Model,
    data: &Dataset,
    config: &LocalConfig,
    key: StreamKey,
) -> Result<LocalOutcome, DpsgdError> {
    if data.is_empty() {
        return Err(DpsgdError::InvalidArgument("client holds no data".into()));
    }
    let sampler = config.sampler.sampler(config.batch_size, data.len());
    sampler.validate(data.len())?;
    let steps = config.steps_per_round(data.len());
    let step_sigma = match config.injection {
        NoiseInjectionMode::PerStep => config.sigma,
        NoiseInjectionMode::PerRound => 0.0,
    };
    let params = StepParams {
        clip: config.clip,
        sigma: step_sigma,
        learning_rate: config.learning_rate,
        denominator: config.batch_size as f64,
    };
    let mut model = global.clone();
    let mut sizes = Vec::with_capacity(steps as usize);
    let mut skipped = 0;
    let mut max_clipped_norm: f64 = 0.0;
    for step in 0..steps {
        let mut rng = rng::stream(key.master_seed, key.client, key.round, step as u32, Purpose::Minibatch);
        let batch = sampler.sample(data.len(), &mut rng);
        let report = noisy_step(&mut model, data, &batch, &params, &mut rng)?;
        sizes.push(report.batch_size);
        skipped += u64::from(report.skipped);
        max_clipped_norm = max_clipped_norm.max(report.max_clipped_norm);
        if !model.is_finite() {
            return Err(DpsgdError::NonFinite { step });
        }
    }
    if config.injection == NoiseInjectionMode::PerRound && config.sigma > 0.0 {
        let mut rng = rng::stream(key.master_seed, key.client, key.round, 0, Purpose::RoundNoise);
        match config.round_noise_target {
            RoundNoiseTarget::Delta => {
                let mut delta: Vec<f64> = model
                    .parameters
                    .iter()
                    .zip(&global.parameters)
                    .map(|(w, g)| w - g)
                    .collect();
                per_round_inject(&mut delta, config.sigma, config.clip, config.batch_size, &mut rng)?;
                for ((w, g), d) in model.parameters.iter_mut().zip(&global.parameters).zip(&delta) {
                    *w = g + d;
                }
            }
            RoundNoiseTarget::Weights => {
                per_round_inject(
                    &mut model.parameters,
                    config.sigma,
                    config.clip,
                    config.batch_size,
                    &mut rng,
                )?;
            }
        }
        if !model.is_finite() {
            return Err(DpsgdError::NonFinite { step: steps });
        }
    }
    let base_units = model.parameters.len() as u64;
    Ok(LocalOutcome {
        model,
        steps,
        skipped_steps: skipped,
        profile: MemoryProfile::from_sizes(sizes, base_units, 1),
        max_clipped_norm,
    })
}
