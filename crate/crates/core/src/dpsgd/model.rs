use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    /// Multinomial logistic regression.
    Logistic { dim: usize, classes: usize },
    /// One hidden tanh layer.
    Mlp {
        dim: usize,
        hidden: usize,
        classes: usize,
    },
}

impl Architecture {
    pub fn parameter_count(&self) -> usize {
        match *self {
            Architecture::Logistic { dim, classes } => classes * dim + classes,
            Architecture::Mlp {
                dim,
                hidden,
                classes,
            } => hidden * dim + hidden + classes * hidden + classes,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            Architecture::Logistic { classes, .. } | Architecture::Mlp { classes, .. } => classes,
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            Architecture::Logistic { dim, .. } | Architecture::Mlp { dim, .. } => dim,
        }
    }
}

/// A flat parameter vector interpreted by its architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub architecture: Architecture,
    pub parameters: Vec<f64>,
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

fn affine(weights: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    bias.iter()
        .enumerate()
        .map(|(r, b)| {
            b + weights[r * cols..(r + 1) * cols]
                .iter()
                .zip(x)
                .map(|(w, xi)| w * xi)
                .sum::<f64>()
        })
        .collect()
}

impl Model {
    /// Logistic models start at zero; MLPs get a seeded uniform
    /// Glorot-style initialization.
    pub fn init(architecture: Architecture, seed: u64) -> Self {
        let mut parameters = vec![0.0; architecture.parameter_count()];
        if let Architecture::Mlp {
            dim,
            hidden,
            classes,
        } = architecture
        {
            let mut rng = rng::stream(seed, 0, 0, 0, Purpose::Init);
            let l1 = (6.0 / (dim + hidden) as f64).sqrt();
            let l2 = (6.0 / (hidden + classes) as f64).sqrt();
            let w1_end = hidden * dim;
            let w2_start = w1_end + hidden;
            let w2_end = w2_start + classes * hidden;
            for p in &mut parameters[..w1_end] {
                *p = rng.random_range(-l1..l1);
            }
            for p in &mut parameters[w2_start..w2_end] {
                *p = rng.random_range(-l2..l2);
            }
        }
        Self {
            architecture,
            parameters,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.parameters.iter().all(|p| p.is_finite())
    }

    /// Class probabilities for one example.
    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let mut z = match self.architecture {
            Architecture::Logistic { dim, classes } => {
                let (w, b) = self.parameters.split_at(classes * dim);
                affine(w, b, x)
            }
            Architecture::Mlp {
                dim,
                hidden,
                classes,
            } => {
                let (w1, rest) = self.parameters.split_at(hidden * dim);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(classes * hidden);
                let h: Vec<f64> = affine(w1, b1, x).into_iter().map(f64::tanh).collect();
                affine(w2, b2, &h)
            }
        };
        softmax_in_place(&mut z);
        z
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let p = self.predict_proba(x);
        p.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    /// Cross-entropy loss for one example.
    pub fn loss(&self, x: &[f64], y: usize) -> f64 {
        -self.predict_proba(x)[y].max(1e-300).ln()
    }

    /// Gradient of the cross-entropy loss for one example.
    pub fn gradient(&self, x: &[f64], y: usize) -> Vec<f64> {
        let mut grad = vec![0.0; self.parameters.len()];
        match self.architecture {
            Architecture::Logistic { dim, classes } => {
                let mut p = self.predict_proba(x);
                p[y] -= 1.0;
                for (c, pc) in p.iter().enumerate() {
                    for (j, xj) in x.iter().enumerate() {
                        grad[c * dim + j] = pc * xj;
                    }
                    grad[classes * dim + c] = *pc;
                }
            }
            Architecture::Mlp {
                dim,
                hidden,
                classes,
            } => {
                let (w1, rest) = self.parameters.split_at(hidden * dim);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(classes * hidden);
                let h: Vec<f64> = affine(w1, b1, x).into_iter().map(f64::tanh).collect();
                let mut p = affine(w2, b2, &h);
                softmax_in_place(&mut p);
                p[y] -= 1.0;
                let b1_off = hidden * dim;
                let w2_off = b1_off + hidden;
                let b2_off = w2_off + classes * hidden;
                let mut dh = vec![0.0; hidden];
                for (c, pc) in p.iter().enumerate() {
                    for (k, hk) in h.iter().enumerate() {
                        grad[w2_off + c * hidden + k] = pc * hk;
                        dh[k] += pc * w2[c * hidden + k];
                    }
                    grad[b2_off + c] = *pc;
                }
                for k in 0..hidden {
                    let da = dh[k] * (1.0 - h[k] * h[k]);
                    for (j, xj) in x.iter().enumerate() {
                        grad[k * dim + j] = da * xj;
                    }
                    grad[b1_off + k] = da;
                }
            }
        }
        grad
    }
}
