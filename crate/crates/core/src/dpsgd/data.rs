use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{self, Purpose};

/// Dense labelled dataset, row-major features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    dim: usize,
    classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, classes: usize, features: Vec<f64>, labels: Vec<usize>) -> Self {
        assert_eq!(features.len(), dim * labels.len(), "feature matrix shape");
        assert!(labels.iter().all(|&y| y < classes), "label out of range");
        Self {
            dim,
            classes,
            features,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            dim: self.dim,
            classes: self.classes,
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// First `test` records as the test split, the rest as training data.
    pub fn split_off_test(&self, test: usize) -> (Dataset, Dataset) {
        let test = test.min(self.len());
        let test_idx: Vec<usize> = (0..test).collect();
        let train_idx: Vec<usize> = (test..self.len()).collect();
        (self.subset(&train_idx), self.subset(&test_idx))
    }
}

/// Gaussian blobs: one isotropic unit-variance cluster per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub samples: usize,
    pub dim: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Expected distance between class centres is `separation · √2`.
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_classes() -> usize {
    2
}

fn default_separation() -> f64 {
    2.0
}

fn default_test_fraction() -> f64 {
    0.2
}

impl BlobSpec {
    pub fn generate(&self) -> Dataset {
        let mut rng = rng::stream(self.seed, 0, 0, 0, Purpose::Data);
        let scale = self.separation / (self.dim as f64).sqrt();
        let centres: Vec<Vec<f64>> = (0..self.classes)
            .map(|_| {
                (0..self.dim)
                    .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect()
            })
            .collect();
        let mut features = Vec::with_capacity(self.samples * self.dim);
        let mut labels = Vec::with_capacity(self.samples);
        for _ in 0..self.samples {
            let y = rng.random_range(0..self.classes);
            for c in &centres[y] {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(c + z);
            }
            labels.push(y);
        }
        Dataset::new(self.dim, self.classes, features, labels)
    }

    /// `(train, test)` split by `test_fraction`.
    pub fn generate_split(&self) -> (Dataset, Dataset) {
        let all = self.generate();
        let test = (self.samples as f64 * self.test_fraction).round() as usize;
        all.split_off_test(test)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_seeded() {
        let spec = BlobSpec {
            samples: 50,
            dim: 3,
            classes: 2,
            separation: 4.0,
            test_fraction: 0.2,
            seed: 11,
        };
        assert_eq!(spec.generate(), spec.generate());
        let (train, test) = spec.generate_split();
        assert_eq!(train.len(), 40);
        assert_eq!(test.len(), 10);
        assert_eq!(train.dim(), 3);
    }

    #[test]
    fn subset_copies_rows() {
        let d = Dataset::new(2, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0], vec![0, 1, 0]);
        let s = d.subset(&[2, 0]);
        assert_eq!(s.row(0), &[4.0, 5.0]);
        assert_eq!(s.label(1), 0);
    }
}
