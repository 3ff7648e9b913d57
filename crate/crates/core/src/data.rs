use std::collections::HashSet;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Labelled samples stored row-major in a flat feature buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    feature_dim: usize,
    labels: Vec<usize>,
    domain_ids: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    #[serde(default)]
    domain_ids: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>, domain_ids: Option<Vec<usize>>) -> Result<Self> {
        let n = inputs.len();
        if n == 0 {
            return Err(Error::Data("dataset has no samples".into()));
        }
        if labels.len() != n {
            return Err(Error::Data(format!("{} inputs but {} labels", n, labels.len())));
        }
        let domain_ids = domain_ids.unwrap_or_else(|| vec![0; n]);
        if domain_ids.len() != n {
            return Err(Error::Data(format!("{} inputs but {} domain ids", n, domain_ids.len())));
        }
        let feature_dim = inputs[0].len();
        if feature_dim == 0 {
            return Err(Error::Data("samples have no features".into()));
        }
        let mut features = Vec::with_capacity(n * feature_dim);
        for (i, row) in inputs.iter().enumerate() {
            if row.len() != feature_dim {
                return Err(Error::Data(format!(
                    "sample {i} has {} features, expected {feature_dim}",
                    row.len()
                )));
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::Data(format!("sample {i} has a non-finite feature")));
            }
            features.extend_from_slice(row);
        }
        Ok(Dataset {
            features,
            feature_dim,
            labels,
            domain_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn domain_ids(&self) -> &[usize] {
        &self.domain_ids
    }

    /// One past the largest label present.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.feature_dim);
        for &i in indices {
            features.extend_from_slice(self.input(i));
        }
        Dataset {
            features,
            feature_dim: self.feature_dim,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            domain_ids: indices.iter().map(|&i| self.domain_ids[i]).collect(),
        }
    }

    /// Concatenate datasets that share a feature dimension.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Dataset>) -> Result<Dataset> {
        let mut iter = parts.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::Data("nothing to concatenate".into()))?;
        let mut out = first.clone();
        for d in iter {
            if d.feature_dim != out.feature_dim {
                return Err(Error::Data("feature dimensions differ".into()));
            }
            out.features.extend_from_slice(&d.features);
            out.labels.extend_from_slice(&d.labels);
            out.domain_ids.extend_from_slice(&d.domain_ids);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = DatasetFile {
            inputs: (0..self.len()).map(|i| self.input(i).to_vec()).collect(),
            labels: self.labels.clone(),
            domain_ids: Some(self.domain_ids.clone()),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Dataset> {
        let file: DatasetFile = serde_json::from_str(s)?;
        Dataset::new(file.inputs, file.labels, file.domain_ids)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Indices of a minibatch drawn from a dataset of `n` samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    indices: Vec<usize>,
}

impl Batch {
    pub fn new(indices: Vec<usize>, n: usize) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::BatchSize {
                requested: 0,
                available: n,
            });
        }
        let mut seen = HashSet::with_capacity(indices.len());
        for &i in &indices {
            if i >= n || !seen.insert(i) {
                return Err(Error::Data(format!("batch index {i} is out of range or repeated")));
            }
        }
        Ok(Batch { indices })
    }

    pub fn full(n: usize) -> Batch {
        Batch {
            indices: (0..n).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn size(&self) -> usize {
        self.indices.len()
    }
}

/// Uniform sample of `b` distinct indices out of `dataset.len()`.
pub fn sample_batch(dataset: &Dataset, b: usize, rng: &mut Rng) -> Result<Batch> {
    sample_indices(dataset.len(), b, rng)
}

pub(crate) fn sample_indices(n: usize, b: usize, rng: &mut Rng) -> Result<Batch> {
    if b == 0 || b > n {
        return Err(Error::BatchSize {
            requested: b,
            available: n,
        });
    }
    Ok(Batch {
        indices: index::sample(rng, n, b).into_vec(),
    })
}
