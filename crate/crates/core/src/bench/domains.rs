use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    /// Domain `j` is rotated by `j * shift` degrees in the plane of the first two features.
    Rotation,
    /// Domain `j` is translated by `j * shift` along the first feature axis.
    Translation,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSpec {
    pub name: String,
    pub n_domains: usize,
    pub per_domain_n: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub transform: TransformKind,
    /// Degrees per domain for rotations, distance per domain for translations.
    pub shift: f64,
    /// Standard deviation of each class cluster.
    pub noise: f64,
    /// Distance of the class means from the origin.
    pub separation: f64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        DomainSpec {
            name: "rotated-gaussians".into(),
            n_domains: 3,
            per_domain_n: 200,
            num_classes: 3,
            feature_dim: 2,
            transform: TransformKind::Rotation,
            shift: 30.0,
            noise: 0.6,
            separation: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainTransform {
    pub rotation_deg: f64,
    pub translation: Vec<f64>,
    pub noise: f64,
}

impl DomainTransform {
    fn apply(&self, x: &mut [f64]) {
        if self.rotation_deg != 0.0 {
            let (s, c) = self.rotation_deg.to_radians().sin_cos();
            let (a, b) = (x[0], x[1]);
            x[0] = c * a - s * b;
            x[1] = s * a + c * b;
        }
        for (xi, t) in x.iter_mut().zip(&self.translation) {
            *xi += t;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiDomainDataset {
    pub name: String,
    pub domains: Vec<Dataset>,
    pub domain_params: Vec<DomainTransform>,
    pub num_classes: usize,
}

impl MultiDomainDataset {
    pub fn feature_dim(&self) -> usize {
        self.domains[0].feature_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.len() < 3 {
            return Err(Error::Config(format!(
                "leave-one-out needs at least 3 domains, got {}",
                self.domains.len()
            )));
        }
        let fd = self.feature_dim();
        for (j, d) in self.domains.iter().enumerate() {
            if d.feature_dim() != fd {
                return Err(Error::Data(format!("domain {j} has a different feature dimension")));
            }
            if d.num_classes() > self.num_classes {
                return Err(Error::Data(format!("domain {j} has labels beyond {} classes", self.num_classes)));
            }
        }
        Ok(())
    }
}

/// Draw class-conditional Gaussians in a shared canonical frame, then move
/// each domain's inputs by its own transform. Labels are the generating
/// class, fixed before the transform, so `P(Y | canonical X)` is identical
/// across domains and only the input distribution shifts.
pub fn generate_domains(spec: &DomainSpec, seed: u64) -> Result<MultiDomainDataset> {
    if spec.n_domains < 3 {
        return Err(Error::Config(format!("need at least 3 domains, got {}", spec.n_domains)));
    }
    if spec.num_classes < 2 {
        return Err(Error::Config("need at least 2 classes".into()));
    }
    if spec.per_domain_n < 10 * spec.num_classes {
        return Err(Error::Config(format!(
            "per_domain_n must be at least 10 * num_classes = {}",
            10 * spec.num_classes
        )));
    }
    let min_dim = if spec.transform == TransformKind::Rotation { 2 } else { 1 };
    if spec.feature_dim < min_dim {
        return Err(Error::Config(format!("feature_dim must be at least {min_dim}")));
    }
    if !(spec.noise > 0.0 && spec.noise.is_finite() && spec.separation.is_finite() && spec.shift.is_finite()) {
        return Err(Error::Config("noise must be positive; shift and separation finite".into()));
    }

    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|k| {
            let mut m = vec![0.0; spec.feature_dim];
            if spec.feature_dim == 1 {
                m[0] = spec.separation * (2.0 * k as f64 / (spec.num_classes - 1) as f64 - 1.0);
            } else {
                let a = 2.0 * std::f64::consts::PI * k as f64 / spec.num_classes as f64;
                m[0] = spec.separation * a.cos();
                m[1] = spec.separation * a.sin();
            }
            m
        })
        .collect();
    let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;

    let mut domains = Vec::with_capacity(spec.n_domains);
    let mut params = Vec::with_capacity(spec.n_domains);
    for j in 0..spec.n_domains {
        let transform = match spec.transform {
            TransformKind::Rotation => DomainTransform {
                rotation_deg: j as f64 * spec.shift,
                translation: vec![0.0; spec.feature_dim],
                noise: spec.noise,
            },
            TransformKind::Translation => {
                let mut t = vec![0.0; spec.feature_dim];
                t[0] = j as f64 * spec.shift;
                DomainTransform {
                    rotation_deg: 0.0,
                    translation: t,
                    noise: spec.noise,
                }
            }
            TransformKind::Identity => DomainTransform {
                rotation_deg: 0.0,
                translation: vec![0.0; spec.feature_dim],
                noise: spec.noise,
            },
        };
        let mut rng = rng::derived(seed, &[0xd0, j as u64]);
        let mut inputs = Vec::with_capacity(spec.per_domain_n);
        let mut labels = Vec::with_capacity(spec.per_domain_n);
        for i in 0..spec.per_domain_n {
            let label = i % spec.num_classes;
            let mut x: Vec<f64> = means[label].iter().map(|m| m + normal.sample(&mut rng)).collect();
            transform.apply(&mut x);
            inputs.push(x);
            labels.push(label);
        }
        domains.push(Dataset::new(inputs, labels, Some(vec![j; spec.per_domain_n]))?);
        params.push(transform);
    }
    Ok(MultiDomainDataset {
        name: spec.name.clone(),
        domains,
        domain_params: params,
        num_classes: spec.num_classes,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_domains: Vec<usize>,
    pub test_domain: usize,
}

/// One split per domain: that domain is held out in full and the rest are pooled.
pub fn leave_one_out_splits(md: &MultiDomainDataset) -> Vec<Split> {
    let n = md.domains.len();
    (0..n)
        .map(|test| Split {
            train_domains: (0..n).filter(|&j| j != test).collect(),
            test_domain: test,
        })
        .collect()
}
