use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::param::ParamVector;
use crate::rng::seeded;

/// Layer widths from input to output, e.g. `[2, 16, 3]`. Hidden layers use
/// tanh; the output layer feeds a softmax cross-entropy loss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    /// Start of this layer's weights; biases follow the `fan_out x fan_in` block.
    offset: usize,
}

impl Layer {
    fn bias_offset(&self) -> usize {
        self.offset + self.fan_in * self.fan_out
    }
}

/// Multi-layer perceptron classifier bound to a training set.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Layer>,
    num_params: usize,
    data: Arc<Dataset>,
}

impl Mlp {
    pub fn new(spec: &MlpSpec, data: Arc<Dataset>) -> Result<Mlp> {
        let sizes = &spec.layer_sizes;
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!("invalid mlp layer sizes {sizes:?}")));
        }
        if sizes[0] != data.feature_dim() {
            return Err(Error::Config(format!(
                "mlp input width {} does not match feature dimension {}",
                sizes[0],
                data.feature_dim()
            )));
        }
        let classes = *sizes.last().unwrap();
        if classes < 2 {
            return Err(Error::Config("mlp needs at least two output classes".into()));
        }
        if data.num_classes() > classes {
            return Err(Error::Data(format!(
                "label {} out of range for {classes} classes",
                data.num_classes() - 1
            )));
        }
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        let mut offset = 0;
        for w in sizes.windows(2) {
            layers.push(Layer {
                fan_in: w[0],
                fan_out: w[1],
                offset,
            });
            offset += (w[0] + 1) * w[1];
        }
        Ok(Mlp {
            layers,
            num_params: offset,
            data,
        })
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().unwrap().fan_out
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    /// Same architecture bound to a different dataset.
    pub fn with_data(&self, data: Arc<Dataset>) -> Result<Mlp> {
        let mut sizes: Vec<usize> = self.layers.iter().map(|l| l.fan_in).collect();
        sizes.push(self.num_classes());
        Mlp::new(&MlpSpec { layer_sizes: sizes }, data)
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(&self, seed: u64) -> ParamVector {
        let mut rng = seeded(seed);
        let mut theta = vec![0.0; self.num_params];
        for l in &self.layers {
            let limit = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
            for w in &mut theta[l.offset..l.bias_offset()] {
                *w = rng.random_range(-limit..=limit);
            }
        }
        ParamVector::new(theta)
    }

    /// Forward pass storing every layer's activations; the last entry holds logits.
    fn forward(&self, theta: &[f64], x: &[f64], acts: &mut Vec<Vec<f64>>) {
        acts.clear();
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            let input = &acts[li];
            let w = &theta[l.offset..l.bias_offset()];
            let b = &theta[l.bias_offset()..l.bias_offset() + l.fan_out];
            let mut z: Vec<f64> = (0..l.fan_out)
                .map(|o| {
                    let row = &w[o * l.fan_in..(o + 1) * l.fan_in];
                    b[o] + row.iter().zip(input).map(|(a, c)| a * c).sum::<f64>()
                })
                .collect();
            if li < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(z);
        }
    }

    pub fn logits(&self, theta: &ParamVector, x: &[f64]) -> Vec<f64> {
        let mut acts = Vec::new();
        self.forward(theta.as_slice(), x, &mut acts);
        acts.pop().unwrap()
    }

    pub fn predict(&self, theta: &ParamVector, x: &[f64]) -> usize {
        argmax(&self.logits(theta, x))
    }

    /// Fraction of samples in `data` classified correctly.
    pub fn accuracy(&self, theta: &ParamVector, data: &Dataset) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let correct = (0..data.len())
            .filter(|&i| self.predict(theta, data.input(i)) == data.label(i))
            .count();
        correct as f64 / data.len() as f64
    }

    fn indices<'a>(&self, batch: Option<&'a Batch>) -> Result<std::borrow::Cow<'a, [usize]>> {
        match batch {
            Some(b) => {
                if let Some(&bad) = b.indices().iter().find(|&&i| i >= self.data.len()) {
                    return Err(Error::Data(format!(
                        "batch index {bad} out of range for {} samples",
                        self.data.len()
                    )));
                }
                Ok(std::borrow::Cow::Borrowed(b.indices()))
            }
            None => Ok(std::borrow::Cow::Owned((0..self.data.len()).collect())),
        }
    }

    pub(crate) fn loss(&self, theta: &[f64], batch: Option<&Batch>) -> Result<f64> {
        let idx = self.indices(batch)?;
        let mut acts = Vec::new();
        let mut total = 0.0;
        for &i in idx.iter() {
            self.forward(theta, self.data.input(i), &mut acts);
            total += cross_entropy(acts.last().unwrap(), self.data.label(i)).0;
        }
        Ok(total / idx.len() as f64)
    }

    /// Batch-mean cross-entropy and its exact reverse-mode gradient.
    pub(crate) fn loss_grad(&self, theta: &[f64], batch: Option<&Batch>) -> Result<(f64, Vec<f64>)> {
        let idx = self.indices(batch)?;
        let mut grad = vec![0.0; self.num_params];
        let mut acts = Vec::new();
        let mut total = 0.0;
        for &i in idx.iter() {
            self.forward(theta, self.data.input(i), &mut acts);
            let (loss, mut delta) = cross_entropy(acts.last().unwrap(), self.data.label(i));
            total += loss;
            for (li, l) in self.layers.iter().enumerate().rev() {
                let input = &acts[li];
                let (gw, rest) = grad[l.offset..].split_at_mut(l.fan_in * l.fan_out);
                for o in 0..l.fan_out {
                    let d = delta[o];
                    rest[o] += d;
                    for (g, a) in gw[o * l.fan_in..(o + 1) * l.fan_in].iter_mut().zip(input) {
                        *g += d * a;
                    }
                }
                if li > 0 {
                    let w = &theta[l.offset..l.bias_offset()];
                    let mut prev = vec![0.0; l.fan_in];
                    for o in 0..l.fan_out {
                        let d = delta[o];
                        for (p, wv) in prev.iter_mut().zip(&w[o * l.fan_in..(o + 1) * l.fan_in]) {
                            *p += wv * d;
                        }
                    }
                    // input is tanh output of the previous layer
                    for (p, a) in prev.iter_mut().zip(input) {
                        *p *= 1.0 - a * a;
                    }
                    delta = prev;
                }
            }
        }
        let scale = 1.0 / idx.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok((total * scale, grad))
    }
}

/// Softmax cross-entropy and its gradient with respect to the logits.
fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
