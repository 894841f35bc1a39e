//! A small dense network with softmax cross-entropy, trained by mini-batch SGD.
//!
//! Weights live in [`ModelWeights`]: for every dense layer a `[out, in]`
//! row-major matrix followed by an `[out]` bias vector.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{GradientUpdate, Layer, LayerShape, ModelWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

/// Layer sizes `[d, h_1, …, C]` and the hidden nonlinearity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkArchitecture {
    sizes: Vec<usize>,
    activation: Activation,
}

impl NetworkArchitecture {
    pub fn new(sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if sizes.len() < 3 {
            return Err(Error::usage(format!(
                "architecture needs input, at least one hidden layer and output, got {sizes:?}"
            )));
        }
        if sizes.contains(&0) {
            return Err(Error::usage(format!("layer sizes must be positive, got {sizes:?}")));
        }
        if *sizes.last().expect("nonempty") < 2 {
            return Err(Error::usage("output layer needs at least 2 classes"));
        }
        Ok(Self { sizes, activation })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.sizes.last().expect("nonempty")
    }

    fn dense_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn check_model(&self, model: &ModelWeights) -> Result<()> {
        if model.num_layers() != 2 * self.dense_layers() {
            return Err(Error::structural(format!(
                "model has {} layers, architecture expects {}",
                model.num_layers(),
                2 * self.dense_layers()
            )));
        }
        for k in 0..self.dense_layers() {
            let (inp, out) = (self.sizes[k], self.sizes[k + 1]);
            if model.layer(2 * k).shape().dims() != [out, inp]
                || model.layer(2 * k + 1).shape().dims() != [out]
            {
                return Err(Error::structural(format!(
                    "dense layer {k} does not match {inp} -> {out}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            out.push("batch_size must be >= 1".to_string());
        }
        if self.epochs == 0 {
            out.push("epochs must be >= 1".to_string());
        }
        out
    }
}

/// Uniform `±1/√fan_in` weights, zero biases.
pub fn init_model(arch: &NetworkArchitecture, seed: u64) -> ModelWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(2 * arch.dense_layers());
    for k in 0..arch.dense_layers() {
        let (inp, out) = (arch.sizes[k], arch.sizes[k + 1]);
        let scale = 1.0 / (inp as f64).sqrt();
        let w = (0..inp * out)
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        let shape = LayerShape::new(vec![out, inp]).expect("positive sizes");
        layers.push(Layer::new(shape, w).expect("matching size"));
        layers.push(Layer::vector(vec![0.0; out]).expect("positive size"));
    }
    ModelWeights::new(layers)
}

/// Activations of every dense layer; the last entry holds softmax probabilities.
fn forward_all(model: &ModelWeights, arch: &NetworkArchitecture, x: &[f64]) -> Vec<Vec<f64>> {
    let dense = arch.dense_layers();
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(dense + 1);
    acts.push(x.to_vec());
    for k in 0..dense {
        let (inp, out) = (arch.sizes[k], arch.sizes[k + 1]);
        let w = model.layer(2 * k).values();
        let b = model.layer(2 * k + 1).values();
        let prev = &acts[k];
        let mut z: Vec<f64> = (0..out)
            .map(|o| {
                let row = &w[o * inp..(o + 1) * inp];
                b[o] + row.iter().zip(prev).map(|(a, c)| a * c).sum::<f64>()
            })
            .collect();
        if k + 1 < dense {
            z.iter_mut().for_each(|v| *v = arch.activation.apply(*v));
        } else {
            softmax_in_place(&mut z);
        }
        acts.push(z);
    }
    acts
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

/// Class probabilities for one feature vector.
pub fn forward(model: &ModelWeights, arch: &NetworkArchitecture, features: &[f64]) -> Result<Vec<f64>> {
    arch.check_model(model)?;
    if features.len() != arch.input_dim() {
        return Err(Error::structural(format!(
            "input has {} features, network expects {}",
            features.len(),
            arch.input_dim()
        )));
    }
    Ok(forward_all(model, arch, features).pop().expect("output layer"))
}

/// Index of the largest probability, lowest index on ties.
fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

pub fn predict(model: &ModelWeights, arch: &NetworkArchitecture, features: &[f64]) -> Result<usize> {
    forward(model, arch, features).map(|p| argmax(&p))
}

/// Mean cross-entropy over `indices` and its gradient with respect to every weight.
pub fn loss_and_gradient(
    model: &ModelWeights,
    arch: &NetworkArchitecture,
    data: &LabeledDataset,
    indices: &[usize],
) -> Result<(f64, GradientUpdate)> {
    arch.check_model(model)?;
    if data.dim() != arch.input_dim() {
        return Err(Error::structural(format!(
            "data has {} features, network expects {}",
            data.dim(),
            arch.input_dim()
        )));
    }
    if indices.is_empty() {
        return Err(Error::usage("gradient over an empty batch"));
    }
    let dense = arch.dense_layers();
    let mut grads: Vec<Vec<f64>> = model.layers().iter().map(|l| vec![0.0; l.len()]).collect();
    let mut loss = 0.0;
    for &i in indices {
        let acts = forward_all(model, arch, data.row(i));
        let label = data.label(i);
        let probs = &acts[dense];
        loss -= probs[label].max(f64::MIN_POSITIVE).ln();
        // dL/dz for the output layer
        let mut delta: Vec<f64> = probs.clone();
        delta[label] -= 1.0;
        for k in (0..dense).rev() {
            let (inp, out) = (arch.sizes[k], arch.sizes[k + 1]);
            let prev = &acts[k];
            let gw = &mut grads[2 * k];
            for o in 0..out {
                let row = &mut gw[o * inp..(o + 1) * inp];
                for (g, a) in row.iter_mut().zip(prev) {
                    *g += delta[o] * a;
                }
            }
            for (g, d) in grads[2 * k + 1].iter_mut().zip(&delta) {
                *g += d;
            }
            if k > 0 {
                let w = model.layer(2 * k).values();
                delta = (0..inp)
                    .map(|j| {
                        let back: f64 = (0..out).map(|o| w[o * inp + j] * delta[o]).sum();
                        back * arch.activation.derivative_from_output(prev[j])
                    })
                    .collect();
            }
        }
    }
    let scale = 1.0 / indices.len() as f64;
    for g in grads.iter_mut().flatten() {
        *g *= scale;
    }
    Ok((loss * scale, GradientUpdate::new(grads)))
}

fn sgd_step(model: &mut ModelWeights, grad: &GradientUpdate, lr: f64) {
    for (layer, g) in model.layers_mut().iter_mut().zip(grad.layers()) {
        for (w, d) in layer.values_mut().iter_mut().zip(g) {
            *w -= lr * d;
        }
    }
}

/// `cfg.epochs` passes of shuffled mini-batch SGD starting from `model`.
pub fn train_local(
    model: &ModelWeights,
    arch: &NetworkArchitecture,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<ModelWeights> {
    if data.is_empty() {
        return Err(Error::usage("local training on an empty dataset"));
    }
    if let Some(v) = cfg.violations().into_iter().next() {
        return Err(Error::Usage(v));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = model.clone();
    let batch = cfg.batch_size.min(data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let (_, grad) = loss_and_gradient(&out, arch, data, chunk)?;
            sgd_step(&mut out, &grad, cfg.learning_rate);
        }
    }
    Ok(out)
}

/// Overall accuracy plus per-class accuracy (`None` for classes absent from the data).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub per_class: Vec<Option<f64>>,
}

/// Predicted class for every sample.
pub fn predict_all(
    model: &ModelWeights,
    arch: &NetworkArchitecture,
    data: &LabeledDataset,
) -> Result<Vec<usize>> {
    arch.check_model(model)?;
    if data.dim() != arch.input_dim() {
        return Err(Error::structural(format!(
            "data has {} features, network expects {}",
            data.dim(),
            arch.input_dim()
        )));
    }
    Ok((0..data.len())
        .map(|i| argmax(&forward_all(model, arch, data.row(i))[arch.dense_layers()]))
        .collect())
}

pub fn evaluate(
    model: &ModelWeights,
    arch: &NetworkArchitecture,
    data: &LabeledDataset,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::usage("evaluation on an empty dataset"));
    }
    let predictions = predict_all(model, arch, data)?;
    let classes = data.classes();
    let mut correct = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (&p, &y) in predictions.iter().zip(data.labels()) {
        total[y] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    let hits: usize = correct.iter().sum();
    Ok(Evaluation {
        accuracy: hits as f64 / data.len() as f64,
        per_class: correct
            .iter()
            .zip(&total)
            .map(|(&c, &t)| (t > 0).then(|| c as f64 / t as f64))
            .collect(),
    })
}
