//! Variational training by mini-batch SGD.
//!
//! Objective per step: mean cross-entropy of one sampled forward pass over
//! the batch plus `kl_weight * sum(KL) / dataset_size`.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use super::layer::{LayerGrads, SampleNoise};
use super::model::{draw_signs, NoiseMode, StochasticModel};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::softmax_f64;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier on the KL term (beta).
    pub kl_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.05,
            kl_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(
                "learning_rate must be positive".into(),
            ));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::InvalidParameter(
                "kl_weight must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean objective per epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean-weight accuracy on the training set after the last epoch.
    pub train_accuracy: f64,
}

#[derive(Debug, Clone)]
struct LayerDraw {
    eps: Vec<f64>,
    in_sign: Vec<f64>,
    out_sign: Vec<f64>,
    per_sample: bool,
}

/// Weight noise for one batch: raw standard-normal draws plus sign vectors.
/// Scaling by the layer standard deviation happens at evaluation time, so the
/// same draw can be replayed against perturbed parameters.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    layers: Vec<LayerDraw>,
    batch: usize,
}

impl NoiseDraw {
    pub fn sample(model: &StochasticModel, batch: usize, rng: &mut Rng) -> Self {
        let layers = model
            .layers()
            .iter()
            .map(|layer| match model.noise_mode() {
                NoiseMode::Flipout => {
                    let mut eps = Vec::with_capacity(layer.weight_count());
                    layer.draw_eps(rng, &mut eps);
                    let mut in_sign = Vec::new();
                    let mut out_sign = Vec::new();
                    let mut buf = Vec::new();
                    for _ in 0..batch {
                        draw_signs(rng, layer.inputs(), &mut buf);
                        in_sign.extend_from_slice(&buf);
                        draw_signs(rng, layer.outputs(), &mut buf);
                        out_sign.extend_from_slice(&buf);
                    }
                    LayerDraw {
                        eps,
                        in_sign,
                        out_sign,
                        per_sample: false,
                    }
                }
                NoiseMode::Independent => LayerDraw {
                    eps: (0..batch * layer.weight_count())
                        .map(|_| StandardNormal.sample(rng))
                        .collect(),
                    in_sign: Vec::new(),
                    out_sign: Vec::new(),
                    per_sample: true,
                },
            })
            .collect();
        Self { layers, batch }
    }

    fn view(&self, layer: usize, sample: usize, inputs: usize, outputs: usize) -> SampleNoise<'_> {
        let d = &self.layers[layer];
        if d.per_sample {
            let w = inputs * outputs;
            SampleNoise {
                eps: &d.eps[sample * w..(sample + 1) * w],
                in_sign: None,
                out_sign: None,
            }
        } else {
            SampleNoise {
                eps: &d.eps,
                in_sign: Some(&d.in_sign[sample * inputs..(sample + 1) * inputs]),
                out_sign: Some(&d.out_sign[sample * outputs..(sample + 1) * outputs]),
            }
        }
    }
}

/// Per-layer parameter gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

impl Gradients {
    /// All gradients in parameter order: per layer mean, log-std, bias.
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|g| {
                g.weight_mean
                    .iter()
                    .chain(&g.weight_log_std)
                    .chain(&g.bias)
                    .copied()
            })
            .collect()
    }
}

/// Objective value and its gradient for one batch under a fixed noise draw
/// (`None` evaluates the mean-weight network).
pub fn objective(
    model: &StochasticModel,
    batch: &[(&[f32], usize)],
    noise: Option<&NoiseDraw>,
    kl_scale: f64,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(n) = noise {
        if n.batch != batch.len() || n.layers.len() != model.layers().len() {
            return Err(Error::ShapeMismatch {
                expected: format!("noise for {} samples", batch.len()),
                got: format!("noise for {} samples", n.batch),
            });
        }
    }
    let classes = model.num_classes();
    let layers = model.layers();
    let mut grads = Gradients {
        layers: layers.iter().map(LayerGrads::zeros).collect(),
    };
    let inv_batch = 1.0 / batch.len() as f64;
    let mut loss = 0.0;

    for (b, &(x, label)) in batch.iter().enumerate() {
        model.check_input(x.len())?;
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let view = |l: usize| noise.map(|n| n.view(l, b, layers[l].inputs(), layers[l].outputs()));

        // Forward, caching each layer's input and pre-activation.
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
        let mut pres: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
        let mut h: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
        for (l, layer) in layers.iter().enumerate() {
            let pre = layer.pre_activation(&h, view(l));
            let act = layer.activation();
            let next = pre.iter().map(|&v| act.apply(v)).collect();
            inputs.push(std::mem::replace(&mut h, next));
            pres.push(pre);
        }

        let max = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + h.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        loss += (lse - h[label]) * inv_batch;

        let mut grad: Vec<f64> = softmax_f64(&h);
        grad[label] -= 1.0;
        for g in &mut grad {
            *g *= inv_batch;
        }
        for l in (0..layers.len()).rev() {
            let act = layers[l].activation();
            let grad_pre: Vec<f64> = grad
                .iter()
                .zip(&pres[l])
                .map(|(g, &p)| g * act.derivative(p))
                .collect();
            grad = layers[l].backward(&inputs[l], &grad_pre, view(l), &mut grads.layers[l]);
        }
    }

    if kl_scale != 0.0 {
        for (layer, g) in layers.iter().zip(&mut grads.layers) {
            loss += kl_scale * super::layer::kl_to_prior(layer);
            layer.add_kl_grad(kl_scale, g);
        }
    }
    Ok((loss, grads))
}

/// Mean-weight accuracy of `model` over `data`.
pub fn accuracy(model: &StochasticModel, data: &Dataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let correct = data
        .items()
        .iter()
        .filter(|item| {
            let logits = model.logits_with(item.image.pixels(), None);
            argmax(&logits) == usize::from(item.label)
        })
        .count();
    correct as f64 / data.len() as f64
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Trains `model` on `data`. Deterministic for a given `config.seed`.
pub fn train(
    mut model: StochasticModel,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(StochasticModel, TrainReport)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = model.num_classes();
    for item in data.items() {
        model.check_input(item.image.pixels().len())?;
        if usize::from(item.label) >= classes {
            return Err(Error::LabelOutOfRange {
                label: usize::from(item.label),
                classes,
            });
        }
    }

    let mut rng = rng::seeded(config.seed);
    let kl_scale = config.kl_weight / data.len() as f64;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&[f32], usize)> = chunk
                .iter()
                .map(|&i| {
                    let item = &data.items()[i];
                    (item.image.pixels(), usize::from(item.label))
                })
                .collect();
            let noise = NoiseDraw::sample(&model, batch.len(), &mut rng);
            let (loss, grads) = objective(&model, &batch, Some(&noise), kl_scale)?;
            for (layer, g) in model.layers_mut().iter_mut().zip(&grads.layers) {
                layer.apply_update(g, config.learning_rate);
            }
            total += loss;
            steps += 1;
        }
        epoch_losses.push(total / steps as f64);
    }

    let train_accuracy = accuracy(&model, data);
    Ok((
        model,
        TrainReport {
            epoch_losses,
            train_accuracy,
        },
    ))
}
