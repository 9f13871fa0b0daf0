use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Lower clamp for `weight_log_std`. At this value the weight noise is
/// below `1e-13` and sampling is numerically indistinguishable from the
/// mean-weight path.
pub const LOG_STD_FLOOR: f32 = -30.0;
/// Upper clamp for `weight_log_std`.
pub const LOG_STD_CEIL: f32 = 2.0;
/// Initial `weight_log_std` for fresh layers.
pub const LOG_STD_INIT: f32 = -5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Relu),
            t => Err(Error::Format(format!("unknown activation tag {t}"))),
        }
    }

    #[inline]
    pub(crate) fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
        }
    }

    #[inline]
    pub(crate) fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Dense layer whose weights are independent Gaussians
/// `N(weight_mean, exp(weight_log_std)^2)`. Biases are deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticLayer {
    weight_mean: Tensor,
    weight_log_std: Tensor,
    bias: Tensor,
    activation: Activation,
    // exp(weight_log_std), kept in sync with weight_log_std.
    std: Vec<f64>,
}

/// One draw of the weight perturbation for a single sample.
///
/// The effective weight is `mean + out_sign[o] * in_sign[i] * std[o,i] * eps[o,i]`;
/// missing sign vectors stand for all-ones.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SampleNoise<'a> {
    pub eps: &'a [f64],
    pub in_sign: Option<&'a [f64]>,
    pub out_sign: Option<&'a [f64]>,
}

/// Gradient buffers shaped like one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight_mean: Vec<f64>,
    pub weight_log_std: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrads {
    pub(crate) fn zeros(layer: &StochasticLayer) -> Self {
        Self {
            weight_mean: vec![0.0; layer.weight_count()],
            weight_log_std: vec![0.0; layer.weight_count()],
            bias: vec![0.0; layer.outputs()],
        }
    }
}

impl StochasticLayer {
    /// Builds a layer from explicit parameters. `weight_mean` and
    /// `weight_log_std` must be `outputs x inputs`; log-std values are
    /// clamped into `[LOG_STD_FLOOR, LOG_STD_CEIL]`.
    pub fn new(
        weight_mean: Tensor,
        mut weight_log_std: Tensor,
        bias: Tensor,
        activation: Activation,
    ) -> Result<Self> {
        if weight_mean.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                expected: "2-d weight".into(),
                got: format!("{:?}", weight_mean.shape()),
            });
        }
        if weight_log_std.shape() != weight_mean.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", weight_mean.shape()),
                got: format!("{:?}", weight_log_std.shape()),
            });
        }
        if bias.shape() != [weight_mean.shape()[0]] {
            return Err(Error::ShapeMismatch {
                expected: format!("[{}]", weight_mean.shape()[0]),
                got: format!("{:?}", bias.shape()),
            });
        }
        for v in weight_log_std.data_mut() {
            *v = v.clamp(LOG_STD_FLOOR, LOG_STD_CEIL);
        }
        let std = weight_log_std
            .data()
            .iter()
            .map(|&r| f64::from(r).exp())
            .collect();
        Ok(Self {
            weight_mean,
            weight_log_std,
            bias,
            activation,
            std,
        })
    }

    /// He-uniform means, constant `LOG_STD_INIT` log-std, zero bias.
    pub fn init(inputs: usize, outputs: usize, activation: Activation, rng: &mut Rng) -> Self {
        let bound = (6.0 / inputs as f64).sqrt();
        let means = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..bound) as f32)
            .collect();
        Self::new(
            Tensor::new(vec![outputs, inputs], means).expect("finite init"),
            Tensor::filled(vec![outputs, inputs], LOG_STD_INIT).expect("finite init"),
            Tensor::filled(vec![outputs], 0.0).expect("finite init"),
            activation,
        )
        .expect("consistent shapes")
    }

    pub fn inputs(&self) -> usize {
        self.weight_mean.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight_mean.shape()[0]
    }

    pub fn weight_count(&self) -> usize {
        self.weight_mean.len()
    }

    pub fn weight_mean(&self) -> &Tensor {
        &self.weight_mean
    }

    pub fn weight_log_std(&self) -> &Tensor {
        &self.weight_log_std
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Sets every log-std entry (clamped).
    pub fn set_log_std(&mut self, value: f32) {
        for v in self.weight_log_std.data_mut() {
            *v = value;
        }
        self.refresh();
    }

    /// Mutable views of (weight_mean, weight_log_std, bias). Call
    /// [`StochasticLayer::refresh`] after editing log-std values.
    pub fn params_mut(&mut self) -> [&mut [f32]; 3] {
        [
            self.weight_mean.data_mut(),
            self.weight_log_std.data_mut(),
            self.bias.data_mut(),
        ]
    }

    /// Re-clamps log-std values and recomputes the cached standard deviations.
    pub fn refresh(&mut self) {
        for (v, s) in self
            .weight_log_std
            .data_mut()
            .iter_mut()
            .zip(self.std.iter_mut())
        {
            *v = v.clamp(LOG_STD_FLOOR, LOG_STD_CEIL);
            *s = f64::from(*v).exp();
        }
    }

    pub(crate) fn draw_eps(&self, rng: &mut Rng, out: &mut Vec<f64>) {
        out.extend(
            (0..self.weight_count())
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)),
        );
    }

    /// Pre-activation `W x + b` with the (optionally) perturbed weights.
    pub(crate) fn pre_activation(&self, x: &[f64], noise: Option<SampleNoise<'_>>) -> Vec<f64> {
        let inputs = self.inputs();
        let mean = self.weight_mean.data();
        let bias = self.bias.data();
        let mut out = Vec::with_capacity(self.outputs());
        match noise {
            None => {
                for (o, b) in bias.iter().enumerate() {
                    let row = &mean[o * inputs..(o + 1) * inputs];
                    let acc: f64 = row.iter().zip(x).map(|(&w, &xi)| f64::from(w) * xi).sum();
                    out.push(acc + f64::from(*b));
                }
            }
            Some(noise) => {
                let xs: Vec<f64> = match noise.in_sign {
                    Some(s) => x.iter().zip(s).map(|(a, b)| a * b).collect(),
                    None => x.to_vec(),
                };
                for (o, b) in bias.iter().enumerate() {
                    let span = o * inputs..(o + 1) * inputs;
                    let row = &mean[span.clone()];
                    let base: f64 = row.iter().zip(x).map(|(&w, &xi)| f64::from(w) * xi).sum();
                    let pert: f64 = self.std[span.clone()]
                        .iter()
                        .zip(&noise.eps[span])
                        .zip(&xs)
                        .map(|((s, e), xi)| s * e * xi)
                        .sum();
                    let sign = noise.out_sign.map_or(1.0, |s| s[o]);
                    out.push(base + sign * pert + f64::from(*b));
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients for one sample given `grad_pre`
    /// (dL/d pre-activation) and returns dL/dx.
    pub(crate) fn backward(
        &self,
        x: &[f64],
        grad_pre: &[f64],
        noise: Option<SampleNoise<'_>>,
        grads: &mut LayerGrads,
    ) -> Vec<f64> {
        let inputs = self.inputs();
        let mean = self.weight_mean.data();
        let mut dx = vec![0.0; inputs];
        let xs: Option<Vec<f64>> = noise.map(|n| match n.in_sign {
            Some(s) => x.iter().zip(s).map(|(a, b)| a * b).collect(),
            None => x.to_vec(),
        });
        for (o, &g) in grad_pre.iter().enumerate() {
            grads.bias[o] += g;
            if g == 0.0 {
                continue;
            }
            let span = o * inputs..(o + 1) * inputs;
            for ((gw, &xi), (d, &w)) in grads.weight_mean[span.clone()]
                .iter_mut()
                .zip(x)
                .zip(dx.iter_mut().zip(&mean[span.clone()]))
            {
                *gw += g * xi;
                *d += g * f64::from(w);
            }
            if let (Some(noise), Some(xs)) = (noise, xs.as_ref()) {
                let gs = g * noise.out_sign.map_or(1.0, |s| s[o]);
                let std = &self.std[span.clone()];
                let eps = &noise.eps[span.clone()];
                for i in 0..inputs {
                    let pert = std[i] * eps[i];
                    grads.weight_log_std[o * inputs + i] += gs * pert * xs[i];
                    let in_s = noise.in_sign.map_or(1.0, |s| s[i]);
                    dx[i] += gs * pert * in_s;
                }
            }
        }
        dx
    }

    /// KL gradient w.r.t. (weight_mean, weight_log_std), scaled and added.
    pub(crate) fn add_kl_grad(&self, scale: f64, grads: &mut LayerGrads) {
        for ((gm, &m), (gr, &s)) in grads
            .weight_mean
            .iter_mut()
            .zip(self.weight_mean.data())
            .zip(grads.weight_log_std.iter_mut().zip(&self.std))
        {
            *gm += scale * f64::from(m);
            *gr += scale * (s * s - 1.0);
        }
    }

    pub(crate) fn apply_update(&mut self, grads: &LayerGrads, learning_rate: f64) {
        let [mean, log_std, bias] = self.params_mut();
        for (p, g) in mean.iter_mut().zip(&grads.weight_mean) {
            *p = (f64::from(*p) - learning_rate * g) as f32;
        }
        for (p, g) in log_std.iter_mut().zip(&grads.weight_log_std) {
            *p = (f64::from(*p) - learning_rate * g) as f32;
        }
        for (p, g) in bias.iter_mut().zip(&grads.bias) {
            *p = (f64::from(*p) - learning_rate * g) as f32;
        }
        self.refresh();
    }
}

/// Closed-form KL divergence from the factorized Gaussian weight posterior
/// to a standard-normal prior, summed over all weights (biases excluded).
pub fn kl_to_prior(layer: &StochasticLayer) -> f64 {
    layer
        .weight_mean
        .data()
        .iter()
        .zip(layer.weight_log_std.data())
        .map(|(&m, &r)| {
            let m = f64::from(m);
            let r = f64::from(r);
            0.5 * (m * m + (2.0 * r).exp() - 1.0 - 2.0 * r)
        })
        .sum()
}
