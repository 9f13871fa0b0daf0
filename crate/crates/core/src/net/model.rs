use rand::Rng as _;
use rayon::prelude::*;

use super::layer::{Activation, SampleNoise, StochasticLayer};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::selective::{ScoreMatrix, ScoreSpace};
use crate::tensor::{softmax_f64, Tensor};

/// How weight noise is decorrelated across the samples of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    /// One shared Gaussian draw per batch, decorrelated per sample with
    /// random rank-1 sign flips.
    Flipout,
    /// A fresh Gaussian draw for every sample.
    Independent,
}

impl NoiseMode {
    pub fn flag(self) -> u8 {
        match self {
            NoiseMode::Flipout => 1,
            NoiseMode::Independent => 0,
        }
    }

    pub fn from_flag(flag: u8) -> Result<Self> {
        match flag {
            1 => Ok(NoiseMode::Flipout),
            0 => Ok(NoiseMode::Independent),
            f => Err(Error::Format(format!("unknown noise-mode flag {f}"))),
        }
    }
}

/// Feed-forward classifier made of [`StochasticLayer`]s.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticModel {
    layers: Vec<StochasticLayer>,
    noise_mode: NoiseMode,
}

impl StochasticModel {
    pub fn new(layers: Vec<StochasticLayer>, noise_mode: NoiseMode) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::InvalidParameter(
                "model needs at least one layer".into(),
            ));
        };
        if last.outputs() < 2 {
            return Err(Error::InvalidParameter(
                "model needs at least two classes".into(),
            ));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} inputs", pair[0].outputs()),
                    got: format!("{} inputs", pair[1].inputs()),
                });
            }
        }
        Ok(Self { layers, noise_mode })
    }

    /// ReLU multilayer perceptron with an identity output layer.
    pub fn mlp(
        inputs: usize,
        hidden: &[usize],
        classes: usize,
        noise_mode: NoiseMode,
        seed: u64,
    ) -> Result<Self> {
        if inputs == 0 || hidden.contains(&0) {
            return Err(Error::InvalidParameter(
                "layer widths must be positive".into(),
            ));
        }
        let mut rng = rng::seeded(seed);
        let mut widths = vec![inputs];
        widths.extend_from_slice(hidden);
        let mut layers: Vec<StochasticLayer> = widths
            .windows(2)
            .map(|w| StochasticLayer::init(w[0], w[1], Activation::Relu, &mut rng))
            .collect();
        layers.push(StochasticLayer::init(
            *widths.last().expect("nonempty"),
            classes,
            Activation::Identity,
            &mut rng,
        ));
        Self::new(layers, noise_mode)
    }

    pub fn layers(&self) -> &[StochasticLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [StochasticLayer] {
        &mut self.layers
    }

    pub fn noise_mode(&self) -> NoiseMode {
        self.noise_mode
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    /// Sets every layer's log-std to `value` (clamped).
    pub fn set_log_std(&mut self, value: f32) {
        for l in &mut self.layers {
            l.set_log_std(value);
        }
    }

    pub(crate) fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} inputs", self.input_dim()),
                got: format!("{len} inputs"),
            });
        }
        Ok(())
    }

    pub(crate) fn logits_with(&self, input: &[f32], mut rng: Option<&mut Rng>) -> Vec<f64> {
        let mut h: Vec<f64> = input.iter().map(|&v| f64::from(v)).collect();
        let mut eps = Vec::new();
        let mut in_sign = Vec::new();
        let mut out_sign = Vec::new();
        for layer in &self.layers {
            let pre = match rng.as_deref_mut() {
                None => layer.pre_activation(&h, None),
                Some(rng) => {
                    eps.clear();
                    layer.draw_eps(rng, &mut eps);
                    let noise = match self.noise_mode {
                        NoiseMode::Independent => SampleNoise {
                            eps: &eps,
                            in_sign: None,
                            out_sign: None,
                        },
                        NoiseMode::Flipout => {
                            draw_signs(rng, layer.inputs(), &mut in_sign);
                            draw_signs(rng, layer.outputs(), &mut out_sign);
                            SampleNoise {
                                eps: &eps,
                                in_sign: Some(&in_sign),
                                out_sign: Some(&out_sign),
                            }
                        }
                    };
                    layer.pre_activation(&h, Some(noise))
                }
            };
            let act = layer.activation();
            h = pre.into_iter().map(|v| act.apply(v)).collect();
        }
        h
    }
}

pub(crate) fn draw_signs(rng: &mut Rng, n: usize, out: &mut Vec<f64>) {
    out.clear();
    out.extend((0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }));
}

fn to_tensor(values: Vec<f64>) -> Tensor {
    Tensor::vector(values.into_iter().map(|v| v as f32).collect()).expect("finite outputs")
}

/// Logits from one stochastic pass.
pub fn logits_sample(
    model: &StochasticModel,
    input: &Tensor,
    pass_rng: &mut Rng,
) -> Result<Tensor> {
    model.check_input(input.len())?;
    Ok(to_tensor(model.logits_with(input.data(), Some(pass_rng))))
}

/// Logits from the mean-weight path.
pub fn logits_deterministic(model: &StochasticModel, input: &Tensor) -> Result<Tensor> {
    model.check_input(input.len())?;
    Ok(to_tensor(model.logits_with(input.data(), None)))
}

/// Softmax scores from one stochastic pass; every layer draws fresh weight
/// noise from `pass_rng`.
pub fn forward_sample(
    model: &StochasticModel,
    input: &Tensor,
    pass_rng: &mut Rng,
) -> Result<Tensor> {
    model.check_input(input.len())?;
    Ok(to_tensor(softmax_f64(
        &model.logits_with(input.data(), Some(pass_rng)),
    )))
}

/// Softmax scores with every weight at its mean.
pub fn forward_deterministic(model: &StochasticModel, input: &Tensor) -> Result<Tensor> {
    model.check_input(input.len())?;
    Ok(to_tensor(softmax_f64(
        &model.logits_with(input.data(), None),
    )))
}

/// `n` stochastic passes of softmax scores. Pass `i` uses `rng::stream(seed, i)`.
pub fn sample_runs(
    model: &StochasticModel,
    input: &Tensor,
    n: usize,
    seed: u64,
) -> Result<ScoreMatrix> {
    sample_runs_in(model, input, n, seed, ScoreSpace::Softmax)
}

/// As [`sample_runs`], recording either softmax scores or raw logits.
pub fn sample_runs_in(
    model: &StochasticModel,
    input: &Tensor,
    n: usize,
    seed: u64,
    space: ScoreSpace,
) -> Result<ScoreMatrix> {
    if n < 2 {
        return Err(Error::TooFewPasses);
    }
    model.check_input(input.len())?;
    let rows: Vec<Vec<f32>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, i as u64);
            let logits = model.logits_with(input.data(), Some(&mut rng));
            let scores = match space {
                ScoreSpace::Softmax => softmax_f64(&logits),
                ScoreSpace::Logit => logits,
            };
            scores.into_iter().map(|v| v as f32).collect()
        })
        .collect();
    ScoreMatrix::new(n, model.num_classes(), rows.concat(), space)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::layer::LOG_STD_FLOOR;

    fn identity_model() -> StochasticModel {
        let layer = StochasticLayer::new(
            Tensor::new(
                vec![3, 3],
                vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            )
            .unwrap(),
            Tensor::filled(vec![3, 3], -3.0).unwrap(),
            Tensor::filled(vec![3], 0.0).unwrap(),
            Activation::Identity,
        )
        .unwrap();
        StochasticModel::new(vec![layer], NoiseMode::Flipout).unwrap()
    }

    #[test]
    fn identity_layer_gives_softmax_of_input() {
        let m = identity_model();
        let x = Tensor::vector(vec![0.5, -1.0, 2.0]).unwrap();
        let out = forward_deterministic(&m, &x).unwrap();
        let expected = crate::tensor::softmax(x.data()).unwrap();
        for (a, b) in out.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-7);
        }
        assert_eq!(out, forward_deterministic(&m, &x).unwrap());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let m = identity_model();
        let x = Tensor::vector(vec![0.5, -1.0]).unwrap();
        assert!(forward_deterministic(&m, &x).is_err());
        assert!(forward_sample(&m, &x, &mut rng::stream(0, 0)).is_err());
    }

    #[test]
    fn same_stream_same_output() {
        let m = StochasticModel::mlp(4, &[8], 3, NoiseMode::Flipout, 1).unwrap();
        let x = Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let a = forward_sample(&m, &x, &mut rng::stream(5, 0)).unwrap();
        let b = forward_sample(&m, &x, &mut rng::stream(5, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn untrained_model_varies_between_passes() {
        for mode in [NoiseMode::Flipout, NoiseMode::Independent] {
            let mut m = StochasticModel::mlp(4, &[8], 3, mode, 2).unwrap();
            m.set_log_std(-1.0);
            let x = Tensor::vector(vec![0.3, -0.2, 0.9, 0.4]).unwrap();
            let runs = sample_runs(&m, &x, 100, 11).unwrap();
            let stats = crate::selective::class_stats(&runs);
            assert!(
                stats.std.iter().all(|&s| s > 0.0),
                "{mode:?}: {:?}",
                stats.std
            );
        }
    }

    #[test]
    fn too_few_passes() {
        let m = identity_model();
        let x = Tensor::vector(vec![0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            sample_runs(&m, &x, 1, 0),
            Err(Error::TooFewPasses)
        ));
    }

    #[test]
    fn zero_variance_runs_repeat_rows() {
        let mut m = identity_model();
        m.set_log_std(LOG_STD_FLOOR);
        let x = Tensor::vector(vec![0.2, 0.1, -0.4]).unwrap();
        let runs = sample_runs(&m, &x, 2, 3).unwrap();
        for (a, b) in runs.row(0).iter().zip(runs.row(1)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn logit_space_rows_are_raw_logits() {
        let mut m = identity_model();
        m.set_log_std(LOG_STD_FLOOR);
        let x = Tensor::vector(vec![3.0, 1.0, -2.0]).unwrap();
        let runs = sample_runs_in(&m, &x, 3, 0, ScoreSpace::Logit).unwrap();
        for (a, b) in runs.row(2).iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn monte_carlo_mean_matches_linear_expectation() {
        // A single identity layer has E[logits] = W x + b and per-logit
        // variance sum_i sigma_oi^2 x_i^2.
        for mode in [NoiseMode::Flipout, NoiseMode::Independent] {
            let layer = StochasticLayer::new(
                Tensor::new(vec![2, 3], vec![0.5, -1.0, 0.25, 1.5, 0.0, -0.5]).unwrap(),
                Tensor::new(vec![2, 3], vec![-1.0, -0.5, -2.0, 0.0, -1.5, -0.7]).unwrap(),
                Tensor::new(vec![2], vec![0.1, -0.2]).unwrap(),
                Activation::Identity,
            )
            .unwrap();
            let m = StochasticModel::new(vec![layer.clone()], mode).unwrap();
            let x = [0.8f32, -0.6, 1.2];
            let k = 10_000;
            let runs = sample_runs_in(
                &m,
                &Tensor::vector(x.to_vec()).unwrap(),
                k,
                21,
                ScoreSpace::Logit,
            )
            .unwrap();
            for o in 0..2 {
                let mut expected = f64::from(layer.bias().data()[o]);
                let mut var = 0.0;
                for (i, &xi) in x.iter().enumerate() {
                    let w = f64::from(layer.weight_mean().data()[o * 3 + i]);
                    let s = f64::from(layer.weight_log_std().data()[o * 3 + i]).exp();
                    let xi = f64::from(xi);
                    expected += w * xi;
                    var += s * s * xi * xi;
                }
                let mean = (0..k).map(|r| f64::from(runs.row(r)[o])).sum::<f64>() / k as f64;
                let tol = 3.0 * var.sqrt() / (k as f64).sqrt();
                assert!(
                    (mean - expected).abs() < tol,
                    "{mode:?} logit {o}: {mean} vs {expected} (tol {tol})"
                );
            }
        }
    }

    #[test]
    fn floor_variance_collapses_to_deterministic() {
        use rand::Rng as _;
        let mut m = StochasticModel::mlp(6, &[16, 16], 4, NoiseMode::Flipout, 3).unwrap();
        m.set_log_std(LOG_STD_FLOOR);
        let mut r = rng::seeded(99);
        for j in 0..100 {
            let x = Tensor::vector((0..6).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
            let a = forward_sample(&m, &x, &mut rng::stream(7, j)).unwrap();
            let b = forward_deterministic(&m, &x).unwrap();
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-6);
            }
        }
    }
}
