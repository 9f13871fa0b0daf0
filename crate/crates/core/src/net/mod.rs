//! Stochastic-weight neural network: layers, inference, training and
//! checkpoint serialization.

pub mod checkpoint;
pub mod layer;
pub mod model;
pub mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use layer::{
    kl_to_prior, Activation, LayerGrads, StochasticLayer, LOG_STD_CEIL, LOG_STD_FLOOR, LOG_STD_INIT,
};
pub use model::{
    forward_deterministic, forward_sample, logits_deterministic, logits_sample, sample_runs,
    sample_runs_in, NoiseMode, StochasticModel,
};
pub use train::{objective, train, Gradients, NoiseDraw, TrainConfig, TrainReport};
