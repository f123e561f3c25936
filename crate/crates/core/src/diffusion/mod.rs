//! Forward noising, the noise-prediction losses, the perceptron noise
//! predictor and the guided reverse sampler.

mod checkpoint;
mod loss;
mod network;
mod sampler;
mod schedule;

pub use checkpoint::Checkpoint;
pub use loss::{
    diffuse_batch, loss_conditional, loss_unconditional, loss_value_with_draw, loss_with_draw,
    DrawSource, LossEval, NoiseDraw,
};
pub use network::{
    condition_matrix, predict_batch, time_embedding, Activation, Arch, NoiseModel, ScoreNetwork,
};
pub use sampler::{sample, sample_batch};
pub use schedule::{diffuse, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
