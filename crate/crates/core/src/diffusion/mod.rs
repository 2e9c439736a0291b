//! Noise schedule, forward noising, the conditional noise predictor, and
//! its prior training and per-object finetuning loops.

mod denoiser;
mod schedule;
mod train;

pub use denoiser::{time_features, Denoiser, DenoiserParams, Layer, ParamVars, HIDDEN, TIME_FEATURES};
pub use schedule::NoiseSchedule;
pub use train::{
    denoising_loss, finetune, train_prior, Captioned, Conditioning, NoiseDraw, TrainConfig, LossWeighting, TrainLog, ViewImage,
};
