//! Self-supervised pretraining for environmental sound classification on
//! mel-spectrogram images.

pub mod augment;
pub mod config;
pub mod dataset;
pub mod dsp;
pub mod eval;
pub mod experiment;
pub mod models;
pub mod pipeline;
pub mod rng;
pub mod ssl;
pub mod tensor;
pub mod train;
