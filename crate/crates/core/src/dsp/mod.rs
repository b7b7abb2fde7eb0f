//! STFT, mel filterbank and gray-scale mel-spectrogram images.

mod image;
mod mel;
pub mod resample;
mod stft;

pub use image::{mel_spectrogram_image, SpectrogramBuilder, SpectrogramConfig, SpectrogramImage, DB_FLOOR};
pub use mel::{hz_to_mel, mel_to_hz, MelConfig, MelFilterbank};
pub use stft::{hann_window, stft_power, ComplexSpectrogram, PowerSpectrogram, Stft, StftConfig};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DspError {
    #[error("signal of {len} samples is shorter than one {window}-sample window")]
    TooShort { len: usize, window: usize },
    #[error("invalid dsp configuration: {0}")]
    InvalidConfig(String),
    #[error("clip sample rate {found} Hz does not match configured {expected} Hz")]
    SampleRate { expected: u32, found: u32 },
    #[error("png export failed: {0}")]
    Png(String),
}
