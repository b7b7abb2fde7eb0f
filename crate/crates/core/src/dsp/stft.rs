use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::DspError;

/// Short-time Fourier transform settings. Defaults: 2048-sample Hann window
/// with 75 % overlap (hop 512), reflect-padded centered frames.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct StftConfig {
    pub window_length: usize,
    pub hop_length: usize,
    pub center_pad: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_length: 2048,
            hop_length: 512,
            center_pad: true,
        }
    }
}

impl StftConfig {
    /// Window with hop = 25 % of the window length.
    pub fn with_window(window_length: usize) -> Self {
        Self {
            window_length,
            hop_length: window_length / 4,
            center_pad: true,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.window_length / 2 + 1
    }

    pub fn overlap(&self) -> f64 {
        1.0 - self.hop_length as f64 / self.window_length as f64
    }

    pub fn validate(&self) -> Result<(), DspError> {
        if self.window_length < 2 || self.hop_length == 0 || self.hop_length > self.window_length {
            return Err(DspError::InvalidConfig(format!(
                "window {} / hop {} is not a valid STFT geometry",
                self.window_length, self.hop_length
            )));
        }
        Ok(())
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> Option<usize> {
        if self.center_pad {
            Some(1 + len / self.hop_length)
        } else if len >= self.window_length {
            Some(1 + (len - self.window_length) / self.hop_length)
        } else {
            None
        }
    }
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Complex spectrogram stored frame-major: `data[frame * n_bins + bin]`.
#[derive(Clone, Debug)]
pub struct ComplexSpectrogram {
    pub n_bins: usize,
    pub n_frames: usize,
    pub data: Vec<Complex<f64>>,
}

impl ComplexSpectrogram {
    pub fn frame(&self, t: usize) -> &[Complex<f64>] {
        &self.data[t * self.n_bins..(t + 1) * self.n_bins]
    }
}

/// `|STFT|²` stored bin-major: `data[bin * n_frames + frame]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerSpectrogram {
    pub n_bins: usize,
    pub n_frames: usize,
    pub data: Vec<f64>,
}

impl PowerSpectrogram {
    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.data[bin * self.n_frames + frame]
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Reusable forward/inverse transform for one configuration.
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(cfg: &StftConfig) -> Result<Self, DspError> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg: cfg.clone(),
            window: hann_window(cfg.window_length),
            forward: planner.plan_fft_forward(cfg.window_length),
            inverse: planner.plan_fft_inverse(cfg.window_length),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    fn padded(&self, signal: &[f32]) -> Result<Vec<f64>, DspError> {
        let n = self.cfg.window_length;
        if !self.cfg.center_pad {
            if signal.len() < n {
                return Err(DspError::TooShort {
                    len: signal.len(),
                    window: n,
                });
            }
            return Ok(signal.iter().map(|&v| v as f64).collect());
        }
        let pad = n / 2;
        let len = signal.len();
        if len == 0 {
            return Err(DspError::TooShort { len, window: n });
        }
        // reflect padding (edge sample not repeated); short signals bounce
        let reflect = |i: isize| -> f64 {
            if len == 1 {
                return signal[0] as f64;
            }
            let period = 2 * (len as isize - 1);
            let mut j = i.rem_euclid(period);
            if j >= len as isize {
                j = period - j;
            }
            signal[j as usize] as f64
        };
        Ok((-(pad as isize)..(len + pad) as isize).map(reflect).collect())
    }

    pub fn transform(&self, signal: &[f32]) -> Result<ComplexSpectrogram, DspError> {
        let x = self.padded(signal)?;
        let n = self.cfg.window_length;
        let hop = self.cfg.hop_length;
        let n_frames = 1 + (x.len() - n) / hop;
        let n_bins = self.cfg.n_bins();
        let mut data = Vec::with_capacity(n_frames * n_bins);
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for t in 0..n_frames {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(x[t * hop + i] * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            data.extend_from_slice(&buf[..n_bins]);
        }
        Ok(ComplexSpectrogram { n_bins, n_frames, data })
    }

    pub fn power(&self, signal: &[f32]) -> Result<PowerSpectrogram, DspError> {
        let spec = self.transform(signal)?;
        let (nb, nf) = (spec.n_bins, spec.n_frames);
        let mut data = vec![0.0; nb * nf];
        for t in 0..nf {
            for (k, c) in spec.frame(t).iter().enumerate() {
                data[k * nf + t] = c.norm_sqr();
            }
        }
        Ok(PowerSpectrogram {
            n_bins: nb,
            n_frames: nf,
            data,
        })
    }

    /// Weighted overlap-add inverse. Frames are assumed to follow the same
    /// centering convention as [`Stft::transform`]; output has `len` samples.
    pub fn inverse(&self, spec: &ComplexSpectrogram, len: usize) -> Vec<f32> {
        let n = self.cfg.window_length;
        let hop = self.cfg.hop_length;
        let total = n + hop * spec.n_frames.saturating_sub(1);
        let mut out = vec![0.0f64; total];
        let mut norm = vec![0.0f64; total];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for t in 0..spec.n_frames {
            let frame = spec.frame(t);
            buf[..spec.n_bins].copy_from_slice(frame);
            for k in spec.n_bins..n {
                buf[k] = frame[n - k].conj();
            }
            self.inverse.process(&mut buf);
            for i in 0..n {
                let w = self.window[i];
                out[t * hop + i] += buf[i].re / n as f64 * w;
                norm[t * hop + i] += w * w;
            }
        }
        let offset = if self.cfg.center_pad { n / 2 } else { 0 };
        (0..len)
            .map(|i| {
                let j = i + offset;
                if j < total && norm[j] > 1e-8 {
                    (out[j] / norm[j]) as f32
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// `|STFT|²` of a signal under `cfg`.
pub fn stft_power(signal: &[f32], cfg: &StftConfig) -> Result<PowerSpectrogram, DspError> {
    Stft::new(cfg)?.power(signal)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_center_padded() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.n_frames(132_300), Some(259));
        let p = stft_power(&vec![0.0; 132_300], &cfg).unwrap();
        assert_eq!((p.n_bins, p.n_frames), (1025, 259));
        assert!(p.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_short_without_padding() {
        let cfg = StftConfig {
            center_pad: false,
            ..StftConfig::default()
        };
        assert!(matches!(stft_power(&[0.0; 100], &cfg), Err(DspError::TooShort { .. })));
    }

    #[test]
    fn overlap_is_three_quarters() {
        assert_eq!(StftConfig::default().overlap(), 0.75);
        assert_eq!(StftConfig::with_window(512).hop_length, 128);
    }

    #[test]
    fn inverse_reconstructs() {
        let cfg = StftConfig::with_window(256);
        let stft = Stft::new(&cfg).unwrap();
        let x: Vec<f32> = (0..3000).map(|i| ((i as f64 * 0.05).sin() * 0.5 + (i as f64 * 0.31).cos() * 0.2) as f32).collect();
        let y = stft.inverse(&stft.transform(&x).unwrap(), x.len());
        let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err < 1e-4, "max error {err}");
    }
}
