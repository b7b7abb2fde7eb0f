use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mel::{MelConfig, MelFilterbank};
use super::stft::{Stft, StftConfig};
use super::DspError;
use crate::dataset::AudioClip;

/// Floor added to mel power before the dB conversion.
pub const DB_FLOOR: f64 = 1e-10;

/// Everything that determines a spectrogram image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectrogramConfig {
    pub stft: StftConfig,
    pub mel: MelConfig,
    /// Output columns (time frames) after centered crop/pad.
    pub width: usize,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            mel: MelConfig::default(),
            width: 256,
        }
    }
}

/// Gray-scale mel-spectrogram with values `k / 255`, `k ∈ 0..=255`.
/// Row 0 is the lowest mel band; columns are time frames.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrogramImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl SpectrogramImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self, DspError> {
        if pixels.len() != height * width {
            return Err(DspError::InvalidConfig(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    /// 8-bit gray levels (`round(v · 255)`).
    pub fn gray_levels(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }

    /// Row of the maximum pixel in `col` (lowest row wins ties).
    pub fn argmax_row(&self, col: usize) -> usize {
        (0..self.height).fold(0, |best, r| if self.get(r, col) > self.get(best, col) { r } else { best })
    }

    pub fn save_png(&self, path: &Path) -> Result<(), DspError> {
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.gray_levels())
            .expect("buffer length matches dimensions");
        img.save(path).map_err(|e| DspError::Png(e.to_string()))
    }
}

/// Reusable image builder holding the FFT plan and filterbank.
pub struct SpectrogramBuilder {
    cfg: SpectrogramConfig,
    stft: Stft,
    bank: MelFilterbank,
    sample_rate: u32,
}

impl SpectrogramBuilder {
    pub fn new(cfg: &SpectrogramConfig, sample_rate: u32) -> Result<Self, DspError> {
        if cfg.width == 0 {
            return Err(DspError::InvalidConfig("image width must be positive".into()));
        }
        let stft = Stft::new(&cfg.stft)?;
        let bank = MelFilterbank::new(&cfg.mel, cfg.stft.n_bins(), sample_rate)?;
        Ok(Self {
            cfg: cfg.clone(),
            stft,
            bank,
            sample_rate,
        })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    /// Mel power in dB, `n_mels × n_frames` row-major.
    pub fn mel_db(&self, samples: &[f32]) -> Result<(Vec<f64>, usize), DspError> {
        let power = self.stft.power(samples)?;
        let nf = power.n_frames;
        let mut db = vec![0.0; self.bank.n_mels * nf];
        for m in 0..self.bank.n_mels {
            let row = self.bank.row(m);
            for (k, &w) in row.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let src = &power.data[k * nf..(k + 1) * nf];
                for (d, &p) in db[m * nf..(m + 1) * nf].iter_mut().zip(src) {
                    *d += w * p;
                }
            }
        }
        db.iter_mut().for_each(|v| *v = 10.0 * (*v + DB_FLOOR).log10());
        Ok((db, nf))
    }

    pub fn build(&self, clip: &AudioClip) -> Result<SpectrogramImage, DspError> {
        if clip.sample_rate != self.sample_rate {
            return Err(DspError::SampleRate {
                expected: self.sample_rate,
                found: clip.sample_rate,
            });
        }
        let (db, nf) = self.mel_db(&clip.samples)?;
        let (h, w) = (self.bank.n_mels, self.cfg.width);
        let floor = db.iter().copied().fold(f64::INFINITY, f64::min);
        let mut fitted = vec![floor; h * w];
        if nf >= w {
            let start = (nf - w) / 2;
            for r in 0..h {
                fitted[r * w..(r + 1) * w].copy_from_slice(&db[r * nf + start..r * nf + start + w]);
            }
        } else {
            let left = (w - nf) / 2;
            for r in 0..h {
                fitted[r * w + left..r * w + left + nf].copy_from_slice(&db[r * nf..(r + 1) * nf]);
            }
        }
        let lo = fitted.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = fitted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pixels = if hi > lo {
            fitted
                .iter()
                .map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as f32 / 255.0)
                .collect()
        } else {
            vec![0.0; h * w]
        };
        SpectrogramImage::new(h, w, pixels)
    }
}

/// Power → mel → dB → min-max gray levels → `/255`, cropped to `cfg.width`.
pub fn mel_spectrogram_image(clip: &AudioClip, cfg: &SpectrogramConfig) -> Result<SpectrogramImage, DspError> {
    SpectrogramBuilder::new(cfg, clip.sample_rate)?.build(clip)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, amp: f32, sr: u32, len: usize) -> AudioClip {
        let samples = (0..len)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin() as f32)
            .collect();
        AudioClip::new(samples, sr, "tone")
    }

    #[test]
    fn silence_maps_to_zero_image() {
        let clip = AudioClip::new(vec![0.0; 132_300], 44_100, "s");
        let img = mel_spectrogram_image(&clip, &SpectrogramConfig::default()).unwrap();
        assert_eq!((img.height, img.width), (256, 256));
        assert!(img.pixels.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn pixels_are_gray_levels_in_unit_range() {
        let cfg = SpectrogramConfig {
            stft: StftConfig::with_window(256),
            mel: MelConfig {
                n_mels: 32,
                ..MelConfig::default()
            },
            width: 40,
        };
        let img = mel_spectrogram_image(&tone(700.0, 0.5, 8000, 8000), &cfg).unwrap();
        for &p in &img.pixels {
            assert!((0.0..=1.0).contains(&p));
            let k = p * 255.0;
            assert!((k - k.round()).abs() < 1e-3);
        }
        assert!(img.pixels.contains(&1.0) && img.pixels.contains(&0.0));
    }

    #[test]
    fn short_clip_is_padded_to_width() {
        let cfg = SpectrogramConfig {
            stft: StftConfig::with_window(256),
            mel: MelConfig {
                n_mels: 16,
                ..MelConfig::default()
            },
            width: 64,
        };
        let img = mel_spectrogram_image(&tone(500.0, 0.5, 8000, 2000), &cfg).unwrap();
        assert_eq!(img.width, 64);
        // padded edge columns sit at the floor level
        assert!((0..img.height).all(|r| img.get(r, 0) == 0.0));
    }

    #[test]
    fn rate_mismatch_is_rejected() {
        let b = SpectrogramBuilder::new(&SpectrogramConfig::default(), 44_100).unwrap();
        assert!(matches!(b.build(&tone(440.0, 0.5, 8000, 8000)), Err(DspError::SampleRate { .. })));
    }
}
