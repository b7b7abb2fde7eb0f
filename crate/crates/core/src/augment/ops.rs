use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;

use super::AugmentError;
use crate::dataset::{fit_length, AudioClip};
use crate::dsp::resample::resample_to_len;
use crate::dsp::{ComplexSpectrogram, Stft, StftConfig};

/// Analysis window for the vocoder: the power of two nearest (in log terms)
/// to 46 ms, so 2048 at 44.1 kHz and 512 at 8 kHz.
fn vocoder_window(sample_rate: u32) -> usize {
    let target = (sample_rate as f64 * 0.0464).max(16.0);
    let p = target.log2().round() as u32;
    1usize << p
}

fn wrap(phase: f64) -> f64 {
    phase - 2.0 * PI * (phase / (2.0 * PI)).round()
}

/// Phase vocoder. Output spans `round(len · factor)` samples with pitch
/// unchanged.
fn vocoder(samples: &[f32], sample_rate: u32, factor: f64) -> Result<Vec<f32>, AugmentError> {
    let out_len = (samples.len() as f64 * factor).round() as usize;
    if samples.is_empty() || out_len == 0 {
        return Ok(vec![0.0; out_len]);
    }
    let n = vocoder_window(sample_rate);
    let cfg = StftConfig::with_window(n);
    let stft = Stft::new(&cfg)?;
    let spec = stft.transform(samples)?;
    let (nb, nf) = (spec.n_bins, spec.n_frames);
    let hop = cfg.hop_length as f64;
    let advance: Vec<f64> = (0..nb).map(|k| 2.0 * PI * hop * k as f64 / n as f64).collect();

    let rate = 1.0 / factor;
    let steps: Vec<f64> = (0..).map(|i| i as f64 * rate).take_while(|&t| t < nf as f64).collect();
    let zero = vec![Complex::new(0.0, 0.0); nb];
    let frame = |t: usize| if t < nf { spec.frame(t) } else { &zero[..] };

    let mut phase: Vec<f64> = frame(0).iter().map(|c| c.arg()).collect();
    let mut data = Vec::with_capacity(steps.len() * nb);
    for &t in &steps {
        let i = t.floor() as usize;
        let alpha = t - i as f64;
        let (c0, c1) = (frame(i), frame(i + 1));
        for k in 0..nb {
            let mag = (1.0 - alpha) * c0[k].norm() + alpha * c1[k].norm();
            data.push(Complex::from_polar(mag, phase[k]));
            let dphi = wrap(c1[k].arg() - c0[k].arg() - advance[k]);
            phase[k] += advance[k] + dphi;
        }
    }
    let out = ComplexSpectrogram {
        n_bins: nb,
        n_frames: steps.len(),
        data,
    };
    Ok(stft.inverse(&out, out_len))
}

fn clamp_unit(v: Vec<f32>) -> Vec<f32> {
    v.into_iter().map(|x| x.clamp(-1.0, 1.0)).collect()
}

/// Stretches duration by `factor` (> 1 is longer) without changing pitch,
/// then zero-pads the tail or center-truncates back to the input length.
pub fn time_stretch(clip: &AudioClip, factor: f64) -> Result<AudioClip, AugmentError> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(AugmentError::InvalidFactor(factor));
    }
    let stretched = vocoder(&clip.samples, clip.sample_rate, factor)?;
    Ok(clip.with_samples(clamp_unit(fit_length(stretched, clip.len()))))
}

/// Scales every frequency by `2^(semitones/12)`; length is preserved.
pub fn pitch_shift(clip: &AudioClip, semitones: i32) -> Result<AudioClip, AugmentError> {
    if semitones == 0 {
        return Ok(clip.clone());
    }
    let r = 2f64.powf(semitones as f64 / 12.0);
    let stretched = vocoder(&clip.samples, clip.sample_rate, r)?;
    let shifted = resample_to_len(&stretched, 1.0 / r, clip.len());
    Ok(clip.with_samples(clamp_unit(shifted)))
}

/// White Gaussian noise scaled so that `10·log10(P_clip / P_noise)` equals
/// `snr_db` exactly for the drawn realization.
pub fn noise_for_snr<R: Rng + ?Sized>(clip: &AudioClip, snr_db: f64, rng: &mut R) -> Result<Vec<f64>, AugmentError> {
    let p_signal = clip.power();
    if p_signal == 0.0 {
        return Err(AugmentError::SilentClip);
    }
    let raw: Vec<f64> = (0..clip.len()).map(|_| rng.sample(StandardNormal)).collect();
    let p_raw = raw.iter().map(|v| v * v).sum::<f64>() / raw.len() as f64;
    let target = p_signal / 10f64.powf(snr_db / 10.0);
    let scale = (target / p_raw).sqrt();
    Ok(raw.into_iter().map(|v| v * scale).collect())
}

/// Mixes noise at `snr_db` and clips to `[-1, 1]`.
pub fn add_noise<R: Rng + ?Sized>(clip: &AudioClip, snr_db: f64, rng: &mut R) -> Result<AudioClip, AugmentError> {
    let noise = noise_for_snr(clip, snr_db, rng)?;
    let samples = clip
        .samples
        .iter()
        .zip(noise)
        .map(|(&s, n)| (s as f64 + n).clamp(-1.0, 1.0) as f32)
        .collect();
    Ok(clip.with_samples(samples))
}
