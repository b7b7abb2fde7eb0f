//! Spectral checks against a direct DFT and closed-form window energies.

use std::f64::consts::PI;

use soundssl::dataset::AudioClip;
use soundssl::dsp::resample::resample;
use soundssl::dsp::{hann_window, mel_spectrogram_image, Stft, StftConfig, SpectrogramConfig};

fn sine(freq: f64, amp: f64, sr: f64, len: usize) -> Vec<f32> {
    (0..len).map(|i| (amp * (2.0 * PI * freq * i as f64 / sr).sin()) as f32).collect()
}

/// |DFT|² of one frame by the definition.
fn dft_power(frame: &[f64]) -> Vec<f64> {
    let n = frame.len();
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &x) in frame.iter().enumerate() {
                let a = -2.0 * PI * (k * t % n) as f64 / n as f64;
                re += x * a.cos();
                im += x * a.sin();
            }
            re * re + im * im
        })
        .collect()
}

#[test]
fn bin_centered_sine_matches_direct_dft() {
    let n = 256;
    let cfg = StftConfig::with_window(n);
    let sr = 8000.0;
    let k0 = 20;
    let x = sine(k0 as f64 * sr / n as f64, 0.7, sr, 4000);
    let p = Stft::new(&cfg).unwrap().power(&x).unwrap();
    let w = hann_window(n);
    for t in [3, 10, 25] {
        // frame t starts at t·hop − n/2 in the unpadded signal
        let start = t * cfg.hop_length - n / 2;
        let frame: Vec<f64> = (0..n).map(|i| x[start + i] as f64 * w[i]).collect();
        let oracle = dft_power(&frame);
        for k in 0..p.n_bins {
            let (a, b) = (p.get(k, t), oracle[k]);
            assert!((a - b).abs() <= 1e-9 * oracle[k0] + 1e-9 * b.abs(), "frame {t} bin {k}: {a} vs {b}");
        }
        let peak = p.get(k0, t);
        for k in (0..p.n_bins).filter(|&k| k.abs_diff(k0) >= 3) {
            assert!(peak >= 100.0 * p.get(k, t), "bin {k} too close to the peak");
        }
    }
}

#[test]
fn total_power_matches_window_energy() {
    // one-sided Σ|X_k|² ≈ N/2 · Σ(w·x)² ≈ N/2 · A²/2 · Σw², Σw² = 3N/8
    let n = 512;
    let cfg = StftConfig::with_window(n);
    let amp = 0.5;
    let x = sine(1234.5, amp, 16_000.0, 16_000);
    let p = Stft::new(&cfg).unwrap().power(&x).unwrap();
    let predicted = n as f64 / 2.0 * amp * amp / 2.0 * 3.0 * n as f64 / 8.0;
    for t in 4..p.n_frames - 4 {
        let total: f64 = (0..p.n_bins).map(|k| p.get(k, t)).sum();
        let rel = (total - predicted).abs() / predicted;
        assert!(rel < 0.01, "frame {t}: {total} vs {predicted}");
    }
}

#[test]
fn gain_leaves_image_unchanged_within_one_level() {
    let cfg = SpectrogramConfig {
        stft: StftConfig::with_window(512),
        mel: soundssl::dsp::MelConfig {
            n_mels: 64,
            ..Default::default()
        },
        width: 64,
    };
    // a faint noise floor keeps every mel band well above the dB floor, where
    // gain would otherwise not cancel
    let mut state = 12345u64;
    let mut noise = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 40) as f32 / (1u64 << 24) as f32 - 0.5) * 2e-3
    };
    let base: Vec<f32> = sine(600.0, 0.2, 8000.0, 8000)
        .iter()
        .zip(sine(2100.0, 0.05, 8000.0, 8000))
        .map(|(a, b)| a + b + noise())
        .collect();
    let img = mel_spectrogram_image(&AudioClip::new(base.clone(), 8000, "x"), &cfg).unwrap();
    for alpha in [0.25f32, 3.0] {
        let scaled = base.iter().map(|v| v * alpha).collect();
        let other = mel_spectrogram_image(&AudioClip::new(scaled, 8000, "x"), &cfg).unwrap();
        let worst = img
            .gray_levels()
            .iter()
            .zip(other.gray_levels())
            .map(|(a, b)| a.abs_diff(b))
            .max()
            .unwrap();
        assert!(worst <= 1, "gain {alpha}: {worst} levels");
    }
}

#[test]
fn image_is_pure() {
    let clip = AudioClip::new(sine(900.0, 0.3, 8000.0, 4000), 8000, "x");
    let cfg = SpectrogramConfig {
        stft: StftConfig::with_window(256),
        mel: soundssl::dsp::MelConfig {
            n_mels: 32,
            ..Default::default()
        },
        width: 32,
    };
    assert_eq!(mel_spectrogram_image(&clip, &cfg).unwrap(), mel_spectrogram_image(&clip, &cfg).unwrap());
}

#[test]
fn resampled_sine_keeps_its_frequency() {
    let x = sine(440.0, 0.5, 48_000.0, 48_000);
    let y = resample(&x, 48_000, 44_100);
    assert_eq!(y.len(), 44_100);
    // 1 Hz bins over one second; search 300–600 Hz
    let seg: Vec<f64> = y.iter().map(|&v| v as f64).collect();
    let power = |k: usize| {
        let (mut re, mut im) = (0.0, 0.0);
        for (t, &v) in seg.iter().enumerate() {
            let a = -2.0 * PI * k as f64 * t as f64 / seg.len() as f64;
            re += v * a.cos();
            im += v * a.sin();
        }
        re * re + im * im
    };
    let peak = (300..600).max_by(|&a, &b| power(a).total_cmp(&power(b))).unwrap();
    assert!(peak.abs_diff(440) <= 1, "peak at {peak} Hz");
}
