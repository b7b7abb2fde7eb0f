use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::clip::target_len;
use super::{write_wav, DatasetError, Manifest, ManifestEntry};
use crate::rng::{domain, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    /// Steady sinusoid.
    Tone,
    /// Linear sweep from the low to the high band edge.
    Chirp,
    /// Sinusoid gated by a periodic pulse train.
    AmPulse,
    /// Fundamental with three decaying overtones.
    Harmonic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthClass {
    pub name: String,
    pub kind: SignalKind,
    /// `[low, high]` in Hz.
    pub band_hz: [f64; 2],
    /// Pulse rate for `am_pulse`, Hz.
    #[serde(default = "default_pulse_rate")]
    pub pulse_rate_hz: f64,
}

fn default_pulse_rate() -> f64 {
    6.0
}

impl SynthClass {
    pub fn new(name: &str, kind: SignalKind, lo: f64, hi: f64) -> Self {
        Self {
            name: name.into(),
            kind,
            band_hz: [lo, hi],
            pulse_rate_hz: default_pulse_rate(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: Vec<SynthClass>,
    pub n_per_class: usize,
    pub sample_rate: u32,
    pub clip_length_s: f64,
    /// Standard deviation of the Gaussian noise floor.
    pub noise_floor: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        use SignalKind::*;
        Self {
            classes: vec![
                SynthClass::new("tone_low", Tone, 400.0, 700.0),
                SynthClass::new("pulse_low", AmPulse, 400.0, 700.0),
                SynthClass::new("chirp_mid", Chirp, 800.0, 1600.0),
                SynthClass::new("harm_mid", Harmonic, 300.0, 500.0),
                SynthClass::new("pulse_high", AmPulse, 1800.0, 2600.0),
            ],
            n_per_class: 40,
            sample_rate: 8000,
            clip_length_s: 0.5,
            noise_floor: 0.02,
            seed: 1030,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.classes.is_empty() || self.n_per_class == 0 {
            return Err(DatasetError::InvalidArgument("synthetic corpus needs classes and clips".into()));
        }
        if !(self.clip_length_s > 0.0) || !(self.noise_floor >= 0.0) {
            return Err(DatasetError::InvalidArgument("clip length and noise floor must be positive".into()));
        }
        for c in &self.classes {
            let [lo, hi] = c.band_hz;
            if !(lo > 0.0 && lo < hi && hi < nyquist) {
                return Err(DatasetError::InvalidArgument(format!(
                    "class {}: band {lo}..{hi} Hz invalid below Nyquist {nyquist}",
                    c.name
                )));
            }
        }
        Ok(())
    }
}

/// 10 ms raised-cosine fades at both ends of `[start, end)`.
fn segment_envelope(i: usize, start: usize, end: usize, fade: usize) -> f64 {
    if i < start || i >= end {
        return 0.0;
    }
    let d = (i - start).min(end - 1 - i);
    if d >= fade {
        1.0
    } else {
        0.5 - 0.5 * (PI * d as f64 / fade as f64).cos()
    }
}

fn render(class: &SynthClass, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let sr = cfg.sample_rate as f64;
    let len = target_len(cfg.sample_rate, cfg.clip_length_s);
    let [lo, hi] = class.band_hz;
    let amp = rng.gen_range(0.2..0.5);
    let start = rng.gen_range(0..=len * 3 / 10);
    let seg = rng.gen_range(len / 2..=len - start);
    let end = start + seg;
    let fade = ((0.01 * sr) as usize).max(1).min(seg / 2);
    let phase0 = rng.gen_range(0.0..2.0 * PI);
    let freq = rng.gen_range(lo..hi);
    let rate = class.pulse_rate_hz * rng.gen_range(0.8..1.2);
    let noise = Normal::new(0.0, cfg.noise_floor * rng.gen_range(0.5..1.5)).expect("finite std");

    let mut out = Vec::with_capacity(len);
    let mut phase = phase0;
    for i in 0..len {
        let env = segment_envelope(i, start, end, fade);
        let t = (i.saturating_sub(start)) as f64 / sr;
        let s = match class.kind {
            SignalKind::Tone => (phase0 + 2.0 * PI * freq * t).sin(),
            SignalKind::Chirp => {
                let f = lo + (hi - lo) * (i.saturating_sub(start)) as f64 / seg as f64;
                phase += 2.0 * PI * f / sr;
                phase.sin()
            }
            SignalKind::AmPulse => {
                let cycle = (rate * t).fract();
                let gate = if cycle < 0.35 { (PI * cycle / 0.35).sin() } else { 0.0 };
                gate * (phase0 + 2.0 * PI * freq * t).sin()
            }
            SignalKind::Harmonic => {
                let f0 = freq;
                (1..=4)
                    .filter(|&h| h as f64 * f0 < sr / 2.0)
                    .map(|h| (phase0 * h as f64 + 2.0 * PI * f0 * h as f64 * t).sin() / h as f64)
                    .sum::<f64>()
                    / 2.08
            }
        };
        let v = amp * env * s + noise.sample(rng);
        out.push(v.clamp(-1.0, 1.0) as f32);
    }
    out
}

/// Writes `<out>/<class>/<class>_NNNN.wav` (PCM16) plus `<out>/manifest.csv`.
/// Output depends only on `cfg`.
pub fn synth_corpus(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest, DatasetError> {
    cfg.validate()?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DatasetError::Io { path, source }
    };
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut entries = Vec::with_capacity(cfg.classes.len() * cfg.n_per_class);
    for (c, class) in cfg.classes.iter().enumerate() {
        let dir = out_dir.join(&class.name);
        std::fs::create_dir_all(&dir).map_err(io(&dir))?;
        for i in 0..cfg.n_per_class {
            let mut rng = stream(cfg.seed, &[domain::SYNTH, c as u64, i as u64]);
            let samples = render(class, cfg, &mut rng);
            let path = dir.join(format!("{}_{i:04}.wav", class.name));
            write_wav(&path, &samples, cfg.sample_rate)?;
            entries.push(ManifestEntry {
                path,
                label: class.name.clone(),
                duration_s: cfg.clip_length_s,
            });
        }
    }
    let manifest = Manifest {
        classes: cfg.classes.iter().map(|c| c.name.clone()).collect(),
        entries,
        mismatches: Vec::new(),
    };
    manifest.write_csv(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_fades() {
        assert_eq!(segment_envelope(5, 10, 100, 8), 0.0);
        assert_eq!(segment_envelope(10, 10, 100, 8), 0.0);
        assert_eq!(segment_envelope(50, 10, 100, 8), 1.0);
        assert!(segment_envelope(13, 10, 100, 8) < 1.0);
    }

    #[test]
    fn rejects_band_above_nyquist() {
        let mut cfg = SynthConfig::default();
        cfg.classes[0].band_hz = [3000.0, 5000.0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn signal_stays_in_range() {
        let cfg = SynthConfig::default();
        for class in &cfg.classes {
            let s = render(class, &cfg, &mut stream(1, &[0]));
            assert_eq!(s.len(), 4000);
            assert!(s.iter().all(|v| (-1.0..=1.0).contains(v)));
            assert!(s.iter().any(|&v| v.abs() > 0.1));
        }
    }
}
