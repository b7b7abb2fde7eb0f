//! Waveform augmentations, class balancing and two-view generation.

mod balance;
mod ops;

pub use balance::{apply_balance, build_balance_plan, plan_balance, BalanceItem, BalancePlan, ClassBalance};
pub use ops::{add_noise, noise_for_snr, pitch_shift, time_stretch};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::AudioClip;
use crate::dsp::DspError;
use crate::rng::{domain, stream};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("stretch factor {0} must be positive")]
    InvalidFactor(f64),
    #[error("clip has zero power; SNR is undefined")]
    SilentClip,
    #[error("invalid augmentation grid: {0}")]
    InvalidGrid(String),
    #[error("class count {0} must be positive")]
    EmptyClass(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

/// Parameter sets each augmentation draws from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParamGrid {
    pub stretch_factors: Vec<f64>,
    pub pitch_steps_semitones: Vec<i32>,
    pub noise_levels_db: Vec<f64>,
}

impl Default for AugmentParamGrid {
    fn default() -> Self {
        Self {
            stretch_factors: vec![0.7, 0.8, 0.9, 1.1, 1.2, 1.3],
            pitch_steps_semitones: vec![-12, -6, -3, 3, 6, 12],
            noise_levels_db: vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0],
        }
    }
}

impl AugmentParamGrid {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.stretch_factors.is_empty() || self.pitch_steps_semitones.is_empty() || self.noise_levels_db.is_empty() {
            return Err(AugmentError::InvalidGrid("every parameter set needs at least one value".into()));
        }
        if let Some(f) = self.stretch_factors.iter().find(|&&f| !(f > 0.0) || f == 1.0) {
            return Err(AugmentError::InvalidGrid(format!("stretch factor {f}")));
        }
        if self.pitch_steps_semitones.contains(&0) {
            return Err(AugmentError::InvalidGrid("pitch step 0 is the identity".into()));
        }
        if self.noise_levels_db.iter().any(|v| !v.is_finite()) {
            return Err(AugmentError::InvalidGrid("non-finite SNR".into()));
        }
        Ok(())
    }

    /// Uniform function, then a uniform parameter for it. Noise is skipped
    /// for silent clips since its SNR is undefined there.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R, allow_noise: bool) -> AugmentOp {
        let n_fns = if allow_noise { 3 } else { 2 };
        match rng.gen_range(0..n_fns) {
            0 => AugmentOp::TimeStretch {
                factor: *self.stretch_factors.choose(rng).expect("validated grid"),
            },
            1 => AugmentOp::PitchShift {
                semitones: *self.pitch_steps_semitones.choose(rng).expect("validated grid"),
            },
            _ => AugmentOp::AddNoise {
                snr_db: *self.noise_levels_db.choose(rng).expect("validated grid"),
            },
        }
    }
}

/// One (function, parameter) draw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "function", rename_all = "snake_case")]
pub enum AugmentOp {
    TimeStretch { factor: f64 },
    PitchShift { semitones: i32 },
    AddNoise { snr_db: f64 },
}

impl AugmentOp {
    /// `rng` is consumed only by noise.
    pub fn apply<R: Rng + ?Sized>(&self, clip: &AudioClip, rng: &mut R) -> Result<AudioClip, AugmentError> {
        match *self {
            AugmentOp::TimeStretch { factor } => time_stretch(clip, factor),
            AugmentOp::PitchShift { semitones } => pitch_shift(clip, semitones),
            AugmentOp::AddNoise { snr_db } => add_noise(clip, snr_db, rng),
        }
    }
}

/// Two independently drawn augmentations of one source clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewDraw {
    pub source_id: usize,
    pub a: AugmentOp,
    pub b: AugmentOp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view_a: AudioClip,
    pub view_b: AudioClip,
}

/// Draws for the views of `source_id`; depends only on `(seed, source_id)`.
pub fn draw_views(grid: &AugmentParamGrid, source_id: usize, silent: bool, seed: u64) -> ViewDraw {
    let mut rng = stream(seed, &[domain::VIEWS, source_id as u64]);
    let a = grid.draw(&mut rng, !silent);
    let b = grid.draw(&mut rng, !silent);
    ViewDraw { source_id, a, b }
}

/// Materializes a [`ViewDraw`].
pub fn render_views(draw: &ViewDraw, clip: &AudioClip, seed: u64) -> Result<ViewPair, AugmentError> {
    let key = |v: u64| stream(seed, &[domain::VIEWS, draw.source_id as u64, v]);
    Ok(ViewPair {
        view_a: draw.a.apply(clip, &mut key(1))?,
        view_b: draw.b.apply(clip, &mut key(2))?,
    })
}

/// One view pair per clip. `ids` are stable clip identifiers (manifest
/// indices) keying the random streams.
pub fn make_view_pairs(clips: &[&AudioClip], ids: &[usize], grid: &AugmentParamGrid, seed: u64) -> Result<Vec<ViewPair>, AugmentError> {
    grid.validate()?;
    clips
        .iter()
        .zip(ids)
        .map(|(clip, &id)| render_views(&draw_views(grid, id, clip.power() == 0.0, seed), clip, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rejects_identity() {
        let mut g = AugmentParamGrid::default();
        g.validate().unwrap();
        g.stretch_factors.push(1.0);
        assert!(g.validate().is_err());
        let mut g = AugmentParamGrid::default();
        g.pitch_steps_semitones = vec![0];
        assert!(g.validate().is_err());
    }

    #[test]
    fn op_json_shape() {
        let j = serde_json::to_string(&AugmentOp::PitchShift { semitones: -3 }).unwrap();
        assert_eq!(j, r#"{"function":"pitch_shift","semitones":-3}"#);
    }

    #[test]
    fn silent_clips_never_draw_noise() {
        let g = AugmentParamGrid::default();
        for id in 0..200 {
            let d = draw_views(&g, id, true, 3);
            assert!(!matches!(d.a, AugmentOp::AddNoise { .. }) && !matches!(d.b, AugmentOp::AddNoise { .. }));
        }
    }

    #[test]
    fn views_are_reproducible_and_differ_from_source() {
        let s: Vec<f32> = (0..2000).map(|i| ((i as f32) * 0.3).sin() * 0.4).collect();
        let clip = AudioClip::new(s, 8000, "x");
        let g = AugmentParamGrid::default();
        let a = make_view_pairs(&[&clip, &clip], &[0, 1], &g, 9).unwrap();
        let b = make_view_pairs(&[&clip, &clip], &[0, 1], &g, 9).unwrap();
        assert_eq!(a, b);
        for p in &a {
            assert_ne!(p.view_a.samples, clip.samples);
            assert_ne!(p.view_b.samples, clip.samples);
            assert_eq!(p.view_a.len(), clip.len());
        }
    }
}
