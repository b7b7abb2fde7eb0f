use serde::{Deserialize, Serialize};

use super::DspError;

/// HTK-style mel scale: `2595 · log10(1 + f / 700)`.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelConfig {
    pub n_mels: usize,
    pub f_min: f64,
    /// Upper edge in Hz; `None` means the Nyquist frequency.
    pub f_max: Option<f64>,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 256,
            f_min: 0.0,
            f_max: None,
        }
    }
}

/// Triangular mel filters, `n_mels × n_bins`, row-major.
///
/// Each weight is the triangle's mean over the bin's frequency interval
/// `[f_k - Δ/2, f_k + Δ/2]` rather than its value at `f_k`. Narrow low
/// filters narrower than one FFT bin therefore keep nonzero support.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    pub weights: Vec<f64>,
    /// Center frequency of each filter in Hz (`n_mels` entries, increasing).
    pub centers_hz: Vec<f64>,
    /// The `n_mels + 2` band edges in Hz.
    pub edges_hz: Vec<f64>,
}

/// ∫ from `left` to `x` of a unit-peak triangle (left, center, right).
fn triangle_cdf(x: f64, left: f64, center: f64, right: f64) -> f64 {
    if x <= left {
        0.0
    } else if x <= center {
        (x - left).powi(2) / (2.0 * (center - left))
    } else if x < right {
        (center - left) / 2.0 + (right - center) / 2.0 - (right - x).powi(2) / (2.0 * (right - center))
    } else {
        (right - left) / 2.0
    }
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig, n_bins: usize, sample_rate: u32) -> Result<Self, DspError> {
        let nyquist = sample_rate as f64 / 2.0;
        let f_max = cfg.f_max.unwrap_or(nyquist);
        if cfg.n_mels < 2 {
            return Err(DspError::InvalidConfig(format!("n_mels {} < 2", cfg.n_mels)));
        }
        if !(cfg.f_min >= 0.0 && cfg.f_min < f_max && f_max <= nyquist) || n_bins < 2 {
            return Err(DspError::InvalidConfig(format!(
                "mel range {}..{f_max} Hz invalid for sample rate {sample_rate}",
                cfg.f_min
            )));
        }
        let (m_lo, m_hi) = (hz_to_mel(cfg.f_min), hz_to_mel(f_max));
        let edges_hz: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = nyquist / (n_bins - 1) as f64;
        let mut weights = vec![0.0; cfg.n_mels * n_bins];
        for m in 0..cfg.n_mels {
            let (l, c, r) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let (a, b) = (f - bin_hz / 2.0, f + bin_hz / 2.0);
                if b <= l || a >= r {
                    continue;
                }
                let area = triangle_cdf(b, l, c, r) - triangle_cdf(a, l, c, r);
                weights[m * n_bins + k] = area / bin_hz;
            }
        }
        Ok(Self {
            n_mels: cfg.n_mels,
            n_bins,
            weights,
            centers_hz: edges_hz[1..=cfg.n_mels].to_vec(),
            edges_hz,
        })
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    /// Filter whose center lies nearest (in mel) to `hz`.
    pub fn nearest_filter(&self, hz: f64) -> usize {
        let target = hz_to_mel(hz);
        (0..self.n_mels)
            .min_by(|&a, &b| {
                let da = (hz_to_mel(self.centers_hz[a]) - target).abs();
                let db = (hz_to_mel(self.centers_hz[b]) - target).abs();
                da.total_cmp(&db)
            })
            .expect("n_mels >= 2")
    }
}
