//! Band-limited resampling by Kaiser-windowed sinc interpolation.

use std::f64::consts::PI;

const ZERO_CROSSINGS: f64 = 24.0;
const KAISER_BETA: f64 = 8.0;
const ROLLOFF: f64 = 0.95;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Resamples `input` by `ratio` (output rate / input rate) into exactly
/// `out_len` samples. Output sample `i` is read at input time `i / ratio`.
pub fn resample_to_len(input: &[f32], ratio: f64, out_len: usize) -> Vec<f32> {
    assert!(ratio > 0.0, "resample ratio must be positive");
    if input.is_empty() {
        return vec![0.0; out_len];
    }
    let cutoff = ratio.min(1.0) * ROLLOFF;
    let half_width = ZERO_CROSSINGS / cutoff;
    let norm = bessel_i0(KAISER_BETA);
    let n = input.len() as isize;
    (0..out_len)
        .map(|i| {
            let t = i as f64 / ratio;
            let lo = (t - half_width).ceil() as isize;
            let hi = (t + half_width).floor() as isize;
            let mut acc = 0.0;
            for k in lo.max(0)..=hi.min(n - 1) {
                let d = t - k as f64;
                let r = d / half_width;
                let w = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / norm;
                acc += input[k as usize] as f64 * cutoff * sinc(cutoff * d) * w;
            }
            acc as f32
        })
        .collect()
}

/// Converts between sample rates; output length is `round(len · to / from)`.
pub fn resample(input: &[f32], from_rate: u32, to_rate: u32) -> Vec<f32> {
    if from_rate == to_rate {
        return input.to_vec();
    }
    let ratio = to_rate as f64 / from_rate as f64;
    let out_len = (input.len() as f64 * ratio).round() as usize;
    resample_to_len(input, ratio, out_len)
}
