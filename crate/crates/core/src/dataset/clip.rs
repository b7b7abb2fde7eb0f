use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::DatasetError;
use crate::dsp::resample::resample;

/// Fixed-length mono signal with amplitudes in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub label: String,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32, label: impl Into<String>) -> Self {
        Self {
            samples,
            sample_rate,
            label: label.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / self.samples.len() as f64
    }

    /// Same label and rate, new samples.
    pub fn with_samples(&self, samples: Vec<f32>) -> Self {
        Self {
            samples,
            sample_rate: self.sample_rate,
            label: self.label.clone(),
        }
    }
}

/// Zero-pads the tail or keeps the centered `len` samples.
pub fn fit_length(mut samples: Vec<f32>, len: usize) -> Vec<f32> {
    if samples.len() >= len {
        let start = (samples.len() - len) / 2;
        samples.drain(..start);
        samples.truncate(len);
    } else {
        samples.resize(len, 0.0);
    }
    samples
}

pub fn target_len(sample_rate: u32, clip_length_s: f64) -> usize {
    (clip_length_s * sample_rate as f64).round() as usize
}

fn wav_err(path: &Path, e: hound::Error) -> DatasetError {
    match e {
        hound::Error::IoError(source) => DatasetError::Io {
            path: path.to_path_buf(),
            source,
        },
        hound::Error::Unsupported => DatasetError::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: "codec not supported".into(),
        },
        other => DatasetError::UnreadableWav {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

/// Reads PCM16 or float32 WAV, averages channels, resamples to `target_rate`
/// and fits the result to `round(clip_length_s · target_rate)` samples.
pub fn load_clip(path: &Path, target_rate: u32, clip_length_s: f64, label: &str) -> Result<AudioClip, DatasetError> {
    let mut reader = WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if !(1..=2).contains(&channels) {
        return Err(DatasetError::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: format!("{channels} channels"),
        });
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (fmt, bits) => {
            return Err(DatasetError::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: format!("{fmt:?} {bits}-bit"),
            })
        }
    };
    let mono: Vec<f32> = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    let resampled = resample(&mono, spec.sample_rate, target_rate);
    let samples = fit_length(resampled, target_len(target_rate, clip_length_s))
        .into_iter()
        .map(|v| v.clamp(-1.0, 1.0))
        .collect();
    Ok(AudioClip::new(samples, target_rate, label))
}

/// Writes a mono PCM16 WAV.
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<(), DatasetError> {
    let spec = WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(|e| wav_err(path, e))?;
    }
    w.finalize().map_err(|e| wav_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_length_pads_and_center_truncates() {
        assert_eq!(fit_length(vec![1.0, 2.0], 4), vec![1.0, 2.0, 0.0, 0.0]);
        assert_eq!(fit_length(vec![1.0, 2.0, 3.0, 4.0, 5.0], 3), vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn stereo_48k_to_mono_44k() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: 48_000,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let mut w = WavWriter::create(&path, spec).unwrap();
        for i in 0..144_000 {
            let v = (i as f32 * 0.01).sin() * 0.5;
            w.write_sample(v).unwrap();
            w.write_sample(-v * 0.5).unwrap();
        }
        w.finalize().unwrap();
        let clip = load_clip(&path, 44_100, 3.0, "x").unwrap();
        assert_eq!(clip.len(), 132_300);
        assert_eq!(clip.sample_rate, 44_100);
    }

    #[test]
    fn short_file_is_zero_padded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.wav");
        write_wav(&path, &vec![0.25; 20_000], 8000).unwrap();
        let clip = load_clip(&path, 8000, 3.0, "x").unwrap();
        assert_eq!(clip.len(), 24_000);
        assert!(clip.samples[20_000..].iter().all(|&v| v == 0.0));
        assert!((clip.samples[100] - 0.25).abs() < 1e-4);
    }

    #[test]
    fn unsupported_bit_depth() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b8.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 8,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&path, spec).unwrap();
        w.write_sample(3i8).unwrap();
        w.finalize().unwrap();
        assert!(matches!(load_clip(&path, 8000, 1.0, "x"), Err(DatasetError::UnsupportedFormat { .. })));
    }

    #[test]
    fn corrupt_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        std::fs::write(&path, b"RIFF\x00\x00junkjunk").unwrap();
        assert!(matches!(load_clip(&path, 8000, 1.0, "x"), Err(DatasetError::UnreadableWav { .. })));
    }
}
