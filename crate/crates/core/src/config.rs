//! Experiment configuration (TOML) and its content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::AugmentParamGrid;
use crate::dsp::{MelConfig, SpectrogramConfig, StftConfig};
use crate::models::{ConvBlock, EncoderConfig, ProjectorConfig};
use crate::ssl::{BarlowTwinsConfig, SslLoss, VicRegConfig};
use crate::train::{OptimizerConfig, TrainRunConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Where the classifier's encoder weights come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitMode {
    #[serde(rename = "random")]
    Random,
    /// Encoder tensors from `checkpoint` (stand-in for external weights).
    #[serde(rename = "checkpoint")]
    Checkpoint,
    #[serde(rename = "ssl-barlow")]
    SslBarlow,
    #[serde(rename = "ssl-vicreg")]
    SslVicreg,
}

impl InitMode {
    pub fn name(self) -> &'static str {
        match self {
            InitMode::Random => "random",
            InitMode::Checkpoint => "checkpoint",
            InitMode::SslBarlow => "ssl-barlow",
            InitMode::SslVicreg => "ssl-vicreg",
        }
    }

    pub fn is_ssl(self) -> bool {
        matches!(self, InitMode::SslBarlow | InitMode::SslVicreg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub k: usize,
    pub test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { k: 5, test_fraction: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceConfig {
    pub enabled: bool,
    /// Per-class target at fine-tune fraction 1.0; scaled by the fraction.
    pub max_c: usize,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self { enabled: true, max_c: 580 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// View pairs drawn per training clip.
    pub views_per_clip: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            epochs: 100,
            batch_size: 80,
            views_per_clip: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Share of each fold's training clips (per class) used for fine-tuning.
    pub fraction: f64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            epochs: 100,
            batch_size: 50,
            fraction: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Relative paths resolve against the config file's directory.
    pub manifest: PathBuf,
    pub seed: u64,
    pub sample_rate: u32,
    pub clip_length_s: f64,
    /// Declared class order; `None` takes first appearance in the manifest.
    pub classes: Option<Vec<String>>,
    /// Classes trained on but left out of balanced accuracy.
    pub score_exclude: Vec<String>,
    pub split: SplitConfig,
    pub augment: AugmentParamGrid,
    pub balance: BalanceConfig,
    pub dsp: SpectrogramConfig,
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
    pub init: InitMode,
    pub checkpoint: Option<PathBuf>,
    pub barlow_twins: BarlowTwinsConfig,
    pub vicreg: VicRegConfig,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.csv"),
            seed: 1030,
            sample_rate: 44_100,
            clip_length_s: 3.0,
            classes: None,
            score_exclude: vec!["animal".into(), "human".into(), "natural".into()],
            split: SplitConfig::default(),
            augment: AugmentParamGrid::default(),
            balance: BalanceConfig::default(),
            dsp: SpectrogramConfig::default(),
            encoder: EncoderConfig::default(),
            projector: ProjectorConfig::default(),
            init: InitMode::Random,
            checkpoint: None,
            barlow_twins: BarlowTwinsConfig::default(),
            vicreg: VicRegConfig::default(),
            pretrain: PretrainSection::default(),
            finetune: FinetuneSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Laptop-scale settings matched to the synthetic corpus: 8 kHz, 0.5 s
    /// clips, 32×32 images and a three-block encoder.
    pub fn desk(manifest: impl Into<PathBuf>) -> Self {
        let block = |filters, pool: Option<[usize; 2]>| ConvBlock {
            filters,
            kernel: [3, 3],
            stride: [1, 1],
            padding: Default::default(),
            batchnorm: true,
            pool,
        };
        Self {
            manifest: manifest.into(),
            sample_rate: 8_000,
            clip_length_s: 0.5,
            score_exclude: Vec::new(),
            balance: BalanceConfig { enabled: true, max_c: 32 },
            dsp: SpectrogramConfig {
                stft: StftConfig::with_window(256),
                mel: MelConfig {
                    n_mels: 32,
                    ..MelConfig::default()
                },
                width: 32,
            },
            encoder: EncoderConfig {
                input: [1, 32, 32],
                blocks: vec![block(8, Some([2, 2])), block(16, Some([2, 2])), block(32, None)],
            },
            projector: ProjectorConfig { units: 64 },
            pretrain: PretrainSection {
                optimizer: OptimizerConfig::adam(1e-3),
                epochs: 30,
                batch_size: 32,
                views_per_clip: 2,
            },
            finetune: FinetuneSection {
                optimizer: OptimizerConfig::adam(1e-3),
                epochs: 40,
                batch_size: 16,
                fraction: 1.0,
            },
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: Self = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        if cfg.manifest.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.manifest = dir.join(&cfg.manifest);
            }
        }
        if let Some(ck) = cfg.checkpoint.as_mut().filter(|c| c.is_relative()) {
            if let Some(dir) = path.parent() {
                *ck = dir.join(&*ck);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.sample_rate == 0 || !(self.clip_length_s > 0.0) {
            return bad(format!("sample rate {} / clip length {}", self.sample_rate, self.clip_length_s));
        }
        if self.split.k < 2 || !(self.split.test_fraction > 0.0 && self.split.test_fraction < 1.0) {
            return bad(format!("k {} / test fraction {}", self.split.k, self.split.test_fraction));
        }
        let f = self.finetune.fraction;
        if !(f > 0.0 && f <= 1.0) {
            return bad(format!("fine-tune fraction {f} outside (0, 1]"));
        }
        if self.encoder.input != [1, self.dsp.mel.n_mels, self.dsp.width] {
            return bad(format!(
                "encoder input {:?} does not match {}x{} spectrograms",
                self.encoder.input, self.dsp.mel.n_mels, self.dsp.width
            ));
        }
        self.encoder.trace().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.augment.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.dsp.stft.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.pretrain
            .optimizer
            .validate()
            .and(self.finetune.optimizer.validate())
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.pretrain_run()
            .validate()
            .and(self.finetune_run().validate())
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.pretrain.views_per_clip == 0 {
            return bad("views_per_clip must be at least 1".into());
        }
        if let Some(loss) = self.ssl_loss() {
            loss.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if self.init == InitMode::Checkpoint && self.checkpoint.is_none() {
            return bad("init = \"checkpoint\" needs a checkpoint path".into());
        }
        Ok(())
    }

    /// Validation plus existence of every referenced file.
    pub fn validate_files(&self) -> Result<(), ConfigError> {
        self.validate()?;
        if !self.manifest.is_file() {
            return Err(ConfigError::Invalid(format!("manifest {} not found", self.manifest.display())));
        }
        if let Some(ck) = self.checkpoint.as_ref().filter(|_| self.init == InitMode::Checkpoint) {
            if !ck.is_file() {
                return Err(ConfigError::Invalid(format!("checkpoint {} not found", ck.display())));
            }
        }
        Ok(())
    }

    pub fn ssl_loss(&self) -> Option<SslLoss> {
        match self.init {
            InitMode::SslBarlow => Some(SslLoss::BarlowTwins(self.barlow_twins)),
            InitMode::SslVicreg => Some(SslLoss::Vicreg(self.vicreg)),
            _ => None,
        }
    }

    pub fn pretrain_run(&self) -> TrainRunConfig {
        TrainRunConfig {
            epochs: self.pretrain.epochs,
            batch_size: self.pretrain.batch_size,
            seed: self.seed,
        }
    }

    pub fn finetune_run(&self) -> TrainRunConfig {
        TrainRunConfig {
            epochs: self.finetune.epochs,
            batch_size: self.finetune.batch_size,
            seed: self.seed,
        }
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        hash_json(self)
    }

    /// Hash of everything that determines a cached spectrogram.
    pub fn dsp_hash(&self) -> String {
        hash_json(&(self.sample_rate, self.clip_length_s, &self.dsp))
    }
}

fn hash_json<T: Serialize>(v: &T) -> String {
    let bytes = serde_json::to_vec(v).expect("config serializes to JSON");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_hash() {
        let cfg = ExperimentConfig::desk("m.csv");
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.dsp.stft.hop_length += 1;
        assert_ne!(other.hash(), cfg.hash());
        assert_ne!(other.dsp_hash(), cfg.dsp_hash());
        let mut epochs = cfg.clone();
        epochs.finetune.epochs = 3;
        assert_eq!(epochs.dsp_hash(), cfg.dsp_hash());
        assert_ne!(epochs.hash(), cfg.hash());
    }

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
        ExperimentConfig::desk("m.csv").validate().unwrap();
    }

    #[test]
    fn dotted_keys_and_overrides() {
        let cfg: ExperimentConfig = toml::from_str("init = \"ssl-vicreg\"\nfinetune.fraction = 0.2\nvicreg.mu_var = 0.0").unwrap();
        assert_eq!(cfg.init, InitMode::SslVicreg);
        assert_eq!(cfg.finetune.fraction, 0.2);
        assert!(matches!(cfg.ssl_loss(), Some(SslLoss::Vicreg(v)) if v.mu_var == 0.0 && v.lambda_inv == 25.0));
        assert!(toml::from_str::<ExperimentConfig>("no_such_key = 1").is_err());
        let bad = ExperimentConfig {
            finetune: FinetuneSection {
                fraction: 1.5,
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
