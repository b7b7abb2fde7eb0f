//! Fold-wise experiment: optional SSL pretraining, fine-tuning and test
//! evaluation over a stratified k-fold plan.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{apply_balance, build_balance_plan, make_view_pairs, AugmentError};
use crate::config::{ConfigError, ExperimentConfig, InitMode};
use crate::dataset::{kfold, load_clip, load_manifest, stratified_split, AudioClip, DatasetError, Manifest, ManifestOptions, SplitPlan};
use crate::dsp::{DspError, SpectrogramBuilder};
use crate::eval::{balanced_accuracy, mean_std, silhouette, EvalError};
use crate::models::{Classifier, ModelError, ParamStore, SslModel};
use crate::rng::{domain, stream};
use crate::ssl::{pretrain, PairSet, PretrainConfig, PretrainResult, SslError};
use crate::tensor::{Checkpoint, CheckpointError, Tensor, TensorError};
use crate::train::{features, finetune, predict, FinetuneResult, LabeledSet, TrainError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ssl(#[from] SslError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{what} not found at {path}; run `{stage}` first")]
    MissingStage { stage: &'static str, what: String, path: PathBuf },
    #[error("all {0} folds failed")]
    AllFoldsFailed(usize),
}

/// Process exit status class of an error.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Failure {
    Config = 1,
    Data = 2,
    Numerical = 3,
}

impl ExperimentError {
    pub fn failure(&self) -> Failure {
        use ExperimentError as E;
        match self {
            E::Config(_) | E::MissingStage { .. } => Failure::Config,
            E::Ssl(SslError::NonFinite { .. })
            | E::Ssl(SslError::Tensor(TensorError::NonFinite { .. }))
            | E::Train(TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient(_))
            | E::Tensor(TensorError::NonFinite { .. }) => Failure::Numerical,
            E::Ssl(SslError::Config(_)) | E::Train(TrainError::Config(_)) => Failure::Config,
            _ => Failure::Data,
        }
    }

    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Which subset of which fold a stage touched.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessEvent {
    pub fold: usize,
    pub stage: String,
    pub subset: Subset,
    pub labels: bool,
}

/// Record of every data access, in order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditLog {
    pub events: Vec<AccessEvent>,
}

impl AuditLog {
    fn record(&mut self, fold: usize, stage: &str, subset: Subset, labels: bool) {
        self.events.push(AccessEvent {
            fold,
            stage: stage.into(),
            subset,
            labels,
        });
    }

    /// Test data is read only by `evaluate`, after the fold's fine-tuning.
    pub fn test_access_ok(&self) -> bool {
        self.events.iter().enumerate().all(|(i, e)| {
            e.subset != Subset::Test
                || (e.stage == "evaluate"
                    && self.events[..i].iter().any(|p| p.fold == e.fold && p.stage == "finetune")
                    && !self.events[i..].iter().any(|p| p.fold == e.fold && p.stage == "finetune"))
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
}

/// Decoded clips with their max-norm spectrogram images.
pub struct Corpus {
    pub manifest: Manifest,
    pub clips: Vec<AudioClip>,
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub image_shape: [usize; 3],
    pub builder: SpectrogramBuilder,
}

impl Corpus {
    /// Loads every clip and its image. With `cache`, images are read from
    /// and written to `<cache>/<dsp hash>/<clip hash>.f32`.
    pub fn load(cfg: &ExperimentConfig, cache: Option<&Path>) -> Result<(Self, CacheStats), ExperimentError> {
        let manifest = load_manifest(
            &cfg.manifest,
            &ManifestOptions {
                classes: cfg.classes.clone(),
                clip_length_s: Some(cfg.clip_length_s),
            },
        )?;
        let builder = SpectrogramBuilder::new(&cfg.dsp, cfg.sample_rate)?;
        let shape = [1, cfg.dsp.mel.n_mels, cfg.dsp.width];
        let npix = shape[1] * shape[2];
        let cache_dir = cache.map(|c| c.join(cfg.dsp_hash()));
        if let Some(dir) = &cache_dir {
            std::fs::create_dir_all(dir).map_err(ExperimentError::io(dir))?;
        }
        let mut stats = CacheStats::default();
        let mut clips = Vec::with_capacity(manifest.len());
        let mut images = Vec::with_capacity(manifest.len());
        let mut index = String::from("path,label,clip_hash\n");
        for e in &manifest.entries {
            let clip = load_clip(&e.path, cfg.sample_rate, cfg.clip_length_s, &e.label)?;
            let image = match &cache_dir {
                Some(dir) => {
                    let bytes = std::fs::read(&e.path).map_err(ExperimentError::io(&e.path))?;
                    let key = hex::encode(&Sha256::digest(&bytes)[..16]);
                    index.push_str(&format!("{},{},{key}\n", e.path.display(), e.label));
                    let blob = dir.join(format!("{key}.f32"));
                    match read_blob(&blob, npix) {
                        Some(px) => {
                            stats.hits += 1;
                            px
                        }
                        None => {
                            stats.misses += 1;
                            let px = builder.build(&clip)?.pixels;
                            let raw: Vec<u8> = px.iter().flat_map(|v| v.to_le_bytes()).collect();
                            std::fs::write(&blob, raw).map_err(ExperimentError::io(&blob))?;
                            px
                        }
                    }
                }
                None => builder.build(&clip)?.pixels,
            };
            clips.push(clip);
            images.push(image);
        }
        if let Some(dir) = &cache_dir {
            let p = dir.join("index.csv");
            std::fs::write(&p, index).map_err(ExperimentError::io(&p))?;
            log::info!("spectrogram cache: {} hits, {} computed", stats.hits, stats.misses);
        }
        let labels = manifest.labels();
        Ok((
            Self {
                manifest,
                clips,
                images,
                labels,
                image_shape: shape,
                builder,
            },
            stats,
        ))
    }

    pub fn classes(&self) -> &[String] {
        &self.manifest.classes
    }

    /// Class indices scored by balanced accuracy.
    pub fn score_classes(&self, cfg: &ExperimentConfig) -> Vec<usize> {
        (0..self.classes().len())
            .filter(|&c| !cfg.score_exclude.contains(&self.classes()[c]))
            .collect()
    }

    fn stack(&self, images: &[&[f32]]) -> Tensor<f32> {
        let [c, h, w] = self.image_shape;
        let data: Vec<f32> = images.iter().flat_map(|p| p.iter().copied()).collect();
        Tensor::new(&[images.len(), c, h, w], data).expect("image size fixed by the builder")
    }

    fn images_of(&self, idx: &[usize]) -> Tensor<f32> {
        let v: Vec<&[f32]> = idx.iter().map(|&i| self.images[i].as_slice()).collect();
        self.stack(&v)
    }

    fn render(&self, clips: &[AudioClip]) -> Result<Tensor<f32>, ExperimentError> {
        let px = clips
            .iter()
            .map(|c| self.builder.build(c).map(|im| im.pixels))
            .collect::<Result<Vec<_>, _>>()?;
        let v: Vec<&[f32]> = px.iter().map(Vec::as_slice).collect();
        Ok(self.stack(&v))
    }

    /// `views_per_clip` view pairs per clip; pair `j` of clip `i` is keyed
    /// by `j·n + i` so every pair has its own stream.
    fn view_pairs(&self, idx: &[usize], cfg: &ExperimentConfig) -> Result<PairSet, ExperimentError> {
        let n = self.clips.len();
        let mut ids = Vec::new();
        let mut clips = Vec::new();
        for j in 0..cfg.pretrain.views_per_clip {
            for &i in idx {
                ids.push(j * n + i);
                clips.push(&self.clips[i]);
            }
        }
        let pairs = make_view_pairs(&clips, &ids, &cfg.augment, cfg.seed)?;
        let (a, b): (Vec<AudioClip>, Vec<AudioClip>) = pairs.into_iter().map(|p| (p.view_a, p.view_b)).unzip();
        Ok(PairSet::new(self.render(&a)?, self.render(&b)?)?)
    }
}

fn read_blob(path: &Path, npix: usize) -> Option<Vec<f32>> {
    let bytes = std::fs::read(path).ok()?;
    if bytes.len() != npix * 4 {
        return None;
    }
    Some(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
}

/// Stratified train/test split followed by k folds of the training part.
pub fn split_plan(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<SplitPlan, ExperimentError> {
    let plan = stratified_split(&corpus.labels, corpus.classes(), cfg.split.test_fraction, cfg.seed)?;
    Ok(kfold(plan, &corpus.labels, corpus.classes(), cfg.split.k, cfg.seed)?)
}

/// Per-class share `fraction` of `idx` (at least one clip per class). The
/// kept clips are a prefix of a seeded shuffle, so smaller fractions are
/// subsets of larger ones.
pub fn label_subset(idx: &[usize], labels: &[usize], n_classes: usize, fraction: f64, seed: u64, fold: usize) -> Vec<usize> {
    if fraction >= 1.0 {
        return idx.to_vec();
    }
    let mut out = Vec::new();
    for c in 0..n_classes {
        let mut members: Vec<usize> = idx.iter().copied().filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut stream(seed, &[domain::SUBSET, fold as u64, c as u64]));
        let keep = ((members.len() as f64 * fraction).round() as usize).clamp(1, members.len());
        out.extend_from_slice(&members[..keep]);
    }
    out.sort_unstable();
    out
}

/// SSL pretraining on the fold's training clips, validated on its
/// validation clips. Labels are not read.
pub fn pretrain_fold(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    plan: &SplitPlan,
    fold: usize,
    audit: &mut AuditLog,
) -> Result<PretrainResult, ExperimentError> {
    let loss = cfg
        .ssl_loss()
        .ok_or_else(|| ConfigError::Invalid(format!("init {} has no SSL stage", cfg.init.name())))?;
    audit.record(fold, "pretrain", Subset::Train, false);
    let train = corpus.view_pairs(&plan.fold_train(fold), cfg)?;
    audit.record(fold, "pretrain", Subset::Val, false);
    let val = corpus.view_pairs(plan.fold_val(fold), cfg)?;
    let model = SslModel::new(cfg.encoder.clone(), cfg.projector)?;
    let pcfg = PretrainConfig {
        loss,
        optimizer: cfg.pretrain.optimizer,
        epochs: cfg.pretrain.epochs,
        batch_size: cfg.pretrain.batch_size,
        seed: cfg.seed,
    };
    Ok(pretrain(&model, model.init(cfg.seed)?, &train, &val, &pcfg)?)
}

/// Balanced, possibly subsampled training set of one fold.
pub fn finetune_train_set(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    plan: &SplitPlan,
    fold: usize,
) -> Result<LabeledSet, ExperimentError> {
    let n_cls = corpus.classes().len();
    let idx = label_subset(&plan.fold_train(fold), &corpus.labels, n_cls, cfg.finetune.fraction, cfg.seed, fold);
    let labels: Vec<usize> = idx.iter().map(|&i| corpus.labels[i]).collect();
    if !cfg.balance.enabled {
        return Ok(LabeledSet::new(corpus.images_of(&idx), labels)?);
    }
    let mut counts = vec![0usize; n_cls];
    for &l in &labels {
        counts[l] += 1;
    }
    let max_c = ((cfg.balance.max_c as f64 * cfg.finetune.fraction).round() as usize).max(1);
    let bplan = build_balance_plan(corpus.classes(), &counts, max_c)?;
    let clips: Vec<&AudioClip> = idx.iter().map(|&i| &corpus.clips[i]).collect();
    let (rendered, items) = apply_balance(&clips, &labels, &idx, &bplan, &cfg.augment, cfg.seed)?;
    let mut px: Vec<Vec<f32>> = Vec::with_capacity(items.len());
    for (item, clip) in items.iter().zip(&rendered) {
        px.push(match item.copy {
            None => corpus.images[item.source_id].clone(),
            Some(_) => corpus.builder.build(clip)?.pixels,
        });
    }
    let v: Vec<&[f32]> = px.iter().map(Vec::as_slice).collect();
    Ok(LabeledSet::new(corpus.stack(&v), items.iter().map(|it| it.label).collect())?)
}

pub fn classifier(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Classifier, ExperimentError> {
    Ok(Classifier::new(cfg.encoder.clone(), corpus.classes().len())?)
}

/// Fine-tunes from `encoder` (or from scratch) and keeps the best
/// validation epoch.
pub fn finetune_fold(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    plan: &SplitPlan,
    fold: usize,
    encoder: Option<&ParamStore>,
    audit: &mut AuditLog,
) -> Result<FinetuneResult, ExperimentError> {
    let model = classifier(cfg, corpus)?;
    let init = match encoder {
        Some(enc) => model.from_encoder(enc, cfg.seed)?,
        None => model.init(cfg.seed)?,
    };
    audit.record(fold, "finetune", Subset::Train, true);
    let train = finetune_train_set(cfg, corpus, plan, fold)?;
    audit.record(fold, "finetune", Subset::Val, true);
    let vidx = plan.fold_val(fold);
    let val = LabeledSet::new(corpus.images_of(vidx), vidx.iter().map(|&i| corpus.labels[i]).collect())?;
    Ok(finetune(
        &model,
        init,
        &train,
        &val,
        &corpus.score_classes(cfg),
        &cfg.finetune.optimizer,
        &cfg.finetune_run(),
    )?)
}

/// Test-set predictions, score and penultimate features of one fold.
#[derive(Clone, Debug)]
pub struct FoldEval {
    pub test_indices: Vec<usize>,
    pub predictions: Vec<usize>,
    pub balanced_accuracy: f64,
    /// `[n_test, D]`.
    pub features: Tensor<f32>,
}

pub fn evaluate_fold(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    plan: &SplitPlan,
    fold: usize,
    store: &ParamStore,
    audit: &mut AuditLog,
) -> Result<FoldEval, ExperimentError> {
    let model = classifier(cfg, corpus)?;
    let tidx = plan.test_indices.clone();
    audit.record(fold, "evaluate", Subset::Test, false);
    let images = corpus.images_of(&tidx);
    let bs = cfg.finetune.batch_size;
    let predictions = predict(&model, store, &images, bs)?;
    let feats = features(&model, store, &images, bs)?;
    audit.record(fold, "evaluate", Subset::Test, true);
    let labels: Vec<usize> = tidx.iter().map(|&i| corpus.labels[i]).collect();
    let bacc = balanced_accuracy(&predictions, &labels, &corpus.score_classes(cfg))?;
    Ok(FoldEval {
        test_indices: tidx,
        predictions,
        balanced_accuracy: bacc,
        features: feats,
    })
}

/// Silhouette of test features restricted to the scored classes.
pub fn test_silhouette(cfg: &ExperimentConfig, corpus: &Corpus, eval: &FoldEval) -> Result<f64, ExperimentError> {
    let scored = corpus.score_classes(cfg);
    let d = eval.features.shape()[1];
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (r, &i) in eval.test_indices.iter().enumerate() {
        if scored.contains(&corpus.labels[i]) {
            x.push(eval.features.data()[r * d..(r + 1) * d].iter().map(|&v| v as f64).collect());
            y.push(corpus.labels[i]);
        }
    }
    Ok(silhouette(&x, &y)?)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_balanced_accuracy: Option<f64>,
    pub val_balanced_accuracy: Option<f64>,
    pub best_epoch: Option<usize>,
    pub ssl_best_epoch: Option<usize>,
    pub ssl_best_val_loss: Option<f64>,
    pub checkpoint: Option<String>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Metrics JSON: per-fold results plus the aggregate row. Wall-clock times
/// live in a separate timings file so this stays reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub init: InitMode,
    pub finetune_fraction: f64,
    pub scored_classes: Vec<String>,
    pub folds: Vec<FoldReport>,
    pub balanced_accuracy: Option<Summary>,
    /// On the test set, using the fold with the best validation score.
    pub silhouette: Option<f64>,
    pub silhouette_fold: Option<usize>,
}

impl MetricsReport {
    pub fn test_scores(&self) -> Vec<Option<f64>> {
        self.folds.iter().map(|f| f.test_balanced_accuracy).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Stage durations in seconds, keyed `fold<k>.<stage>`.
pub type Timings = BTreeMap<String, f64>;

/// Everything a fold produced, for callers that keep artifacts.
#[derive(Clone, Debug, Default)]
pub struct FoldArtifacts {
    pub ssl: Option<PretrainResult>,
    pub finetune: Option<FinetuneResult>,
    pub eval: Option<FoldEval>,
}

pub struct ExperimentOutput {
    pub report: MetricsReport,
    pub folds: Vec<FoldArtifacts>,
    pub audit: AuditLog,
    pub timings: Timings,
    pub plan: SplitPlan,
}

fn external_encoder(cfg: &ExperimentConfig) -> Result<Option<ParamStore>, ExperimentError> {
    match (cfg.init, &cfg.checkpoint) {
        (InitMode::Checkpoint, Some(p)) => Ok(Some(crate::ssl::extract_encoder(&Checkpoint::load(p)?)?)),
        _ => Ok(None),
    }
}

fn run_fold(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    plan: &SplitPlan,
    fold: usize,
    external: Option<&ParamStore>,
    audit: &mut AuditLog,
    timings: &mut Timings,
    art: &mut FoldArtifacts,
) -> Result<(), ExperimentError> {
    let mut encoder = external.cloned();
    if cfg.init.is_ssl() {
        let t = Instant::now();
        let r = pretrain_fold(cfg, corpus, plan, fold, audit)?;
        timings.insert(format!("fold{fold}.pretrain"), t.elapsed().as_secs_f64());
        encoder = Some(r.best.filter_prefix("encoder."));
        art.ssl = Some(r);
    }
    let t = Instant::now();
    let ft = finetune_fold(cfg, corpus, plan, fold, encoder.as_ref(), audit)?;
    timings.insert(format!("fold{fold}.finetune"), t.elapsed().as_secs_f64());
    let t = Instant::now();
    let ev = evaluate_fold(cfg, corpus, plan, fold, &ft.best, audit)?;
    timings.insert(format!("fold{fold}.evaluate"), t.elapsed().as_secs_f64());
    art.finetune = Some(ft);
    art.eval = Some(ev);
    Ok(())
}

impl FoldReport {
    pub fn from_artifacts(fold: usize, a: &FoldArtifacts, error: Option<String>) -> Self {
        Self {
            fold,
            test_balanced_accuracy: a.eval.as_ref().map(|e| e.balanced_accuracy),
            val_balanced_accuracy: a.finetune.as_ref().map(|r| r.best_val_balanced_accuracy),
            best_epoch: a.finetune.as_ref().map(|r| r.best_epoch),
            ssl_best_epoch: a.ssl.as_ref().map(|r| r.best_epoch),
            ssl_best_val_loss: a.ssl.as_ref().map(|r| r.best_val_loss),
            checkpoint: a.finetune.as_ref().map(|_| format!("fold{fold}/classifier.ckpt")),
            error,
        }
    }
}

/// Aggregates fold reports; silhouette comes from the scored fold with the
/// best validation balanced accuracy (earliest wins ties).
pub fn build_report(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    reports: Vec<FoldReport>,
    evals: &[Option<&FoldEval>],
) -> Result<MetricsReport, ExperimentError> {
    let scores: Vec<f64> = reports.iter().filter_map(|r| r.test_balanced_accuracy).collect();
    let balanced_accuracy = (!scores.is_empty()).then(|| {
        let (mean, std) = mean_std(&scores);
        Summary {
            mean,
            std,
            n: scores.len(),
        }
    });
    let best = reports
        .iter()
        .filter(|r| r.test_balanced_accuracy.is_some())
        .filter_map(|r| r.val_balanced_accuracy.map(|v| (r.fold, v)))
        .fold(None::<(usize, f64)>, |acc, (f, v)| match acc {
            Some((_, bv)) if bv >= v => acc,
            _ => Some((f, v)),
        });
    let silhouette = match best {
        Some((f, _)) => Some(test_silhouette(cfg, corpus, evals[f].expect("scored fold"))?),
        None => None,
    };
    let scored = corpus.score_classes(cfg).iter().map(|&c| corpus.classes()[c].clone()).collect();
    Ok(MetricsReport {
        config_hash: cfg.hash(),
        init: cfg.init,
        finetune_fraction: cfg.finetune.fraction,
        scored_classes: scored,
        folds: reports,
        balanced_accuracy,
        silhouette,
        silhouette_fold: best.map(|b| b.0),
    })
}

/// Runs every fold in memory. A failing fold is recorded in the report and
/// the remaining folds still run.
pub fn run_experiment(cfg: &ExperimentConfig, cache: Option<&Path>) -> Result<ExperimentOutput, ExperimentError> {
    cfg.validate_files()?;
    let (corpus, _) = Corpus::load(cfg, cache)?;
    let plan = split_plan(cfg, &corpus)?;
    let external = external_encoder(cfg)?;
    let mut audit = AuditLog::default();
    let mut timings = Timings::new();
    let mut folds = Vec::with_capacity(plan.k);
    let mut errors = Vec::with_capacity(plan.k);
    for f in 0..plan.k {
        let mut art = FoldArtifacts::default();
        let r = run_fold(cfg, &corpus, &plan, f, external.as_ref(), &mut audit, &mut timings, &mut art);
        if let Err(e) = &r {
            log::warn!("fold {f} failed: {e}");
        }
        errors.push(r.err().map(|e| e.to_string()));
        folds.push(art);
    }
    if errors.iter().all(Option::is_some) {
        return Err(ExperimentError::AllFoldsFailed(plan.k));
    }
    let reports = folds
        .iter()
        .zip(errors)
        .enumerate()
        .map(|(f, (a, e))| FoldReport::from_artifacts(f, a, e))
        .collect();
    let evals: Vec<Option<&FoldEval>> = folds.iter().map(|a| a.eval.as_ref()).collect();
    let report = build_report(cfg, &corpus, reports, &evals)?;
    Ok(ExperimentOutput {
        report,
        folds,
        audit,
        timings,
        plan,
    })
}
