//! On-disk stages behind the command-line tool. Every stage writes under
//! `<out>/<config hash>/` and leaves completed artifacts untouched on rerun.
//!
//! ```text
//! <out>/cache/<dsp hash>/<clip hash>.f32   spectrogram blobs + index.csv
//! <out>/<hash>/config.toml, split.json
//! <out>/<hash>/fold<k>/ssl.ckpt, ssl_loss.csv, pretrain.json
//! <out>/<hash>/fold<k>/classifier.ckpt, finetune.csv, finetune.json
//! <out>/<hash>/metrics.json, features.csv, timings/<stage>.json
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::config::{ExperimentConfig, InitMode};
use crate::dataset::SplitPlan;
use crate::eval::{paired_ttest, write_features_csv, FeatureRow, TTest};
use crate::experiment::{
    build_report, evaluate_fold, finetune_fold, pretrain_fold, split_plan, AuditLog, CacheStats, Corpus,
    ExperimentError, FoldEval, FoldReport, MetricsReport, Timings,
};
use crate::models::ParamStore;
use crate::ssl::{extract_encoder, write_loss_csv};
use crate::tensor::Checkpoint;
use crate::train::FinetuneEpoch;

type Result<T> = std::result::Result<T, ExperimentError>;

pub fn run_dir(cfg: &ExperimentConfig, out: &Path) -> PathBuf {
    out.join(cfg.hash())
}

pub fn cache_dir(out: &Path) -> PathBuf {
    out.join("cache")
}

fn fold_dir(run: &Path, fold: usize) -> PathBuf {
    run.join(format!("fold{fold}"))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("serializable") + "\n";
    write_file(path, text.as_bytes())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(ExperimentError::io(path))?;
    serde_json::from_str(&text).map_err(|e| ExperimentError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
    })
}

/// Writes through a temporary file so a crashed stage leaves no partial
/// artifact behind.
fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(ExperimentError::io(dir))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(ExperimentError::io(&tmp))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(ExperimentError::io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(ExperimentError::io(path))
}

fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    write_file(path, &store.to_checkpoint().to_bytes())
}

fn missing(stage: &'static str, what: &str, path: &Path) -> ExperimentError {
    ExperimentError::MissingStage {
        stage,
        what: what.into(),
        path: path.to_path_buf(),
    }
}

fn write_timings(run: &Path, stage: &str, t: &Timings) -> Result<()> {
    write_json(&run.join("timings").join(format!("{stage}.json")), t)
}

#[derive(Clone, Debug, Serialize)]
pub struct PrepareSummary {
    pub run_dir: PathBuf,
    pub clips: usize,
    pub cache: CacheStats,
}

/// Caches spectrograms and writes the split plan.
pub fn cmd_prepare(cfg: &ExperimentConfig, out: &Path) -> Result<PrepareSummary> {
    cfg.validate_files()?;
    let run = run_dir(cfg, out);
    std::fs::create_dir_all(&run).map_err(ExperimentError::io(&run))?;
    let t = Instant::now();
    let (corpus, cache) = Corpus::load(cfg, Some(&cache_dir(out)))?;
    let plan = split_plan(cfg, &corpus)?;
    let split = run.join("split.json");
    if split.is_file() {
        log::info!("prepare: {} already complete", run.display());
    } else {
        write_file(&run.join("config.toml"), cfg.to_toml().as_bytes())?;
        write_json(&split, &plan)?;
        write_timings(&run, "prepare", &Timings::from([("prepare".to_string(), t.elapsed().as_secs_f64())]))?;
    }
    Ok(PrepareSummary {
        run_dir: run,
        clips: corpus.clips.len(),
        cache,
    })
}

fn load_prepared(cfg: &ExperimentConfig, out: &Path) -> Result<(PathBuf, Corpus, SplitPlan)> {
    cfg.validate_files()?;
    let run = run_dir(cfg, out);
    let split = run.join("split.json");
    if !split.is_file() {
        return Err(missing("prepare", "split plan", &split));
    }
    let plan: SplitPlan = read_json(&split)?;
    let (corpus, _) = Corpus::load(cfg, Some(&cache_dir(out)))?;
    Ok((run, corpus, plan))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct PretrainSummary {
    best_epoch: usize,
    best_val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct FinetuneSummary {
    best_epoch: usize,
    best_val_balanced_accuracy: f64,
}

fn fold_error(run: &Path, fold: usize) -> Option<String> {
    std::fs::read_to_string(fold_dir(run, fold).join("error.txt")).ok()
}

fn record_fold_error(run: &Path, fold: usize, e: &ExperimentError) -> Result<()> {
    log::warn!("fold {fold} failed: {e}");
    write_file(&fold_dir(run, fold).join("error.txt"), e.to_string().as_bytes())
}

/// Per-fold driver: skips completed or failed folds, records new failures
/// and errors out only when no fold is usable.
fn for_each_fold(
    run: &Path,
    k: usize,
    done: impl Fn(&Path) -> bool,
    mut body: impl FnMut(usize, &Path) -> Result<()>,
) -> Result<()> {
    let mut first_err = None;
    let mut ok = 0;
    for f in 0..k {
        let dir = fold_dir(run, f);
        if fold_error(run, f).is_some() {
            continue;
        }
        if done(&dir) {
            ok += 1;
            continue;
        }
        match body(f, &dir) {
            Ok(()) => ok += 1,
            Err(e) if matches!(e, ExperimentError::MissingStage { .. } | ExperimentError::Config(_)) => return Err(e),
            Err(e) => {
                record_fold_error(run, f, &e)?;
                first_err.get_or_insert(e);
            }
        }
    }
    match (ok, first_err) {
        (0, Some(e)) => Err(e),
        (0, None) => Err(ExperimentError::AllFoldsFailed(k)),
        _ => Ok(()),
    }
}

/// SSL pretraining per fold; a no-op for non-SSL init modes.
pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let (run, corpus, plan) = load_prepared(cfg, out)?;
    let Some(loss) = cfg.ssl_loss() else {
        log::info!("pretrain: init {} has no SSL stage", cfg.init.name());
        return Ok(run);
    };
    let mut timings = Timings::new();
    for_each_fold(
        &run,
        plan.k,
        |d| d.join("ssl.ckpt").is_file(),
        |f, dir| {
            let t = Instant::now();
            let r = pretrain_fold(cfg, &corpus, &plan, f, &mut AuditLog::default())?;
            timings.insert(format!("fold{f}.pretrain"), t.elapsed().as_secs_f64());
            std::fs::create_dir_all(dir).map_err(ExperimentError::io(dir))?;
            write_loss_csv(&r.curve, &loss, &dir.join("ssl_loss.csv"))?;
            write_json(
                &dir.join("pretrain.json"),
                &PretrainSummary {
                    best_epoch: r.best_epoch,
                    best_val_loss: r.best_val_loss,
                },
            )?;
            save_checkpoint(&dir.join("ssl.ckpt"), &r.best)
        },
    )?;
    if !timings.is_empty() {
        write_timings(&run, "pretrain", &timings)?;
    }
    Ok(run)
}

fn write_finetune_csv(path: &Path, curve: &[FinetuneEpoch]) -> Result<()> {
    let mut s = String::from("epoch,train_loss,train_accuracy,val_balanced_accuracy\n");
    for e in curve {
        s.push_str(&format!(
            "{},{:.9e},{:.9e},{:.9e}\n",
            e.epoch, e.train_loss, e.train_accuracy, e.val_balanced_accuracy
        ));
    }
    write_file(path, s.as_bytes())
}

/// Fine-tunes every fold from the configured initialization.
pub fn cmd_finetune(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let (run, corpus, plan) = load_prepared(cfg, out)?;
    let external = match (cfg.init, &cfg.checkpoint) {
        (InitMode::Checkpoint, Some(p)) => Some(extract_encoder(&Checkpoint::load(p)?)?),
        _ => None,
    };
    let mut timings = Timings::new();
    for_each_fold(
        &run,
        plan.k,
        |d| d.join("classifier.ckpt").is_file(),
        |f, dir| {
            let encoder = if cfg.init.is_ssl() {
                let p = dir.join("ssl.ckpt");
                if !p.is_file() {
                    return Err(missing("pretrain", &format!("fold {f} SSL checkpoint"), &p));
                }
                Some(extract_encoder(&Checkpoint::load(&p)?)?)
            } else {
                external.clone()
            };
            let t = Instant::now();
            let r = finetune_fold(cfg, &corpus, &plan, f, encoder.as_ref(), &mut AuditLog::default())?;
            timings.insert(format!("fold{f}.finetune"), t.elapsed().as_secs_f64());
            write_finetune_csv(&dir.join("finetune.csv"), &r.curve)?;
            write_json(
                &dir.join("finetune.json"),
                &FinetuneSummary {
                    best_epoch: r.best_epoch,
                    best_val_balanced_accuracy: r.best_val_balanced_accuracy,
                },
            )?;
            save_checkpoint(&dir.join("classifier.ckpt"), &r.best)
        },
    )?;
    if !timings.is_empty() {
        write_timings(&run, "finetune", &timings)?;
    }
    Ok(run)
}

/// Penultimate-layer features of the test clips of one evaluated fold.
pub fn export_features(corpus: &Corpus, eval: &FoldEval, path: &Path) -> Result<()> {
    let d = eval.features.shape()[1];
    let rows: Vec<FeatureRow> = eval
        .test_indices
        .iter()
        .enumerate()
        .map(|(r, &i)| FeatureRow {
            clip_id: clip_id(corpus, i),
            label: corpus.classes()[corpus.labels[i]].clone(),
            features: eval.features.data()[r * d..(r + 1) * d].to_vec(),
        })
        .collect();
    Ok(write_features_csv(path, &rows)?)
}

fn clip_id(corpus: &Corpus, i: usize) -> String {
    corpus.manifest.entries[i]
        .path
        .file_stem()
        .map_or_else(|| format!("clip{i}"), |s| s.to_string_lossy().into_owned())
}

/// Test metrics for every fine-tuned fold, the metrics report and the
/// feature dump of the silhouette fold.
pub fn cmd_evaluate(cfg: &ExperimentConfig, out: &Path) -> Result<MetricsReport> {
    let (run, corpus, plan) = load_prepared(cfg, out)?;
    let metrics = run.join("metrics.json");
    if metrics.is_file() {
        log::info!("evaluate: {} already complete", metrics.display());
        return read_json(&metrics);
    }
    let model = crate::experiment::classifier(cfg, &corpus)?;
    let mut reports = Vec::with_capacity(plan.k);
    let mut evals = Vec::with_capacity(plan.k);
    let mut timings = Timings::new();
    for f in 0..plan.k {
        let dir = fold_dir(&run, f);
        let mut rep = FoldReport {
            fold: f,
            error: fold_error(&run, f),
            ..Default::default()
        };
        if rep.error.is_none() {
            let ckpt = dir.join("classifier.ckpt");
            if !ckpt.is_file() {
                return Err(missing("finetune", &format!("fold {f} classifier checkpoint"), &ckpt));
            }
            let ft: FinetuneSummary = read_json(&dir.join("finetune.json"))?;
            rep.best_epoch = Some(ft.best_epoch);
            rep.val_balanced_accuracy = Some(ft.best_val_balanced_accuracy);
            if cfg.init.is_ssl() {
                let pt: PretrainSummary = read_json(&dir.join("pretrain.json"))?;
                rep.ssl_best_epoch = Some(pt.best_epoch);
                rep.ssl_best_val_loss = Some(pt.best_val_loss);
            }
            let store = ParamStore::from_checkpoint(&Checkpoint::load(&ckpt)?);
            model.check_store(&store)?;
            let t = Instant::now();
            let ev = evaluate_fold(cfg, &corpus, &plan, f, &store, &mut AuditLog::default())?;
            timings.insert(format!("fold{f}.evaluate"), t.elapsed().as_secs_f64());
            rep.test_balanced_accuracy = Some(ev.balanced_accuracy);
            rep.checkpoint = Some(format!("fold{f}/classifier.ckpt"));
            evals.push(Some(ev));
        } else {
            evals.push(None);
        }
        reports.push(rep);
    }
    let refs: Vec<Option<&FoldEval>> = evals.iter().map(Option::as_ref).collect();
    let report = build_report(cfg, &corpus, reports, &refs)?;
    if let Some(f) = report.silhouette_fold {
        export_features(&corpus, evals[f].as_ref().expect("scored fold"), &run.join("features.csv"))?;
    }
    write_file(&metrics, report.to_json().as_bytes())?;
    write_timings(&run, "evaluate", &timings)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub a: RunScores,
    pub b: RunScores,
    /// Paired over folds scored in both runs, `a − b`.
    pub ttest: TTest,
    pub a_mean_minus_b_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunScores {
    pub config_hash: String,
    pub init: InitMode,
    pub scores: Vec<f64>,
}

/// Paired two-tailed t-test over the folds both reports scored.
pub fn compare_reports(a: &MetricsReport, b: &MetricsReport) -> Result<CompareReport> {
    let (mut sa, mut sb) = (Vec::new(), Vec::new());
    for (x, y) in a.test_scores().into_iter().zip(b.test_scores()) {
        if let (Some(x), Some(y)) = (x, y) {
            sa.push(x);
            sb.push(y);
        }
    }
    let ttest = paired_ttest(&sa, &sb)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(CompareReport {
        a_mean_minus_b_mean: mean(&sa) - mean(&sb),
        a: RunScores {
            config_hash: a.config_hash.clone(),
            init: a.init,
            scores: sa,
        },
        b: RunScores {
            config_hash: b.config_hash.clone(),
            init: b.init,
            scores: sb,
        },
        ttest,
    })
}

/// Compares the evaluated runs of two configs; writes
/// `<out>/compare-<hash a>-<hash b>.json`.
pub fn cmd_compare(a: &ExperimentConfig, b: &ExperimentConfig, out: &Path) -> Result<CompareReport> {
    let load = |cfg: &ExperimentConfig| -> Result<MetricsReport> {
        let p = run_dir(cfg, out).join("metrics.json");
        if !p.is_file() {
            return Err(missing("evaluate", "metrics report", &p));
        }
        read_json(&p)
    };
    let report = compare_reports(&load(a)?, &load(b)?)?;
    write_json(&out.join(format!("compare-{}-{}.json", a.hash(), b.hash())), &report)?;
    Ok(report)
}
