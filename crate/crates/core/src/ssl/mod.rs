//! Barlow Twins and VICReg objectives and Siamese pretraining with
//! best-validation-loss selection.

mod losses;

pub use losses::{
    barlow_twins_loss, cross_correlation, vicreg_loss, BarlowTwinsConfig, LossTerms, SslLoss, VicRegConfig, STD_EPS,
};

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{BnCtx, Mode, ModelError, ParamStore, SslModel, ENCODER};
use crate::rng::{domain, stream};
use crate::tensor::{Checkpoint, CheckpointError, Graph, Tensor, TensorError};
use crate::train::{batches, collect_grads, Optimizer, OptimizerConfig, TrainError};

#[derive(Debug, Error)]
pub enum SslError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("embedding batches must be 2-D and equal, got {0:?} and {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("batch of {0} rows; variance needs at least 2")]
    BatchTooSmall(usize),
    #[error("invalid ssl configuration: {0}")]
    Config(String),
    #[error("nonfinite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite { epoch: usize, batch: usize, detail: String },
    #[error("checkpoint has no encoder tensors")]
    NoEncoder,
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Matching view images: row `i` of `a` and `b` come from the same clip.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    pub a: Tensor<f32>,
    pub b: Tensor<f32>,
}

impl PairSet {
    pub fn new(a: Tensor<f32>, b: Tensor<f32>) -> Result<Self, SslError> {
        if a.shape() != b.shape() || a.ndim() != 4 {
            return Err(SslError::Shape(a.shape().to_vec(), b.shape().to_vec()));
        }
        Ok(Self { a, b })
    }

    pub fn len(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub loss: SslLoss,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// One row of the loss curve. `terms` are training-epoch means of the
/// unweighted loss terms.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub terms: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PretrainResult {
    /// Parameters after the epoch with the lowest validation loss.
    pub best: ParamStore,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub curve: Vec<EpochRecord>,
}

/// Mean SSL loss and terms over `pairs` with batchnorm in inference mode.
pub fn evaluate_loss(
    model: &SslModel,
    store: &ParamStore,
    pairs: &PairSet,
    loss: &SslLoss,
    batch_size: usize,
) -> Result<(f64, Vec<f64>), SslError> {
    let order: Vec<usize> = (0..pairs.len()).collect();
    let mut total = 0.0;
    let mut terms = vec![0.0; loss.term_names().len()];
    for idx in batches(&order, batch_size) {
        let mut g = Graph::<f32>::new();
        let (za, zb) = model.forward_pair(
            &mut g,
            store,
            &pairs.a.gather_rows(&idx),
            &pairs.b.gather_rows(&idx),
            Mode::Eval,
            &mut BnCtx::default(),
        )?;
        let (l, t) = loss.apply(&mut g, za, zb)?;
        let w = idx.len() as f64 / pairs.len() as f64;
        total += w * g.value(l).item() as f64;
        for (acc, v) in terms.iter_mut().zip(t.values) {
            *acc += w * v;
        }
    }
    Ok((total, terms))
}

/// Trains the Siamese model for `cfg.epochs`, keeping the parameters with
/// the lowest validation loss.
pub fn pretrain(
    model: &SslModel,
    init: ParamStore,
    train: &PairSet,
    val: &PairSet,
    cfg: &PretrainConfig,
) -> Result<PretrainResult, SslError> {
    cfg.loss.validate()?;
    if cfg.batch_size < 2 || cfg.epochs == 0 {
        return Err(SslError::Config(format!("batch size {} / epochs {}", cfg.batch_size, cfg.epochs)));
    }
    if train.len() < 2 || val.len() < 2 {
        return Err(SslError::BatchTooSmall(train.len().min(val.len())));
    }
    let mut store = init;
    let mut opt = Optimizer::new(cfg.optimizer)?;
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let n_terms = cfg.loss.term_names().len();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &[domain::SHUFFLE, epoch as u64]));
        let (mut sum, mut term_sum, mut seen) = (0.0, vec![0.0; n_terms], 0usize);
        for (bi, idx) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let nonfinite = |detail: String| SslError::NonFinite {
                epoch,
                batch: bi,
                detail,
            };
            let mut g = Graph::<f32>::new();
            let mut bn = BnCtx::default();
            let xa = train.a.gather_rows(&idx);
            let xb = train.b.gather_rows(&idx);
            let (za, zb) = match model.forward_pair(&mut g, &store, &xa, &xb, Mode::Train, &mut bn) {
                Err(ModelError::Tensor(TensorError::NonFinite { op })) => return Err(nonfinite(format!("forward {op}"))),
                r => r?,
            };
            let (l, terms) = match cfg.loss.apply(&mut g, za, zb) {
                Err(SslError::Tensor(TensorError::NonFinite { op })) => return Err(nonfinite(format!("loss {op}"))),
                r => r?,
            };
            let value = g.value(l).item() as f64;
            if !value.is_finite() || terms.values.iter().any(|v| !v.is_finite()) {
                return Err(nonfinite(format!("loss {value}, terms {:?}", terms.values)));
            }
            let grads = g.backward(l)?;
            opt.step(&mut store, &collect_grads(&g, &grads))?;
            bn.commit(&mut store)?;
            sum += value * idx.len() as f64;
            for (acc, v) in term_sum.iter_mut().zip(&terms.values) {
                *acc += v * idx.len() as f64;
            }
            seen += idx.len();
        }
        let (val_loss, _) = evaluate_loss(model, &store, val, &cfg.loss, cfg.batch_size)?;
        let rec = EpochRecord {
            epoch,
            train_loss: sum / seen as f64,
            val_loss,
            terms: term_sum.iter().map(|v| v / seen as f64).collect(),
        };
        log::info!("ssl epoch {epoch}: train {:.5} val {:.5}", rec.train_loss, rec.val_loss);
        if !val_loss.is_finite() {
            return Err(SslError::NonFinite {
                epoch,
                batch: usize::MAX,
                detail: format!("validation loss {val_loss}"),
            });
        }
        if best.as_ref().is_none_or(|(_, b, _)| val_loss < *b) {
            best = Some((epoch, val_loss, store.clone()));
        }
        curve.push(rec);
    }
    let (best_epoch, best_val_loss, best) = best.expect("at least one epoch");
    Ok(PretrainResult {
        best,
        best_epoch,
        best_val_loss,
        curve,
    })
}

/// `[n, N]` embeddings (eval mode) for every image.
pub fn embed_all(model: &SslModel, store: &ParamStore, images: &Tensor<f32>, batch_size: usize) -> Result<Tensor<f32>, SslError> {
    let n = images.shape()[0];
    let mut rows = Vec::with_capacity(n * model.projector.units);
    let order: Vec<usize> = (0..n).collect();
    for idx in order.chunks(batch_size.max(1)) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(images.gather_rows(idx));
        let z = model.embed(&mut g, store, x, Mode::Eval, &mut BnCtx::default())?;
        rows.extend_from_slice(g.value(z).data());
    }
    Ok(Tensor::new(&[n, model.projector.units], rows)?)
}

/// Population standard deviation of every embedding dimension.
pub fn per_dim_std(z: &Tensor<f32>) -> Vec<f64> {
    let (n, d) = (z.shape()[0], z.shape()[1]);
    (0..d)
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|i| z.data()[i * d + j] as f64).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
        })
        .collect()
}

/// `epoch,train_loss,val_loss,<terms>` CSV.
pub fn write_loss_csv(curve: &[EpochRecord], loss: &SslLoss, path: &Path) -> Result<(), SslError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,train_loss,val_loss,{}", loss.term_names().join(","))?;
    for r in curve {
        let terms: Vec<String> = r.terms.iter().map(|v| format!("{v:.9e}")).collect();
        writeln!(f, "{},{:.9e},{:.9e},{}", r.epoch, r.train_loss, r.val_loss, terms.join(","))?;
    }
    f.flush()?;
    Ok(())
}

/// Encoder tensors of an SSL checkpoint; the projector is dropped.
pub fn extract_encoder(ckpt: &Checkpoint) -> Result<ParamStore, SslError> {
    let enc = ParamStore::from_checkpoint(ckpt).filter_prefix(&format!("{ENCODER}."));
    if enc.params.is_empty() {
        return Err(SslError::NoEncoder);
    }
    Ok(enc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{EncoderConfig, ProjectorConfig};
    use rand::Rng;

    fn model() -> SslModel {
        let enc = EncoderConfig::from_json(r#"{"input":[1,8,8],"blocks":[{"filters":3,"kernel":[3,3],"pool":[2,2]}]}"#).unwrap();
        SslModel::new(enc, ProjectorConfig { units: 4 }).unwrap()
    }

    fn pairs(n: usize, seed: u64) -> PairSet {
        let mut rng = stream(seed, &[]);
        let mut t = || Tensor::new(&[n, 1, 8, 8], (0..n * 64).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let a = t();
        let b = t();
        PairSet::new(a, b).unwrap()
    }

    #[test]
    fn pretrain_selects_min_validation_epoch() {
        let m = model();
        let cfg = PretrainConfig {
            loss: SslLoss::Vicreg(VicRegConfig::default()),
            optimizer: OptimizerConfig::adam(1e-3),
            epochs: 4,
            batch_size: 4,
            seed: 3,
        };
        let r = pretrain(&m, m.init(1).unwrap(), &pairs(12, 1), &pairs(6, 2), &cfg).unwrap();
        assert_eq!(r.curve.len(), 4);
        let min = r.curve.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(r.best_val_loss, min);
        assert_eq!(r.curve[r.best_epoch - 1].val_loss, min);
        let (v, _) = evaluate_loss(&m, &r.best, &pairs(6, 2), &cfg.loss, 4).unwrap();
        assert!((v - min).abs() < 1e-9);
    }

    #[test]
    fn extract_drops_projector() {
        let m = model();
        let store = m.init(1).unwrap();
        let enc = extract_encoder(&store.to_checkpoint()).unwrap();
        assert!(enc.params.keys().all(|k| k.starts_with("encoder.")));
        assert_eq!(enc.digest("encoder."), store.digest("encoder."));
        assert!(matches!(extract_encoder(&Checkpoint::new()), Err(SslError::NoEncoder)));
    }
}
