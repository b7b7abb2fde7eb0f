//! Optimizers and supervised fine-tuning.

mod optim;

pub use crate::experiment::run_experiment;
pub use optim::{collect_grads, Optimizer, OptimizerConfig};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{balanced_accuracy, EvalError};
use crate::models::{BnCtx, Classifier, Mode, ModelError, ParamStore};
use crate::rng::{domain, stream};
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("nonfinite gradient for {0}")]
    NonFiniteGradient(String),
    #[error("nonfinite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss { epoch: usize, batch: usize, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Splits `order` into consecutive batches of `batch_size`; a trailing
/// single row is merged into the previous batch.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

/// Images `[n, c, h, w]` in `[0, 1]` with class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>) -> Result<Self, TrainError> {
        if images.ndim() != 4 || images.shape()[0] != labels.len() {
            return Err(TrainError::Config(format!(
                "images {:?} for {} labels",
                images.shape(),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 50,
            seed: 1030,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(TrainError::Config(format!(
                "epochs {} / batch size {}",
                self.epochs, self.batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_balanced_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneResult {
    pub best: ParamStore,
    pub best_epoch: usize,
    pub best_val_balanced_accuracy: f64,
    pub curve: Vec<FinetuneEpoch>,
}

/// Argmax class per image, batchnorm in inference mode.
pub fn predict(model: &Classifier, store: &ParamStore, images: &Tensor<f32>, batch_size: usize) -> Result<Vec<usize>, TrainError> {
    let n = images.shape()[0];
    let mut out = Vec::with_capacity(n);
    let order: Vec<usize> = (0..n).collect();
    for idx in order.chunks(batch_size.max(1)) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(images.gather_rows(idx));
        let logits = model.forward(&mut g, store, x, Mode::Eval, &mut BnCtx::default())?;
        for row in g.value(logits).data().chunks(model.n_classes) {
            out.push(argmax(row));
        }
    }
    Ok(out)
}

/// `[n, D]` penultimate-layer features, batchnorm in inference mode.
pub fn features(model: &Classifier, store: &ParamStore, images: &Tensor<f32>, batch_size: usize) -> Result<Tensor<f32>, TrainError> {
    let n = images.shape()[0];
    let d = model.encoder.output_dim();
    let mut rows = Vec::with_capacity(n * d);
    let order: Vec<usize> = (0..n).collect();
    for idx in order.chunks(batch_size.max(1)) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(images.gather_rows(idx));
        let h = model.features(&mut g, store, x, Mode::Eval, &mut BnCtx::default())?;
        rows.extend_from_slice(g.value(h).data());
    }
    Ok(Tensor::new(&[n, d], rows)?)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Softmax cross-entropy training; keeps the epoch with the best validation
/// balanced accuracy over `score_classes` (earliest wins ties).
pub fn finetune(
    model: &Classifier,
    init: ParamStore,
    train: &LabeledSet,
    val: &LabeledSet,
    score_classes: &[usize],
    opt: &OptimizerConfig,
    run: &TrainRunConfig,
) -> Result<FinetuneResult, TrainError> {
    run.validate()?;
    if train.len() < 2 || val.is_empty() {
        return Err(TrainError::Config(format!("{} training / {} validation images", train.len(), val.len())));
    }
    let mut store = init;
    let mut optimizer = Optimizer::new(*opt)?;
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut curve = Vec::with_capacity(run.epochs);
    for epoch in 1..=run.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(run.seed, &[domain::SHUFFLE, 1 << 32 | epoch as u64]));
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for (bi, idx) in batches(&order, run.batch_size).into_iter().enumerate() {
            let fail = |detail: String| TrainError::NonFiniteLoss { epoch, batch: bi, detail };
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let mut g = Graph::<f32>::new();
            let mut bn = BnCtx::default();
            let x = g.constant(train.images.gather_rows(&idx));
            let logits = match model.forward(&mut g, &store, x, Mode::Train, &mut bn) {
                Err(ModelError::Tensor(TensorError::NonFinite { op })) => return Err(fail(format!("forward {op}"))),
                r => r?,
            };
            for (row, &y) in g.value(logits).data().chunks(model.n_classes).zip(&labels) {
                hits += (argmax(row) == y) as usize;
            }
            let loss = match g.softmax_cross_entropy(logits, &labels) {
                Err(TensorError::NonFinite { op }) => return Err(fail(format!("loss {op}"))),
                r => r?,
            };
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(fail(format!("loss {value}")));
            }
            let grads = g.backward(loss)?;
            optimizer.step(&mut store, &collect_grads(&g, &grads))?;
            bn.commit(&mut store)?;
            loss_sum += value * idx.len() as f64;
        }
        let preds = predict(model, &store, &val.images, run.batch_size)?;
        let bacc = balanced_accuracy(&preds, &val.labels, score_classes)?;
        let rec = FinetuneEpoch {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: hits as f64 / train.len() as f64,
            val_balanced_accuracy: bacc,
        };
        log::info!(
            "finetune epoch {epoch}: loss {:.5} acc {:.3} val bacc {:.3}",
            rec.train_loss,
            rec.train_accuracy,
            bacc
        );
        if best.as_ref().is_none_or(|(_, b, _)| bacc > *b) {
            best = Some((epoch, bacc, store.clone()));
        }
        curve.push(rec);
    }
    let (best_epoch, best_val_balanced_accuracy, best) = best.expect("at least one epoch");
    Ok(FinetuneResult {
        best,
        best_epoch,
        best_val_balanced_accuracy,
        curve,
    })
}
