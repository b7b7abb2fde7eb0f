//! Reference encoder, SSL projector and classification head built on the
//! gradient tape, with parameters kept in a [`ParamStore`].

mod encoder;
mod store;

pub use encoder::{ConvBlock, EncoderConfig};
pub use store::ParamStore;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{domain, stream};
use crate::tensor::{BatchStats, CheckpointError, Graph, Real, Tensor, TensorError, Var};

pub const ENCODER: &str = "encoder";
pub const PROJECTOR: &str = "projector";
pub const HEAD: &str = "head";

pub const BN_EPS: f64 = 1e-3;
pub const BN_MOMENTUM: f32 = 0.99;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("spatial size collapses to {shape:?} in block {block}")]
    Collapse { block: usize, shape: [usize; 3] },
    #[error("parameter {0} not found")]
    MissingParam(String),
}

/// Batchnorm behaviour for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, collected for the running-average update.
    Train,
    /// Stored running statistics.
    Eval,
}

/// Batch statistics gathered during a training-mode pass, by layer prefix.
pub struct BnCtx<T> {
    pub stats: Vec<(String, BatchStats<T>)>,
}

impl<T: Real> Default for BnCtx<T> {
    fn default() -> Self {
        Self { stats: Vec::new() }
    }
}

impl<T: Real> BnCtx<T> {
    /// Folds collected statistics into the store's running averages in pass order.
    pub fn commit(&self, store: &mut ParamStore) -> Result<(), ModelError> {
        for (prefix, st) in &self.stats {
            store.update_running(prefix, st, BN_MOMENTUM)?;
        }
        Ok(())
    }
}

fn init_batchnorm(store: &mut ParamStore, prefix: &str, c: usize) {
    store.init_const(&format!("{prefix}.gamma"), &[c], 1.0);
    store.init_const(&format!("{prefix}.beta"), &[c], 0.0);
    store.init_buffer(&format!("{prefix}.running_mean"), &[c], 0.0);
    store.init_buffer(&format!("{prefix}.running_var"), &[c], 1.0);
}

fn batchnorm<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    mode: Mode,
    bn: &mut BnCtx<T>,
) -> Result<Var, ModelError> {
    let gamma = store.bind(g, &format!("{prefix}.gamma"))?;
    let beta = store.bind(g, &format!("{prefix}.beta"))?;
    let eps = T::from_f64_lossy(BN_EPS);
    match mode {
        Mode::Train => {
            let (y, st) = g.batchnorm_train(x, gamma, beta, eps)?;
            bn.stats.push((prefix.to_string(), st));
            Ok(y)
        }
        Mode::Eval => {
            let rm = store.buffer::<T>(&format!("{prefix}.running_mean"))?;
            let rv = store.buffer::<T>(&format!("{prefix}.running_var"))?;
            Ok(g.batchnorm_infer(x, gamma, beta, &rm, &rv, eps)?)
        }
    }
}

fn init_dense<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut R) {
    store.init_he_uniform(&format!("{prefix}.weight"), &[d_in, d_out], d_in, rng);
    store.init_const(&format!("{prefix}.bias"), &[d_out], 0.0);
}

fn dense<T: Real>(g: &mut Graph<T>, store: &ParamStore, prefix: &str, x: Var) -> Result<Var, ModelError> {
    let w = store.bind(g, &format!("{prefix}.weight"))?;
    let b = store.bind(g, &format!("{prefix}.bias"))?;
    Ok(g.dense(x, w, Some(b))?)
}

/// Three dense layers of `units` each; the first two are followed by
/// batchnorm and ReLU, the last is linear.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    pub units: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self { units: 512 }
    }
}

impl ProjectorConfig {
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, d_in: usize, rng: &mut R) {
        let n = self.units;
        init_dense(store, &format!("{PROJECTOR}.dense0"), d_in, n, rng);
        init_batchnorm(store, &format!("{PROJECTOR}.bn0"), n);
        init_dense(store, &format!("{PROJECTOR}.dense1"), n, n, rng);
        init_batchnorm(store, &format!("{PROJECTOR}.bn1"), n);
        init_dense(store, &format!("{PROJECTOR}.dense2"), n, n, rng);
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        x: Var,
        mode: Mode,
        bn: &mut BnCtx<T>,
    ) -> Result<Var, ModelError> {
        let mut h = x;
        for i in 0..2 {
            h = dense(g, store, &format!("{PROJECTOR}.dense{i}"), h)?;
            h = batchnorm(g, store, &format!("{PROJECTOR}.bn{i}"), h, mode, bn)?;
            h = g.relu(h)?;
        }
        dense(g, store, &format!("{PROJECTOR}.dense2"), h)
    }
}

/// Siamese network: one encoder + projector weight set applied to both views.
#[derive(Clone, Debug, PartialEq)]
pub struct SslModel {
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
}

impl SslModel {
    pub fn new(encoder: EncoderConfig, projector: ProjectorConfig) -> Result<Self, ModelError> {
        encoder.trace()?;
        if projector.units == 0 {
            return Err(ModelError::Config("projector needs at least one unit".into()));
        }
        Ok(Self { encoder, projector })
    }

    /// He-uniform weights, zero biases, identity batchnorm; keyed by `seed`.
    pub fn init(&self, seed: u64) -> Result<ParamStore, ModelError> {
        let mut store = ParamStore::new();
        self.encoder.init(&mut store, ENCODER, &mut stream(seed, &[domain::INIT, 0]))?;
        self.projector
            .init(&mut store, self.encoder.output_dim(), &mut stream(seed, &[domain::INIT, 1]));
        Ok(store)
    }

    /// `[n, c, h, w]` images → `[n, N]` embeddings.
    pub fn embed<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        x: Var,
        mode: Mode,
        bn: &mut BnCtx<T>,
    ) -> Result<Var, ModelError> {
        let h = self.encoder.forward(g, store, ENCODER, x, mode, bn)?;
        self.projector.forward(g, store, h, mode, bn)
    }

    /// Two passes through the same parameter leaves; batchnorm statistics
    /// are computed per pass.
    pub fn forward_pair<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        xa: &Tensor<T>,
        xb: &Tensor<T>,
        mode: Mode,
        bn: &mut BnCtx<T>,
    ) -> Result<(Var, Var), ModelError> {
        let a = g.constant(xa.clone());
        let za = self.embed(g, store, a, mode, bn)?;
        let b = g.constant(xb.clone());
        let zb = self.embed(g, store, b, mode, bn)?;
        Ok((za, zb))
    }
}

/// Encoder plus a single dense layer to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub encoder: EncoderConfig,
    pub n_classes: usize,
}

impl Classifier {
    pub fn new(encoder: EncoderConfig, n_classes: usize) -> Result<Self, ModelError> {
        encoder.trace()?;
        if n_classes < 2 {
            return Err(ModelError::Config(format!("{n_classes} classes")));
        }
        Ok(Self { encoder, n_classes })
    }

    /// Freshly initialized encoder and head.
    pub fn init(&self, seed: u64) -> Result<ParamStore, ModelError> {
        let mut store = ParamStore::new();
        self.encoder.init(&mut store, ENCODER, &mut stream(seed, &[domain::INIT, 0]))?;
        self.init_head(&mut store, seed);
        Ok(store)
    }

    /// Encoder weights copied from `encoder`, new random head.
    pub fn from_encoder(&self, encoder: &ParamStore, seed: u64) -> Result<ParamStore, ModelError> {
        let mut store = self.init(seed)?;
        let expected: Vec<String> = store
            .params
            .keys()
            .chain(store.buffers.keys())
            .filter(|k| k.starts_with(&format!("{ENCODER}.")))
            .cloned()
            .collect();
        for k in &expected {
            let src = encoder.get(k)?;
            if src.shape() != store.get(k)?.shape() {
                return Err(ModelError::Config(format!(
                    "{k}: checkpoint shape {:?} does not match encoder {:?}",
                    src.shape(),
                    store.get(k)?.shape()
                )));
            }
        }
        store.copy_prefix(encoder, &format!("{ENCODER}."));
        Ok(store)
    }

    /// Every encoder and head tensor is present with the expected shape.
    pub fn check_store(&self, store: &ParamStore) -> Result<(), ModelError> {
        let reference = self.init(0)?;
        for (k, t) in reference.params.iter().chain(&reference.buffers) {
            let found = store.get(k)?;
            if found.shape() != t.shape() {
                return Err(ModelError::Config(format!(
                    "{k}: checkpoint shape {:?}, model expects {:?}",
                    found.shape(),
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    fn init_head(&self, store: &mut ParamStore, seed: u64) {
        init_dense(
            store,
            &format!("{HEAD}.dense"),
            self.encoder.output_dim(),
            self.n_classes,
            &mut stream(seed, &[domain::INIT, 2]),
        );
    }

    pub fn features<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        x: Var,
        mode: Mode,
        bn: &mut BnCtx<T>,
    ) -> Result<Var, ModelError> {
        self.encoder.forward(g, store, ENCODER, x, mode, bn)
    }

    /// `[n, c, h, w]` → `[n, n_classes]` logits.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        x: Var,
        mode: Mode,
        bn: &mut BnCtx<T>,
    ) -> Result<Var, ModelError> {
        let h = self.features(g, store, x, mode, bn)?;
        dense(g, store, &format!("{HEAD}.dense"), h)
    }
}
