use indexmap::IndexMap;
use rand::Rng;
use sha2::{Digest, Sha256};

use super::ModelError;
use crate::tensor::{BatchStats, Checkpoint, Graph, Real, Tensor, Var};

const RUNNING_SUFFIXES: [&str; 2] = [".running_mean", ".running_var"];

/// Named trainable parameters plus non-trainable buffers (batchnorm running
/// statistics). Names are dotted paths such as `encoder.conv0.weight`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub params: IndexMap<String, Tensor<f32>>,
    pub buffers: IndexMap<String, Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>, ModelError> {
        self.params
            .get(name)
            .or_else(|| self.buffers.get(name))
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Binds `name` as a trainable leaf of `g`; later binds return the same leaf.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, name: &str) -> Result<Var, ModelError> {
        if let Some(v) = g.bound_param(name) {
            return Ok(v);
        }
        let t = self.params.get(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        Ok(g.param(name, &t.cast()))
    }

    pub fn buffer<T: Real>(&self, name: &str) -> Result<Tensor<T>, ModelError> {
        self.buffers
            .get(name)
            .map(Tensor::cast)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    /// He-uniform weights: `U(−√(6/fan_in), √(6/fan_in))`.
    pub fn init_he_uniform<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) {
        let limit = (6.0 / fan_in as f64).sqrt() as f32;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
        self.params.insert(name.into(), Tensor::new(shape, data).expect("shape matches"));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f32) {
        self.params.insert(name.into(), Tensor::full(shape, value));
    }

    pub fn init_buffer(&mut self, name: &str, shape: &[usize], value: f32) {
        self.buffers.insert(name.into(), Tensor::full(shape, value));
    }

    /// `running ← m·running + (1 − m)·batch` for a batchnorm layer `prefix`.
    pub fn update_running<T: Real>(&mut self, prefix: &str, stats: &BatchStats<T>, momentum: f32) -> Result<(), ModelError> {
        for (suffix, batch) in RUNNING_SUFFIXES.iter().zip([&stats.mean, &stats.var]) {
            let name = format!("{prefix}{suffix}");
            let run = self.buffers.get_mut(&name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            for (r, b) in run.data_mut().iter_mut().zip(batch.data()) {
                *r = momentum * *r + (1.0 - momentum) * b.as_f64() as f32;
            }
        }
        Ok(())
    }

    /// Copies every tensor under `prefix` from `other`, replacing existing ones.
    pub fn copy_prefix(&mut self, other: &ParamStore, prefix: &str) -> usize {
        let mut n = 0;
        for (k, v) in other.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.params.insert(k.clone(), v.clone());
            n += 1;
        }
        for (k, v) in other.buffers.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.buffers.insert(k.clone(), v.clone());
            n += 1;
        }
        n
    }

    /// Subset of tensors under `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        out.copy_prefix(self, prefix);
        out
    }

    /// SHA-256 over names, shapes and raw f32 bytes of tensors under `prefix`.
    pub fn digest(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (k, t) in self.params.iter().chain(&self.buffers).filter(|(k, _)| k.starts_with(prefix)) {
            h.update(k.as_bytes());
            for &d in t.shape() {
                h.update((d as u32).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (k, v) in self.params.iter().chain(&self.buffers) {
            c.insert(k.clone(), v.clone());
        }
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        let mut s = Self::new();
        for (k, v) in &ckpt.tensors {
            if RUNNING_SUFFIXES.iter().any(|suf| k.ends_with(suf)) {
                s.buffers.insert(k.clone(), v.clone());
            } else {
                s.params.insert(k.clone(), v.clone());
            }
        }
        s
    }
}
