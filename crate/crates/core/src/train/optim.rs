use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::models::ParamStore;
use crate::tensor::{Gradients, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd {
        learning_rate: f64,
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        learning_rate: f64,
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "eps")]
        eps: f64,
    },
    #[serde(rename = "rmsprop")]
    RmsProp {
        learning_rate: f64,
        #[serde(default = "rho")]
        rho: f64,
        #[serde(default = "eps")]
        eps: f64,
    },
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn rho() -> f64 {
    0.9
}
fn eps() -> f64 {
    1e-7
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd {
            learning_rate: 0.01,
            momentum: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig::Adam {
            learning_rate,
            beta1: beta1(),
            beta2: beta2(),
            eps: eps(),
        }
    }

    pub fn rmsprop(learning_rate: f64) -> Self {
        OptimizerConfig::RmsProp {
            learning_rate,
            rho: rho(),
            eps: eps(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { learning_rate, .. }
            | OptimizerConfig::Adam { learning_rate, .. }
            | OptimizerConfig::RmsProp { learning_rate, .. } => learning_rate,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate() > 0.0 && self.learning_rate().is_finite()) {
            return Err(TrainError::Config(format!("learning rate {} must be positive", self.learning_rate())));
        }
        Ok(())
    }
}

/// Optimizer state keyed by parameter name.
pub struct Optimizer {
    cfg: OptimizerConfig,
    /// First slot: velocity (SGD), first moment (Adam), mean square (RMSProp).
    slot1: HashMap<String, Vec<f64>>,
    /// Second moment (Adam only).
    slot2: HashMap<String, Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            slot1: HashMap::new(),
            slot2: HashMap::new(),
            t: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Applies one update. Parameters without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(String, Tensor<f32>)]) -> Result<(), TrainError> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(TrainError::NonFiniteGradient(name.clone()));
            }
            let p = store
                .params
                .get(name)
                .ok_or_else(|| TrainError::Config(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(TrainError::Config(format!(
                    "{name}: gradient shape {:?} vs parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        for (name, g) in grads {
            let p = store.params.get_mut(name).expect("checked above").data_mut();
            let n = p.len();
            let s1 = self.slot1.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            match self.cfg {
                OptimizerConfig::Sgd { learning_rate, momentum } => {
                    for ((pi, &gi), vi) in p.iter_mut().zip(g.data()).zip(s1.iter_mut()) {
                        *vi = momentum * *vi - learning_rate * gi as f64;
                        *pi = (*pi as f64 + *vi) as f32;
                    }
                }
                OptimizerConfig::Adam {
                    learning_rate,
                    beta1,
                    beta2,
                    eps,
                } => {
                    let s2 = self.slot2.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                    for (i, (pi, &gi)) in p.iter_mut().zip(g.data()).enumerate() {
                        let gi = gi as f64;
                        s1[i] = beta1 * s1[i] + (1.0 - beta1) * gi;
                        s2[i] = beta2 * s2[i] + (1.0 - beta2) * gi * gi;
                        let (m, v) = (s1[i] / c1, s2[i] / c2);
                        *pi = (*pi as f64 - learning_rate * m / (v.sqrt() + eps)) as f32;
                    }
                }
                OptimizerConfig::RmsProp { learning_rate, rho, eps } => {
                    for ((pi, &gi), si) in p.iter_mut().zip(g.data()).zip(s1.iter_mut()) {
                        let gi = gi as f64;
                        *si = rho * *si + (1.0 - rho) * gi * gi;
                        *pi = (*pi as f64 - learning_rate * gi / (si.sqrt() + eps)) as f32;
                    }
                }
            }
        }
        Ok(())
    }
}

/// `(name, gradient)` for every parameter bound in `g`.
pub fn collect_grads(g: &Graph<f32>, grads: &Gradients<f32>) -> Vec<(String, Tensor<f32>)> {
    g.params()
        .filter_map(|(name, v)| grads.get(v).map(|t| (name.to_string(), t.clone())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(p: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.params.insert("w".into(), Tensor::scalar(p).reshape(&[1]).unwrap());
        s
    }

    fn grad(v: f32) -> Vec<(String, Tensor<f32>)> {
        vec![("w".into(), Tensor::scalar(v).reshape(&[1]).unwrap())]
    }

    #[test]
    fn sgd_arithmetic() {
        let mut s = one(1.0);
        let mut o = Optimizer::new(OptimizerConfig::Sgd {
            learning_rate: 0.1,
            momentum: 0.0,
        })
        .unwrap();
        o.step(&mut s, &grad(2.0)).unwrap();
        assert!((s.params["w"].data()[0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut s = one(0.0);
        let mut o = Optimizer::new(OptimizerConfig::Sgd {
            learning_rate: 1.0,
            momentum: 0.5,
        })
        .unwrap();
        o.step(&mut s, &grad(1.0)).unwrap();
        o.step(&mut s, &grad(1.0)).unwrap();
        // v1 = −1, v2 = −1.5
        assert!((s.params["w"].data()[0] + 2.5).abs() < 1e-7);
    }

    #[test]
    fn adam_first_step_is_lr() {
        for g in [0.5f32, -3.0, 1e-3] {
            let mut s = one(1.0);
            let mut o = Optimizer::new(OptimizerConfig::adam(1e-4)).unwrap();
            o.step(&mut s, &grad(g)).unwrap();
            let delta = (s.params["w"].data()[0] - 1.0) as f64;
            assert!((delta.abs() - 1e-4).abs() < 1e-6, "{delta}");
            assert!(delta.signum() == -(g as f64).signum());
        }
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        for cfg in [OptimizerConfig::default(), OptimizerConfig::adam(1e-3), OptimizerConfig::rmsprop(1e-3)] {
            let mut s = one(0.7);
            let mut o = Optimizer::new(cfg).unwrap();
            o.step(&mut s, &grad(0.0)).unwrap();
            assert_eq!(s.params["w"].data()[0], 0.7);
        }
    }

    #[test]
    fn traps_nonfinite_and_bad_lr() {
        let mut s = one(0.7);
        let mut o = Optimizer::new(OptimizerConfig::default()).unwrap();
        assert!(matches!(o.step(&mut s, &grad(f32::NAN)), Err(TrainError::NonFiniteGradient(_))));
        assert!(Optimizer::new(OptimizerConfig::adam(0.0)).is_err());
    }

    #[test]
    fn config_toml_shape() {
        let c: OptimizerConfig = toml::from_str("kind = \"rmsprop\"\nlearning_rate = 0.001").unwrap();
        assert_eq!(c, OptimizerConfig::rmsprop(1e-3));
    }
}
