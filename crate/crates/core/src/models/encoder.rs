use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BnCtx, Mode, ModelError, ParamStore};
use crate::tensor::{conv_output_len, Graph, Padding, Real, Var};

/// One convolution block: conv (+bias) → optional batchnorm → ReLU →
/// optional non-overlapping max pool.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub filters: usize,
    pub kernel: [usize; 2],
    #[serde(default = "unit_stride")]
    pub stride: [usize; 2],
    #[serde(default)]
    pub padding: Padding,
    #[serde(default)]
    pub batchnorm: bool,
    /// `[rows, cols]`; rows are mel bands, cols are time frames.
    #[serde(default)]
    pub pool: Option<[usize; 2]>,
}

fn unit_stride() -> [usize; 2] {
    [1, 1]
}

/// Convolutional trunk ending in global average pooling. Serialized as the
/// JSON block-list descriptor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// `[channels, height, width]`.
    pub input: [usize; 3],
    pub blocks: Vec<ConvBlock>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::simple_cnn()
    }
}

impl EncoderConfig {
    /// Reconstruction of the SimpleCNN trunk: three 5×5 valid conv blocks with
    /// 24, 48, 48 filters, each followed by ReLU and a 4×2 max pool, then
    /// global average pooling (D = 48). The dense layers are omitted.
    pub fn simple_cnn() -> Self {
        let block = |filters| ConvBlock {
            filters,
            kernel: [5, 5],
            stride: [1, 1],
            padding: Padding::Valid,
            batchnorm: false,
            pool: Some([4, 2]),
        };
        Self {
            input: [1, 256, 256],
            blocks: vec![block(24), block(48), block(48)],
        }
    }

    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| ModelError::Config(e.to_string()))?;
        cfg.trace()?;
        Ok(cfg)
    }

    /// Output dimension D.
    pub fn output_dim(&self) -> usize {
        self.blocks.last().map_or(self.input[0], |b| b.filters)
    }

    /// `[c, h, w]` after each block; errors if any spatial size reaches zero.
    pub fn trace(&self) -> Result<Vec<[usize; 3]>, ModelError> {
        if self.blocks.is_empty() {
            return Err(ModelError::Config("encoder needs at least one block".into()));
        }
        let [mut c, mut h, mut w] = self.input;
        let mut shapes = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let collapse = |c: usize, h: usize, w: usize| ModelError::Collapse { block: i, shape: [c, h, w] };
            if b.filters == 0 || b.stride.contains(&0) || b.kernel.contains(&0) {
                return Err(ModelError::Config(format!("block {i}: zero filters, kernel or stride")));
            }
            let oh = conv_output_len(h, b.kernel[0], b.stride[0], b.padding).ok_or_else(|| collapse(c, h, w))?.0;
            let ow = conv_output_len(w, b.kernel[1], b.stride[1], b.padding).ok_or_else(|| collapse(c, h, w))?.0;
            c = b.filters;
            (h, w) = (oh, ow);
            if let Some([ph, pw]) = b.pool {
                if ph == 0 || pw == 0 {
                    return Err(ModelError::Config(format!("block {i}: zero pool size")));
                }
                (h, w) = (h / ph, w / pw);
            }
            if h == 0 || w == 0 {
                return Err(collapse(c, h, w));
            }
            shapes.push([c, h, w]);
        }
        Ok(shapes)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<(), ModelError> {
        self.trace()?;
        let mut c = self.input[0];
        for (i, b) in self.blocks.iter().enumerate() {
            let fan_in = c * b.kernel[0] * b.kernel[1];
            let p = format!("{prefix}.conv{i}");
            store.init_he_uniform(&format!("{p}.weight"), &[b.filters, c, b.kernel[0], b.kernel[1]], fan_in, rng);
            store.init_const(&format!("{p}.bias"), &[b.filters], 0.0);
            if b.batchnorm {
                super::init_batchnorm(store, &format!("{prefix}.bn{i}"), b.filters);
            }
            c = b.filters;
        }
        Ok(())
    }

    /// `[n, c, h, w]` → `[n, D]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        prefix: &str,
        x: Var,
        mode: Mode,
        bn: &mut BnCtx<T>,
    ) -> Result<Var, ModelError> {
        let mut h = x;
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("{prefix}.conv{i}");
            let w = store.bind(g, &format!("{p}.weight"))?;
            let bias = store.bind(g, &format!("{p}.bias"))?;
            h = g.conv2d(h, w, Some(bias), (b.stride[0], b.stride[1]), b.padding)?;
            if b.batchnorm {
                h = super::batchnorm(g, store, &format!("{prefix}.bn{i}"), h, mode, bn)?;
            }
            h = g.relu(h)?;
            if let Some([ph, pw]) = b.pool {
                h = g.maxpool2d(h, (ph, pw))?;
            }
        }
        Ok(g.global_avg_pool(h)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simple_cnn_shape_trace() {
        let shapes = EncoderConfig::simple_cnn().trace().unwrap();
        assert_eq!(shapes, [[24, 63, 126], [48, 14, 61], [48, 2, 28]]);
        assert_eq!(EncoderConfig::simple_cnn().output_dim(), 48);
    }

    #[test]
    fn collapse_is_reported() {
        let mut cfg = EncoderConfig::simple_cnn();
        cfg.input = [1, 20, 256];
        assert!(matches!(cfg.trace(), Err(ModelError::Collapse { block: 1, .. })));
    }

    #[test]
    fn json_descriptor() {
        let json = r#"{"input":[1,32,32],"blocks":[{"filters":4,"kernel":[3,3],"pool":[2,2]},{"filters":8,"kernel":[3,3],"padding":"same","batchnorm":true}]}"#;
        let cfg = EncoderConfig::from_json(json).unwrap();
        assert_eq!(cfg.trace().unwrap(), [[4, 15, 15], [8, 15, 15]]);
        assert_eq!(cfg.output_dim(), 8);
        assert!(EncoderConfig::from_json(r#"{"input":[1,4,4],"blocks":[{"filters":2,"kernel":[5,5]}]}"#).is_err());
    }
}
