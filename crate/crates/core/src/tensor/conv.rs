//! im2col-based 2-D convolution kernels (NCHW).

use serde::{Deserialize, Serialize};

use super::array::Real;
use super::TensorError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Valid,
    /// Output size `ceil(in / stride)`, extra padding at bottom/right.
    Same,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Output length along one spatial axis, and the leading pad.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    if stride == 0 || kernel == 0 {
        return None;
    }
    match padding {
        Padding::Valid => (input >= kernel).then(|| ((input - kernel) / stride + 1, 0)),
        Padding::Same => {
            if input == 0 {
                return None;
            }
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Some((out, total / 2))
        }
    }
}

impl ConvGeometry {
    pub fn new(x: &[usize], w: &[usize], stride: (usize, usize), padding: Padding) -> Result<Self, TensorError> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        let dims = conv_output_len(x[2], w[2], stride.0, padding).zip(conv_output_len(x[3], w[3], stride.1, padding));
        let Some(((out_h, pad_top), (out_w, pad_left))) = dims else {
            return Err(TensorError::InvalidArgument(format!(
                "conv2d kernel {:?} stride {stride:?} does not fit input {x:?}",
                &w[2..]
            )));
        };
        Ok(Self {
            batch: x[0],
            in_channels: x[1],
            in_h: x[2],
            in_w: x[3],
            out_channels: w[0],
            kh: w[2],
            kw: w[3],
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn sample_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    /// Source offset within one sample for patch row `r` at output position `p`.
    #[inline]
    fn source(&self, c: usize, i: usize, j: usize, oy: usize, ox: usize) -> Option<usize> {
        let y = (oy * self.stride.0 + i).checked_sub(self.pad_top)?;
        let x = (ox * self.stride.1 + j).checked_sub(self.pad_left)?;
        (y < self.in_h && x < self.in_w).then(|| (c * self.in_h + y) * self.in_w + x)
    }

    fn im2col<T: Real>(&self, sample: &[T], cols: &mut [T]) {
        let p = self.positions();
        for c in 0..self.in_channels {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            dst[oy * self.out_w + ox] = match self.source(c, i, j, oy, ox) {
                                Some(s) => sample[s],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], sample: &mut [T]) {
        let p = self.positions();
        for c in 0..self.in_channels {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            if let Some(s) = self.source(c, i, j, oy, ox) {
                                sample[s] = sample[s] + src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Real>(g: &ConvGeometry, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (k, p, o) = (g.patch_len(), g.positions(), g.out_channels);
    let mut out = vec![T::zero(); g.batch * o * p];
    let mut cols = vec![T::zero(); k * p];
    for n in 0..g.batch {
        g.im2col(&x[n * g.sample_len()..(n + 1) * g.sample_len()], &mut cols);
        let dst = &mut out[n * o * p..(n + 1) * o * p];
        if let Some(b) = bias {
            for (row, &bv) in dst.chunks_mut(p).zip(b) {
                row.iter_mut().for_each(|v| *v = bv);
            }
        }
        T::gemm_strided(o, k, p, w, (k as isize, 1), &cols, (p as isize, 1), dst, bias.is_some());
    }
    out
}

/// Returns `(dx, dw, db)`; `dx`/`dw` only when requested. Per-sample partial
/// weight gradients are accumulated in sample order.
pub(crate) fn backward<T: Real>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    dy: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let (k, p, o) = (g.patch_len(), g.positions(), g.out_channels);
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_dw.then(|| vec![T::zero(); w.len()]);
    let mut db = vec![T::zero(); o];
    let mut cols = vec![T::zero(); k * p];
    for n in 0..g.batch {
        let dyn_ = &dy[n * o * p..(n + 1) * o * p];
        for (acc, row) in db.iter_mut().zip(dyn_.chunks(p)) {
            *acc = row.iter().fold(*acc, |a, &v| a + v);
        }
        if let Some(dw) = dw.as_mut() {
            g.im2col(&x[n * g.sample_len()..(n + 1) * g.sample_len()], &mut cols);
            T::gemm_strided(o, p, k, dyn_, (p as isize, 1), &cols, (1, p as isize), dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            T::gemm_strided(k, o, p, w, (1, k as isize), dyn_, (p as isize, 1), &mut cols, false);
            g.col2im(&cols, &mut dx[n * g.sample_len()..(n + 1) * g.sample_len()]);
        }
    }
    (dx, dw, db)
}
