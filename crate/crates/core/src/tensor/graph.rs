use std::collections::HashMap;

use super::array::{strides, Real, Tensor};
use super::conv::{self, ConvGeometry, Padding};
use super::TensorError;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element layout handled by batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BnLayout {
    /// `[n, features]`, statistics per feature over the batch.
    Features,
    /// `[n, c, h, w]`, statistics per channel over batch and space.
    Channels,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Narrow { x: Var, axis: usize, start: usize },
    SumAll(Var),
    MeanAll(Var),
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    VarAxis { x: Var, axis: usize, ddof: usize },
    Sqrt(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    Dense { x: Var, w: Var, b: Option<Var> },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: BnLayout,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Single-use tape recording a forward computation for one reverse pass.
///
/// Values are computed eagerly as ops are recorded. Parameters are bound by
/// name, so repeated binding of the same name within one graph returns the
/// same leaf and gradients from every use accumulate into it.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    param_order: Vec<String>,
    trap_nonfinite: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
            trap_nonfinite: true,
        }
    }

    /// Enables or disables the per-op nonfinite check (on by default).
    pub fn set_trap_nonfinite(&mut self, on: bool) {
        self.trap_nonfinite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var, TensorError> {
        if self.trap_nonfinite && !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named trainable parameter, reusing the leaf if already bound.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.variable(t.clone());
        self.params.insert(name.to_string(), v);
        self.param_order.push(name.to_string());
        v
    }

    pub fn bound_param(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Names and handles of bound parameters, in binding order.
    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> + '_ {
        self.param_order.iter().map(|n| (n.as_str(), self.params[n]))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- elementwise with broadcasting ----

    fn broadcast(&mut self, a: Var, b: Var, kind: u8) -> Result<Var, TensorError> {
        let (name, f): (&'static str, fn(T, T) -> T) = match kind {
            0 => ("add", |x, y| x + y),
            1 => ("sub", |x, y| x - y),
            2 => ("mul", |x, y| x * y),
            _ => ("div", |x, y| x / y),
        };
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let out = if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(av.shape(), data)?
        } else {
            let plan = BroadcastPlan::new(av.shape(), bv.shape(), name)?;
            let mut data = Vec::with_capacity(plan.numel());
            plan.for_each(|_, ia, ib| data.push(f(av.data()[ia], bv.data()[ib])));
            Tensor::new(&plan.out_shape, data)?
        };
        let op = match kind {
            0 => Op::Add(a, b),
            1 => Op::Sub(a, b),
            2 => Op::Mul(a, b),
            _ => Op::Div(a, b),
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.broadcast(a, b, 0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.broadcast(a, b, 1)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.broadcast(a, b, 2)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.broadcast(a, b, 3)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>, name: &'static str) -> Result<Var, TensorError> {
        let out = self.nodes[x.0].value.map(f);
        let rg = self.rg(x);
        self.push(out, op, rg, name)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, |v| -v, Op::Neg(x), "neg")
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var, TensorError> {
        self.unary(x, move |v| v * s, Op::Scale(x, s), "scale")
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var, TensorError> {
        self.unary(x, move |v| v + s, Op::AddScalar(x), "add_scalar")
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x), "sqrt")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x), "relu")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, |v| v.exp(), Op::Exp(x), "exp")
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, |v| v.ln(), Op::Log(x), "log")
    }

    pub fn square(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, |v| v * v, Op::Square(x), "square")
    }

    // ---- linear algebra and shape ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.ndim() != 2 || bv.ndim() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, av.data(), bv.data(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        if xv.ndim() != 2 {
            return Err(TensorError::Rank {
                op: "transpose",
                expected: 2,
                shape: xv.shape().to_vec(),
            });
        }
        let out = transpose2(xv.data(), xv.shape()[0], xv.shape()[1]);
        let shape = [xv.shape()[1], xv.shape()[0]];
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, out)?, Op::Transpose(x), rg, "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.nodes[x.0].value.clone().reshape(shape)?;
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg, "reshape")
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        let shape = xv.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::InvalidArgument(format!(
                "narrow axis {axis} range {start}..{} on shape {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let rg = self.rg(x);
        self.push(Tensor::new(&out_shape, data)?, Op::Narrow { x, axis, start }, rg, "narrow")
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.nodes[x.0].value.sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        if xv.numel() == 0 {
            return Err(TensorError::Empty("mean"));
        }
        let m = xv.sum() / T::from_usize(xv.numel()).unwrap();
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::MeanAll(x), rg, "mean")
    }

    fn axis_check(&self, x: Var, axis: usize, op: &'static str) -> Result<(usize, usize, usize), TensorError> {
        let shape = self.nodes[x.0].value.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument(format!("{op}: axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        Ok((outer, shape[axis], inner))
    }

    fn reduce_axis(&self, x: Var, axis: usize) -> (Vec<usize>, Vec<T>) {
        let xv = &self.nodes[x.0].value;
        let shape = xv.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let row = &xv.data()[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = 1;
        (out_shape, out)
    }

    /// Sum along `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.axis_check(x, axis, "sum_axis")?;
        let (shape, out) = self.reduce_axis(x, axis);
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, out)?, Op::SumAxis { x, axis }, rg, "sum_axis")
    }

    /// Mean along `axis`, keeping it as a size-1 dimension.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let (_, len, _) = self.axis_check(x, axis, "mean_axis")?;
        if len == 0 {
            return Err(TensorError::Empty("mean_axis"));
        }
        let (shape, mut out) = self.reduce_axis(x, axis);
        let n = T::from_usize(len).unwrap();
        out.iter_mut().for_each(|v| *v = *v / n);
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, out)?, Op::MeanAxis { x, axis }, rg, "mean_axis")
    }

    /// Variance along `axis` with denominator `len - ddof`, keeping the axis.
    pub fn var_axis(&mut self, x: Var, axis: usize, ddof: usize) -> Result<Var, TensorError> {
        let (outer, len, inner) = self.axis_check(x, axis, "var_axis")?;
        if len <= ddof {
            return Err(TensorError::InvalidArgument(format!(
                "var_axis: axis length {len} must exceed ddof {ddof}"
            )));
        }
        let (shape, sums) = self.reduce_axis(x, axis);
        let n = T::from_usize(len).unwrap();
        let denom = T::from_usize(len - ddof).unwrap();
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    let d = xd[(o * len + k) * inner + i] - sums[o * inner + i] / n;
                    out[o * inner + i] = out[o * inner + i] + d * d;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v / denom);
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, out)?, Op::VarAxis { x, axis, ddof }, rg, "var_axis")
    }

    // ---- network layers ----

    /// 2-D convolution over `[n, c, h, w]` input with `[o, c, kh, kw]` weights.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let geom = ConvGeometry::new(xv.shape(), wv.shape(), stride, padding)?;
        if let Some(b) = b {
            let bs = self.nodes[b.0].value.shape();
            if bs != [geom.out_channels] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![geom.out_channels],
                    rhs: bs.to_vec(),
                });
            }
        }
        let bias = b.map(|b| self.nodes[b.0].value.data());
        let out = conv::forward(&geom, xv.data(), wv.data(), bias);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let shape = geom.out_shape();
        self.push(Tensor::new(&shape, out)?, Op::Conv2d { x, w, b, geom }, rg, "conv2d")
    }

    /// Non-overlapping max pooling (stride = kernel, trailing remainder dropped).
    pub fn maxpool2d(&mut self, x: Var, kernel: (usize, usize)) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        if xv.ndim() != 4 {
            return Err(TensorError::Rank {
                op: "maxpool2d",
                expected: 4,
                shape: xv.shape().to_vec(),
            });
        }
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (kh, kw) = kernel;
        if kh == 0 || kw == 0 || h < kh || w < kw {
            return Err(TensorError::InvalidArgument(format!(
                "maxpool2d kernel {kernel:?} does not fit input {:?}",
                xv.shape()
            )));
        }
        let (oh, ow) = (h / kh, w / kw);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let xd = xv.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * kh * w + j * kw;
                    for di in 0..kh {
                        for dj in 0..kw {
                            let idx = base + (i * kh + di) * w + j * kw + dj;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[n, c, oh, ow], out)?, Op::MaxPool2d { x, argmax }, rg, "maxpool2d")
    }

    /// `[n, c, h, w]` to `[n, c]` by spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        if xv.ndim() != 4 {
            return Err(TensorError::Rank {
                op: "global_avg_pool",
                expected: 4,
                shape: xv.shape().to_vec(),
            });
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let hw = xv.shape()[2] * xv.shape()[3];
        if hw == 0 {
            return Err(TensorError::Empty("global_avg_pool"));
        }
        let denom = T::from_usize(hw).unwrap();
        let out = xv
            .data()
            .chunks(hw)
            .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) / denom)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::new(&[n, c], out)?, Op::GlobalAvgPool(x), rg, "global_avg_pool")
    }

    /// Affine map `x · w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if xv.ndim() != 2 || wv.ndim() != 2 || xv.shape()[1] != wv.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let (n, k, m) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
        let mut out = vec![T::zero(); n * m];
        if let Some(b) = b {
            let bv = self.nodes[b.0].value.data();
            if bv.len() != m {
                return Err(TensorError::ShapeMismatch {
                    op: "dense bias",
                    lhs: vec![m],
                    rhs: self.nodes[b.0].value.shape().to_vec(),
                });
            }
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm_strided(n, k, m, xv.data(), (k as isize, 1), wv.data(), (m as isize, 1), &mut out, b.is_some());
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(&[n, m], out)?, Op::Dense { x, w, b }, rg, "dense")
    }

    fn bn_layout(&self, x: Var) -> Result<(BnLayout, usize, usize, usize), TensorError> {
        let s = self.nodes[x.0].value.shape();
        match s.len() {
            2 => Ok((BnLayout::Features, s[0], s[1], 1)),
            4 => Ok((BnLayout::Channels, s[0], s[1], s[2] * s[3])),
            _ => Err(TensorError::Rank {
                op: "batchnorm",
                expected: 4,
                shape: s.to_vec(),
            }),
        }
    }

    /// Training-mode batch normalization using batch statistics (population
    /// variance). Returns the output and the batch statistics.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>), TensorError> {
        let (layout, n, c, hw) = self.bn_layout(x)?;
        let m = n * hw;
        if m < 2 {
            return Err(TensorError::InvalidArgument(
                "batchnorm in training mode needs at least 2 values per channel".into(),
            ));
        }
        let xd = self.nodes[x.0].value.data();
        let idx = |b: usize, ch: usize, s: usize| (b * c + ch) * hw + s;
        let mf = T::from_usize(m).unwrap();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut acc = T::zero();
            for b in 0..n {
                for s in 0..hw {
                    acc = acc + xd[idx(b, ch, s)];
                }
            }
            mean[ch] = acc / mf;
            let mut acc = T::zero();
            for b in 0..n {
                for s in 0..hw {
                    let d = xd[idx(b, ch, s)] - mean[ch];
                    acc = acc + d * d;
                }
            }
            var[ch] = acc / mf;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std, c, hw)?;
        let shape = self.nodes[x.0].value.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                batch_stats: true,
            },
            rg,
            "batchnorm",
        )?;
        let stats = BatchStats {
            mean: Tensor::new(&[c], mean)?,
            var: Tensor::new(&[c], var)?,
        };
        Ok((v, stats))
    }

    /// Inference-mode batch normalization with fixed running statistics.
    pub fn batchnorm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
    ) -> Result<Var, TensorError> {
        let (layout, _, c, hw) = self.bn_layout(x)?;
        if running_mean.numel() != c || running_var.numel() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm running stats",
                lhs: vec![c],
                rhs: running_mean.shape().to_vec(),
            });
        }
        let inv_std: Vec<T> = running_var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, running_mean.data(), &inv_std, c, hw)?;
        let shape = self.nodes[x.0].value.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                batch_stats: false,
            },
            rg,
            "batchnorm",
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        c: usize,
        hw: usize,
    ) -> Result<(Vec<T>, Vec<T>), TensorError> {
        let g = self.nodes[gamma.0].value.data();
        let be = self.nodes[beta.0].value.data();
        if g.len() != c || be.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm affine",
                lhs: vec![c],
                rhs: self.nodes[gamma.0].value.shape().to_vec(),
            });
        }
        let xd = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(xd.len());
        let mut xhat = Vec::with_capacity(xd.len());
        for (i, &v) in xd.iter().enumerate() {
            let ch = (i / hw) % c;
            let h = (v - mean[ch]) * inv_std[ch];
            xhat.push(h);
            out.push(g[ch] * h + be[ch]);
        }
        Ok((out, xhat))
    }

    /// Mean softmax cross-entropy of `[n, k]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let lv = &self.nodes[logits.0].value;
        if lv.ndim() != 2 || lv.shape()[0] != labels.len() || labels.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let k = lv.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = Vec::with_capacity(lv.numel());
        let mut loss = T::zero();
        for (row, &y) in lv.data().chunks(k).zip(labels) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
            let z: T = exps.iter().fold(T::zero(), |a, &e| a + e);
            loss = loss - ((row[y] - mx) - z.ln());
            probs.extend(exps.iter().map(|&e| e / z));
        }
        let loss = loss / T::from_usize(labels.len()).unwrap();
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
            "softmax_cross_entropy",
        )
    }

    // ---- reverse pass ----

    /// Reverse-mode sweep from a scalar `loss`. Every gradient-tracking leaf
    /// receives a gradient (zeros when unreachable from the loss).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            if self.trap_nonfinite && g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
        }
        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if matches!(node.op, Op::Leaf) && node.requires_grad {
                    let data = g.unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                    Some(Tensor::new(node.value.shape(), data).expect("grad shape matches value"))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<(), TensorError> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                self.broadcast_back(*a, *b, node.value.shape(), g, grads, |gv, _, _| gv, |gv, _, _| gv * sign);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                self.broadcast_back(*a, *b, node.value.shape(), g, grads, |gv, _, ib| gv * bd[ib], |gv, ia, _| gv * ad[ia]);
            }
            Op::Div(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                self.broadcast_back(
                    *a,
                    *b,
                    node.value.shape(),
                    g,
                    grads,
                    |gv, _, ib| gv / bd[ib],
                    |gv, ia, ib| -gv * ad[ia] / (bd[ib] * bd[ib]),
                );
            }
            Op::Neg(x) => self.acc(grads, *x, g.iter().map(|&v| -v).collect()),
            Op::Scale(x, s) => self.acc(grads, *x, g.iter().map(|&v| v * *s).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => self.acc(grads, *x, g.to_vec()),
            Op::Sqrt(x) => {
                let y = node.value.data();
                let two = T::from_f64_lossy(2.0);
                self.acc(grads, *x, g.iter().zip(y).map(|(&gv, &yv)| gv / (two * yv)).collect());
            }
            Op::Relu(x) => {
                let xd = val(*x).data();
                self.acc(
                    grads,
                    *x,
                    g.iter()
                        .zip(xd)
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect(),
                );
            }
            Op::Exp(x) => {
                let y = node.value.data();
                self.acc(grads, *x, g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect());
            }
            Op::Log(x) => {
                let xd = val(*x).data();
                self.acc(grads, *x, g.iter().zip(xd).map(|(&gv, &xv)| gv / xv).collect());
            }
            Op::Square(x) => {
                let xd = val(*x).data();
                let two = T::from_f64_lossy(2.0);
                self.acc(grads, *x, g.iter().zip(xd).map(|(&gv, &xv)| two * gv * xv).collect());
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.rg(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![T::zero(); m * k];
                    T::gemm_strided(m, n, k, g, (n as isize, 1), bv.data(), (1, n as isize), &mut da, false);
                    self.acc(grads, *a, da);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![T::zero(); k * n];
                    T::gemm_strided(k, m, n, av.data(), (1, k as isize), g, (n as isize, 1), &mut db, false);
                    self.acc(grads, *b, db);
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                self.acc(grads, *x, transpose2(g, s[0], s[1]));
            }
            Op::Narrow { x, axis, start } => {
                let xs = val(*x).shape();
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let len = node.value.shape()[*axis];
                let mut dx = vec![T::zero(); val(*x).numel()];
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let base = (o * xs[*axis] + start) * inner;
                    dx[base..base + len * inner].copy_from_slice(src);
                }
                self.acc(grads, *x, dx);
            }
            Op::SumAll(x) => self.acc(grads, *x, vec![g[0]; val(*x).numel()]),
            Op::MeanAll(x) => {
                let n = val(*x).numel();
                self.acc(grads, *x, vec![g[0] / T::from_usize(n).unwrap(); n]);
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let xs = val(*x).shape();
                let outer: usize = xs[..*axis].iter().product();
                let len = xs[*axis];
                let inner: usize = xs[axis + 1..].iter().product();
                let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                    T::one() / T::from_usize(len).unwrap()
                } else {
                    T::one()
                };
                let mut dx = Vec::with_capacity(val(*x).numel());
                for o in 0..outer {
                    for _ in 0..len {
                        dx.extend(g[o * inner..(o + 1) * inner].iter().map(|&v| v * scale));
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::VarAxis { x, axis, ddof } => {
                let xv = val(*x);
                let xs = xv.shape();
                let outer: usize = xs[..*axis].iter().product();
                let len = xs[*axis];
                let inner: usize = xs[axis + 1..].iter().product();
                let n = T::from_usize(len).unwrap();
                let coef = T::from_f64_lossy(2.0) / T::from_usize(len - ddof).unwrap();
                let xd = xv.data();
                let mut mean = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            mean[o * inner + i] = mean[o * inner + i] + xd[(o * len + k) * inner + i];
                        }
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / n);
                let mut dx = vec![T::zero(); xd.len()];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            let j = (o * len + k) * inner + i;
                            dx[j] = coef * (xd[j] - mean[o * inner + i]) * g[o * inner + i];
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xv, wv) = (val(*x), val(*w));
                let (dx, dw, db) = conv::backward(geom, xv.data(), wv.data(), g, self.rg(*x), self.rg(*w));
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        self.acc(grads, *b, db);
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![T::zero(); val(*x).numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] = dx[src] + gv;
                }
                self.acc(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let xs = val(*x).shape();
                let hw = xs[2] * xs[3];
                let denom = T::from_usize(hw).unwrap();
                let mut dx = Vec::with_capacity(val(*x).numel());
                for &gv in g {
                    dx.extend(std::iter::repeat_n(gv / denom, hw));
                }
                self.acc(grads, *x, dx);
            }
            Op::Dense { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (n, k, m) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * k];
                    T::gemm_strided(n, m, k, g, (m as isize, 1), wv.data(), (1, m as isize), &mut dx, false);
                    self.acc(grads, *x, dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); k * m];
                    T::gemm_strided(k, n, m, xv.data(), (1, k as isize), g, (m as isize, 1), &mut dw, false);
                    self.acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![T::zero(); m];
                        for row in g.chunks(m) {
                            for (acc, &v) in db.iter_mut().zip(row) {
                                *acc = *acc + v;
                            }
                        }
                        self.acc(grads, *b, db);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xs = val(*x).shape();
                let (c, hw) = match layout {
                    BnLayout::Features => (xs[1], 1),
                    BnLayout::Channels => (xs[1], xs[2] * xs[3]),
                };
                let n = xs[0];
                let gd = val(*gamma).data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for (i, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                    let ch = (i / hw) % c;
                    sum_dy[ch] = sum_dy[ch] + gv;
                    sum_dy_xhat[ch] = sum_dy_xhat[ch] + gv * h;
                }
                if self.rg(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    if *batch_stats {
                        let m = T::from_usize(n * hw).unwrap();
                        for (i, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                            let ch = (i / hw) % c;
                            let v = gd[ch] * inv_std[ch] / m * (m * gv - sum_dy[ch] - h * sum_dy_xhat[ch]);
                            dx.push(v);
                        }
                    } else {
                        for (i, &gv) in g.iter().enumerate() {
                            let ch = (i / hw) % c;
                            dx.push(gv * gd[ch] * inv_std[ch]);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                if self.rg(*gamma) {
                    self.acc(grads, *gamma, sum_dy_xhat);
                }
                if self.rg(*beta) {
                    self.acc(grads, *beta, sum_dy);
                }
                let _ = layout;
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = val(*logits).shape()[1];
                let scale = g[0] / T::from_usize(labels.len()).unwrap();
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    d[r * k + y] = d[r * k + y] - scale;
                }
                self.acc(grads, *logits, d);
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e = *e + c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn broadcast_back(
        &self,
        a: Var,
        b: Var,
        out_shape: &[usize],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        da: impl Fn(T, usize, usize) -> T,
        db: impl Fn(T, usize, usize) -> T,
    ) {
        let (asz, bsz) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        let (mut ga, mut gb) = (vec![T::zero(); shape_numel(asz)], vec![T::zero(); shape_numel(bsz)]);
        if asz == bsz {
            for (i, &gv) in g.iter().enumerate() {
                ga[i] = da(gv, i, i);
                gb[i] = db(gv, i, i);
            }
        } else {
            let plan = BroadcastPlan::new(asz, bsz, "broadcast").expect("shapes validated in forward");
            debug_assert_eq!(plan.out_shape, out_shape);
            plan.for_each(|o, ia, ib| {
                ga[ia] = ga[ia] + da(g[o], ia, ib);
                gb[ib] = gb[ib] + db(g[o], ia, ib);
            });
        }
        self.acc(grads, a, ga);
        self.acc(grads, b, gb);
    }
}

fn shape_numel(s: &[usize]) -> usize {
    s.iter().product()
}

fn transpose2<T: Copy>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for j in 0..cols {
        for i in 0..rows {
            out.push(data[i * cols + j]);
        }
    }
    out
}

/// Index mapping for numpy-style broadcasting of two shapes.
struct BroadcastPlan {
    out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl BroadcastPlan {
    fn new(a: &[usize], b: &[usize], op: &'static str) -> Result<Self, TensorError> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out_shape = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x == y || y == 1 {
                out_shape.push(x);
            } else if x == 1 {
                out_shape.push(y);
            } else {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                });
            }
        }
        let bstrides = |p: &[usize]| {
            let s = strides(p);
            p.iter().zip(s).map(|(&d, st)| if d == 1 { 0 } else { st }).collect::<Vec<_>>()
        };
        Ok(Self {
            a_strides: bstrides(&pa),
            b_strides: bstrides(&pb),
            out_shape,
        })
    }

    fn numel(&self) -> usize {
        shape_numel(&self.out_shape)
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.numel();
        let rank = self.out_shape.len();
        let mut idx = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        for o in 0..n {
            f(o, ia, ib);
            for d in (0..rank).rev() {
                idx[d] += 1;
                ia += self.a_strides[d];
                ib += self.b_strides[d];
                if idx[d] < self.out_shape[d] {
                    break;
                }
                ia -= self.a_strides[d] * idx[d];
                ib -= self.b_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}
