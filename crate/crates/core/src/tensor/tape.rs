//! The recording tape: each op appends a node referencing earlier nodes, so node
//! order is already topological and the backward sweep is a single reverse
//! pass that visits each node once, accumulating leaf gradients additively.

use rand::Rng;

use super::kernels::{
    self, conv2d_backward, conv2d_forward, maxpool2x2_forward, resize_nearest_backward,
    resize_nearest_forward, ConvDims,
};
use super::{Mode, Param, Scalar, Tensor, TensorError};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Id(pub(crate) usize);

/// Batch statistics returned by training-mode batch normalization so layers
/// can update their running buffers.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var_biased: Vec<T>,
    pub var_unbiased: Vec<T>,
}

enum Op<T> {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Scale(Id, T),
    Relu(Id),
    Tanh(Id),
    Sigmoid(Id),
    Linear { x: Id, w: Id, b: Option<Id> },
    Matmul(Id, Id),
    Bmm(Id, Id),
    Conv2d { x: Id, w: Id, b: Option<Id>, dims: ConvDims },
    BatchNorm { x: Id, gamma: Id, beta: Id, mean: Vec<T>, rstd: Vec<T>, train: bool },
    MaxPool { x: Id, idx: Vec<u32>, in_h: usize, in_w: usize },
    Resize { x: Id, in_h: usize, in_w: usize, out_h: usize, out_w: usize },
    ConcatCh(Id, Id),
    Reshape(Id),
    Permute { x: Id, axes: Vec<usize> },
    SliceCols { x: Id, start: usize },
    Softmax(Id),
    LayerNorm { x: Id, gamma: Id, beta: Id, mean: Vec<T>, rstd: Vec<T> },
    Dropout { x: Id, mask: Vec<T> },
    Mse(Id, Id),
    Mae(Id, Id),
    Sum(Id),
    Mean(Id),
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires: bool,
    op: Op<T>,
    param_uid: Option<u64>,
}

/// Recorded computation graph for one forward/backward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires: bool, op: Op<T>) -> Id {
        self.nodes.push(Node { value, grad: None, requires, op, param_uid: None });
        Id(self.nodes.len() - 1)
    }

    /// Input leaf. `requires_grad` leaves collect gradients in backward.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Id {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Constant leaf that never takes gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Id {
        self.push(value, false, Op::Leaf)
    }

    /// Leaf bound to a model parameter; frozen parameters join the graph but
    /// never receive gradients.
    pub fn param(&mut self, p: &Param<T>) -> Id {
        let id = self.push(p.value.clone(), !p.frozen, Op::Leaf);
        self.nodes[id.0].param_uid = Some(p.uid);
        id
    }

    pub fn value(&self, id: Id) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: Id) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    fn requires(&self, ids: &[Id]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires)
    }

    fn same_shape(&self, op: &'static str, a: Id, b: Id) -> Result<(), TensorError> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.nodes[a.0].value.shape().to_vec(),
                right: self.nodes[b.0].value.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Id, b: Id) -> Result<Id, TensorError> {
        self.same_shape("add", a, b)?;
        let data = self.binary(a, b, |x, y| x + y);
        Ok(self.push(data, self.requires(&[a, b]), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Result<Id, TensorError> {
        self.same_shape("sub", a, b)?;
        let data = self.binary(a, b, |x, y| x - y);
        Ok(self.push(data, self.requires(&[a, b]), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Result<Id, TensorError> {
        self.same_shape("mul", a, b)?;
        let data = self.binary(a, b, |x, y| x * y);
        Ok(self.push(data, self.requires(&[a, b]), Op::Mul(a, b)))
    }

    fn binary(&self, a: Id, b: Id, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        Tensor::new(
            av.shape().to_vec(),
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
        .expect("shapes checked")
    }

    pub fn scale(&mut self, a: Id, s: T) -> Id {
        let v = &self.nodes[a.0].value;
        let data = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x * s).collect())
            .expect("same shape");
        self.push(data, self.requires(&[a]), Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Id) -> Id {
        let v = &self.nodes[a.0].value;
        let data = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&x| x.maximum(T::ZERO)).collect(),
        )
        .expect("same shape");
        self.push(data, self.requires(&[a]), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Id) -> Id {
        let v = &self.nodes[a.0].value;
        let data =
            Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x.tanh()).collect())
                .expect("same shape");
        self.push(data, self.requires(&[a]), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Id) -> Id {
        let v = &self.nodes[a.0].value;
        let data = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&x| sigmoid_stable(x)).collect(),
        )
        .expect("same shape");
        self.push(data, self.requires(&[a]), Op::Sigmoid(a))
    }

    /// y = x @ w (+ b) over the last dimension; leading dimensions are
    /// flattened into the row count.
    pub fn linear(&mut self, x: Id, w: Id, b: Option<Id>) -> Result<Id, TensorError> {
        let (w_in, w_out) = self.nodes[w.0].value.dims2("linear")?;
        let xv = &self.nodes[x.0].value;
        let x_shape = xv.shape().to_vec();
        let last = *x_shape.last().ok_or(TensorError::Dimension {
            op: "linear",
            details: "input has no dimensions".into(),
        })?;
        if last != w_in {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                left: x_shape,
                right: self.nodes[w.0].value.shape().to_vec(),
            });
        }
        let rows = xv.numel() / w_in;
        let mut out = kernels::matmul(xv.data(), self.nodes[w.0].value.data(), rows, w_in, w_out);
        if let Some(b) = b {
            let bv = &self.nodes[b.0].value;
            if bv.shape() != [w_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear bias",
                    left: bv.shape().to_vec(),
                    right: vec![w_out],
                });
            }
            for r in 0..rows {
                for (o, &bias) in bv.data().iter().enumerate() {
                    out[r * w_out + o] += bias;
                }
            }
        }
        let mut out_shape = x_shape;
        *out_shape.last_mut().unwrap() = w_out;
        let value = Tensor::new(out_shape, out).expect("shape math");
        let requires = self.requires(&[x, w]) || b.is_some_and(|b| self.nodes[b.0].requires);
        Ok(self.push(value, requires, Op::Linear { x, w, b }))
    }

    pub fn matmul(&mut self, a: Id, b: Id) -> Result<Id, TensorError> {
        let (m, k) = self.nodes[a.0].value.dims2("matmul")?;
        let (k2, n) = self.nodes[b.0].value.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let data = kernels::matmul(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data).expect("shape math");
        Ok(self.push(value, self.requires(&[a, b]), Op::Matmul(a, b)))
    }

    /// Batched matmul on [B, M, K] x [B, K, N].
    pub fn bmm(&mut self, a: Id, b: Id) -> Result<Id, TensorError> {
        let (ba, m, k) = self.nodes[a.0].value.dims3("bmm")?;
        let (bb, k2, n) = self.nodes[b.0].value.dims3("bmm")?;
        if ba != bb || k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                left: vec![ba, m, k],
                right: vec![bb, k2, n],
            });
        }
        let mut data = Vec::with_capacity(ba * m * n);
        for i in 0..ba {
            let av = &self.nodes[a.0].value.data()[i * m * k..(i + 1) * m * k];
            let bv = &self.nodes[b.0].value.data()[i * k * n..(i + 1) * k * n];
            data.extend(kernels::matmul(av, bv, m, k, n));
        }
        let value = Tensor::new(vec![ba, m, n], data).expect("shape math");
        Ok(self.push(value, self.requires(&[a, b]), Op::Bmm(a, b)))
    }

    /// Cross-correlation with square kernels: x [B,C,H,W], w [F,C,k,k].
    pub fn conv2d(
        &mut self,
        x: Id,
        w: Id,
        b: Option<Id>,
        stride: usize,
        pad: usize,
    ) -> Result<Id, TensorError> {
        let (batch, in_ch, in_h, in_w) = self.nodes[x.0].value.dims4("conv2d")?;
        let (out_ch, wc, kh, kw) = self.nodes[w.0].value.dims4("conv2d")?;
        if wc != in_ch || kh != kw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: vec![batch, in_ch, in_h, in_w],
                right: vec![out_ch, wc, kh, kw],
            });
        }
        if stride == 0 {
            return Err(TensorError::Dimension { op: "conv2d", details: "stride must be >= 1".into() });
        }
        let span_h = in_h as isize + 2 * pad as isize - kh as isize;
        let span_w = in_w as isize + 2 * pad as isize - kw as isize;
        if span_h < 0 || span_w < 0 || span_h as usize % stride != 0 || span_w as usize % stride != 0 {
            return Err(TensorError::Dimension {
                op: "conv2d",
                details: format!(
                    "input {:?} with kernel {:?}, stride {stride}, pad {pad} has no integral output size",
                    vec![batch, in_ch, in_h, in_w],
                    vec![out_ch, wc, kh, kw]
                ),
            });
        }
        if let Some(b) = b {
            if self.nodes[b.0].value.shape() != [out_ch] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    left: self.nodes[b.0].value.shape().to_vec(),
                    right: vec![out_ch],
                });
            }
        }
        let dims = ConvDims {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            k: kh,
            stride,
            pad,
            out_h: span_h as usize / stride + 1,
            out_w: span_w as usize / stride + 1,
        };
        let out = conv2d_forward(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            b.map(|b| self.nodes[b.0].value.data()),
            &dims,
        );
        let value = Tensor::new(vec![batch, out_ch, dims.out_h, dims.out_w], out).expect("shape math");
        let requires = self.requires(&[x, w]) || b.is_some_and(|b| self.nodes[b.0].requires);
        Ok(self.push(value, requires, Op::Conv2d { x, w, b, dims }))
    }

    /// Training-mode batch normalization over [B,C,H,W]; normalizes with
    /// batch statistics and returns them so the caller can update running
    /// buffers. Requires batch >= 2.
    pub fn batchnorm2d_train(
        &mut self,
        x: Id,
        gamma: Id,
        beta: Id,
        eps: f64,
    ) -> Result<(Id, BatchStats<T>), TensorError> {
        let (batch, ch, h, w) = self.nodes[x.0].value.dims4("batchnorm2d")?;
        if batch < 2 {
            return Err(TensorError::DegenerateBatch(
                "batch normalization in training mode needs batch >= 2".into(),
            ));
        }
        self.check_vec("batchnorm gamma", gamma, ch)?;
        self.check_vec("batchnorm beta", beta, ch)?;
        let n = batch * h * w;
        let xv = self.nodes[x.0].value.data();
        let mut mean = vec![T::ZERO; ch];
        let mut var = vec![T::ZERO; ch];
        for c in 0..ch {
            let mut acc = T::ZERO;
            for b in 0..batch {
                let base = (b * ch + c) * h * w;
                for k in 0..h * w {
                    acc += xv[base + k];
                }
            }
            mean[c] = acc * T::from_f64(1.0 / n as f64);
            let mut vacc = T::ZERO;
            for b in 0..batch {
                let base = (b * ch + c) * h * w;
                for k in 0..h * w {
                    let d = xv[base + k] - mean[c];
                    vacc += d * d;
                }
            }
            var[c] = vacc * T::from_f64(1.0 / n as f64);
        }
        let rstd: Vec<T> =
            var.iter().map(|&v| T::ONE / (v + T::from_f64(eps)).sqrt()).collect();
        let value = self.bn_apply(x, gamma, beta, &mean, &rstd, batch, ch, h, w);
        let stats = BatchStats {
            mean: mean.clone(),
            var_biased: var.clone(),
            var_unbiased: var
                .iter()
                .map(|&v| v * T::from_f64(n as f64 / (n as f64 - 1.0)))
                .collect(),
        };
        let requires = self.requires(&[x, gamma, beta]);
        let id = self.push(value, requires, Op::BatchNorm { x, gamma, beta, mean, rstd, train: true });
        Ok((id, stats))
    }

    /// Eval-mode batch normalization with frozen running statistics.
    pub fn batchnorm2d_eval(
        &mut self,
        x: Id,
        gamma: Id,
        beta: Id,
        eps: f64,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<Id, TensorError> {
        let (batch, ch, h, w) = self.nodes[x.0].value.dims4("batchnorm2d")?;
        self.check_vec("batchnorm gamma", gamma, ch)?;
        self.check_vec("batchnorm beta", beta, ch)?;
        if running_mean.len() != ch || running_var.len() != ch {
            return Err(TensorError::Dimension {
                op: "batchnorm2d",
                details: format!("running stats length != {ch} channels"),
            });
        }
        let mean = running_mean.to_vec();
        let rstd: Vec<T> =
            running_var.iter().map(|&v| T::ONE / (v + T::from_f64(eps)).sqrt()).collect();
        let value = self.bn_apply(x, gamma, beta, &mean, &rstd, batch, ch, h, w);
        let requires = self.requires(&[x, gamma, beta]);
        Ok(self.push(value, requires, Op::BatchNorm { x, gamma, beta, mean, rstd, train: false }))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        x: Id,
        gamma: Id,
        beta: Id,
        mean: &[T],
        rstd: &[T],
        batch: usize,
        ch: usize,
        h: usize,
        w: usize,
    ) -> Tensor<T> {
        let xv = self.nodes[x.0].value.data();
        let g = self.nodes[gamma.0].value.data();
        let be = self.nodes[beta.0].value.data();
        let mut out = vec![T::ZERO; xv.len()];
        for b in 0..batch {
            for c in 0..ch {
                let base = (b * ch + c) * h * w;
                let scale = g[c] * rstd[c];
                for k in 0..h * w {
                    out[base + k] = (xv[base + k] - mean[c]) * scale + be[c];
                }
            }
        }
        Tensor::new(vec![batch, ch, h, w], out).expect("shape math")
    }

    fn check_vec(&self, op: &'static str, id: Id, len: usize) -> Result<(), TensorError> {
        if self.nodes[id.0].value.shape() != [len] {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.nodes[id.0].value.shape().to_vec(),
                right: vec![len],
            });
        }
        Ok(())
    }

    /// 2x2 max pooling with stride 2; spatial dims must be even.
    pub fn maxpool2x2(&mut self, x: Id) -> Result<Id, TensorError> {
        let (batch, ch, h, w) = self.nodes[x.0].value.dims4("maxpool2x2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::Dimension {
                op: "maxpool2x2",
                details: format!("spatial dims {h}x{w} must be even"),
            });
        }
        let (out, idx) = maxpool2x2_forward(self.nodes[x.0].value.data(), batch * ch, h, w);
        let value = Tensor::new(vec![batch, ch, h / 2, w / 2], out).expect("shape math");
        Ok(self.push(value, self.requires(&[x]), Op::MaxPool { x, idx, in_h: h, in_w: w }))
    }

    /// Nearest-neighbor resize to (out_h, out_w).
    pub fn resize_nearest(&mut self, x: Id, out_h: usize, out_w: usize) -> Result<Id, TensorError> {
        let (batch, ch, h, w) = self.nodes[x.0].value.dims4("resize_nearest")?;
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::Dimension {
                op: "resize_nearest",
                details: "output dims must be positive".into(),
            });
        }
        let out = resize_nearest_forward(self.nodes[x.0].value.data(), batch * ch, h, w, out_h, out_w);
        let value = Tensor::new(vec![batch, ch, out_h, out_w], out).expect("shape math");
        Ok(self.push(
            value,
            self.requires(&[x]),
            Op::Resize { x, in_h: h, in_w: w, out_h, out_w },
        ))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample_nearest2x(&mut self, x: Id) -> Result<Id, TensorError> {
        let (_, _, h, w) = self.nodes[x.0].value.dims4("upsample_nearest2x")?;
        self.resize_nearest(x, 2 * h, 2 * w)
    }

    /// Concatenates along the channel axis of [B,C,H,W] tensors.
    pub fn concat_channels(&mut self, a: Id, b: Id) -> Result<Id, TensorError> {
        let (ba, ca, ha, wa) = self.nodes[a.0].value.dims4("concat_channels")?;
        let (bb, cb, hb, wb) = self.nodes[b.0].value.dims4("concat_channels")?;
        if ba != bb || ha != hb || wa != wb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                left: vec![ba, ca, ha, wa],
                right: vec![bb, cb, hb, wb],
            });
        }
        let hw = ha * wa;
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = Vec::with_capacity((ca + cb) * ba * hw);
        for n in 0..ba {
            out.extend_from_slice(&av[n * ca * hw..(n + 1) * ca * hw]);
            out.extend_from_slice(&bv[n * cb * hw..(n + 1) * cb * hw]);
        }
        let value = Tensor::new(vec![ba, ca + cb, ha, wa], out).expect("shape math");
        Ok(self.push(value, self.requires(&[a, b]), Op::ConcatCh(a, b)))
    }

    pub fn reshape(&mut self, x: Id, shape: &[usize]) -> Result<Id, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].value.numel() {
            return Err(TensorError::Dimension {
                op: "reshape",
                details: format!(
                    "cannot reshape {:?} into {:?}",
                    self.nodes[x.0].value.shape(),
                    shape
                ),
            });
        }
        let value = Tensor::new(shape.to_vec(), self.nodes[x.0].value.data().to_vec())
            .expect("numel checked");
        Ok(self.push(value, self.requires(&[x]), Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Id, axes: &[usize]) -> Result<Id, TensorError> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        let nd = shape.len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::Dimension {
                op: "permute",
                details: format!("axes {axes:?} is not a permutation of 0..{nd}"),
            });
        }
        let value = permute_tensor(&self.nodes[x.0].value, axes);
        Ok(self.push(value, self.requires(&[x]), Op::Permute { x, axes: axes.to_vec() }))
    }

    /// Columns [start, start+len) of a 2D tensor.
    pub fn slice_cols(&mut self, x: Id, start: usize, len: usize) -> Result<Id, TensorError> {
        let (rows, cols) = self.nodes[x.0].value.dims2("slice_cols")?;
        if start + len > cols {
            return Err(TensorError::Dimension {
                op: "slice_cols",
                details: format!("slice {start}..{} out of {cols} columns", start + len),
            });
        }
        let xv = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::new(vec![rows, len], out).expect("shape math");
        Ok(self.push(value, self.requires(&[x]), Op::SliceCols { x, start }))
    }

    /// Numerically stable softmax over the last dimension.
    pub fn softmax(&mut self, x: Id) -> Result<Id, TensorError> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        let last = *shape.last().ok_or(TensorError::Dimension {
            op: "softmax",
            details: "input has no dimensions".into(),
        })?;
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![T::ZERO; xv.len()];
        for (row_in, row_out) in xv.chunks_exact(last).zip(out.chunks_exact_mut(last)) {
            let max = row_in.iter().fold(row_in[0], |m, &v| m.maximum(v));
            let mut denom = T::ZERO;
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = (v - max).exp();
                denom += *o;
            }
            let inv = T::ONE / denom;
            for o in row_out.iter_mut() {
                *o *= inv;
            }
        }
        let value = Tensor::new(shape, out).expect("shape math");
        Ok(self.push(value, self.requires(&[x]), Op::Softmax(x)))
    }

    /// Layer normalization over the last dimension with affine parameters.
    pub fn layer_norm(
        &mut self,
        x: Id,
        gamma: Id,
        beta: Id,
        eps: f64,
    ) -> Result<Id, TensorError> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        let last = *shape.last().ok_or(TensorError::Dimension {
            op: "layer_norm",
            details: "input has no dimensions".into(),
        })?;
        self.check_vec("layer_norm gamma", gamma, last)?;
        self.check_vec("layer_norm beta", beta, last)?;
        let xv = self.nodes[x.0].value.data();
        let rows = xv.len() / last;
        let mut mean = vec![T::ZERO; rows];
        let mut rstd = vec![T::ZERO; rows];
        let g = self.nodes[gamma.0].value.data().to_vec();
        let be = self.nodes[beta.0].value.data().to_vec();
        let mut out = vec![T::ZERO; xv.len()];
        let inv_n = T::from_f64(1.0 / last as f64);
        for r in 0..rows {
            let row = &xv[r * last..(r + 1) * last];
            let mut m = T::ZERO;
            for &v in row {
                m += v;
            }
            m *= inv_n;
            let mut var = T::ZERO;
            for &v in row {
                let d = v - m;
                var += d * d;
            }
            var *= inv_n;
            let rs = T::ONE / (var + T::from_f64(eps)).sqrt();
            mean[r] = m;
            rstd[r] = rs;
            for (k, &v) in row.iter().enumerate() {
                out[r * last + k] = (v - m) * rs * g[k] + be[k];
            }
        }
        let value = Tensor::new(shape, out).expect("shape math");
        let requires = self.requires(&[x, gamma, beta]);
        Ok(self.push(value, requires, Op::LayerNorm { x, gamma, beta, mean, rstd }))
    }

    /// Inverted dropout: in training, zeroes units with probability `p` and
    /// scales the kept ones by 1/(1-p); in eval it is the identity (no node
    /// is recorded).
    pub fn dropout(
        &mut self,
        x: Id,
        p: f64,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Id, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let xv = self.nodes[x.0].value.data();
        let mask: Vec<T> = (0..xv.len())
            .map(|_| if rng.random_range(0.0..1.0) < p { T::ZERO } else { keep })
            .collect();
        let out: Vec<T> = xv.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value =
            Tensor::new(self.nodes[x.0].value.shape().to_vec(), out).expect("same shape");
        Ok(self.push(value, self.requires(&[x]), Op::Dropout { x, mask }))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Id, target: Id) -> Result<Id, TensorError> {
        self.same_shape("mse", pred, target)?;
        let p = self.nodes[pred.0].value.data();
        let t = self.nodes[target.0].value.data();
        let mut acc = 0.0f64;
        for (&a, &b) in p.iter().zip(t) {
            let d = (a - b).to_f64();
            acc += d * d;
        }
        let value = Tensor::scalar(T::from_f64(acc / p.len() as f64));
        Ok(self.push(value, self.requires(&[pred, target]), Op::Mse(pred, target)))
    }

    /// Mean absolute error over all elements (the written-formula "MAE").
    pub fn mae(&mut self, pred: Id, target: Id) -> Result<Id, TensorError> {
        self.same_shape("mae", pred, target)?;
        let p = self.nodes[pred.0].value.data();
        let t = self.nodes[target.0].value.data();
        let mut acc = 0.0f64;
        for (&a, &b) in p.iter().zip(t) {
            acc += (a - b).abs().to_f64();
        }
        let value = Tensor::scalar(T::from_f64(acc / p.len() as f64));
        Ok(self.push(value, self.requires(&[pred, target]), Op::Mae(pred, target)))
    }

    pub fn sum(&mut self, x: Id) -> Id {
        let mut acc = T::ZERO;
        for &v in self.nodes[x.0].value.data() {
            acc += v;
        }
        let value = Tensor::scalar(acc);
        self.push(value, self.requires(&[x]), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Id) -> Id {
        let n = self.nodes[x.0].value.numel();
        let mut acc = T::ZERO;
        for &v in self.nodes[x.0].value.data() {
            acc += v;
        }
        let value = Tensor::scalar(acc * T::from_f64(1.0 / n as f64));
        self.push(value, self.requires(&[x]), Op::Mean(x))
    }

    /// Reverse sweep from a scalar root. Gradients of `requires_grad` leaves
    /// are populated; fan-out accumulates additively.
    pub fn backward(&mut self, root: Id) -> Result<(), TensorError> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: self.nodes[root.0].value.shape().to_vec(),
            });
        }
        if !self.nodes[root.0].requires {
            return Ok(());
        }
        let shape = self.nodes[root.0].value.shape().to_vec();
        self.nodes[root.0].grad = Some(Tensor::filled(&shape, T::ONE));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires || self.nodes[i].grad.is_none() {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let grad = self.nodes[i].grad.clone().unwrap();
            self.backprop_node(i, &op, &grad);
        }
        Ok(())
    }

    /// Gradients of parameter leaves, keyed by parameter uid.
    pub fn param_grads(&self) -> std::collections::HashMap<u64, Tensor<T>> {
        self.nodes
            .iter()
            .filter_map(|n| match (n.param_uid, &n.grad) {
                (Some(uid), Some(g)) => Some((uid, g.clone())),
                _ => None,
            })
            .collect()
    }

    fn accumulate(&mut self, id: Id, g: Tensor<T>) {
        let node = &mut self.nodes[id.0];
        if !node.requires {
            return;
        }
        debug_assert_eq!(node.value.shape(), g.shape());
        match &mut node.grad {
            Some(acc) => {
                for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += v;
                }
            }
            None => node.grad = Some(g),
        }
    }

    fn backprop_node(&mut self, i: usize, op: &Op<T>, g: &Tensor<T>) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g.clone());
                let neg = Tensor::new(g.shape().to_vec(), g.data().iter().map(|&v| -v).collect())
                    .expect("same shape");
                self.accumulate(*b, neg);
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(&bv).map(|(&gv, &b)| gv * b).collect(),
                )
                .expect("same shape");
                let db = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(&av).map(|(&gv, &a)| gv * a).collect(),
                )
                .expect("same shape");
                self.accumulate(*a, da);
                self.accumulate(*b, db);
            }
            Op::Scale(a, s) => {
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|&gv| gv * *s).collect(),
                )
                .expect("same shape");
                self.accumulate(*a, da);
            }
            Op::Relu(a) => {
                let xv = self.nodes[a.0].value.data();
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &x)| if x > T::ZERO { gv } else { T::ZERO })
                        .collect(),
                )
                .expect("same shape");
                self.accumulate(*a, da);
            }
            Op::Tanh(a) => {
                let yv = self.nodes[i].value.data();
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(yv).map(|(&gv, &y)| gv * (T::ONE - y * y)).collect(),
                )
                .expect("same shape");
                self.accumulate(*a, da);
            }
            Op::Sigmoid(a) => {
                let yv = self.nodes[i].value.data();
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(yv).map(|(&gv, &y)| gv * y * (T::ONE - y)).collect(),
                )
                .expect("same shape");
                self.accumulate(*a, da);
            }
            Op::Linear { x, w, b } => {
                let (w_in, w_out) = self.nodes[w.0].value.dims2("linear").unwrap();
                let rows = self.nodes[x.0].value.numel() / w_in;
                let xv = self.nodes[x.0].value.data();
                let wv = self.nodes[w.0].value.data();
                let dx = kernels::matmul_a_bt(g.data(), wv, rows, w_out, w_in);
                let dw = kernels::matmul_at_b(xv, g.data(), w_in, rows, w_out);
                let x_shape = self.nodes[x.0].value.shape().to_vec();
                self.accumulate(*x, Tensor::new(x_shape, dx).expect("shape math"));
                self.accumulate(*w, Tensor::new(vec![w_in, w_out], dw).expect("shape math"));
                if let Some(b) = b {
                    let mut db = vec![T::ZERO; w_out];
                    for r in 0..rows {
                        for (acc, &gv) in db.iter_mut().zip(&g.data()[r * w_out..(r + 1) * w_out]) {
                            *acc += gv;
                        }
                    }
                    self.accumulate(*b, Tensor::new(vec![w_out], db).expect("shape math"));
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2("matmul").unwrap();
                let (_, n) = self.nodes[b.0].value.dims2("matmul").unwrap();
                let da = kernels::matmul_a_bt(g.data(), self.nodes[b.0].value.data(), m, n, k);
                let db = kernels::matmul_at_b(self.nodes[a.0].value.data(), g.data(), k, m, n);
                self.accumulate(*a, Tensor::new(vec![m, k], da).expect("shape math"));
                self.accumulate(*b, Tensor::new(vec![k, n], db).expect("shape math"));
            }
            Op::Bmm(a, b) => {
                let (ba, m, k) = self.nodes[a.0].value.dims3("bmm").unwrap();
                let (_, _, n) = self.nodes[b.0].value.dims3("bmm").unwrap();
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let mut da = Vec::with_capacity(ba * m * k);
                let mut db = Vec::with_capacity(ba * k * n);
                for idx in 0..ba {
                    let gi = &g.data()[idx * m * n..(idx + 1) * m * n];
                    da.extend(kernels::matmul_a_bt(gi, &bv[idx * k * n..(idx + 1) * k * n], m, n, k));
                    db.extend(kernels::matmul_at_b(&av[idx * m * k..(idx + 1) * m * k], gi, k, m, n));
                }
                self.accumulate(*a, Tensor::new(vec![ba, m, k], da).expect("shape math"));
                self.accumulate(*b, Tensor::new(vec![ba, k, n], db).expect("shape math"));
            }
            Op::Conv2d { x, w, b, dims } => {
                let (dx, dw, db) = conv2d_backward(
                    self.nodes[x.0].value.data(),
                    self.nodes[w.0].value.data(),
                    g.data(),
                    b.is_some(),
                    dims,
                );
                let x_shape = self.nodes[x.0].value.shape().to_vec();
                let w_shape = self.nodes[w.0].value.shape().to_vec();
                self.accumulate(*x, Tensor::new(x_shape, dx).expect("shape math"));
                self.accumulate(*w, Tensor::new(w_shape, dw).expect("shape math"));
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(*b, Tensor::new(vec![dims.out_ch], db).expect("shape math"));
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, rstd, train } => {
                let (batch, ch, h, w) = self.nodes[x.0].value.dims4("batchnorm2d").unwrap();
                let n = (batch * h * w) as f64;
                let xv = self.nodes[x.0].value.data();
                let gv = self.nodes[gamma.0].value.data();
                let mut dgamma = vec![T::ZERO; ch];
                let mut dbeta = vec![T::ZERO; ch];
                for b in 0..batch {
                    for c in 0..ch {
                        let base = (b * ch + c) * h * w;
                        for k in 0..h * w {
                            let xh = (xv[base + k] - mean[c]) * rstd[c];
                            dgamma[c] += g.data()[base + k] * xh;
                            dbeta[c] += g.data()[base + k];
                        }
                    }
                }
                let mut dx = vec![T::ZERO; xv.len()];
                if *train {
                    let inv_n = T::from_f64(1.0 / n);
                    for b in 0..batch {
                        for c in 0..ch {
                            let base = (b * ch + c) * h * w;
                            let scale = gv[c] * rstd[c];
                            for k in 0..h * w {
                                let xh = (xv[base + k] - mean[c]) * rstd[c];
                                dx[base + k] = scale
                                    * (g.data()[base + k]
                                        - dbeta[c] * inv_n
                                        - xh * dgamma[c] * inv_n);
                            }
                        }
                    }
                } else {
                    for b in 0..batch {
                        for c in 0..ch {
                            let base = (b * ch + c) * h * w;
                            let scale = gv[c] * rstd[c];
                            for k in 0..h * w {
                                dx[base + k] = scale * g.data()[base + k];
                            }
                        }
                    }
                }
                let x_shape = self.nodes[x.0].value.shape().to_vec();
                self.accumulate(*x, Tensor::new(x_shape, dx).expect("shape math"));
                self.accumulate(*gamma, Tensor::new(vec![ch], dgamma).expect("shape math"));
                self.accumulate(*beta, Tensor::new(vec![ch], dbeta).expect("shape math"));
            }
            Op::MaxPool { x, idx, in_h, in_w } => {
                let (batch, ch, _, _) = self.nodes[i].value.dims4("maxpool2x2").unwrap();
                let ohw = self.nodes[i].value.numel() / (batch * ch);
                let mut dx = vec![T::ZERO; batch * ch * in_h * in_w];
                for p in 0..batch * ch {
                    let plane = &mut dx[p * in_h * in_w..(p + 1) * in_h * in_w];
                    for k in 0..ohw {
                        plane[idx[p * ohw + k] as usize] += g.data()[p * ohw + k];
                    }
                }
                let x_shape = self.nodes[x.0].value.shape().to_vec();
                self.accumulate(*x, Tensor::new(x_shape, dx).expect("shape math"));
            }
            Op::Resize { x, in_h, in_w, out_h, out_w } => {
                let planes = self.nodes[x.0].value.numel() / (in_h * in_w);
                let dx = resize_nearest_backward(g.data(), planes, *in_h, *in_w, *out_h, *out_w);
                let x_shape = self.nodes[x.0].value.shape().to_vec();
                self.accumulate(*x, Tensor::new(x_shape, dx).expect("shape math"));
            }
            Op::ConcatCh(a, b) => {
                let (ba, ca, h, w) = self.nodes[a.0].value.dims4("concat_channels").unwrap();
                let (_, cb, _, _) = self.nodes[b.0].value.dims4("concat_channels").unwrap();
                let hw = h * w;
                let mut da = vec![T::ZERO; ba * ca * hw];
                let mut db = vec![T::ZERO; ba * cb * hw];
                for n in 0..ba {
                    let src = &g.data()[n * (ca + cb) * hw..(n + 1) * (ca + cb) * hw];
                    da[n * ca * hw..(n + 1) * ca * hw].copy_from_slice(&src[..ca * hw]);
                    db[n * cb * hw..(n + 1) * cb * hw].copy_from_slice(&src[ca * hw..]);
                }
                self.accumulate(*a, Tensor::new(vec![ba, ca, h, w], da).expect("shape math"));
                self.accumulate(*b, Tensor::new(vec![ba, cb, h, w], db).expect("shape math"));
            }
            Op::Reshape(x) => {
                let x_shape = self.nodes[x.0].value.shape().to_vec();
                self.accumulate(*x, Tensor::new(x_shape, g.data().to_vec()).expect("same numel"));
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0usize; axes.len()];
                for (k, &a) in axes.iter().enumerate() {
                    inverse[a] = k;
                }
                self.accumulate(*x, permute_tensor(g, &inverse));
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = self.nodes[x.0].value.dims2("slice_cols").unwrap();
                let len = self.nodes[i].value.shape()[1];
                let mut dx = vec![T::ZERO; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                self.accumulate(*x, Tensor::new(vec![rows, cols], dx).expect("shape math"));
            }
            Op::Softmax(x) => {
                let y = self.nodes[i].value.data();
                let last = *self.nodes[i].value.shape().last().unwrap();
                let mut dx = vec![T::ZERO; y.len()];
                for r in 0..y.len() / last {
                    let ys = &y[r * last..(r + 1) * last];
                    let gs = &g.data()[r * last..(r + 1) * last];
                    let mut dot = T::ZERO;
                    for (&yv, &gv) in ys.iter().zip(gs) {
                        dot += yv * gv;
                    }
                    for k in 0..last {
                        dx[r * last + k] = ys[k] * (gs[k] - dot);
                    }
                }
                let x_shape = self.nodes[x.0].value.shape().to_vec();
                self.accumulate(*x, Tensor::new(x_shape, dx).expect("shape math"));
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let last = *shape.last().unwrap();
                let rows = self.nodes[x.0].value.numel() / last;
                let xv = self.nodes[x.0].value.data();
                let gv = self.nodes[gamma.0].value.data();
                let inv_n = T::from_f64(1.0 / last as f64);
                let mut dx = vec![T::ZERO; xv.len()];
                let mut dgamma = vec![T::ZERO; last];
                let mut dbeta = vec![T::ZERO; last];
                for r in 0..rows {
                    let base = r * last;
                    let mut mean_gy = T::ZERO;
                    let mut mean_gyx = T::ZERO;
                    for k in 0..last {
                        let xh = (xv[base + k] - mean[r]) * rstd[r];
                        let gy = g.data()[base + k] * gv[k];
                        mean_gy += gy;
                        mean_gyx += gy * xh;
                        dgamma[k] += g.data()[base + k] * xh;
                        dbeta[k] += g.data()[base + k];
                    }
                    mean_gy *= inv_n;
                    mean_gyx *= inv_n;
                    for k in 0..last {
                        let xh = (xv[base + k] - mean[r]) * rstd[r];
                        let gy = g.data()[base + k] * gv[k];
                        dx[base + k] = rstd[r] * (gy - mean_gy - xh * mean_gyx);
                    }
                }
                self.accumulate(*x, Tensor::new(shape, dx).expect("shape math"));
                self.accumulate(*gamma, Tensor::new(vec![last], dgamma).expect("shape math"));
                self.accumulate(*beta, Tensor::new(vec![last], dbeta).expect("shape math"));
            }
            Op::Dropout { x, mask } => {
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect(),
                )
                .expect("same shape");
                self.accumulate(*x, da);
            }
            Op::Mse(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let scale = g.data()[0] * T::from_f64(2.0 / av.len() as f64);
                let da: Vec<T> = av.iter().zip(bv).map(|(&p, &t)| scale * (p - t)).collect();
                let shape = self.nodes[a.0].value.shape().to_vec();
                if self.nodes[b.0].requires {
                    let db: Vec<T> = da.iter().map(|&v| -v).collect();
                    self.accumulate(*b, Tensor::new(shape.clone(), db).expect("shape math"));
                }
                self.accumulate(*a, Tensor::new(shape, da).expect("shape math"));
            }
            Op::Mae(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let scale = g.data()[0] * T::from_f64(1.0 / av.len() as f64);
                let da: Vec<T> = av
                    .iter()
                    .zip(bv)
                    .map(|(&p, &t)| {
                        if p > t {
                            scale
                        } else if p < t {
                            -scale
                        } else {
                            T::ZERO
                        }
                    })
                    .collect();
                let shape = self.nodes[a.0].value.shape().to_vec();
                if self.nodes[b.0].requires {
                    let db: Vec<T> = da.iter().map(|&v| -v).collect();
                    self.accumulate(*b, Tensor::new(shape.clone(), db).expect("shape math"));
                }
                self.accumulate(*a, Tensor::new(shape, da).expect("shape math"));
            }
            Op::Sum(x) => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                self.accumulate(*x, Tensor::filled(&shape, g.data()[0]));
            }
            Op::Mean(x) => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let n = self.nodes[x.0].value.numel();
                self.accumulate(*x, Tensor::filled(&shape, g.data()[0] * T::from_f64(1.0 / n as f64)));
            }
        }
    }
}

fn sigmoid_stable<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

fn permute_tensor<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let in_shape = x.shape();
    let nd = in_shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let mut in_strides = vec![1usize; nd];
    for k in (0..nd.saturating_sub(1)).rev() {
        in_strides[k] = in_strides[k + 1] * in_shape[k + 1];
    }
    let numel = x.numel();
    let mut out = Vec::with_capacity(numel);
    let mut out_idx = vec![0usize; nd];
    for _ in 0..numel {
        let mut flat = 0;
        for k in 0..nd {
            flat += out_idx[k] * in_strides[axes[k]];
        }
        out.push(x.data()[flat]);
        for k in (0..nd).rev() {
            out_idx[k] += 1;
            if out_idx[k] < out_shape[k] {
                break;
            }
            out_idx[k] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permutation preserves numel")
}
