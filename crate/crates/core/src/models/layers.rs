//! Parameterized layers: thin wrappers that own [`Param`]s (and running
//! buffers for batch normalization) and bind them onto a tape per forward.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{Id, MhaWeights, Mode, Param, Scalar, Tape, Tensor, TensorError};

/// Fan-in-scaled normal weights for rectifier stacks.
fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    /// Convolutions feeding a batch norm carry no bias (the shift would be
    /// normalized away).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = Param::new(
            format!("{name}.weight"),
            Tensor::randn(&[out_ch, in_ch, k, k], he_std(in_ch * k * k), rng),
        );
        let bias = bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(&[out_ch])));
        Self { weight, bias, stride, pad }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Id) -> Result<Id, TensorError> {
        let w = tape.param(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.param(b));
        tape.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match &self.bias {
            Some(b) => vec![&self.weight, b],
            None => vec![&self.weight],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match &mut self.bias {
            Some(b) => vec![&mut self.weight, b],
            None => vec![&mut self.weight],
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
    name: String,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::filled(&[channels], T::ONE)),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], T::ONE),
            momentum: 0.1,
            eps: 1e-5,
            name: name.into(),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Id, mode: Mode) -> Result<Id, TensorError> {
        let gamma = tape.param(&self.gamma);
        let beta = tape.param(&self.beta);
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batchnorm2d_train(x, gamma, beta, self.eps)?;
                // Running stats use the unbiased batch variance.
                let m = T::from_f64(self.momentum);
                let keep = T::from_f64(1.0 - self.momentum);
                for (r, b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
                    *r = keep * *r + m * *b;
                }
                for (r, b) in self.running_var.data_mut().iter_mut().zip(&stats.var_unbiased) {
                    *r = keep * *r + m * *b;
                }
                Ok(y)
            }
            Mode::Eval => tape.batchnorm2d_eval(
                x,
                gamma,
                beta,
                self.eps,
                self.running_mean.data(),
                self.running_var.data(),
            ),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn buffers(&self) -> Vec<(String, Tensor<T>)> {
        vec![
            (format!("{}.running_mean", self.name), self.running_mean.clone()),
            (format!("{}.running_var", self.name), self.running_var.clone()),
        ]
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor<T>) -> bool {
        if name == format!("{}.running_mean", self.name) {
            self.running_mean = value;
            true
        } else if name == format!("{}.running_var", self.name) {
            self.running_var = value;
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::randn(&[in_dim, out_dim], 1.0 / (in_dim as f64).sqrt(), rng),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[out_dim])),
        }
    }

    /// All-zero initialization; an untrained head then predicts exactly zero.
    pub fn zeroed(name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), Tensor::zeros(&[in_dim, out_dim])),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[out_dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Id) -> Result<Id, TensorError> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.linear(x, w, Some(b))
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Affine layer-normalization parameters over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNormLayer<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: f64,
}

impl<T: Scalar> LayerNormLayer<T> {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::filled(&[dim], T::ONE)),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Id) -> Result<Id, TensorError> {
        let gamma = tape.param(&self.gamma);
        let beta = tape.param(&self.beta);
        tape.layer_norm(x, gamma, beta, self.eps)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Fused-gate LSTM cell weights: w_ih [in, 4H], w_hh [H, 4H], bias [4H] with
/// gate order (input, forget, cell, output) and the forget bias raised to +1.
#[derive(Debug, Clone)]
pub struct LstmCellLayer<T> {
    pub w_ih: Param<T>,
    pub w_hh: Param<T>,
    pub bias: Param<T>,
    pub hidden: usize,
}

impl<T: Scalar> LstmCellLayer<T> {
    pub fn new(name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut bias = Tensor::zeros(&[4 * hidden]);
        for k in hidden..2 * hidden {
            bias.data_mut()[k] = T::ONE;
        }
        Self {
            w_ih: Param::new(
                format!("{name}.w_ih"),
                Tensor::randn(&[input, 4 * hidden], 1.0 / (input as f64).sqrt(), rng),
            ),
            w_hh: Param::new(
                format!("{name}.w_hh"),
                Tensor::randn(&[hidden, 4 * hidden], 1.0 / (hidden as f64).sqrt(), rng),
            ),
            bias: Param::new(format!("{name}.bias"), bias),
            hidden,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x: Id,
        h: Id,
        c: Id,
    ) -> Result<(Id, Id), TensorError> {
        let w_ih = tape.param(&self.w_ih);
        let w_hh = tape.param(&self.w_hh);
        let bias = tape.param(&self.bias);
        crate::tensor::lstm_cell(tape, x, h, c, w_ih, w_hh, bias)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.w_ih, &self.w_hh, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.w_ih, &mut self.w_hh, &mut self.bias]
    }
}

/// Attention projection parameters for one multi-head attention block.
#[derive(Debug, Clone)]
pub struct MhaParams<T> {
    pub wq: Param<T>,
    pub bq: Param<T>,
    pub wk: Param<T>,
    pub bk: Param<T>,
    pub wv: Param<T>,
    pub bv: Param<T>,
    pub wo: Param<T>,
    pub bo: Param<T>,
    pub n_heads: usize,
}

impl<T: Scalar> MhaParams<T> {
    pub fn new(name: &str, d_model: usize, n_heads: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / (d_model as f64).sqrt();
        let mut mk_w = |suffix: &str| {
            Param::new(format!("{name}.{suffix}"), Tensor::randn(&[d_model, d_model], std, rng))
        };
        let wq = mk_w("wq");
        let wk = mk_w("wk");
        let wv = mk_w("wv");
        let wo = mk_w("wo");
        let mk_b =
            |suffix: &str| Param::new(format!("{name}.{suffix}"), Tensor::zeros(&[d_model]));
        Self {
            wq,
            bq: mk_b("bq"),
            wk,
            bk: mk_b("bk"),
            wv,
            bv: mk_b("bv"),
            wo,
            bo: mk_b("bo"),
            n_heads,
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> MhaWeights {
        MhaWeights {
            wq: tape.param(&self.wq),
            bq: tape.param(&self.bq),
            wk: tape.param(&self.wk),
            bk: tape.param(&self.bk),
            wv: tape.param(&self.wv),
            bv: tape.param(&self.bv),
            wo: tape.param(&self.wo),
            bo: tape.param(&self.bo),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
        ]
    }
}

/// Two 3x3 conv + batch norm pairs with a residual shortcut; the shortcut is
/// a 1x1 projection when the channel count changes.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    pub shortcut: Option<(Conv2d<T>, BatchNorm2d<T>)>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        let conv1 = Conv2d::new(&format!("{name}.conv1"), in_ch, out_ch, 3, 1, 1, false, rng);
        let bn1 = BatchNorm2d::new(&format!("{name}.bn1"), out_ch);
        let conv2 = Conv2d::new(&format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, false, rng);
        let bn2 = BatchNorm2d::new(&format!("{name}.bn2"), out_ch);
        let shortcut = (in_ch != out_ch).then(|| {
            (
                Conv2d::new(&format!("{name}.short.conv"), in_ch, out_ch, 1, 1, 0, false, rng),
                BatchNorm2d::new(&format!("{name}.short.bn"), out_ch),
            )
        });
        Self { conv1, bn1, conv2, bn2, shortcut }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Id, mode: Mode) -> Result<Id, TensorError> {
        let y = self.conv1.forward(tape, x)?;
        let y = self.bn1.forward(tape, y, mode)?;
        let y = tape.relu(y);
        let y = self.conv2.forward(tape, y)?;
        let y = self.bn2.forward(tape, y, mode)?;
        let sc = match &mut self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(tape, x)?;
                bn.forward(tape, s, mode)?
            }
            None => x,
        };
        let sum = tape.add(y, sc)?;
        Ok(tape.relu(sum))
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.conv1.params();
        p.extend(self.bn1.params());
        p.extend(self.conv2.params());
        p.extend(self.bn2.params());
        if let Some((conv, bn)) = &self.shortcut {
            p.extend(conv.params());
            p.extend(bn.params());
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.conv1.params_mut();
        p.extend(self.bn1.params_mut());
        p.extend(self.conv2.params_mut());
        p.extend(self.bn2.params_mut());
        if let Some((conv, bn)) = &mut self.shortcut {
            p.extend(conv.params_mut());
            p.extend(bn.params_mut());
        }
        p
    }

    pub fn buffers(&self) -> Vec<(String, Tensor<T>)> {
        let mut b = self.bn1.buffers();
        b.extend(self.bn2.buffers());
        if let Some((_, bn)) = &self.shortcut {
            b.extend(bn.buffers());
        }
        b
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor<T>) -> bool {
        if self.bn1.set_buffer(name, value.clone()) || self.bn2.set_buffer(name, value.clone()) {
            return true;
        }
        if let Some((_, bn)) = &mut self.shortcut {
            return bn.set_buffer(name, value);
        }
        false
    }
}

