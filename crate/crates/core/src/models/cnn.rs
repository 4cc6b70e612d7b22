//! Plain convolutional baseline: stacked conv/batch-norm/rectifier blocks
//! with 2x pooling, flattened into a fully connected 1250-way output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{BatchNorm2d, Conv2d, Linear};
use super::{ModelConfig, Module};
use crate::tensor::{Id, Mode, Param, Scalar, Tape, TensorError};

#[derive(Debug, Clone)]
pub struct CnnBaseline<T> {
    pub config: ModelConfig,
    blocks: Vec<(Conv2d<T>, BatchNorm2d<T>)>,
    head: Linear<T>,
}

impl<T: Scalar> CnnBaseline<T> {
    pub fn new(base_width: usize, raster_h: usize, raster_w: usize, seed: u64) -> Self {
        assert!(raster_h % 16 == 0 && raster_w % 16 == 0, "raster must divide by 16");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [base_width, 2 * base_width, 4 * base_width, 8 * base_width];
        let mut blocks = Vec::new();
        let mut in_ch = 3;
        for (k, &out_ch) in widths.iter().enumerate() {
            let conv =
                Conv2d::new(&format!("cnn.block{k}.conv"), in_ch, out_ch, 3, 1, 1, false, &mut rng);
            let bn = BatchNorm2d::new(&format!("cnn.block{k}.bn"), out_ch);
            blocks.push((conv, bn));
            in_ch = out_ch;
        }
        let flat = widths[3] * (raster_h / 16) * (raster_w / 16);
        let head = Linear::new("cnn.head", flat, 1250, &mut rng);
        Self {
            config: ModelConfig::new("cnn", base_width, raster_h, raster_w, seed),
            blocks,
            head,
        }
    }

    /// images [B, 3, raster_h, raster_w] -> [B, 1250].
    pub fn forward(&mut self, tape: &mut Tape<T>, images: Id, mode: Mode) -> Result<Id, TensorError> {
        let mut x = images;
        for (conv, bn) in &mut self.blocks {
            x = conv.forward(tape, x)?;
            x = bn.forward(tape, x, mode)?;
            x = tape.relu(x);
            x = tape.maxpool2x2(x)?;
        }
        let batch = tape.value(x).shape()[0];
        let flat = tape.value(x).numel() / batch;
        let x = tape.reshape(x, &[batch, flat])?;
        self.head.forward(tape, x)
    }
}

impl<T: Scalar> Module<T> for CnnBaseline<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = Vec::new();
        for (conv, bn) in &self.blocks {
            p.extend(conv.params());
            p.extend(bn.params());
        }
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = Vec::new();
        for (conv, bn) in &mut self.blocks {
            p.extend(conv.params_mut());
            p.extend(bn.params_mut());
        }
        p.extend(self.head.params_mut());
        p
    }

    fn buffers(&self) -> Vec<(String, crate::tensor::Tensor<T>)> {
        self.blocks.iter().flat_map(|(_, bn)| bn.buffers()).collect()
    }

    fn set_buffer(&mut self, name: &str, value: crate::tensor::Tensor<T>) -> bool {
        self.blocks.iter_mut().any(|(_, bn)| bn.set_buffer(name, value.clone()))
    }
}
