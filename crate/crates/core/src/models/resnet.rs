//! Residual baseline: four stages of two residual blocks with 2x pooling
//! between stages, a 1x1 convolution down to one channel, and a nearest
//! resample onto the 25x50 label grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{BatchNorm2d, Conv2d, ResidualBlock};
use super::{ModelConfig, Module};
use crate::tensor::{Id, Mode, Param, Scalar, Tape, Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct ResNetBaseline<T> {
    pub config: ModelConfig,
    stem: Conv2d<T>,
    stem_bn: BatchNorm2d<T>,
    stages: Vec<[ResidualBlock<T>; 2]>,
    head: Conv2d<T>,
}

impl<T: Scalar> ResNetBaseline<T> {
    /// Default widths follow the classic 64/128/256/512 ladder when
    /// `base_width` is 64; desk-scale runs shrink it.
    pub fn new(base_width: usize, raster_h: usize, raster_w: usize, seed: u64) -> Self {
        assert!(raster_h % 16 == 0 && raster_w % 16 == 0, "raster must divide by 16");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [base_width, 2 * base_width, 4 * base_width, 8 * base_width];
        let stem = Conv2d::new("resnet.stem.conv", 3, widths[0], 3, 1, 1, false, &mut rng);
        let stem_bn = BatchNorm2d::new("resnet.stem.bn", widths[0]);
        let mut stages = Vec::new();
        let mut in_ch = widths[0];
        for (s, &out_ch) in widths.iter().enumerate() {
            let b0 = ResidualBlock::new(&format!("resnet.stage{s}.block0"), in_ch, out_ch, &mut rng);
            let b1 = ResidualBlock::new(&format!("resnet.stage{s}.block1"), out_ch, out_ch, &mut rng);
            stages.push([b0, b1]);
            in_ch = out_ch;
        }
        let head = Conv2d::new("resnet.head.conv", widths[3], 1, 1, 1, 0, true, &mut rng);
        Self {
            config: ModelConfig::new("resnet", base_width, raster_h, raster_w, seed),
            stem,
            stem_bn,
            stages,
            head,
        }
    }

    /// images [B, 3, raster_h, raster_w] -> [B, 1250].
    pub fn forward(&mut self, tape: &mut Tape<T>, images: Id, mode: Mode) -> Result<Id, TensorError> {
        let mut x = self.stem.forward(tape, images)?;
        x = self.stem_bn.forward(tape, x, mode)?;
        x = tape.relu(x);
        for stage in &mut self.stages {
            for block in stage.iter_mut() {
                x = block.forward(tape, x, mode)?;
            }
            x = tape.maxpool2x2(x)?;
        }
        let x = self.head.forward(tape, x)?;
        let x = tape.resize_nearest(x, 25, 50)?;
        let batch = tape.value(x).shape()[0];
        tape.reshape(x, &[batch, 1250])
    }
}

impl<T: Scalar> Module<T> for ResNetBaseline<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.stem.params();
        p.extend(self.stem_bn.params());
        for stage in &self.stages {
            for block in stage {
                p.extend(block.params());
            }
        }
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.stem.params_mut();
        p.extend(self.stem_bn.params_mut());
        for stage in &mut self.stages {
            for block in stage.iter_mut() {
                p.extend(block.params_mut());
            }
        }
        p.extend(self.head.params_mut());
        p
    }

    fn buffers(&self) -> Vec<(String, Tensor<T>)> {
        let mut b = self.stem_bn.buffers();
        for stage in &self.stages {
            for block in stage {
                b.extend(block.buffers());
            }
        }
        b
    }

    fn set_buffer(&mut self, name: &str, value: Tensor<T>) -> bool {
        if self.stem_bn.set_buffer(name, value.clone()) {
            return true;
        }
        self.stages
            .iter_mut()
            .any(|stage| stage.iter_mut().any(|b| b.set_buffer(name, value.clone())))
    }
}
