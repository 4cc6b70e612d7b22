//! ResNetUNet: a residual encoder over four 2x downsamplings with a
//! skip-connected nearest-upsampling decoder. The final one-channel map is
//! resampled onto the 25x50 label grid and flattened to 1250 values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{BatchNorm2d, Conv2d, ResidualBlock};
use super::{ModelConfig, Module};
use crate::tensor::{Id, Mode, Param, Scalar, Tape, Tensor, TensorError};

#[derive(Debug, Clone)]
struct DecoderStage<T> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
}

impl<T: Scalar> DecoderStage<T> {
    fn new(name: &str, in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), in_ch, out_ch, 3, 1, 1, false, rng),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), out_ch),
            conv2: Conv2d::new(&format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), out_ch),
        }
    }

    fn forward(&mut self, tape: &mut Tape<T>, x: Id, mode: Mode) -> Result<Id, TensorError> {
        let x = self.conv1.forward(tape, x)?;
        let x = self.bn1.forward(tape, x, mode)?;
        let x = tape.relu(x);
        let x = self.conv2.forward(tape, x)?;
        let x = self.bn2.forward(tape, x, mode)?;
        Ok(tape.relu(x))
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.conv1.params();
        p.extend(self.bn1.params());
        p.extend(self.conv2.params());
        p.extend(self.bn2.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.conv1.params_mut();
        p.extend(self.bn1.params_mut());
        p.extend(self.conv2.params_mut());
        p.extend(self.bn2.params_mut());
        p
    }

    fn buffers(&self) -> Vec<(String, Tensor<T>)> {
        let mut b = self.bn1.buffers();
        b.extend(self.bn2.buffers());
        b
    }

    fn set_buffer(&mut self, name: &str, value: Tensor<T>) -> bool {
        self.bn1.set_buffer(name, value.clone()) || self.bn2.set_buffer(name, value)
    }
}

#[derive(Debug, Clone)]
pub struct ResNetUNet<T> {
    pub config: ModelConfig,
    stem: Conv2d<T>,
    stem_bn: BatchNorm2d<T>,
    encoders: Vec<[ResidualBlock<T>; 2]>,
    bottleneck: [ResidualBlock<T>; 2],
    decoders: Vec<DecoderStage<T>>,
    final_conv: Conv2d<T>,
}

impl<T: Scalar> ResNetUNet<T> {
    pub fn new(base_width: usize, raster_h: usize, raster_w: usize, seed: u64) -> Self {
        assert!(raster_h % 16 == 0 && raster_w % 16 == 0, "raster must divide by 16");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = base_width;
        let widths = [w, 2 * w, 4 * w, 8 * w];
        let stem = Conv2d::new("unet.stem.conv", 3, w, 3, 1, 1, false, &mut rng);
        let stem_bn = BatchNorm2d::new("unet.stem.bn", w);
        let mut encoders = Vec::new();
        let mut in_ch = w;
        for (s, &out_ch) in widths.iter().enumerate() {
            let b0 = ResidualBlock::new(&format!("unet.enc{s}.block0"), in_ch, out_ch, &mut rng);
            let b1 = ResidualBlock::new(&format!("unet.enc{s}.block1"), out_ch, out_ch, &mut rng);
            encoders.push([b0, b1]);
            in_ch = out_ch;
        }
        let bottleneck = [
            ResidualBlock::new("unet.bott.block0", widths[3], widths[3], &mut rng),
            ResidualBlock::new("unet.bott.block1", widths[3], widths[3], &mut rng),
        ];
        // Decoder stages mirror the encoder: upsample, concatenate the skip,
        // convolve down to the previous width.
        let mut decoders = Vec::new();
        let dec_plan = [
            (widths[3] + widths[3], widths[2]),
            (widths[2] + widths[2], widths[1]),
            (widths[1] + widths[1], widths[0]),
            (widths[0] + widths[0], widths[0]),
        ];
        for (s, &(in_ch, out_ch)) in dec_plan.iter().enumerate() {
            decoders.push(DecoderStage::new(&format!("unet.dec{s}"), in_ch, out_ch, &mut rng));
        }
        let final_conv = Conv2d::new("unet.final.conv", w, 1, 1, 1, 0, true, &mut rng);
        Self {
            config: ModelConfig::new("resnetunet", base_width, raster_h, raster_w, seed),
            stem,
            stem_bn,
            encoders,
            bottleneck,
            decoders,
            final_conv,
        }
    }

    /// images [B, 3, raster_h, raster_w] -> [B, 1250].
    pub fn forward(&mut self, tape: &mut Tape<T>, images: Id, mode: Mode) -> Result<Id, TensorError> {
        self.forward_diag(tape, images, mode, false)
    }

    /// Diagnostic forward; `zero_skips` multiplies every skip tensor by zero
    /// to demonstrate the skips carry information.
    pub fn forward_diag(
        &mut self,
        tape: &mut Tape<T>,
        images: Id,
        mode: Mode,
        zero_skips: bool,
    ) -> Result<Id, TensorError> {
        let mut x = self.stem.forward(tape, images)?;
        x = self.stem_bn.forward(tape, x, mode)?;
        x = tape.relu(x);
        let mut skips = Vec::new();
        for stage in &mut self.encoders {
            for block in stage.iter_mut() {
                x = block.forward(tape, x, mode)?;
            }
            skips.push(x);
            x = tape.maxpool2x2(x)?;
        }
        for block in self.bottleneck.iter_mut() {
            x = block.forward(tape, x, mode)?;
        }
        for (stage, skip) in self.decoders.iter_mut().zip(skips.iter().rev()) {
            x = tape.upsample_nearest2x(x)?;
            let skip = if zero_skips { tape.scale(*skip, T::ZERO) } else { *skip };
            x = tape.concat_channels(x, skip)?;
            x = stage.forward(tape, x, mode)?;
        }
        let x = self.final_conv.forward(tape, x)?;
        let x = tape.resize_nearest(x, 25, 50)?;
        let batch = tape.value(x).shape()[0];
        tape.reshape(x, &[batch, 1250])
    }
}

impl<T: Scalar> Module<T> for ResNetUNet<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.stem.params();
        p.extend(self.stem_bn.params());
        for stage in &self.encoders {
            for block in stage {
                p.extend(block.params());
            }
        }
        for block in &self.bottleneck {
            p.extend(block.params());
        }
        for stage in &self.decoders {
            p.extend(stage.params());
        }
        p.extend(self.final_conv.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.stem.params_mut();
        p.extend(self.stem_bn.params_mut());
        for stage in &mut self.encoders {
            for block in stage.iter_mut() {
                p.extend(block.params_mut());
            }
        }
        for block in self.bottleneck.iter_mut() {
            p.extend(block.params_mut());
        }
        for stage in &mut self.decoders {
            p.extend(stage.params_mut());
        }
        p.extend(self.final_conv.params_mut());
        p
    }

    fn buffers(&self) -> Vec<(String, Tensor<T>)> {
        let mut b = self.stem_bn.buffers();
        for stage in &self.encoders {
            for block in stage {
                b.extend(block.buffers());
            }
        }
        for block in &self.bottleneck {
            b.extend(block.buffers());
        }
        for stage in &self.decoders {
            b.extend(stage.buffers());
        }
        b
    }

    fn set_buffer(&mut self, name: &str, value: Tensor<T>) -> bool {
        if self.stem_bn.set_buffer(name, value.clone()) {
            return true;
        }
        for stage in &mut self.encoders {
            for block in stage.iter_mut() {
                if block.set_buffer(name, value.clone()) {
                    return true;
                }
            }
        }
        for block in self.bottleneck.iter_mut() {
            if block.set_buffer(name, value.clone()) {
                return true;
            }
        }
        for stage in &mut self.decoders {
            if stage.set_buffer(name, value.clone()) {
                return true;
            }
        }
        false
    }
}
