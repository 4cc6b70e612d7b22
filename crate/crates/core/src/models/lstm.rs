//! Sequence predictor with a frozen pretrained ResNetUNet feature extractor,
//! a 1250-to-40 feature head, four stacked LSTM cells (hidden size 4), and a
//! 4-to-40 output head. The image embedding enters the sequence as a leading
//! caption-style token ahead of the five window rows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{Linear, LstmCellLayer};
use super::unet::ResNetUNet;
use super::{freeze, ModelConfig, Module};
use crate::tensor::{Id, Mode, Param, Scalar, Tape, Tensor, TensorError};

pub const SURFACE_DIM: usize = 40;
pub const HIDDEN: usize = 4;
pub const STACK: usize = 4;
pub const WINDOW: usize = 5;

#[derive(Debug, Clone)]
pub struct LstmPredictor<T> {
    pub config: ModelConfig,
    pub encoder: ResNetUNet<T>,
    feature_head: Linear<T>,
    cells: Vec<LstmCellLayer<T>>,
    output_head: Linear<T>,
}

impl<T: Scalar> LstmPredictor<T> {
    /// Wraps a trained static model; its parameters are frozen in place.
    pub fn new(mut encoder: ResNetUNet<T>, seed: u64) -> Self {
        freeze(&mut encoder);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feature_head = Linear::new("lstm.feature_head", 1250, SURFACE_DIM, &mut rng);
        let mut cells = Vec::with_capacity(STACK);
        for k in 0..STACK {
            let input = if k == 0 { SURFACE_DIM } else { HIDDEN };
            cells.push(LstmCellLayer::new(&format!("lstm.cell{k}"), input, HIDDEN, &mut rng));
        }
        // Zero-initialized head: the untrained model predicts exactly zero.
        let output_head = Linear::zeroed("lstm.output_head", HIDDEN, SURFACE_DIM);
        let config = ModelConfig::new(
            "lstm",
            encoder.config.base_width,
            encoder.config.raster_h,
            encoder.config.raster_w,
            seed,
        );
        Self { config, encoder, feature_head, cells, output_head }
    }

    /// The frozen static model's 1250-value output for an image batch.
    pub fn extract_features(&mut self, tape: &mut Tape<T>, images: Id) -> Result<Id, TensorError> {
        self.encoder.forward(tape, images, Mode::Eval)
    }

    /// One next-step prediction: image batch [B,3,H,W] plus the five window
    /// rows (each [B,40]) produce the next row [B,40].
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        images: Id,
        window_rows: &[Id],
    ) -> Result<Id, TensorError> {
        if window_rows.len() != WINDOW {
            return Err(TensorError::Dimension {
                op: "lstm_predict_next",
                details: format!("expected {WINDOW} window rows, got {}", window_rows.len()),
            });
        }
        let feats = self.extract_features(tape, images)?;
        let embed = self.feature_head.forward(tape, feats)?;
        let batch = tape.value(embed).shape()[0];

        let mut h: Vec<Id> = (0..STACK)
            .map(|_| tape.constant(Tensor::zeros(&[batch, HIDDEN])))
            .collect();
        let mut c: Vec<Id> = (0..STACK)
            .map(|_| tape.constant(Tensor::zeros(&[batch, HIDDEN])))
            .collect();

        let mut sequence = Vec::with_capacity(WINDOW + 1);
        sequence.push(embed);
        sequence.extend_from_slice(window_rows);
        for x_t in sequence {
            let mut layer_in = x_t;
            for (k, cell) in self.cells.iter().enumerate() {
                let (h_new, c_new) = cell.forward(tape, layer_in, h[k], c[k])?;
                h[k] = h_new;
                c[k] = c_new;
                layer_in = h_new;
            }
        }
        self.output_head.forward(tape, h[STACK - 1])
    }
}

impl<T: Scalar> Module<T> for LstmPredictor<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.encoder.params();
        p.extend(self.feature_head.params());
        for cell in &self.cells {
            p.extend(cell.params());
        }
        p.extend(self.output_head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.encoder.params_mut();
        p.extend(self.feature_head.params_mut());
        for cell in &mut self.cells {
            p.extend(cell.params_mut());
        }
        p.extend(self.output_head.params_mut());
        p
    }

    fn buffers(&self) -> Vec<(String, Tensor<T>)> {
        self.encoder.buffers()
    }

    fn set_buffer(&mut self, name: &str, value: Tensor<T>) -> bool {
        self.encoder.set_buffer(name, value)
    }
}
