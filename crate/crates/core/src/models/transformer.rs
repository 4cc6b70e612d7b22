//! Encoder-decoder transformer for the transient sequence. The frozen static
//! model's features, reduced to one 16-wide token, form the encoder memory;
//! the decoder self-attends the five embedded window rows under a causal
//! mask with sinusoidal positions and cross-attends the memory, predicting
//! the window shifted one step forward. Post-norm sublayers with dropout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{LayerNormLayer, Linear, MhaParams};
use super::unet::ResNetUNet;
use super::{freeze, ModelConfig, Module};
use crate::tensor::{
    multi_head_attention, positional_encoding, Id, MhaDropout, Mode, Param, Scalar, Tape, Tensor,
    TensorError,
};

pub const SURFACE_DIM: usize = 40;
pub const D_MODEL: usize = 16;
pub const N_HEADS: usize = 8;
pub const N_LAYERS: usize = 4;
pub const D_FF: usize = 64;
pub const WINDOW: usize = 5;

#[derive(Debug, Clone)]
struct FeedForward<T> {
    lin1: Linear<T>,
    lin2: Linear<T>,
}

impl<T: Scalar> FeedForward<T> {
    fn new(name: &str, rng: &mut ChaCha8Rng) -> Self {
        Self {
            lin1: Linear::new(&format!("{name}.lin1"), D_MODEL, D_FF, rng),
            lin2: Linear::new(&format!("{name}.lin2"), D_FF, D_MODEL, rng),
        }
    }

    fn forward(&self, tape: &mut Tape<T>, x: Id) -> Result<Id, TensorError> {
        let h = self.lin1.forward(tape, x)?;
        let h = tape.relu(h);
        self.lin2.forward(tape, h)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.lin1.params();
        p.extend(self.lin2.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.lin1.params_mut();
        p.extend(self.lin2.params_mut());
        p
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer<T> {
    attn: MhaParams<T>,
    norm1: LayerNormLayer<T>,
    ff: FeedForward<T>,
    norm2: LayerNormLayer<T>,
}

#[derive(Debug, Clone)]
struct DecoderLayer<T> {
    self_attn: MhaParams<T>,
    norm1: LayerNormLayer<T>,
    cross_attn: MhaParams<T>,
    norm2: LayerNormLayer<T>,
    ff: FeedForward<T>,
    norm3: LayerNormLayer<T>,
}

#[derive(Debug, Clone)]
pub struct TransformerPredictor<T> {
    pub config: ModelConfig,
    pub encoder: ResNetUNet<T>,
    feature_head: Linear<T>,
    enc_embed: Linear<T>,
    dec_embed: Linear<T>,
    enc_layers: Vec<EncoderLayer<T>>,
    dec_layers: Vec<DecoderLayer<T>>,
    output_head: Linear<T>,
    pub dropout_p: f64,
}

impl<T: Scalar> TransformerPredictor<T> {
    pub fn new(mut encoder: ResNetUNet<T>, seed: u64) -> Self {
        freeze(&mut encoder);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feature_head = Linear::new("tf.feature_head", 1250, SURFACE_DIM, &mut rng);
        let enc_embed = Linear::new("tf.enc_embed", SURFACE_DIM, D_MODEL, &mut rng);
        let dec_embed = Linear::new("tf.dec_embed", SURFACE_DIM, D_MODEL, &mut rng);
        let mut enc_layers = Vec::with_capacity(N_LAYERS);
        for k in 0..N_LAYERS {
            enc_layers.push(EncoderLayer {
                attn: MhaParams::new(&format!("tf.enc{k}.attn"), D_MODEL, N_HEADS, &mut rng),
                norm1: LayerNormLayer::new(&format!("tf.enc{k}.norm1"), D_MODEL),
                ff: FeedForward::new(&format!("tf.enc{k}.ff"), &mut rng),
                norm2: LayerNormLayer::new(&format!("tf.enc{k}.norm2"), D_MODEL),
            });
        }
        let mut dec_layers = Vec::with_capacity(N_LAYERS);
        for k in 0..N_LAYERS {
            dec_layers.push(DecoderLayer {
                self_attn: MhaParams::new(&format!("tf.dec{k}.self_attn"), D_MODEL, N_HEADS, &mut rng),
                norm1: LayerNormLayer::new(&format!("tf.dec{k}.norm1"), D_MODEL),
                cross_attn: MhaParams::new(&format!("tf.dec{k}.cross_attn"), D_MODEL, N_HEADS, &mut rng),
                norm2: LayerNormLayer::new(&format!("tf.dec{k}.norm2"), D_MODEL),
                ff: FeedForward::new(&format!("tf.dec{k}.ff"), &mut rng),
                norm3: LayerNormLayer::new(&format!("tf.dec{k}.norm3"), D_MODEL),
            });
        }
        let output_head = Linear::new("tf.output_head", D_MODEL, SURFACE_DIM, &mut rng);
        let config = ModelConfig::new(
            "transformer",
            encoder.config.base_width,
            encoder.config.raster_h,
            encoder.config.raster_w,
            seed,
        );
        Self {
            config,
            encoder,
            feature_head,
            enc_embed,
            dec_embed,
            enc_layers,
            dec_layers,
            output_head,
            dropout_p: 0.3,
        }
    }

    pub fn extract_features(&mut self, tape: &mut Tape<T>, images: Id) -> Result<Id, TensorError> {
        self.encoder.forward(tape, images, Mode::Eval)
    }

    /// images [B,3,H,W] and window [B,5,40] -> shifted prediction [B,5,40];
    /// the next-step forecast is the last output row.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        images: Id,
        window: Id,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Id, TensorError> {
        let (batch, len, dim) = tape.value(window).dims3("transformer_forward")?;
        if len != WINDOW || dim != SURFACE_DIM {
            return Err(TensorError::Dimension {
                op: "transformer_forward",
                details: format!("window must be [batch, {WINDOW}, {SURFACE_DIM}], got [{batch}, {len}, {dim}]"),
            });
        }
        let p = self.dropout_p;

        // Encoder memory: one embedded image token.
        let feats = self.extract_features(tape, images)?;
        let embed = self.feature_head.forward(tape, feats)?;
        let tok = self.enc_embed.forward(tape, embed)?;
        let mut memory = tape.reshape(tok, &[batch, 1, D_MODEL])?;
        memory = add_positions(tape, memory, batch, 1)?;
        for layer in &self.enc_layers {
            let w = layer.attn.bind(tape);
            let attn = multi_head_attention(
                tape,
                memory,
                memory,
                memory,
                &w,
                N_HEADS,
                false,
                Some(MhaDropout { p, mode, rng }),
            )?;
            let attn = tape.dropout(attn, p, mode, rng)?;
            let sum = tape.add(memory, attn)?;
            memory = layer.norm1.forward(tape, sum)?;
            let ff = layer.ff.forward(tape, memory)?;
            let ff = tape.dropout(ff, p, mode, rng)?;
            let sum = tape.add(memory, ff)?;
            memory = layer.norm2.forward(tape, sum)?;
        }

        // Decoder over the embedded window tokens.
        let mut x = self.dec_embed.forward(tape, window)?;
        x = add_positions(tape, x, batch, WINDOW)?;
        for layer in &self.dec_layers {
            let w = layer.self_attn.bind(tape);
            let attn = multi_head_attention(
                tape,
                x,
                x,
                x,
                &w,
                N_HEADS,
                true,
                Some(MhaDropout { p, mode, rng }),
            )?;
            let attn = tape.dropout(attn, p, mode, rng)?;
            let sum = tape.add(x, attn)?;
            x = layer.norm1.forward(tape, sum)?;

            let w = layer.cross_attn.bind(tape);
            let cross = multi_head_attention(
                tape,
                x,
                memory,
                memory,
                &w,
                N_HEADS,
                false,
                Some(MhaDropout { p, mode, rng }),
            )?;
            let cross = tape.dropout(cross, p, mode, rng)?;
            let sum = tape.add(x, cross)?;
            x = layer.norm2.forward(tape, sum)?;

            let ff = layer.ff.forward(tape, x)?;
            let ff = tape.dropout(ff, p, mode, rng)?;
            let sum = tape.add(x, ff)?;
            x = layer.norm3.forward(tape, sum)?;
        }
        self.output_head.forward(tape, x)
    }
}

/// Adds the sinusoidal position table, tiled over the batch.
fn add_positions<T: Scalar>(
    tape: &mut Tape<T>,
    x: Id,
    batch: usize,
    len: usize,
) -> Result<Id, TensorError> {
    let pe = positional_encoding::<T>(len, D_MODEL);
    let mut tiled = Tensor::zeros(&[batch, len, D_MODEL]);
    for b in 0..batch {
        tiled.data_mut()[b * len * D_MODEL..(b + 1) * len * D_MODEL]
            .copy_from_slice(pe.data());
    }
    let pe_id = tape.constant(tiled);
    tape.add(x, pe_id)
}

impl<T: Scalar> Module<T> for TransformerPredictor<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.encoder.params();
        p.extend(self.feature_head.params());
        p.extend(self.enc_embed.params());
        p.extend(self.dec_embed.params());
        for layer in &self.enc_layers {
            p.extend(layer.attn.params());
            p.extend(layer.norm1.params());
            p.extend(layer.ff.params());
            p.extend(layer.norm2.params());
        }
        for layer in &self.dec_layers {
            p.extend(layer.self_attn.params());
            p.extend(layer.norm1.params());
            p.extend(layer.cross_attn.params());
            p.extend(layer.norm2.params());
            p.extend(layer.ff.params());
            p.extend(layer.norm3.params());
        }
        p.extend(self.output_head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.encoder.params_mut();
        p.extend(self.feature_head.params_mut());
        p.extend(self.enc_embed.params_mut());
        p.extend(self.dec_embed.params_mut());
        for layer in &mut self.enc_layers {
            p.extend(layer.attn.params_mut());
            p.extend(layer.norm1.params_mut());
            p.extend(layer.ff.params_mut());
            p.extend(layer.norm2.params_mut());
        }
        for layer in &mut self.dec_layers {
            p.extend(layer.self_attn.params_mut());
            p.extend(layer.norm1.params_mut());
            p.extend(layer.cross_attn.params_mut());
            p.extend(layer.norm2.params_mut());
            p.extend(layer.ff.params_mut());
            p.extend(layer.norm3.params_mut());
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
