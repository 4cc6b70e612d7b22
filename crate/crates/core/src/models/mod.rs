//! The five surrogate architectures, built on the tensor engine: three
//! image-to-displacement models (CNN, ResNet, ResNetUNet) and two
//! sequence predictors (LSTM, transformer) that reuse a frozen pretrained
//! ResNetUNet as their image feature extractor.

mod cnn;
mod layers;
mod lstm;
mod resnet;
mod transformer;
mod unet;

pub use cnn::CnnBaseline;
pub use layers::{
    BatchNorm2d, Conv2d, LayerNormLayer, Linear, LstmCellLayer, MhaParams, ResidualBlock,
};
pub use lstm::LstmPredictor;
pub use resnet::ResNetBaseline;
pub use transformer::TransformerPredictor;
pub use unet::ResNetUNet;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{CheckpointError, Param, Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("state mismatch: {0}")]
    StateMismatch(String),
    #[error("missing pretrained encoder checkpoint: {0}")]
    MissingPretrained(String),
}

/// Anything with named parameters and buffers: checkpointable and trainable.
pub trait Module<T: Scalar> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;
    /// Non-trainable named state (running statistics).
    fn buffers(&self) -> Vec<(String, Tensor<T>)> {
        Vec::new()
    }
    fn set_buffer(&mut self, _name: &str, _value: Tensor<T>) -> bool {
        false
    }
}

/// Serialized architecture description stored next to checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub architecture: String,
    /// Base channel width; stages use multiples of it.
    pub base_width: usize,
    /// Raster size the image models expect (h, w).
    pub raster_h: usize,
    pub raster_w: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(architecture: &str, base_width: usize, raster_h: usize, raster_w: usize, seed: u64) -> Self {
        Self { architecture: architecture.into(), base_width, raster_h, raster_w, seed }
    }
}

/// Full named state: parameters plus buffers.
pub fn state_dict<T: Scalar, M: Module<T> + ?Sized>(model: &M) -> Vec<(String, Tensor<T>)> {
    let mut entries: Vec<(String, Tensor<T>)> =
        model.params().into_iter().map(|p| (p.name.clone(), p.value.clone())).collect();
    entries.extend(model.buffers());
    entries
}

pub fn save_checkpoint<T: Scalar, M: Module<T> + ?Sized>(
    model: &M,
    path: &Path,
) -> Result<(), ModelError> {
    let state = state_dict(model);
    let refs: Vec<(String, &Tensor<T>)> = state.iter().map(|(n, t)| (n.clone(), t)).collect();
    crate::tensor::save_state(&refs, path)?;
    Ok(())
}

/// Loads a checkpoint into the model, requiring the name/shape tables to
/// match exactly.
pub fn load_checkpoint<T: Scalar, M: Module<T> + ?Sized>(
    model: &mut M,
    path: &Path,
) -> Result<(), ModelError> {
    let entries = crate::tensor::load_state(path)?;
    let mut table: HashMap<String, Tensor<f32>> = entries.into_iter().collect();
    for p in model.params_mut() {
        let loaded = table.remove(&p.name).ok_or_else(|| {
            ModelError::StateMismatch(format!("checkpoint is missing parameter {:?}", p.name))
        })?;
        if loaded.shape() != p.value.shape() {
            return Err(ModelError::StateMismatch(format!(
                "parameter {:?} has shape {:?} in the checkpoint but {:?} in the model",
                p.name,
                loaded.shape(),
                p.value.shape()
            )));
        }
        p.value = loaded.cast();
    }
    let buffer_names: Vec<String> = model.buffers().into_iter().map(|(n, _)| n).collect();
    for name in buffer_names {
        let loaded = table.remove(&name).ok_or_else(|| {
            ModelError::StateMismatch(format!("checkpoint is missing buffer {name:?}"))
        })?;
        if !model.set_buffer(&name, loaded.cast()) {
            return Err(ModelError::StateMismatch(format!("cannot restore buffer {name:?}")));
        }
    }
    if !table.is_empty() {
        let mut extra: Vec<String> = table.into_keys().collect();
        extra.sort();
        return Err(ModelError::StateMismatch(format!(
            "checkpoint has {} unexpected entries, first {:?}",
            extra.len(),
            extra[0]
        )));
    }
    Ok(())
}

/// Marks every parameter as frozen (no gradients, no optimizer updates).
pub fn freeze<T: Scalar, M: Module<T> + ?Sized>(model: &mut M) {
    for p in model.params_mut() {
        p.frozen = true;
    }
}
