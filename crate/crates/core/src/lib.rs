//! Coupled geomechanics/flow training-data generation with a built-in finite
//! element solver, plus neural surrogates for predicting injection-induced
//! surface uplift from subsurface geometry images.
//!
//! The crate is organized as a pipeline:
//!
//! * [`geom`] samples dipped shale-layer geometries and rasterizes them into
//!   model inputs and per-element material assignments.
//! * [`fem`] is the ground-truth oracle: static plane-strain elasticity and
//!   transient Biot consolidation on a structured quad mesh.
//! * [`dataset`] assembles, scales, windows, splits, and persists the static
//!   and transient datasets.
//! * [`tensor`] is a minimal n-dimensional tensor engine with reverse-mode
//!   automatic differentiation.
//! * [`models`] implements the five surrogate architectures (CNN, ResNet,
//!   ResNetUNet, LSTM, transformer).
//! * [`training`] holds the training loops, evaluation metrics, and
//!   autoregressive rollout.
//!
//! See the `book/` guide for a narrative walk-through of each stage.

pub mod dataset;
pub mod fem;
pub mod geom;
pub mod models;
pub mod tensor;
pub mod training;
