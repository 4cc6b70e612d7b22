//! Dataset assembly: scaling, windowing, splitting, persistence, and the
//! generation pipeline that drives the FEM oracle.

mod generate;
mod io;

pub use generate::{generate_static, generate_transient, GenerateConfig, TransientGenerateConfig};
pub use io::{load_dataset, save_dataset};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{DomainSpec, GeomError};
use crate::fem::FemError;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("empty array")]
    EmptyArray,
    #[error("degenerate data: min {min} equals max {max}, cannot scale")]
    DegenerateData { min: f64, max: f64 },
    #[error("series too short: {t} rows with window {window}")]
    SeriesTooShort { t: usize, window: usize },
    #[error("series length {len} is not a multiple of the row width {width}")]
    BadSeriesShape { len: usize, width: usize },
    #[error("stride must be at least 1")]
    InvalidStride,
    #[error("pool of {got} samples is too small to split (need at least 20)")]
    PoolTooSmall { got: usize },
    #[error("missing scaler")]
    MissingScaler,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {file}: {reason}")]
    Format { file: String, reason: String },
    #[error("geometry {id} failed: {source}")]
    Geometry {
        id: u64,
        #[source]
        source: GeomError,
    },
    #[error("FEM solve for geometry {id} failed: {source}")]
    Fem {
        id: u64,
        #[source]
        source: FemError,
    },
}

/// Split membership tag. Train and validation partition the generated pool;
/// test samples are always freshly generated geometries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One static training sample: geometry raster, its 3-channel encoding, and
/// the 1250-value vertical-displacement label in meters (50 x 25 grid,
/// row-major, row 0 at the surface).
#[derive(Debug, Clone, PartialEq)]
pub struct StaticSample {
    pub id: u64,
    pub dip_deg: f64,
    /// Raster classes, raster_h x raster_w row-major.
    pub classes: Vec<u8>,
    /// 3 x raster_h x raster_w image in [0, 1].
    pub image: Vec<f32>,
    /// 1250 u_y values in meters.
    pub label: Vec<f32>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticDataset {
    pub domain: DomainSpec,
    pub mesh_nx: usize,
    pub mesh_ny: usize,
    pub samples: Vec<StaticSample>,
}

/// One transient sample: geometry plus the T x 40 surface-displacement
/// series in meters (row t is the state after step t+1).
#[derive(Debug, Clone, PartialEq)]
pub struct TransientSample {
    pub id: u64,
    pub dip_deg: f64,
    pub classes: Vec<u8>,
    pub image: Vec<f32>,
    /// n_steps x surface_points, row-major, meters.
    pub series: Vec<f32>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransientDataset {
    pub domain: DomainSpec,
    pub mesh_nx: usize,
    pub mesh_ny: usize,
    pub dt: f64,
    pub n_steps: usize,
    pub surface_points: usize,
    pub samples: Vec<TransientSample>,
    /// Fitted on the training split only; None until fitted.
    pub scaler: Option<MinMaxScaler>,
}

impl TransientDataset {
    /// Fits the scaler on all training-split series values and stores it.
    pub fn fit_scaler(&mut self) -> Result<&MinMaxScaler, DataError> {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut any = false;
        for s in self.samples.iter().filter(|s| s.split == Split::Train) {
            for &v in &s.series {
                min = min.min(v as f64);
                max = max.max(v as f64);
                any = true;
            }
        }
        if !any {
            return Err(DataError::EmptyArray);
        }
        if !(max > min) {
            return Err(DataError::DegenerateData { min, max });
        }
        self.scaler = Some(MinMaxScaler { min, max });
        Ok(self.scaler.as_ref().unwrap())
    }

    /// Scaled copy of one sample's series.
    pub fn scaled_series(&self, sample: usize) -> Result<Vec<f32>, DataError> {
        let scaler = self.scaler.as_ref().ok_or(DataError::MissingScaler)?;
        Ok(scaler.transform(&self.samples[sample].series))
    }
}

/// Min-max scaler mapping the fitted minimum to 0 and maximum to 1. Values
/// outside the fitted range scale linearly past [0, 1]; nothing is clipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: f64,
    pub max: f64,
}

impl MinMaxScaler {
    pub fn transform(&self, data: &[f32]) -> Vec<f32> {
        let range = self.max - self.min;
        data.iter().map(|&v| ((v as f64 - self.min) / range) as f32).collect()
    }

    pub fn inverse_transform(&self, data: &[f32]) -> Vec<f32> {
        let range = self.max - self.min;
        data.iter().map(|&v| (v as f64 * range + self.min) as f32).collect()
    }
}

/// Fits a scaler on `data` and returns the scaled copy.
pub fn minmax_fit_transform(data: &[f32]) -> Result<(Vec<f32>, MinMaxScaler), DataError> {
    if data.is_empty() {
        return Err(DataError::EmptyArray);
    }
    let min = data.iter().fold(f64::INFINITY, |m, &v| m.min(v as f64));
    let max = data.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    if !(max > min) {
        return Err(DataError::DegenerateData { min, max });
    }
    let scaler = MinMaxScaler { min, max };
    Ok((scaler.transform(data), scaler))
}

/// Sliding windows over a T x width series: rows s..s+window predict row
/// s + window, with starts stepping by `stride`.
pub fn make_windows(
    series: &[f32],
    width: usize,
    window: usize,
    stride: usize,
) -> Result<Vec<(Vec<f32>, Vec<f32>)>, DataError> {
    let starts = window_starts(series.len(), width, window, stride)?;
    Ok(starts
        .into_iter()
        .map(|s| {
            (
                series[s * width..(s + window) * width].to_vec(),
                series[(s + window) * width..(s + window + 1) * width].to_vec(),
            )
        })
        .collect())
}

/// Shifted sequence pairs for the transformer: rows s..s+window paired with
/// rows s+1..s+window+1 (the input shifted one step forward).
pub fn make_shifted_pairs(
    series: &[f32],
    width: usize,
    window: usize,
    stride: usize,
) -> Result<Vec<(Vec<f32>, Vec<f32>)>, DataError> {
    let starts = window_starts(series.len(), width, window, stride)?;
    Ok(starts
        .into_iter()
        .map(|s| {
            (
                series[s * width..(s + window) * width].to_vec(),
                series[(s + 1) * width..(s + window + 1) * width].to_vec(),
            )
        })
        .collect())
}

/// Admissible window starts; the closed-form count is
/// floor((T - window - 1)/stride) + 1.
pub fn window_starts(
    len: usize,
    width: usize,
    window: usize,
    stride: usize,
) -> Result<Vec<usize>, DataError> {
    if stride == 0 {
        return Err(DataError::InvalidStride);
    }
    if width == 0 || len % width != 0 {
        return Err(DataError::BadSeriesShape { len, width });
    }
    let t = len / width;
    if t < window + 1 {
        return Err(DataError::SeriesTooShort { t, window });
    }
    Ok((0..=(t - window - 1)).step_by(stride).collect())
}

/// Deterministic 95/5 train/validation tags for a generated pool. Validation
/// gets floor(5%) of the pool; the remainder trains.
pub fn assign_splits(pool: usize, seed: u64) -> Result<Vec<Split>, DataError> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    if pool < 20 {
        return Err(DataError::PoolTooSmall { got: pool });
    }
    let n_val = pool / 20;
    let mut order: Vec<usize> = (0..pool).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut tags = vec![Split::Train; pool];
    for &idx in order.iter().take(n_val) {
        tags[idx] = Split::Val;
    }
    Ok(tags)
}
