//! On-disk dataset layout:
//!
//! ```text
//! dir/manifest.json           metadata, sample table, label-file checksums
//! dir/geom/<id>.png           class-colored raster (shale red, rock green)
//! dir/geom/<id>.raw           row-major class bytes, raster_h x raster_w
//! dir/labels_static.bin       f32 LE, 1250 values per sample, manifest order
//! dir/labels_static.json      sidecar: units and grid layout
//! dir/labels_transient.bin    f32 LE, n_steps x 40 per sample
//! dir/labels_transient.json   sidecar
//! dir/scaler.json             fitted min/max (transient, when present)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    DataError, MinMaxScaler, Split, StaticDataset, StaticSample, TransientDataset,
    TransientSample,
};
use crate::geom::{to_input_image, DomainSpec, MaterialField, LayerSpec, SHALE};

/// A persisted dataset of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Static(StaticDataset),
    Transient(TransientDataset),
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    kind: String,
    domain: DomainSpec,
    mesh_nx: usize,
    mesh_ny: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    dt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    surface_points: Option<usize>,
    label_values_per_sample: usize,
    samples: Vec<ManifestSample>,
    labels: LabelFileInfo,
}

#[derive(Serialize, Deserialize)]
struct ManifestSample {
    id: u64,
    dip_deg: f64,
    raster_w: usize,
    raster_h: usize,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct LabelFileInfo {
    file: String,
    bytes: u64,
    crc32: u32,
    units: String,
}

const MANIFEST_VERSION: u32 = 1;

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir.join("geom")).map_err(|e| io_err(dir, e))?;
    match ds {
        Dataset::Static(s) => save_static(s, dir),
        Dataset::Transient(t) => save_transient(t, dir),
    }
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DataError::Format {
        file: "manifest.json".into(),
        reason: e.to_string(),
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(DataError::Format {
            file: "manifest.json".into(),
            reason: format!("unsupported version {}", manifest.version),
        });
    }
    match manifest.kind.as_str() {
        "static" => load_static(&manifest, dir).map(Dataset::Static),
        "transient" => load_transient(&manifest, dir).map(Dataset::Transient),
        other => Err(DataError::Format {
            file: "manifest.json".into(),
            reason: format!("unknown dataset kind {other:?}"),
        }),
    }
}

fn save_static(ds: &StaticDataset, dir: &Path) -> Result<(), DataError> {
    let labels: Vec<&[f32]> = ds.samples.iter().map(|s| s.label.as_slice()).collect();
    let info = write_labels(dir, "labels_static.bin", &labels)?;
    write_sidecar(
        dir,
        "labels_static.json",
        serde_json::json!({
            "dtype": "f32le",
            "units": "meters",
            "grid": {"rows": 25, "cols": 50, "order": "row-major", "row0": "surface"},
            "values_per_sample": 1250,
            "samples": ds.samples.len(),
        }),
    )?;
    for s in &ds.samples {
        write_geometry(dir, s.id, &s.classes, ds.domain.raster_w, ds.domain.raster_h)?;
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        kind: "static".into(),
        domain: ds.domain,
        mesh_nx: ds.mesh_nx,
        mesh_ny: ds.mesh_ny,
        dt: None,
        n_steps: None,
        surface_points: None,
        label_values_per_sample: 1250,
        samples: ds
            .samples
            .iter()
            .map(|s| ManifestSample {
                id: s.id,
                dip_deg: s.dip_deg,
                raster_w: ds.domain.raster_w,
                raster_h: ds.domain.raster_h,
                split: s.split,
            })
            .collect(),
        labels: info,
    };
    write_manifest(dir, &manifest)
}

fn save_transient(ds: &TransientDataset, dir: &Path) -> Result<(), DataError> {
    let labels: Vec<&[f32]> = ds.samples.iter().map(|s| s.series.as_slice()).collect();
    let info = write_labels(dir, "labels_transient.bin", &labels)?;
    write_sidecar(
        dir,
        "labels_transient.json",
        serde_json::json!({
            "dtype": "f32le",
            "units": "meters",
            "layout": {"rows": ds.n_steps, "cols": ds.surface_points, "order": "row-major",
                        "row": "time step", "col": "surface point left to right"},
            "dt_seconds": ds.dt,
            "values_per_sample": ds.n_steps * ds.surface_points,
            "samples": ds.samples.len(),
        }),
    )?;
    for s in &ds.samples {
        write_geometry(dir, s.id, &s.classes, ds.domain.raster_w, ds.domain.raster_h)?;
    }
    if let Some(scaler) = &ds.scaler {
        let path = dir.join("scaler.json");
        let text = serde_json::to_string_pretty(scaler).expect("scaler serializes");
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        kind: "transient".into(),
        domain: ds.domain,
        mesh_nx: ds.mesh_nx,
        mesh_ny: ds.mesh_ny,
        dt: Some(ds.dt),
        n_steps: Some(ds.n_steps),
        surface_points: Some(ds.surface_points),
        label_values_per_sample: ds.n_steps * ds.surface_points,
        samples: ds
            .samples
            .iter()
            .map(|s| ManifestSample {
                id: s.id,
                dip_deg: s.dip_deg,
                raster_w: ds.domain.raster_w,
                raster_h: ds.domain.raster_h,
                split: s.split,
            })
            .collect(),
        labels: info,
    };
    write_manifest(dir, &manifest)
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), DataError> {
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

fn write_sidecar(dir: &Path, name: &str, value: serde_json::Value) -> Result<(), DataError> {
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(&value).expect("sidecar serializes");
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

fn write_labels(dir: &Path, name: &str, samples: &[&[f32]]) -> Result<LabelFileInfo, DataError> {
    let path = dir.join(name);
    let mut bytes = Vec::with_capacity(samples.iter().map(|s| s.len() * 4).sum());
    for sample in samples {
        for v in *sample {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&bytes);
    let mut file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    file.write_all(&bytes).map_err(|e| io_err(&path, e))?;
    Ok(LabelFileInfo {
        file: name.into(),
        bytes: bytes.len() as u64,
        crc32: crc,
        units: "meters".into(),
    })
}

fn write_geometry(
    dir: &Path,
    id: u64,
    classes: &[u8],
    raster_w: usize,
    raster_h: usize,
) -> Result<(), DataError> {
    let raw_path = dir.join("geom").join(format!("{id}.raw"));
    fs::write(&raw_path, classes).map_err(|e| io_err(&raw_path, e))?;
    let mut img = image::RgbImage::new(raster_w as u32, raster_h as u32);
    for (idx, &class) in classes.iter().enumerate() {
        let x = (idx % raster_w) as u32;
        let y = (idx / raster_w) as u32;
        let color = if class == SHALE { [255u8, 0, 0] } else { [0u8, 255, 0] };
        img.put_pixel(x, y, image::Rgb(color));
    }
    let png_path = dir.join("geom").join(format!("{id}.png"));
    img.save(&png_path).map_err(|e| DataError::Format {
        file: png_path.display().to_string(),
        reason: e.to_string(),
    })?;
    Ok(())
}

fn read_labels(
    dir: &Path,
    info: &LabelFileInfo,
    n_samples: usize,
    per_sample: usize,
) -> Result<Vec<Vec<f32>>, DataError> {
    let path = dir.join(&info.file);
    let mut bytes = Vec::new();
    fs::File::open(&path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(&path, e))?;
    let expected = n_samples * per_sample * 4;
    if bytes.len() != expected || bytes.len() as u64 != info.bytes {
        return Err(DataError::Format {
            file: info.file.clone(),
            reason: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    let crc = crc32fast::hash(&bytes);
    if crc != info.crc32 {
        return Err(DataError::Format {
            file: info.file.clone(),
            reason: format!("checksum mismatch: manifest {:08x}, file {crc:08x}", info.crc32),
        });
    }
    Ok(bytes
        .chunks_exact(per_sample * 4)
        .map(|chunk| {
            chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect()
        })
        .collect())
}

fn read_geometry(dir: &Path, sample: &ManifestSample) -> Result<(Vec<u8>, Vec<f32>), DataError> {
    let raw_path = dir.join("geom").join(format!("{}.raw", sample.id));
    let classes = fs::read(&raw_path).map_err(|e| io_err(&raw_path, e))?;
    if classes.len() != sample.raster_w * sample.raster_h {
        return Err(DataError::Format {
            file: raw_path.display().to_string(),
            reason: format!(
                "expected {} class bytes, found {}",
                sample.raster_w * sample.raster_h,
                classes.len()
            ),
        });
    }
    // The 3-channel image is a pure function of the classes; rebuild it
    // rather than storing it twice.
    let field = MaterialField {
        raster_w: sample.raster_w,
        raster_h: sample.raster_h,
        classes: classes.clone(),
        mesh_nx: 1,
        mesh_ny: 1,
        element_classes: vec![],
    };
    let image = to_input_image(&field);
    Ok((classes, image))
}

fn load_static(manifest: &Manifest, dir: &Path) -> Result<StaticDataset, DataError> {
    let labels = read_labels(dir, &manifest.labels, manifest.samples.len(), 1250)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for (ms, label) in manifest.samples.iter().zip(labels) {
        let (classes, image) = read_geometry(dir, ms)?;
        samples.push(StaticSample {
            id: ms.id,
            dip_deg: ms.dip_deg,
            classes,
            image,
            label,
            split: ms.split,
        });
    }
    Ok(StaticDataset {
        domain: manifest.domain,
        mesh_nx: manifest.mesh_nx,
        mesh_ny: manifest.mesh_ny,
        samples,
    })
}

fn load_transient(manifest: &Manifest, dir: &Path) -> Result<TransientDataset, DataError> {
    let n_steps = manifest.n_steps.ok_or_else(|| DataError::Format {
        file: "manifest.json".into(),
        reason: "transient manifest missing n_steps".into(),
    })?;
    let surface_points = manifest.surface_points.unwrap_or(40);
    let per_sample = n_steps * surface_points;
    let labels = read_labels(dir, &manifest.labels, manifest.samples.len(), per_sample)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for (ms, series) in manifest.samples.iter().zip(labels) {
        let (classes, image) = read_geometry(dir, ms)?;
        samples.push(TransientSample {
            id: ms.id,
            dip_deg: ms.dip_deg,
            classes,
            image,
            series,
            split: ms.split,
        });
    }
    let scaler_path = dir.join("scaler.json");
    let scaler = if scaler_path.exists() {
        let text = fs::read_to_string(&scaler_path).map_err(|e| io_err(&scaler_path, e))?;
        Some(serde_json::from_str::<MinMaxScaler>(&text).map_err(|e| DataError::Format {
            file: "scaler.json".into(),
            reason: e.to_string(),
        })?)
    } else {
        None
    };
    Ok(TransientDataset {
        domain: manifest.domain,
        mesh_nx: manifest.mesh_nx,
        mesh_ny: manifest.mesh_ny,
        dt: manifest.dt.unwrap_or(0.0),
        n_steps,
        surface_points,
        samples,
        scaler,
    })
}

/// Convenience for tests and the CLI: rasterize a layer into a sample-ready
/// (classes, image) pair at the dataset's resolutions.
pub fn rasterize_for_dataset(
    domain: &DomainSpec,
    layer: &LayerSpec,
    mesh_nx: usize,
    mesh_ny: usize,
) -> Result<MaterialField, crate::geom::GeomError> {
    crate::geom::rasterize(domain, layer, mesh_nx, mesh_ny)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::rasterize;

    fn tiny_static() -> StaticDataset {
        let domain = DomainSpec::default();
        let mut samples = Vec::new();
        for (i, dip) in [0.0, 12.5, 30.0].iter().enumerate() {
            let field = rasterize(&domain, &LayerSpec::with_dip(*dip), 8, 4).unwrap();
            let image = to_input_image(&field);
            samples.push(StaticSample {
                id: i as u64,
                dip_deg: *dip,
                classes: field.classes,
                image,
                label: (0..1250).map(|k| (k as f32 * 0.001) + i as f32).collect(),
                split: if i == 2 { Split::Val } else { Split::Train },
            });
        }
        StaticDataset { domain, mesh_nx: 8, mesh_ny: 4, samples }
    }

    #[test]
    fn static_roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::Static(tiny_static());
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(ds, loaded);

        // Saving the loaded dataset again reproduces every byte.
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(&loaded, dir2.path()).unwrap();
        for name in ["manifest.json", "labels_static.bin", "geom/0.png", "geom/0.raw"] {
            let a = std::fs::read(dir.path().join(name)).unwrap();
            let b = std::fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "file {name} differs");
        }
    }

    #[test]
    fn empty_dataset_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::Static(StaticDataset {
            domain: DomainSpec::default(),
            mesh_nx: 8,
            mesh_ny: 4,
            samples: vec![],
        });
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn truncated_label_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&Dataset::Static(tiny_static()), dir.path()).unwrap();
        let path = dir.path().join("labels_static.bin");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        match load_dataset(dir.path()) {
            Err(DataError::Format { file, .. }) => assert_eq!(file, "labels_static.bin"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn corrupted_label_file_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&Dataset::Static(tiny_static()), dir.path()).unwrap();
        let path = dir.path().join("labels_static.bin");
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[40] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        match load_dataset(dir.path()) {
            Err(DataError::Format { file, reason }) => {
                assert_eq!(file, "labels_static.bin");
                assert!(reason.contains("checksum"));
            }
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn transient_roundtrip_with_scaler() {
        let domain = DomainSpec::default();
        let field = rasterize(&domain, &LayerSpec::with_dip(5.0), 8, 4).unwrap();
        let image = to_input_image(&field);
        let mk = |id: u64, split| TransientSample {
            id,
            dip_deg: 5.0,
            classes: field.classes.clone(),
            image: image.clone(),
            series: (0..20 * 40).map(|k| (k as f32 + id as f32) * 1e-4).collect(),
            split,
        };
        let mut ds = TransientDataset {
            domain,
            mesh_nx: 8,
            mesh_ny: 4,
            dt: 631_152.0,
            n_steps: 20,
            surface_points: 40,
            samples: vec![mk(0, Split::Train), mk(1, Split::Val)],
            scaler: None,
        };
        ds.fit_scaler().unwrap();
        // Scaler fitted on the training sample only.
        assert_eq!(ds.scaler.unwrap().max, (799.0f32 * 1e-4f32) as f64);

        let dir = tempfile::tempdir().unwrap();
        let wrapped = Dataset::Transient(ds);
        save_dataset(&wrapped, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(wrapped, loaded);
    }
}
