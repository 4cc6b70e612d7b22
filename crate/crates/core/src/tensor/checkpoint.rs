//! Checkpoint file format: magic bytes, a version word, a parameter table of
//! (name, shape, 32-bit little-endian values) entries, and a trailing CRC32
//! over everything between the magic and the checksum.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"UPCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file: bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint is truncated or corrupt: {0}")]
    Corrupt(String),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
}

/// Writes named tensors (parameters and buffers) as f32.
pub fn save_state<T: Scalar>(
    entries: &[(String, &Tensor<T>)],
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut payload = Vec::new();
    payload.extend_from_slice(&VERSION.to_le_bytes());
    payload.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        payload.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        payload.extend_from_slice(name_bytes);
        payload.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            payload.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            payload.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&payload);
    let mut file = std::fs::File::create(path)
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    file.write_all(MAGIC)
        .and_then(|_| file.write_all(&payload))
        .and_then(|_| file.write_all(&crc.to_le_bytes()))
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

/// Reads a checkpoint back as named f32 tensors, validating version and CRC.
pub fn load_state(path: &Path) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let payload = &bytes[4..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(CheckpointError::Crc { stored, computed });
    }

    let mut cur = payload;
    let mut take = |n: usize| -> Result<&[u8], CheckpointError> {
        if cur.len() < n {
            return Err(CheckpointError::Corrupt(format!(
                "needed {n} more bytes, {} left",
                cur.len()
            )));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };

    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Version { found: version, expected: VERSION });
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("non-utf8 parameter name".into()))?;
        let ndim = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        entries.push((
            name,
            Tensor::new(shape, data)
                .map_err(|e| CheckpointError::Corrupt(format!("bad tensor entry: {e}")))?,
        ));
    }
    if !cur.is_empty() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", cur.len())));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_entries() -> Vec<(String, Tensor<f32>)> {
        vec![
            ("enc.w".into(), Tensor::from_fn(&[2, 3], |k| k as f32 * 0.5)),
            ("enc.b".into(), Tensor::from_fn(&[3], |k| -(k as f32))),
            ("scalar".into(), Tensor::scalar(7.25)),
        ]
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.upck");
        let entries = sample_entries();
        let refs: Vec<(String, &Tensor<f32>)> =
            entries.iter().map(|(n, t)| (n.clone(), t)).collect();
        save_state(&refs, &path).unwrap();
        let loaded = load_state(&path).unwrap();
        assert_eq!(entries, loaded);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.upck");
        let entries = sample_entries();
        let refs: Vec<(String, &Tensor<f32>)> =
            entries.iter().map(|(n, t)| (n.clone(), t)).collect();
        save_state(&refs, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(load_state(&path).is_err());
    }

    #[test]
    fn corrupted_payload_fails_crc() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.upck");
        let entries = sample_entries();
        let refs: Vec<(String, &Tensor<f32>)> =
            entries.iter().map(|(n, t)| (n.clone(), t)).collect();
        save_state(&refs, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[20] ^= 0x01;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_state(&path), Err(CheckpointError::Crc { .. })));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not_a_checkpoint");
        std::fs::write(&path, b"hello world, definitely not a checkpoint").unwrap();
        assert!(matches!(load_state(&path), Err(CheckpointError::BadMagic)));
    }
}
