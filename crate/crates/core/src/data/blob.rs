//! Binary blobs: a 4-byte magic followed by little-endian payload.
//!
//! Matrix blobs hold IEEE-754 single-precision values in row-major order,
//! label blobs hold unsigned 32-bit integers. Shapes live in the manifest
//! that references the blob, never in the blob itself.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Matrix, Result, Scalar};

pub const MATRIX_MAGIC: [u8; 4] = *b"CCLF";
pub const LABELS_MAGIC: [u8; 4] = *b"CCLU";

/// Manifest entry for one blob file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub rows: usize,
    /// Absent for label blobs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cols: Option<usize>,
    pub sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_matrix<T: Scalar>(dir: &Path, name: &str, m: &Matrix<T>) -> Result<BlobRef> {
    let mut bytes = Vec::with_capacity(4 + m.len() * 4);
    bytes.extend_from_slice(&MATRIX_MAGIC);
    for v in m.data() {
        let single = v.to_f32().unwrap_or(f32::NAN);
        bytes.extend_from_slice(&single.to_le_bytes());
    }
    fs::write(dir.join(name), &bytes)?;
    Ok(BlobRef {
        path: name.to_string(),
        rows: m.rows(),
        cols: Some(m.cols()),
        sha256: sha256_hex(&bytes),
    })
}

pub fn write_labels(dir: &Path, name: &str, labels: &[usize]) -> Result<BlobRef> {
    let mut bytes = Vec::with_capacity(4 + labels.len() * 4);
    bytes.extend_from_slice(&LABELS_MAGIC);
    for &l in labels {
        let l = u32::try_from(l)
            .map_err(|_| Error::Parameter(format!("label {l} does not fit in 32 bits")))?;
        bytes.extend_from_slice(&l.to_le_bytes());
    }
    fs::write(dir.join(name), &bytes)?;
    Ok(BlobRef {
        path: name.to_string(),
        rows: labels.len(),
        cols: None,
        sha256: sha256_hex(&bytes),
    })
}

fn read_checked(dir: &Path, blob: &BlobRef, magic: [u8; 4], count: usize) -> Result<Vec<u8>> {
    let path: PathBuf = dir.join(&blob.path);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile(path))
        }
        Err(e) => return Err(e.into()),
    };
    if bytes.len() < 4 || bytes[..4] != magic {
        return Err(Error::BadMagic(path));
    }
    let expected = 4 + (count as u64) * 4;
    let found = bytes.len() as u64;
    if found < expected {
        return Err(Error::Truncated {
            path,
            expected,
            found,
        });
    }
    if found > expected {
        return Err(Error::Oversized {
            path,
            expected,
            found,
        });
    }
    let digest = sha256_hex(&bytes);
    if !digest.eq_ignore_ascii_case(&blob.sha256) {
        return Err(Error::Checksum {
            path,
            expected: blob.sha256.clone(),
            found: digest,
        });
    }
    Ok(bytes)
}

/// Reads a matrix blob and widens it to `T`.
pub fn read_matrix<T: Scalar>(dir: &Path, blob: &BlobRef) -> Result<Matrix<T>> {
    let cols = blob.cols.ok_or_else(|| Error::Manifest {
        path: dir.join(&blob.path),
        detail: "matrix blob without a column count".into(),
    })?;
    let bytes = read_checked(dir, blob, MATRIX_MAGIC, blob.rows * cols)?;
    let data = bytes[4..]
        .chunks_exact(4)
        .map(|c| {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            T::from_f32(v).unwrap_or_else(T::nan)
        })
        .collect();
    Matrix::from_vec(blob.rows, cols, data)
}

pub fn read_labels(dir: &Path, blob: &BlobRef) -> Result<Vec<usize>> {
    let bytes = read_checked(dir, blob, LABELS_MAGIC, blob.rows)?;
    Ok(bytes[4..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect())
}

/// Creates `dir` for writing. An existing non-empty directory is refused
/// unless `overwrite` is set.
pub fn prepare_output_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !overwrite {
            return Err(Error::AlreadyExists(dir.to_path_buf()));
        }
    } else {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}
