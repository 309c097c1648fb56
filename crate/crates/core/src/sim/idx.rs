//! Reader for the IDX image/label format (big-endian header, u8 payload).

use std::path::Path;

use thiserror::Error;

use crate::mlcore::{Dataset, MlError};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("BAD_MAGIC: {path} has magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: String, found: u32, expected: u32 },
    #[error("{path} is truncated: need {needed} bytes, found {found}")]
    Truncated { path: String, needed: usize, found: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Dataset(#[from] MlError),
}

fn read(path: &Path) -> Result<Vec<u8>, IdxError> {
    std::fs::read(path).map_err(|source| IdxError::Io { path: path.display().to_string(), source })
}

fn header(bytes: &[u8], path: &Path, magic: u32, words: usize) -> Result<Vec<u32>, IdxError> {
    let need = 4 * words;
    if bytes.len() < need {
        return Err(IdxError::Truncated { path: path.display().to_string(), needed: need, found: bytes.len() });
    }
    let values: Vec<u32> =
        bytes[..need].chunks_exact(4).map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes"))).collect();
    if values[0] != magic {
        return Err(IdxError::BadMagic { path: path.display().to_string(), found: values[0], expected: magic });
    }
    Ok(values)
}

/// Loads an image file (`0x803`: count, rows, cols) and a label file
/// (`0x801`: count). Pixels are scaled by 1/255; the class count is the
/// largest label plus one.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, IdxError> {
    let img = read(images_path)?;
    let lab = read(labels_path)?;
    let h = header(&img, images_path, IMAGES_MAGIC, 4)?;
    let (count, dims) = (h[1] as usize, h[2] as usize * h[3] as usize);
    let l = header(&lab, labels_path, LABELS_MAGIC, 2)?;
    let label_count = l[1] as usize;
    if count != label_count {
        return Err(IdxError::CountMismatch { images: count, labels: label_count });
    }
    let needed = 16 + count * dims;
    if img.len() < needed {
        return Err(IdxError::Truncated { path: images_path.display().to_string(), needed, found: img.len() });
    }
    if lab.len() < 8 + count {
        return Err(IdxError::Truncated { path: labels_path.display().to_string(), needed: 8 + count, found: lab.len() });
    }
    let features: Vec<f64> = img[16..needed].iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = lab[8..8 + count].iter().map(|&v| v as usize).collect();
    let num_classes = labels.iter().copied().max().map_or(2, |m| (m + 1).max(2));
    Ok(Dataset::new(features, dims, labels, num_classes, 0)?)
}

/// Writes an IDX pair; used for fixtures and round-trip tests.
pub fn write_idx(images_path: &Path, labels_path: &Path, rows: u32, cols: u32, pixels: &[u8], labels: &[u8]) -> std::io::Result<()> {
    let count = labels.len() as u32;
    let mut img = Vec::with_capacity(16 + pixels.len());
    for w in [IMAGES_MAGIC, count, rows, cols] {
        img.extend_from_slice(&w.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + labels.len());
    for w in [LABELS_MAGIC, count] {
        lab.extend_from_slice(&w.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    std::fs::write(images_path, img)?;
    std::fs::write(labels_path, lab)
}
