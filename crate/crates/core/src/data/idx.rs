//! IDX files (the MNIST container format): big-endian `u32` magic and
//! dimension counts followed by unsigned bytes.

use std::fs;
use std::path::Path;

use super::{Dataset, Split};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("header ends at byte {}", bytes.len()),
        })
}

fn check_magic(found: u32, expected: u32) -> Result<()> {
    if found != expected {
        return Err(Error::IdxMagic { found, expected });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], start: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    bytes.get(start..start + len).ok_or_else(|| Error::Truncated {
        path: path.to_path_buf(),
        detail: format!("expected {} payload bytes, found {}", len, bytes.len().saturating_sub(start)),
    })
}

/// Loads an image/label file pair. Pixels are scaled from bytes to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let ib = fs::read(images_path)?;
    let lb = fs::read(labels_path)?;

    check_magic(read_u32(&ib, 0, images_path)?, IDX_IMAGES_MAGIC)?;
    let n = read_u32(&ib, 4, images_path)? as usize;
    let rows = read_u32(&ib, 8, images_path)? as usize;
    let cols = read_u32(&ib, 12, images_path)? as usize;

    check_magic(read_u32(&lb, 0, labels_path)?, IDX_LABELS_MAGIC)?;
    let nl = read_u32(&lb, 4, labels_path)? as usize;
    if n != nl {
        return Err(Error::IdxCountMismatch { images: n, labels: nl });
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let pixels = payload(&ib, 16, n * rows * cols, images_path)?;
    let labels: Vec<usize> = payload(&lb, 8, n, labels_path)?.iter().map(|&b| b as usize).collect();

    let images = Tensor::new(
        &[n, 1, rows, cols],
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )?;
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset::new(name, Split::Train, images, labels, classes)
}

/// Writes a single-channel dataset as an IDX pair, quantizing pixels to bytes.
pub fn save_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let [c, h, w] = ds.image_shape();
    if c != 1 {
        return Err(Error::Contract(format!("IDX holds one channel, dataset has {c}")));
    }
    let mut ib = Vec::with_capacity(16 + ds.images.numel());
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, h as u32, w as u32] {
        ib.extend_from_slice(&v.to_be_bytes());
    }
    ib.extend(ds.images.data().iter().map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lb = Vec::with_capacity(8 + ds.len());
    for v in [IDX_LABELS_MAGIC, ds.len() as u32] {
        lb.extend_from_slice(&v.to_be_bytes());
    }
    lb.extend(ds.labels.iter().map(|&l| l as u8));
    fs::write(images_path, ib)?;
    fs::write(labels_path, lb)?;
    Ok(())
}
