//! Big-endian IDX file parsing (the MNIST on-disk format).
//!
//! Images: magic 0x00000803 | count | rows | cols | u8 pixels.
//! Labels: magic 0x00000801 | count | u8 labels.
//! Pixels rescale to [0, 1] on load; the writers are the exact inverse,
//! so write(load(f)) reproduces f byte-for-byte.

use std::fs;
use std::path::Path;

use ndarray::Array4;

use crate::error::{Result, StylexError};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(data: &[u8], off: usize, path: &Path) -> Result<u32> {
    if off + 4 > data.len() {
        return Err(StylexError::format(path, "file truncated in header"));
    }
    Ok(u32::from_be_bytes([
        data[off],
        data[off + 1],
        data[off + 2],
        data[off + 3],
    ]))
}

fn parse_images(data: &[u8], path: &Path) -> Result<Array4<f64>> {
    let magic = read_u32_be(data, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(StylexError::format(
            path,
            format!("bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        ));
    }
    let count = read_u32_be(data, 4, path)? as usize;
    let rows = read_u32_be(data, 8, path)? as usize;
    let cols = read_u32_be(data, 12, path)? as usize;
    let expected = 16 + count * rows * cols;
    if data.len() != expected {
        return Err(StylexError::format(
            path,
            format!("payload is {} bytes, header implies {expected}", data.len()),
        ));
    }
    let mut images = Array4::<f64>::zeros((count, 1, rows, cols));
    {
        let dst = images.as_slice_mut().unwrap();
        for (d, &s) in dst.iter_mut().zip(&data[16..]) {
            *d = s as f64 / 255.0;
        }
    }
    Ok(images)
}

fn parse_labels(data: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = read_u32_be(data, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(StylexError::format(
            path,
            format!("bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        ));
    }
    let count = read_u32_be(data, 4, path)? as usize;
    if data.len() != 8 + count {
        return Err(StylexError::format(
            path,
            format!("payload is {} bytes, header implies {}", data.len(), 8 + count),
        ));
    }
    Ok(data[8..].to_vec())
}

/// Load a matched image/label pair. The two count fields must agree.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<(Array4<f64>, Vec<u8>)> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let img_bytes = fs::read(images_path).map_err(|e| StylexError::io(images_path, e))?;
    let lbl_bytes = fs::read(labels_path).map_err(|e| StylexError::io(labels_path, e))?;
    let images = parse_images(&img_bytes, images_path)?;
    let labels = parse_labels(&lbl_bytes, labels_path)?;
    if images.dim().0 != labels.len() {
        return Err(StylexError::Format {
            path: labels_path.to_path_buf(),
            reason: format!(
                "count mismatch: {} images in {} vs {} labels",
                images.dim().0,
                images_path.display(),
                labels.len()
            ),
        });
    }
    Ok((images, labels))
}

/// Serialize images back to IDX bytes (test helper and fixture builder).
pub fn write_idx_images(images: &Array4<f64>) -> Vec<u8> {
    let (n, _, rows, cols) = images.dim();
    let mut buf = Vec::with_capacity(16 + n * rows * cols);
    buf.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    buf.extend_from_slice(&(n as u32).to_be_bytes());
    buf.extend_from_slice(&(rows as u32).to_be_bytes());
    buf.extend_from_slice(&(cols as u32).to_be_bytes());
    for &v in images.as_slice().unwrap() {
        buf.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    buf
}

/// Serialize labels back to IDX bytes (test helper and fixture builder).
pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + labels.len());
    buf.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    buf.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    buf.extend_from_slice(labels);
    buf
}
