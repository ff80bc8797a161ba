use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| format_err(path, at, format!("truncated header: missing {what}")))
}

/// Parses an unsigned-byte IDX image file into `(n, 1, h, w)` pixels scaled by 1/255.
pub fn read_idx_images(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let magic = be_u32(bytes, 0, path, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(path, 0, format!("bad image magic {magic:#010x}, expected 0x00000803")));
    }
    let n = be_u32(bytes, 4, path, "image count")? as usize;
    let h = be_u32(bytes, 8, path, "row count")? as usize;
    let w = be_u32(bytes, 12, path, "column count")? as usize;
    let need = n * h * w;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(format_err(
            path,
            16 + payload.len(),
            format!("truncated payload: {n}×{h}×{w} needs {need} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(format_err(path, 16 + need, "trailing bytes after image payload"));
    }
    let data = payload.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![n, 1, h, w], data)
}

pub fn read_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(path, 0, format!("bad label magic {magic:#010x}, expected 0x00000801")));
    }
    let n = be_u32(bytes, 4, path, "label count")? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(format_err(
            path,
            8 + payload.len(),
            format!("truncated payload: {n} labels declared, {} present", payload.len()),
        ));
    }
    if payload.len() > n {
        return Err(format_err(path, 8 + n, "trailing bytes after label payload"));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

/// Loads an image/label IDX pair. The class count is the largest label plus one.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lbl_bytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let images = read_idx_images(&img_bytes, images_path)?;
    let labels = read_idx_labels(&lbl_bytes, labels_path)?;
    if images.rows() != labels.len() {
        return Err(format_err(
            labels_path,
            4,
            format!("count mismatch: {} images but {} labels", images.rows(), labels.len()),
        ));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(images, labels, classes)
}

/// Writes a single-channel dataset as an IDX pair, pixels rounded to bytes.
pub fn write_idx(data: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let [c, h, w] = data.image_shape();
    if c != 1 {
        return Err(Error::Data(format!("IDX export supports one channel, dataset has {c}")));
    }
    if data.num_classes() > 256 {
        return Err(Error::Data("IDX labels are single bytes".into()));
    }
    let mut img = Vec::with_capacity(16 + data.images().len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [data.len(), h, w] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend(data.images().data().iter().map(|&v| (v * 255.0).round() as u8));

    let mut lbl = Vec::with_capacity(8 + data.len());
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(data.len() as u32).to_be_bytes());
    lbl.extend(data.labels().iter().map(|&y| y as u8));

    for (path, bytes) in [(images_path, img), (labels_path, lbl)] {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
