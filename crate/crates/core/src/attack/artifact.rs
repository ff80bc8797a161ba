//! `UAPD` perturbation files and PGM previews.
//!
//! Layout (little-endian): magic `UAPD`, version u32, ε f32, α f32,
//! rank u32, dims u32…, f32 payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::Reader;
use crate::tensor::Tensor;

use super::PerturbationState;

pub const UAP_MAGIC: &[u8; 4] = b"UAPD";
pub const UAP_VERSION: u32 = 1;

/// Slack for ε round-tripping through text configs.
const BOX_SLACK: f32 = 1e-6;

pub fn uap_to_bytes(state: &PerturbationState) -> Vec<u8> {
    let d = &state.delta;
    let mut out = Vec::with_capacity(24 + 4 * d.rank() + 4 * d.len());
    out.extend_from_slice(UAP_MAGIC);
    out.extend_from_slice(&UAP_VERSION.to_le_bytes());
    out.extend_from_slice(&state.epsilon.to_le_bytes());
    out.extend_from_slice(&state.alpha.to_le_bytes());
    out.extend_from_slice(&(d.rank() as u32).to_le_bytes());
    for &dim in d.shape() {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in d.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses a `UAPD` file. A δ outside its own ε box is an integrity error.
pub fn uap_from_bytes(bytes: &[u8], path: &Path) -> Result<PerturbationState> {
    let mut r = Reader::new(bytes, path);
    if r.take(4, "magic")? != UAP_MAGIC {
        return Err(r.error(0, "bad magic, expected UAPD"));
    }
    let at = r.offset();
    let version = r.u32("version")?;
    if version != UAP_VERSION {
        return Err(r.error(at, format!("unsupported version {version}")));
    }
    let at = r.offset();
    let epsilon = r.f32("epsilon")?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(r.error(at, format!("invalid ε {epsilon}")));
    }
    let alpha = r.f32("alpha")?;
    let at = r.offset();
    let rank = r.u32("rank")? as usize;
    if rank > 8 {
        return Err(r.error(at, format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32("dim")? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| r.error(at, "shape overflows"))?;
    let data = r.f32s(n, "payload")?;
    r.finish()?;
    let delta = Tensor::new(shape, data)?;
    if !delta.all_finite() {
        return Err(Error::Integrity(format!("{}: δ has non-finite entries", path.display())));
    }
    let max = delta.max_abs();
    if max > epsilon + BOX_SLACK {
        return Err(Error::Integrity(format!(
            "{}: ‖δ‖∞ = {max} exceeds ε = {epsilon}",
            path.display()
        )));
    }
    Ok(PerturbationState { delta, epsilon, alpha })
}

pub fn save_uap(state: &PerturbationState, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, uap_to_bytes(state)).map_err(|e| Error::io(path, e))
}

pub fn load_uap(path: &Path) -> Result<PerturbationState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    uap_from_bytes(&bytes, path)
}

/// Binary PGM of a single-channel δ, mapping `[−ε, ε]` to `[0, 255]`.
/// Multi-channel perturbations are tiled vertically.
pub fn write_pgm(state: &PerturbationState, path: &Path) -> Result<()> {
    let d = &state.delta;
    let (h, w) = match d.shape() {
        [c, h, w] => (c * h, *w),
        [h, w] => (*h, *w),
        s => return Err(Error::Usage(format!("cannot render δ of shape {s:?} as an image"))),
    };
    let eps = state.epsilon;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(d.data().iter().map(|&v| {
        let u = ((v + eps) / (2.0 * eps)).clamp(0.0, 1.0);
        (u * 255.0 + 0.5).floor() as u8
    }));
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
