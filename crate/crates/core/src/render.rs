//! Grayscale rendering of uncertainty maps as binary PGM (P5).

use std::path::Path;

use crate::error::{Error, Result};
use crate::types::UncertaintyMap;

/// `round(255 * u / normalizer)` per pixel, halves rounded away from zero.
pub fn gray_levels(map: &UncertaintyMap) -> Result<Vec<u8>> {
    if map.normalizer.is_nan() || map.normalizer <= 0.0 {
        return Err(Error::ZeroNormalizer);
    }
    Ok(map
        .values
        .iter()
        .map(|&u| (255.0 * u / map.normalizer).round().clamp(0.0, 255.0) as u8)
        .collect())
}

pub fn encode_pgm(map: &UncertaintyMap) -> Result<Vec<u8>> {
    let pixels = gray_levels(map)?;
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

pub fn render_map(map: &UncertaintyMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pgm(map)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
