use super::{DensityMap, PointAnnotation};
use crate::error::{Error, Result};

/// Normalized 1-D Gaussian weights centered on `center`, clipped to `[0, len)`.
///
/// Returns the first covered index and the weights, which sum to 1.
fn clipped_weights(center: usize, sigma: f64, len: usize) -> (usize, Vec<f64>) {
    let radius = (4.0 * sigma).ceil() as i64;
    let c = center as i64;
    let lo = (c - radius).max(0);
    let hi = (c + radius).min(len as i64 - 1);
    let denom = 2.0 * sigma * sigma;
    let mut w: Vec<f64> = (lo..=hi)
        .map(|i| {
            let d = (i - c) as f64;
            (-d * d / denom).exp()
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    (lo as usize, w)
}

/// Sum of per-point truncated Gaussians at full image resolution.
///
/// Each point is snapped to the pixel containing it. Its kernel spans
/// `ceil(4σ)` pixels in every direction, is clipped to the image, and is
/// renormalized so the covered mass is exactly one.
pub fn gaussian_density(ann: &PointAnnotation, sigmas: &[f64]) -> Result<DensityMap> {
    if sigmas.len() != ann.points.len() {
        return Err(Error::invalid(format!(
            "{} sigmas for {} points",
            sigmas.len(),
            ann.points.len()
        )));
    }
    if let Some(s) = sigmas.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::invalid(format!("gaussian sigma must be positive, got {s}")));
    }
    ann.validate()?;
    let (w, h) = (ann.width, ann.height);
    let mut values = vec![0.0; w * h];
    for (&(x, y), &sigma) in ann.points.iter().zip(sigmas) {
        let (x0, wx) = clipped_weights(x.floor() as usize, sigma, w);
        let (y0, wy) = clipped_weights(y.floor() as usize, sigma, h);
        for (dy, &gy) in wy.iter().enumerate() {
            let row = &mut values[(y0 + dy) * w + x0..][..wx.len()];
            for (cell, &gx) in row.iter_mut().zip(&wx) {
                *cell += gy * gx;
            }
        }
    }
    DensityMap::new(w, h, values, 1.0)
}

/// Sums `factor × factor` blocks; partial blocks at the right and bottom
/// edges behave as if zero-padded.
pub fn downsample_preserve_count(map: &DensityMap, factor: usize) -> Result<DensityMap> {
    if factor == 0 {
        return Err(Error::invalid("downsample factor must be >= 1"));
    }
    if factor == 1 {
        return Ok(map.clone());
    }
    let ow = map.width.div_ceil(factor);
    let oh = map.height.div_ceil(factor);
    let mut out = vec![0.0; ow * oh];
    for y in 0..map.height {
        let orow = &mut out[(y / factor) * ow..][..ow];
        for (x, v) in map.values[y * map.width..][..map.width].iter().enumerate() {
            orow[x / factor] += v;
        }
    }
    DensityMap::new(ow, oh, out, map.scale / factor as f64)
}
