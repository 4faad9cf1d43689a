//! Density-driven variable dilation.
//!
//! [`linear_transform`] maps a rough density prediction to per-position
//! dilation rates in `[0, R]` (dense cells get small rates), and
//! [`refined_dilated_conv`] runs a 3×3 convolution whose taps sit at
//! `x_k + r_k · (i, j)` for `i, j ∈ {-1, 0, 1}`, reading fractional positions
//! by bilinear interpolation.

mod conv;
mod sample;

pub use conv::{refined_dilated_conv, refined_dilated_conv_backward, refined_dilated_conv_forward, RefinedConvContext};
pub use sample::bilinear_sample;

use serde::{Deserialize, Serialize};

use crate::densitygen::{io as dio, DensityMap};
use crate::error::{Error, Result};

/// Upper bound and slope of the negative linear transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformParams {
    pub max_rate: f64,
    pub gamma: f64,
}

impl Default for TransformParams {
    fn default() -> Self {
        Self {
            max_rate: 2.0,
            gamma: 10.0,
        }
    }
}

impl TransformParams {
    pub fn new(max_rate: f64, gamma: f64) -> Result<Self> {
        let p = Self { max_rate, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_rate > 0.0 && self.max_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "max_rate must be > 0, got {}",
                self.max_rate
            )));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!("gamma must be > 0, got {}", self.gamma)));
        }
        Ok(())
    }

    /// `R` for `x ≤ 0`, `R − γx` in between, `0` for `x ≥ R/γ`.
    pub fn rate(&self, x: f64) -> f64 {
        if x <= 0.0 {
            self.max_rate
        } else if x >= self.max_rate / self.gamma {
            0.0
        } else {
            (self.max_rate - self.gamma * x).clamp(0.0, self.max_rate)
        }
    }
}

/// Per-position dilation rates aligned with a refined layer's feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DilationMap {
    pub width: usize,
    pub height: usize,
    pub rates: Vec<f64>,
    pub max_rate: f64,
    /// Grid resolution relative to the source image.
    pub scale: f64,
}

impl DilationMap {
    pub fn new(width: usize, height: usize, rates: Vec<f64>, max_rate: f64, scale: f64) -> Result<Self> {
        if rates.len() != width * height {
            return Err(Error::ShapeMismatch {
                op: "dilation map",
                expected: vec![height, width],
                got: vec![rates.len()],
            });
        }
        if let Some(r) = rates.iter().find(|r| !(**r >= 0.0 && **r <= max_rate)) {
            return Err(Error::invalid(format!("dilation rate {r} outside [0, {max_rate}]")));
        }
        Ok(Self {
            width,
            height,
            rates,
            max_rate,
            scale,
        })
    }

    pub fn constant(width: usize, height: usize, rate: f64, scale: f64) -> Self {
        Self {
            width,
            height,
            rates: vec![rate; width * height],
            max_rate: rate,
            scale,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.rates[y * self.width + x]
    }

    pub fn flipped_horizontal(&self) -> Self {
        let mut rates = Vec::with_capacity(self.rates.len());
        for row in self.rates.chunks(self.width) {
            rates.extend(row.iter().rev());
        }
        Self { rates, ..self.clone() }
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::invalid("dilation map crop out of range"));
        }
        let mut rates = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            rates.extend_from_slice(&self.rates[y * self.width + x0..][..w]);
        }
        Ok(Self {
            width: w,
            height: h,
            rates,
            ..self.clone()
        })
    }

    /// Nearest-neighbor resample onto a `width × height` grid.
    pub fn resample_nearest(&self, width: usize, height: usize) -> Self {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let mut rates = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = (y * self.height / height).min(self.height - 1);
            for x in 0..width {
                let sx = (x * self.width / width).min(self.width - 1);
                rates.push(self.rates[sy * self.width + sx]);
            }
        }
        Self {
            width,
            height,
            rates,
            max_rate: self.max_rate,
            scale: self.scale * width as f64 / self.width as f64,
        }
    }

    pub fn to_density_container(&self) -> DensityMap {
        DensityMap {
            width: self.width,
            height: self.height,
            values: self.rates.clone(),
            scale: self.scale,
        }
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        dio::write_density(path, &self.to_density_container())
    }

    /// Reads a `DRFDMAP1` file whose payload holds rates bounded by `max_rate`.
    pub fn read(path: &std::path::Path, max_rate: f64) -> Result<Self> {
        let m = dio::read_density(path)?;
        Self::new(m.width, m.height, m.values, max_rate, m.scale)
    }
}

/// Elementwise negative linear transform of a rough prediction.
pub fn linear_transform(rough: &DensityMap, p: TransformParams) -> Result<DilationMap> {
    p.validate()?;
    if let Some(v) = rough.values.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("rough density contains non-finite value {v}")));
    }
    let rates = rough.values.iter().map(|&x| p.rate(x)).collect();
    DilationMap::new(rough.width, rough.height, rates, p.max_rate, rough.scale)
}

#[cfg(test)]
mod transform_tests {
    use super::*;
    use proptest::prelude::*;

    fn map1(vals: &[f64]) -> DensityMap {
        DensityMap::new(vals.len(), 1, vals.to_vec(), 0.125).unwrap()
    }

    #[test]
    fn breakpoints_and_midpoint() {
        let p = TransformParams::new(2.0, 10.0).unwrap();
        let d = linear_transform(&map1(&[0.0, 0.2, 0.1, -3.0, 7.0]), p).unwrap();
        assert_eq!(d.rates, vec![2.0, 0.0, 1.0, 2.0, 0.0]);
        assert_eq!(d.scale, 0.125);
    }

    #[test]
    fn rejects_non_finite_and_bad_params() {
        let p = TransformParams::default();
        assert!(linear_transform(&map1(&[f64::NAN]), p).is_err());
        assert!(linear_transform(&map1(&[f64::INFINITY]), p).is_err());
        assert!(TransformParams::new(0.0, 1.0).is_err());
        assert!(TransformParams::new(1.0, -1.0).is_err());
    }

    #[test]
    fn resample_nearest_upsamples_blocks() {
        let d = DilationMap::new(2, 1, vec![0.5, 1.5], 2.0, 0.125).unwrap();
        let r = d.resample_nearest(4, 2);
        assert_eq!(r.rates, vec![0.5, 0.5, 1.5, 1.5, 0.5, 0.5, 1.5, 1.5]);
        assert_eq!(r.scale, 0.25);
    }

    #[test]
    fn dilation_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.dmap");
        let d = DilationMap::new(2, 2, vec![0.0, 0.5, 1.0, 2.0], 2.0, 0.125).unwrap();
        d.write(&path).unwrap();
        assert_eq!(DilationMap::read(&path, 2.0).unwrap(), d);
        assert!(DilationMap::read(&path, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn bounded_and_non_increasing(r in 0.1f64..8.0, g in 0.1f64..50.0, mut xs in proptest::collection::vec(-1.0f64..2.0, 1..40)) {
            let p = TransformParams::new(r, g).unwrap();
            xs.sort_by(f64::total_cmp);
            let rates: Vec<f64> = xs.iter().map(|&x| p.rate(x)).collect();
            for w in rates.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            prop_assert!(rates.iter().all(|&v| (0.0..=r).contains(&v)));
        }
    }
}
