//! Ground-truth density maps from point annotations.
//!
//! Every map built here conserves the annotated count: each point's
//! truncated Gaussian is renormalized over the cells it actually covers, and
//! downsampling sums blocks instead of averaging them.

mod gaussian;
pub mod io;
mod knn;

pub use gaussian::{downsample_preserve_count, gaussian_density};
pub use knn::{adaptive_sigmas, KnnSigma};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spread used for precise targets and as the single-point fallback.
pub const PRECISE_SIGMA: f64 = 15.0;
/// Spread used for the rough network's targets.
pub const ROUGH_SIGMA: f64 = 50.0;

/// Annotated head positions in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointAnnotation {
    pub width: usize,
    pub height: usize,
    pub points: Vec<(f64, f64)>,
}

impl PointAnnotation {
    /// Builds an annotation, rejecting points outside `[0, width) × [0, height)`.
    pub fn new(width: usize, height: usize, points: Vec<(f64, f64)>) -> Result<Self> {
        let ann = Self { width, height, points };
        ann.validate()?;
        Ok(ann)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("annotation image must be non-empty"));
        }
        for &(x, y) in &self.points {
            let inside = x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64;
            if !inside {
                return Err(Error::invalid(format!(
                    "point ({x}, {y}) outside {}x{} image",
                    self.width, self.height
                )));
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }
}

/// Non-negative grid whose sum is an object count.
///
/// `scale` is the map resolution relative to the source image (1 for full
/// resolution, 1/8 after factor-8 downsampling).
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub scale: f64,
}

impl DensityMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>, scale: f64) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::ShapeMismatch {
                op: "density map",
                expected: vec![height, width],
                got: vec![values.len()],
            });
        }
        Ok(Self {
            width,
            height,
            values,
            scale,
        })
    }

    pub fn zeros(width: usize, height: usize, scale: f64) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
            scale,
        }
    }

    pub fn count(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Mirrors the map left to right.
    pub fn flipped_horizontal(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for row in self.values.chunks(self.width) {
            values.extend(row.iter().rev());
        }
        Self { values, ..self.clone() }
    }

    /// Sub-grid of `w × h` cells starting at `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::invalid(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds {}x{} map",
                self.width, self.height
            )));
        }
        let mut values = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            values.extend_from_slice(&self.values[y * self.width + x0..][..w]);
        }
        Ok(Self {
            width: w,
            height: h,
            values,
            scale: self.scale,
        })
    }
}

/// How per-point spreads are chosen for precise targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SigmaMode {
    Fixed { sigma: f64 },
    Adaptive { k: usize, beta: f64 },
}

impl Default for SigmaMode {
    fn default() -> Self {
        SigmaMode::Fixed { sigma: PRECISE_SIGMA }
    }
}

impl SigmaMode {
    pub fn sigmas(&self, ann: &PointAnnotation) -> Vec<f64> {
        match *self {
            SigmaMode::Fixed { sigma } => vec![sigma; ann.count()],
            SigmaMode::Adaptive { k, beta } => adaptive_sigmas(
                ann,
                KnnSigma {
                    k,
                    beta,
                    ..KnnSigma::default()
                },
            ),
        }
    }
}

/// Full-resolution map for `ann` under `mode`, summed down by `factor`.
pub fn density_target(ann: &PointAnnotation, mode: SigmaMode, factor: usize) -> Result<DensityMap> {
    let full = gaussian_density(ann, &mode.sigmas(ann))?;
    downsample_preserve_count(&full, factor)
}
