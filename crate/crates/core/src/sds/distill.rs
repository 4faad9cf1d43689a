use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::densitygen::DensityMap;
use crate::drf::DilationMap;
use crate::error::{Error, Result};
use crate::nets::Model;
use crate::par;

/// Predicted mass at or below this is treated as empty.
pub const COUNT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Correction {
    pub map: DensityMap,
    /// `Σy / Σŷ`, or `None` when the annotation map was used instead.
    pub ratio: Option<f64>,
}

impl Correction {
    pub fn fallback(&self) -> bool {
        self.ratio.is_none()
    }
}

/// Rescales `refined` so it sums to the annotated count, keeping its
/// relative distribution. Falls back to `annotation` when `refined` has no
/// mass.
pub fn count_correction(refined: &DensityMap, annotation: &DensityMap) -> Result<Correction> {
    if (refined.width, refined.height) != (annotation.width, annotation.height) {
        return Err(Error::ShapeMismatch {
            op: "count_correction",
            expected: vec![annotation.height, annotation.width],
            got: vec![refined.height, refined.width],
        });
    }
    if refined.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid("refined map must be finite and non-negative"));
    }
    let predicted = refined.count();
    if predicted <= COUNT_EPS {
        return Ok(Correction {
            map: annotation.clone(),
            ratio: None,
        });
    }
    let ratio = annotation.count() / predicted;
    Ok(Correction {
        map: DensityMap {
            values: refined.values.iter().map(|v| ratio * v).collect(),
            ..refined.clone()
        },
        ratio: Some(ratio),
    })
}

/// Count-corrected teacher predictions used as second-stage targets.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistillSet {
    /// SHA-256 of the teacher checkpoint.
    pub teacher_id: String,
    #[serde(skip)]
    pub maps: Vec<DensityMap>,
    pub ratios: Vec<Option<f64>>,
}

impl DistillSet {
    pub fn fallbacks(&self) -> usize {
        self.ratios.iter().filter(|r| r.is_none()).count()
    }
}

pub fn checkpoint_id(model: &Model) -> String {
    hex(&Sha256::digest(model.checkpoint_bytes()))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs the teacher on each full, unaugmented image and corrects the result
/// against that image's annotation map.
pub fn distill_targets(
    teacher: &Model,
    images: &[Tensor],
    dmaps: &[DilationMap],
    annotations: &[DensityMap],
) -> Result<DistillSet> {
    if images.len() != dmaps.len() || images.len() != annotations.len() {
        return Err(Error::invalid(format!(
            "distillation needs matching inputs: {} images, {} dilation maps, {} annotation maps",
            images.len(),
            dmaps.len(),
            annotations.len()
        )));
    }
    let corrected = par::map_range(images.len(), |i| {
        let refined = teacher.forward_precise(&images[i], &dmaps[i])?;
        count_correction(&refined, &annotations[i])
    });
    let mut maps = Vec::with_capacity(images.len());
    let mut ratios = Vec::with_capacity(images.len());
    for c in corrected {
        let c = c?;
        maps.push(c.map);
        ratios.push(c.ratio);
    }
    Ok(DistillSet {
        teacher_id: checkpoint_id(teacher),
        maps,
        ratios,
    })
}
