//! Receptive-field overlap and per-layer extents.

use serde::Serialize;

use crate::error::{Error, Result};

/// Field side `field` (input pixels), network downsample ratio, and output-grid separation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RfSpec {
    pub field: f64,
    pub downsample: f64,
    pub separation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RfIou {
    pub iou: f64,
    /// Set when `field < downsample · separation`: the fields do not overlap.
    pub disjoint: bool,
}

/// IoU of two receptive fields `n` output cells apart: `(X − kn) / (X + kn)`.
pub fn rf_iou(spec: RfSpec) -> Result<RfIou> {
    let RfSpec {
        field,
        downsample,
        separation,
    } = spec;
    if !(field > 0.0) || !(downsample >= 1.0) || !(separation >= 1.0) {
        return Err(Error::invalid(format!(
            "receptive field spec needs X > 0, k >= 1, n >= 1, got {spec:?}"
        )));
    }
    let kn = downsample * separation;
    if field < kn {
        return Ok(RfIou {
            iou: 0.0,
            disjoint: true,
        });
    }
    Ok(RfIou {
        iou: (field - kn) / (field + kn),
        disjoint: false,
    })
}

/// IoU at each field size in `fields`, for fixed `k` and `n`.
pub fn iou_sweep(downsample: f64, separation: f64, fields: &[f64]) -> Result<Vec<(f64, RfIou)>> {
    fields
        .iter()
        .map(|&field| {
            rf_iou(RfSpec {
                field,
                downsample,
                separation,
            })
            .map(|r| (field, r))
        })
        .collect()
}

/// One layer of a sequential conv/pool stack.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RfLayer {
    Conv {
        kernel: usize,
        stride: usize,
        dilation: usize,
    },
    Pool {
        kernel: usize,
        stride: usize,
    },
    /// Variable-dilation 3×3 layer; its dilation is the analyzed rate.
    Refined {
        kernel: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerExtent {
    pub layer: usize,
    pub kind: &'static str,
    pub field: f64,
    pub jump: f64,
}

/// Receptive field after each layer: `rf += (kernel − 1) · dilation · jump`, `jump *= stride`.
pub fn layer_rf_extent(layers: &[RfLayer], dmap_rate: f64) -> Vec<LayerExtent> {
    let mut field = 1.0;
    let mut jump = 1.0;
    layers
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let (kernel, stride, dilation, kind) = match *layer {
                RfLayer::Conv {
                    kernel,
                    stride,
                    dilation,
                } => (kernel, stride, dilation as f64, "conv"),
                RfLayer::Pool { kernel, stride } => (kernel, stride, 1.0, "pool"),
                RfLayer::Refined { kernel } => (kernel, 1, dmap_rate, "refined"),
            };
            field += (kernel as f64 - 1.0) * dilation * jump;
            jump *= stride as f64;
            LayerExtent {
                layer: i,
                kind,
                field,
                jump,
            }
        })
        .collect()
}
