//! Desk-scale ablations on a synthetic benchmark: fixed versus dynamic
//! dilation, and the slope of the density-to-dilation transform.

use std::io::Write;

use serde::Serialize;

use crate::drf::{DilationMap, TransformParams};
use crate::error::{Error, Result};
use crate::sds::pipeline::{images, rough_stage, targets, teacher_stage};
use crate::sds::{dilation_maps, evaluate_model, PipelineConfig};
use crate::synthdata::Dataset;

pub const GAMMA_GRID: [f64; 5] = [1.0, 5.0, 10.0, 15.0, 20.0];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantResult {
    pub variant: String,
    pub mae: f64,
    pub rmse: f64,
    pub final_loss: Option<f64>,
}

struct Shared {
    train_images: Vec<crate::autodiff::Tensor>,
    test_images: Vec<crate::autodiff::Tensor>,
    train_targets: Vec<crate::densitygen::DensityMap>,
    counts: Vec<f64>,
    rough: crate::nets::Model,
}

fn shared(train: &Dataset, test: &Dataset, cfg: &PipelineConfig) -> Result<Shared> {
    cfg.validate()?;
    let train_images = images(train);
    let (rough, _) = rough_stage(train, &train_images, cfg)?;
    Ok(Shared {
        train_targets: targets(train, cfg.precise_sigma, cfg.model.downsample())?,
        test_images: images(test),
        counts: test.counts(),
        train_images,
        rough,
    })
}

fn run_variant(
    s: &Shared,
    cfg: &PipelineConfig,
    name: String,
    train_d: &[DilationMap],
    test_d: &[DilationMap],
) -> Result<VariantResult> {
    let (model, hist) = teacher_stage(&s.train_images, &s.train_targets, train_d, cfg)?;
    let eval = evaluate_model(&model, &s.test_images, test_d, &s.counts)?;
    if !(eval.mae.is_finite() && eval.rmse.is_finite()) {
        return Err(Error::invalid(format!("variant {name} produced non-finite metrics")));
    }
    Ok(VariantResult {
        variant: name,
        mae: eval.mae,
        rmse: eval.rmse,
        final_loss: hist.last().copied(),
    })
}

fn constant_maps(like: &[DilationMap], rate: f64) -> Vec<DilationMap> {
    like.iter()
        .map(|d| DilationMap::constant(d.width, d.height, rate, d.scale))
        .collect()
}

/// Trains the precise network with constant dilation 1, constant dilation
/// 2, and rough-network dilation maps, sharing one rough network.
pub fn sweep_dilation(train: &Dataset, test: &Dataset, cfg: &PipelineConfig) -> Result<Vec<VariantResult>> {
    let s = shared(train, test, cfg)?;
    let train_d = dilation_maps(&s.rough, &s.train_images, cfg.transform)?;
    let test_d = dilation_maps(&s.rough, &s.test_images, cfg.transform)?;
    let mut rows = Vec::new();
    for rate in [1.0, 2.0] {
        rows.push(run_variant(
            &s,
            cfg,
            format!("dilation_{rate}"),
            &constant_maps(&train_d, rate),
            &constant_maps(&test_d, rate),
        )?);
    }
    rows.push(run_variant(&s, cfg, "drf".into(), &train_d, &test_d)?);
    Ok(rows)
}

/// Trains the precise network once per slope in `gammas`, sharing one rough network.
pub fn sweep_gamma(
    train: &Dataset,
    test: &Dataset,
    cfg: &PipelineConfig,
    gammas: &[f64],
) -> Result<Vec<VariantResult>> {
    let s = shared(train, test, cfg)?;
    gammas
        .iter()
        .map(|&g| {
            let p = TransformParams::new(cfg.transform.max_rate, g)?;
            let train_d = dilation_maps(&s.rough, &s.train_images, p)?;
            let test_d = dilation_maps(&s.rough, &s.test_images, p)?;
            run_variant(&s, cfg, format!("{g}"), &train_d, &test_d)
        })
        .collect()
}

/// `method,mae,rmse` with one row per variant.
pub fn write_dilation_csv<W: Write>(mut w: W, rows: &[VariantResult]) -> Result<()> {
    writeln!(w, "method,mae,rmse")?;
    for r in rows {
        writeln!(w, "{},{:.6},{:.6}", r.variant, r.mae, r.rmse)?;
    }
    Ok(())
}

/// One column per slope, with `mae` and `rmse` rows.
pub fn write_gamma_csv<W: Write>(mut w: W, rows: &[VariantResult]) -> Result<()> {
    let cols = |f: &dyn Fn(&VariantResult) -> String| rows.iter().map(f).collect::<Vec<_>>().join(",");
    writeln!(w, "gamma,{}", cols(&|r| r.variant.clone()))?;
    writeln!(w, "mae,{}", cols(&|r| format!("{:.6}", r.mae)))?;
    writeln!(w, "rmse,{}", cols(&|r| format!("{:.6}", r.rmse)))?;
    Ok(())
}
