//! Count-level MAE and RMSE.

use std::io::Write;

use serde::Serialize;

use crate::densitygen::DensityMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub mae: f64,
    pub rmse: f64,
    /// `(predicted, ground truth)` count per image.
    pub per_image: Vec<(f64, f64)>,
}

/// Scores density maps by their summed counts against ground-truth counts.
pub fn evaluate(preds: &[DensityMap], gts: &[f64]) -> Result<EvalResult> {
    let counts: Vec<f64> = preds.iter().map(DensityMap::count).collect();
    evaluate_counts(&counts, gts)
}

pub fn evaluate_counts(preds: &[f64], gts: &[f64]) -> Result<EvalResult> {
    if preds.is_empty() {
        return Err(Error::invalid("evaluation needs at least one image"));
    }
    if preds.len() != gts.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground-truth counts",
            preds.len(),
            gts.len()
        )));
    }
    let n = preds.len() as f64;
    let abs: Vec<f64> = preds.iter().zip(gts).map(|(p, g)| (p - g).abs()).collect();
    let mae = abs.iter().sum::<f64>() / n;
    let rmse = (abs.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    Ok(EvalResult {
        mae,
        rmse,
        per_image: preds.iter().copied().zip(gts.iter().copied()).collect(),
    })
}

/// `image_id,predicted,ground_truth,abs_error` rows.
pub fn write_csv<W: Write>(mut w: W, ids: &[String], result: &EvalResult) -> Result<()> {
    writeln!(w, "image_id,predicted,ground_truth,abs_error")?;
    for (id, &(p, g)) in ids.iter().zip(&result.per_image) {
        writeln!(w, "{id},{p},{g},{}", (p - g).abs())?;
    }
    Ok(())
}
