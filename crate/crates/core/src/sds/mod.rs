//! Two-stage self-distilling supervision: stage-one training on Gaussian
//! targets, count-corrected distillation, and student finetuning.

mod distill;
pub(crate) mod pipeline;

pub use distill::{checkpoint_id, count_correction, distill_targets, Correction, DistillSet, COUNT_EPS};
pub use pipeline::{
    dilation_maps, evaluate_model, run_sds_pipeline, train_rough, train_student, train_teacher, CheckpointIds,
    CheckpointPaths, CorrectionEntry, LossHistory, PipelineConfig, PipelineRun, Report, StageMetrics,
};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamState, Tensor};
use crate::densitygen::DensityMap;
use crate::drf::DilationMap;
use crate::error::{Error, Result};
use crate::nets::{Model, Role};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Square crop side in pixels, used when `random_crop` is set.
    pub crop_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub hflip: bool,
    pub random_crop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            crop_size: 48,
            lr: 1e-5,
            weight_decay: 1e-4,
            seed: 0,
            hflip: true,
            random_crop: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.random_crop && self.crop_size == 0 {
            return bad("crop_size must be positive".into());
        }
        Ok(())
    }
}

/// Where and whether one training sample is cropped and mirrored.
#[derive(Debug, Clone, Copy)]
struct Augment {
    x0: usize,
    y0: usize,
    side: Option<usize>,
    flip: bool,
}

fn crop_image(img: &Tensor, x0: usize, y0: usize, w: usize, h: usize) -> Tensor {
    let (_, c, ih, iw) = img.dims4().expect("rank-4 image");
    let mut out = Vec::with_capacity(c * w * h);
    for ch in 0..c {
        for y in y0..y0 + h {
            out.extend_from_slice(&img.data()[(ch * ih + y) * iw + x0..][..w]);
        }
    }
    Tensor::new([1, c, h, w], out).expect("crop in range")
}

fn flip_image(img: &Tensor) -> Tensor {
    let w = img.shape()[3];
    let mut out = Vec::with_capacity(img.len());
    for row in img.data().chunks(w) {
        out.extend(row.iter().rev());
    }
    Tensor::new(img.shape().to_vec(), out).expect("same shape")
}

struct Prepared {
    image: Tensor,
    target: Tensor,
    dmap: Option<DilationMap>,
}

fn prepare(
    image: &Tensor,
    target: &DensityMap,
    dmap: Option<&DilationMap>,
    aug: Augment,
    ds: usize,
) -> Result<Prepared> {
    let (mut image, mut target, mut dmap) = (image.clone(), target.clone(), dmap.cloned());
    if let Some(side) = aug.side {
        image = crop_image(&image, aug.x0, aug.y0, side, side);
        let (cx, cy, cs) = (aug.x0 / ds, aug.y0 / ds, side / ds);
        target = target.crop(cx, cy, cs, cs)?;
        dmap = dmap.map(|d| d.crop(cx, cy, cs, cs)).transpose()?;
    }
    if aug.flip {
        image = flip_image(&image);
        target = target.flipped_horizontal();
        dmap = dmap.map(|d| d.flipped_horizontal());
    }
    let target = Tensor::new([1, 1, target.height, target.width], target.values)?;
    Ok(Prepared { image, target, dmap })
}

fn check_inputs(
    model: &Model,
    images: &[Tensor],
    targets: &[DensityMap],
    dmaps: Option<&[DilationMap]>,
    cfg: &TrainConfig,
) -> Result<()> {
    if images.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} images but {} targets",
            images.len(),
            targets.len()
        )));
    }
    match (model.role, dmaps) {
        (Role::Precise, None) => return Err(Error::invalid("precise model requires dilation maps")),
        (Role::Rough, Some(_)) => return Err(Error::invalid("rough model takes no dilation maps")),
        (_, Some(d)) if d.len() != images.len() => {
            return Err(Error::invalid(format!(
                "{} images but {} dilation maps",
                images.len(),
                d.len()
            )))
        }
        _ => {}
    }
    let ds = model.config.downsample();
    for (i, (img, t)) in images.iter().zip(targets).enumerate() {
        let (_, _, h, w) = img.dims4()?;
        if (t.scale - 1.0 / ds as f64).abs() > 1e-12 || (t.width, t.height) != (w / ds, h / ds) {
            return Err(Error::invalid(format!(
                "target {i} is {}x{} at scale {}, model output is {}x{} at scale 1/{ds}",
                t.width,
                t.height,
                t.scale,
                w / ds,
                h / ds
            )));
        }
        if cfg.random_crop && (cfg.crop_size > w.min(h) || !cfg.crop_size.is_multiple_of(ds)) {
            return Err(Error::InvalidConfig(format!(
                "crop_size {} must be a multiple of {ds} no larger than image {w}x{h}",
                cfg.crop_size
            )));
        }
    }
    Ok(())
}

/// Minibatch Adam on the mean L1 loss. Returns the trained model and the
/// mean training loss of each epoch.
///
/// Shuffling and augmentation draw from one seeded stream before any
/// parallel work, and per-sample gradients are reduced in batch order, so
/// results do not depend on the thread count.
pub fn train_stage(
    model: &Model,
    images: &[Tensor],
    targets: &[DensityMap],
    cfg: &TrainConfig,
    dmaps: Option<&[DilationMap]>,
) -> Result<(Model, Vec<f64>)> {
    cfg.validate()?;
    check_inputs(model, images, targets, dmaps, cfg)?;
    let mut model = model.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 || images.is_empty() {
        return Ok((model, history));
    }
    let ds = model.config.downsample();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamState::new(cfg.lr, cfg.weight_decay);
    let mut order: Vec<usize> = (0..images.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let augs: Vec<Augment> = batch
                .iter()
                .map(|&i| {
                    let (_, _, h, w) = images[i].dims4().expect("checked");
                    let mut a = Augment {
                        x0: 0,
                        y0: 0,
                        side: None,
                        flip: false,
                    };
                    if cfg.random_crop {
                        a.x0 = rng.gen_range(0..=(w - cfg.crop_size) / ds) * ds;
                        a.y0 = rng.gen_range(0..=(h - cfg.crop_size) / ds) * ds;
                        a.side = Some(cfg.crop_size);
                    }
                    if cfg.hflip {
                        a.flip = rng.gen::<bool>();
                    }
                    a
                })
                .collect();

            let results = par::map_range(batch.len(), |k| -> Result<(f64, Vec<Vec<f64>>)> {
                let i = batch[k];
                let s = prepare(&images[i], &targets[i], dmaps.map(|d| &d[i]), augs[k], ds)?;
                let mut pass = model.forward_graph(&s.image, s.dmap.as_ref())?;
                let target = pass.graph.constant(s.target);
                let loss = pass.graph.l1_loss(pass.output, target)?;
                pass.graph.backward(loss)?;
                let value = pass.graph.value(loss).item()?;
                let grads = pass
                    .params
                    .iter()
                    .zip(&model.params)
                    .map(|(&v, p)| {
                        pass.graph
                            .grad(v)
                            .map(<[f64]>::to_vec)
                            .ok_or_else(|| Error::MissingGrad(p.name.clone()))
                    })
                    .collect::<Result<_>>()?;
                Ok((value, grads))
            });

            let n = batch.len() as f64;
            let mut sum: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
            for r in results {
                let (loss, grads) = r?;
                if !loss.is_finite() {
                    return Err(Error::invalid(format!("non-finite loss in epoch {}", epoch + 1)));
                }
                epoch_loss += loss;
                for (acc, g) in sum.iter_mut().zip(grads) {
                    acc.iter_mut().zip(g).for_each(|(a, g)| *a += g);
                }
            }
            for (p, mut g) in model.params.iter_mut().zip(sum) {
                g.iter_mut().for_each(|v| *v /= n);
                p.tensor.set_grad(g)?;
            }
            adam_step(&mut model.params, &mut opt)?;
        }
        history.push(epoch_loss / images.len() as f64);
    }
    Ok((model, history))
}
