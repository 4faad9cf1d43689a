use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::distill::checkpoint_id;
use super::{distill_targets, train_stage, DistillSet, TrainConfig};
use crate::autodiff::Tensor;
use crate::densitygen::{density_target, DensityMap, SigmaMode, ROUGH_SIGMA};
use crate::drf::{linear_transform, DilationMap, TransformParams};
use crate::error::{Error, Result, Stage, StageContext};
use crate::metrics::{evaluate, EvalResult};
use crate::nets::{build_model, Model, ModelConfig, Role};
use crate::par;
use crate::synthdata::{derive_seed, BenchmarkSpec, Dataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub model: ModelConfig,
    pub rough: TrainConfig,
    pub teacher: TrainConfig,
    pub student: TrainConfig,
    #[serde(default)]
    pub transform: TransformParams,
    #[serde(default)]
    pub precise_sigma: SigmaMode,
    #[serde(default = "default_rough_sigma")]
    pub rough_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    /// Synthetic benchmark to generate when no dataset directory is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<BenchmarkSpec>,
}

fn default_rough_sigma() -> f64 {
    ROUGH_SIGMA
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.transform.validate()?;
        for t in [&self.rough, &self.teacher, &self.student] {
            t.validate()?;
        }
        if !(self.rough_sigma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "rough_sigma must be positive, got {}",
                self.rough_sigma
            )));
        }
        Ok(())
    }

    /// Shuffle/augmentation seed for a stage, mixed from the pipeline seed.
    fn stage_train(&self, t: &TrainConfig, stage: Stage) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, 100 + stage as u64) ^ t.seed,
            ..t.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossHistory {
    pub rough: Vec<f64>,
    pub teacher: Vec<f64>,
    pub student: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointIds {
    pub rough: String,
    pub teacher: String,
    pub student: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageMetrics {
    pub teacher: EvalResult,
    pub student: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrectionEntry {
    pub image_id: String,
    pub ratio: Option<f64>,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub seed: u64,
    pub config: PipelineConfig,
    pub train_images: usize,
    pub test_images: usize,
    pub losses: LossHistory,
    pub metrics: StageMetrics,
    pub checkpoints: CheckpointIds,
    pub student_init_matches_teacher: bool,
    pub corrections: Vec<CorrectionEntry>,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// File names written into the output directory.
pub struct CheckpointPaths;

impl CheckpointPaths {
    pub const ROUGH: &'static str = "rough.ckpt";
    pub const TEACHER: &'static str = "teacher.ckpt";
    pub const STUDENT: &'static str = "student.ckpt";
    pub const REPORT: &'static str = "report.json";
}

/// Trained networks plus the report of one pipeline run.
pub struct PipelineRun {
    pub report: Report,
    pub rough: Model,
    pub teacher: Model,
    pub student: Model,
    pub train_dmaps: Vec<DilationMap>,
    pub test_dmaps: Vec<DilationMap>,
}

pub(crate) fn images(ds: &Dataset) -> Vec<Tensor> {
    ds.samples.iter().map(|s| s.image.clone()).collect()
}

pub(crate) fn targets(ds: &Dataset, mode: SigmaMode, factor: usize) -> Result<Vec<DensityMap>> {
    par::map_range(ds.len(), |i| density_target(&ds.samples[i].annotation, mode, factor))
        .into_iter()
        .collect()
}

/// Rough-network predictions mapped to dilation rates.
pub fn dilation_maps(rough: &Model, images: &[Tensor], p: TransformParams) -> Result<Vec<DilationMap>> {
    par::map_range(images.len(), |i| linear_transform(&rough.forward_rough(&images[i])?, p))
        .into_iter()
        .collect()
}

pub fn evaluate_model(model: &Model, images: &[Tensor], dmaps: &[DilationMap], counts: &[f64]) -> Result<EvalResult> {
    if images.len() != dmaps.len() {
        return Err(Error::invalid("one dilation map per image required"));
    }
    let preds = par::map_range(images.len(), |i| model.forward_precise(&images[i], &dmaps[i]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    evaluate(&preds, counts)
}

/// Trains the rough network on wide-kernel targets.
pub(crate) fn rough_stage(train: &Dataset, images: &[Tensor], cfg: &PipelineConfig) -> Result<(Model, Vec<f64>)> {
    let ds = cfg.model.downsample();
    let rough_targets = targets(train, SigmaMode::Fixed { sigma: cfg.rough_sigma }, ds).stage(Stage::Rough)?;
    let rough = build_model(&cfg.model, Role::Rough, derive_seed(cfg.seed, 1)).stage(Stage::Rough)?;
    train_stage(
        &rough,
        images,
        &rough_targets,
        &cfg.stage_train(&cfg.rough, Stage::Rough),
        None,
    )
    .stage(Stage::Rough)
}

/// Trains a freshly initialized precise network on `targets` with `dmaps`.
pub(crate) fn teacher_stage(
    images: &[Tensor],
    targets: &[DensityMap],
    dmaps: &[DilationMap],
    cfg: &PipelineConfig,
) -> Result<(Model, Vec<f64>)> {
    let teacher = build_model(&cfg.model, Role::Precise, derive_seed(cfg.seed, 2)).stage(Stage::Teacher)?;
    train_stage(
        &teacher,
        images,
        targets,
        &cfg.stage_train(&cfg.teacher, Stage::Teacher),
        Some(dmaps),
    )
    .stage(Stage::Teacher)
}

/// Stage one, rough half: the rough network trained on `train`.
pub fn train_rough(train: &Dataset, cfg: &PipelineConfig) -> Result<(Model, Vec<f64>)> {
    cfg.validate()?;
    rough_stage(train, &images(train), cfg)
}

/// Stage one, precise half: the teacher trained on DRF maps from a frozen
/// rough network. Also returns the training dilation maps.
pub fn train_teacher(
    train: &Dataset,
    rough: &Model,
    cfg: &PipelineConfig,
) -> Result<(Model, Vec<f64>, Vec<DilationMap>)> {
    cfg.validate()?;
    teacher_from_rough(train, &images(train), rough, cfg)
}

/// Stage two: distill `teacher` into count-corrected targets and finetune a
/// copy of it on them.
pub fn train_student(
    train: &Dataset,
    rough: &Model,
    teacher: &Model,
    cfg: &PipelineConfig,
) -> Result<(Model, Vec<f64>, DistillSet)> {
    cfg.validate()?;
    let imgs = images(train);
    let dmaps = dilation_maps(rough, &imgs, cfg.transform).stage(Stage::Distill)?;
    let (m, hist, d) = student_from_teacher(train, &imgs, teacher, &dmaps, cfg)?;
    Ok((m, hist, d.set))
}

fn teacher_from_rough(
    train: &Dataset,
    imgs: &[Tensor],
    rough: &Model,
    cfg: &PipelineConfig,
) -> Result<(Model, Vec<f64>, Vec<DilationMap>)> {
    let dmaps = dilation_maps(rough, imgs, cfg.transform).stage(Stage::Teacher)?;
    let precise = targets(train, cfg.precise_sigma, cfg.model.downsample()).stage(Stage::Teacher)?;
    let (teacher, hist) = teacher_stage(imgs, &precise, &dmaps, cfg)?;
    Ok((teacher, hist, dmaps))
}

struct Distilled {
    set: DistillSet,
    student_init_matches_teacher: bool,
}

fn student_from_teacher(
    train: &Dataset,
    imgs: &[Tensor],
    teacher: &Model,
    dmaps: &[DilationMap],
    cfg: &PipelineConfig,
) -> Result<(Model, Vec<f64>, Distilled)> {
    let precise = targets(train, cfg.precise_sigma, cfg.model.downsample()).stage(Stage::Distill)?;
    let set = distill_targets(teacher, imgs, dmaps, &precise).stage(Stage::Distill)?;
    let student = teacher.clone();
    let student_init_matches_teacher = student.checkpoint_bytes() == teacher.checkpoint_bytes();
    let (student, hist) = train_stage(
        &student,
        imgs,
        &set.maps,
        &cfg.stage_train(&cfg.student, Stage::Student),
        Some(dmaps),
    )
    .stage(Stage::Student)?;
    Ok((
        student,
        hist,
        Distilled {
            set,
            student_init_matches_teacher,
        },
    ))
}

/// Rough training, teacher training on DRF dilation maps, distillation, and
/// student finetuning. When `out` is given, writes three checkpoints and
/// `report.json` there.
pub fn run_sds_pipeline(
    train: &Dataset,
    test: &Dataset,
    cfg: &PipelineConfig,
    out: Option<&Path>,
) -> Result<PipelineRun> {
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("pipeline needs non-empty train and test sets"));
    }
    let train_images = images(train);
    let test_images = images(test);

    let (rough, rough_loss) = rough_stage(train, &train_images, cfg)?;
    let (teacher, teacher_loss, train_dmaps) = teacher_from_rough(train, &train_images, &rough, cfg)?;
    let (student, student_loss, distilled) = student_from_teacher(train, &train_images, &teacher, &train_dmaps, cfg)?;
    let student_init_matches_teacher = distilled.student_init_matches_teacher;
    let distilled = distilled.set;

    let test_dmaps = dilation_maps(&rough, &test_images, cfg.transform).stage(Stage::Eval)?;
    let counts = test.counts();
    let teacher_eval = evaluate_model(&teacher, &test_images, &test_dmaps, &counts).stage(Stage::Eval)?;
    let student_eval = evaluate_model(&student, &test_images, &test_dmaps, &counts).stage(Stage::Eval)?;

    let report = Report {
        seed: cfg.seed,
        config: cfg.clone(),
        train_images: train.len(),
        test_images: test.len(),
        losses: LossHistory {
            rough: rough_loss,
            teacher: teacher_loss,
            student: student_loss,
        },
        metrics: StageMetrics {
            teacher: teacher_eval,
            student: student_eval,
        },
        checkpoints: CheckpointIds {
            rough: checkpoint_id(&rough),
            teacher: distilled.teacher_id.clone(),
            student: checkpoint_id(&student),
        },
        student_init_matches_teacher,
        corrections: train
            .samples
            .iter()
            .zip(&distilled.ratios)
            .map(|(s, r)| CorrectionEntry {
                image_id: s.id.clone(),
                ratio: *r,
                fallback: r.is_none(),
            })
            .collect(),
    };

    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        rough.save(&dir.join(CheckpointPaths::ROUGH))?;
        teacher.save(&dir.join(CheckpointPaths::TEACHER))?;
        student.save(&dir.join(CheckpointPaths::STUDENT))?;
        fs::write(dir.join(CheckpointPaths::REPORT), report.to_json()?)?;
    }
    Ok(PipelineRun {
        report,
        rough,
        teacher,
        student,
        train_dmaps,
        test_dmaps,
    })
}
