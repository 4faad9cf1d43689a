use std::fs;
use std::io::Write;
use std::path::Path;

use crowdcount::densitygen::io::{read_density, write_density, write_heatmap};
use crowdcount::densitygen::{density_target, SigmaMode};
use crowdcount::experiments::{sweep_dilation, sweep_gamma, write_dilation_csv, write_gamma_csv, GAMMA_GRID};
use crowdcount::metrics::{evaluate, write_csv, EvalResult};
use crowdcount::nets::{Model, ModelConfig, Role};
use crowdcount::rfanalysis::{iou_sweep, layer_rf_extent};
use crowdcount::sds::{
    dilation_maps, distill_targets, evaluate_model, run_sds_pipeline, train_rough, train_student, train_teacher,
    CheckpointPaths, PipelineConfig,
};
use crowdcount::synthdata::{BenchmarkSpec, Dataset, SceneParams, Split};
use crowdcount::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::manifest::Recorder;
use crate::{AnalyzeRf, Command, Common, Distill, Eval, GenData, GenDensity, StageArg, Train};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::GenDensity(a) => gen_density(a),
        Command::Train(a) => train(a),
        Command::Distill(a) => distill(a),
        Command::Pipeline(a) => pipeline(a),
        Command::Eval(a) => eval(a),
        Command::AnalyzeRf(a) => analyze_rf(a),
        Command::SweepGamma(a) => sweep(a, true),
        Command::SweepDilation(a) => sweep(a, false),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn load_pipeline(c: &Common, rec: &mut Recorder) -> Result<PipelineConfig> {
    let mut cfg: PipelineConfig = read_json(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    rec.input(&c.config)?;
    rec.config(&cfg, Some(cfg.seed))?;
    Ok(cfg)
}

fn datasets(data: Option<&Path>, spec: Option<&BenchmarkSpec>, rec: &mut Recorder) -> Result<(Dataset, Dataset)> {
    match (data, spec) {
        (Some(dir), _) => {
            rec.input(dir)?;
            Ok((Dataset::load(dir, Split::Train)?, Dataset::load(dir, Split::Test)?))
        }
        (None, Some(spec)) => spec.generate(None),
        (None, None) => Err(Error::InvalidArgument(
            "no dataset: pass --data or add a `data` section to the config".into(),
        )),
    }
}

fn load_model(path: &Path, cfg: &ModelConfig, role: Role, rec: &mut Recorder) -> Result<Model> {
    rec.input(path)?;
    Model::load(path, cfg, role)
}

fn require<'a>(p: &'a Option<std::path::PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::InvalidArgument(format!("--{flag} is required here")))
}

fn gen_data(a: GenData) -> Result<()> {
    let mut rec = Recorder::new("gen-data");
    let mut spec = match &a.config {
        Some(p) => {
            rec.input(p)?;
            read_json(p)?
        }
        None => BenchmarkSpec {
            n_train: 200,
            n_test: 50,
            seed: 42,
            scene: SceneParams::default(),
        },
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    rec.config(&spec, Some(spec.seed))?;
    let (train, test) = spec.generate(Some(&a.out))?;
    println!(
        "wrote {} train and {} test images to {}",
        train.len(),
        test.len(),
        a.out.display()
    );
    rec.finish(&a.out)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DensityConfig {
    sigma: SigmaMode,
    factor: usize,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            sigma: SigmaMode::default(),
            factor: 8,
        }
    }
}

fn gen_density(a: GenDensity) -> Result<()> {
    let mut rec = Recorder::new("gen-density");
    let cfg: DensityConfig = match &a.config {
        Some(p) => {
            rec.input(p)?;
            read_json(p)?
        }
        None => DensityConfig::default(),
    };
    rec.config(&cfg, None)?;
    rec.input(&a.data)?;
    let mut written = 0;
    for split in [Split::Train, Split::Test] {
        let ds = Dataset::load(&a.data, split)?;
        let dir = a.out.join(split.dir_name());
        fs::create_dir_all(&dir)?;
        for s in &ds.samples {
            let map = density_target(&s.annotation, cfg.sigma, cfg.factor)?;
            write_density(&dir.join(format!("{}.dmap", s.id)), &map)?;
            if a.heatmaps {
                write_heatmap(&dir.join(format!("{}.pgm", s.id)), &map)?;
            }
            written += 1;
        }
    }
    println!("wrote {written} density maps to {}", a.out.display());
    rec.finish(&a.out)
}

#[derive(Serialize)]
struct StageLosses<'a> {
    stage: &'a str,
    losses: &'a [f64],
}

fn write_losses(out: &Path, stage: &str, losses: &[f64]) -> Result<()> {
    let body = serde_json::to_string_pretty(&StageLosses { stage, losses })?;
    fs::write(out.join(format!("{stage}_loss.json")), body)?;
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let mut rec = Recorder::new("train");
    let c = &a.common;
    let cfg = load_pipeline(c, &mut rec)?;
    let (train, _) = datasets(c.data.as_deref(), cfg.data.as_ref(), &mut rec)?;
    fs::create_dir_all(&c.out)?;
    let (name, model, losses) = match a.stage {
        StageArg::Rough => {
            let (m, l) = train_rough(&train, &cfg)?;
            ("rough", m, l)
        }
        StageArg::Teacher => {
            let rough = load_model(require(&a.rough, "rough")?, &cfg.model, Role::Rough, &mut rec)?;
            let (m, l, _) = train_teacher(&train, &rough, &cfg)?;
            ("teacher", m, l)
        }
        StageArg::Student => {
            let rough = load_model(require(&a.rough, "rough")?, &cfg.model, Role::Rough, &mut rec)?;
            let teacher = load_model(require(&a.teacher, "teacher")?, &cfg.model, Role::Precise, &mut rec)?;
            let (m, l, _) = train_student(&train, &rough, &teacher, &cfg)?;
            ("student", m, l)
        }
    };
    model.save(&c.out.join(format!("{name}.ckpt")))?;
    write_losses(&c.out, name, &losses)?;
    if let Some(last) = losses.last() {
        println!("{name}: {} epochs, final loss {last:.6}", losses.len());
    }
    rec.finish(&c.out)
}

#[derive(Serialize)]
struct DistillEntry<'a> {
    image_id: &'a str,
    ratio: Option<f64>,
    fallback: bool,
    count: f64,
}

#[derive(Serialize)]
struct DistillIndex<'a> {
    teacher_id: &'a str,
    images: Vec<DistillEntry<'a>>,
}

fn distill(a: Distill) -> Result<()> {
    let mut rec = Recorder::new("distill");
    let c = &a.common;
    let cfg = load_pipeline(c, &mut rec)?;
    let (train, _) = datasets(c.data.as_deref(), cfg.data.as_ref(), &mut rec)?;
    let rough = load_model(&a.rough, &cfg.model, Role::Rough, &mut rec)?;
    let teacher = load_model(&a.teacher, &cfg.model, Role::Precise, &mut rec)?;
    let images: Vec<_> = train.samples.iter().map(|s| s.image.clone()).collect();
    let dmaps = dilation_maps(&rough, &images, cfg.transform)?;
    let targets = train
        .samples
        .iter()
        .map(|s| density_target(&s.annotation, cfg.precise_sigma, cfg.model.downsample()))
        .collect::<Result<Vec<_>>>()?;
    let set = distill_targets(&teacher, &images, &dmaps, &targets)?;

    let dir = c.out.join("distilled");
    fs::create_dir_all(&dir)?;
    for (s, m) in train.samples.iter().zip(&set.maps) {
        write_density(&dir.join(format!("{}.dmap", s.id)), m)?;
    }
    let index = DistillIndex {
        teacher_id: &set.teacher_id,
        images: train
            .samples
            .iter()
            .zip(&set.ratios)
            .zip(&set.maps)
            .map(|((s, r), m)| DistillEntry {
                image_id: &s.id,
                ratio: *r,
                fallback: r.is_none(),
                count: m.count(),
            })
            .collect(),
    };
    fs::write(c.out.join("distill.json"), serde_json::to_string_pretty(&index)?)?;
    println!(
        "distilled {} targets from teacher {} ({} fallbacks)",
        set.maps.len(),
        &set.teacher_id[..12],
        set.fallbacks()
    );
    rec.finish(&c.out)
}

fn pipeline(c: Common) -> Result<()> {
    let mut rec = Recorder::new("pipeline");
    let cfg = load_pipeline(&c, &mut rec)?;
    let (train, test) = datasets(c.data.as_deref(), cfg.data.as_ref(), &mut rec)?;
    let run = run_sds_pipeline(&train, &test, &cfg, Some(&c.out))?;
    let m = &run.report.metrics;
    println!("teacher  MAE {:.3}  RMSE {:.3}", m.teacher.mae, m.teacher.rmse);
    println!("student  MAE {:.3}  RMSE {:.3}", m.student.mae, m.student.rmse);
    println!("report: {}", c.out.join(CheckpointPaths::REPORT).display());
    rec.finish(&c.out)
}

fn print_eval(r: &EvalResult) {
    println!("MAE {:.3}  RMSE {:.3}", r.mae, r.rmse);
}

fn eval(a: Eval) -> Result<()> {
    let mut rec = Recorder::new("eval");
    let (test, result) = if let Some(pred_dir) = &a.predictions {
        let data = require(&a.data, "data")?;
        rec.input(data)?;
        let test = Dataset::load(data, Split::Test)?;
        let preds = test
            .samples
            .iter()
            .map(|s| read_density(&pred_dir.join(format!("{}.dmap", s.id))))
            .collect::<Result<Vec<_>>>()?;
        let r = evaluate(&preds, &test.counts())?;
        (test, r)
    } else {
        let (Some(model), Some(rough), Some(config)) = (&a.model, &a.rough, &a.config) else {
            return Err(Error::InvalidArgument(
                "eval needs --predictions, or --model with --rough and --config".into(),
            ));
        };
        let cfg: PipelineConfig = read_json(config)?;
        rec.input(config)?;
        rec.config(&cfg, Some(cfg.seed))?;
        let (_, test) = datasets(a.data.as_deref(), cfg.data.as_ref(), &mut rec)?;
        let rough = load_model(rough, &cfg.model, Role::Rough, &mut rec)?;
        let model = load_model(model, &cfg.model, Role::Precise, &mut rec)?;
        let images: Vec<_> = test.samples.iter().map(|s| s.image.clone()).collect();
        let dmaps = dilation_maps(&rough, &images, cfg.transform)?;
        let r = evaluate_model(&model, &images, &dmaps, &test.counts())?;
        (test, r)
    };
    fs::create_dir_all(&a.out)?;
    let ids: Vec<String> = test.samples.iter().map(|s| s.id.clone()).collect();
    write_csv(fs::File::create(a.out.join("eval.csv"))?, &ids, &result)?;
    print_eval(&result);
    rec.finish(&a.out)
}

fn analyze_rf(a: AnalyzeRf) -> Result<()> {
    let mut rec = Recorder::new("analyze-rf");
    let cfg: ModelConfig = match &a.config {
        Some(p) => {
            rec.input(p)?;
            read_json(p)?
        }
        None => ModelConfig::default(),
    };
    cfg.validate()?;
    rec.config(&cfg, None)?;
    let k = cfg.downsample() as f64;
    let lo = k * a.separation;
    if a.max_field.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::InvalidArgument(format!(
            "--max-field must exceed downsample x separation = {lo}"
        )));
    }
    let fields: Vec<f64> = (0..100).map(|i| lo + (a.max_field - lo) * i as f64 / 99.0).collect();
    fs::create_dir_all(&a.out)?;

    let mut f = fs::File::create(a.out.join("rf_iou.csv"))?;
    writeln!(f, "field,iou,disjoint")?;
    for (x, r) in iou_sweep(k, a.separation, &fields)? {
        writeln!(f, "{x:.6},{:.6},{}", r.iou, r.disjoint)?;
    }

    let mut f = fs::File::create(a.out.join("rf_layers.csv"))?;
    writeln!(f, "role,layer,kind,field,jump")?;
    for (role, name) in [(Role::Rough, "rough"), (Role::Precise, "precise")] {
        let ext = layer_rf_extent(&cfg.rf_layers(role), a.rate);
        for e in &ext {
            writeln!(f, "{name},{},{},{},{}", e.layer, e.kind, e.field, e.jump)?;
        }
        if let Some(last) = ext.last() {
            println!("{name}: receptive field {} px", last.field);
        }
    }
    rec.finish(&a.out)
}

fn sweep(c: Common, gamma: bool) -> Result<()> {
    let mut rec = Recorder::new(if gamma { "sweep-gamma" } else { "sweep-dilation" });
    let cfg = load_pipeline(&c, &mut rec)?;
    let (train, test) = datasets(c.data.as_deref(), cfg.data.as_ref(), &mut rec)?;
    fs::create_dir_all(&c.out)?;
    let mut csv = Vec::new();
    let name = if gamma {
        write_gamma_csv(&mut csv, &sweep_gamma(&train, &test, &cfg, &GAMMA_GRID)?)?;
        "sweep_gamma.csv"
    } else {
        write_dilation_csv(&mut csv, &sweep_dilation(&train, &test, &cfg)?)?;
        "sweep_dilation.csv"
    };
    fs::write(c.out.join(name), &csv)?;
    print!("{}", String::from_utf8_lossy(&csv));
    rec.finish(&c.out)
}
