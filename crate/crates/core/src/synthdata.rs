//! Synthetic perspective scenes: rows of blobs that shrink and crowd
//! together toward the top of the frame.
//!
//! Rendering uses only IEEE-exact arithmetic (add, multiply, divide, sqrt)
//! on a portable ChaCha stream, so images are byte-identical per seed.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::densitygen::io::{decode_pgm, encode_pgm, read_annotation, write_annotation};
use crate::densitygen::PointAnnotation;
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneParams {
    pub width: usize,
    pub height: usize,
    pub rows: usize,
    /// Candidate objects in the bottom (nearest) row.
    pub base_per_row: usize,
    /// Vertical density gradient: a row at relative depth `t ∈ [0, 1]` holds
    /// `1 + perspective·t` times the bottom row's objects at `1 / (1 + perspective·t)` the size.
    pub perspective: f64,
    pub radius_near: f64,
    /// Row spacing at the bottom, in pixels; shrinks with object size.
    pub row_pitch: f64,
    pub margin: f64,
    /// Position jitter as a fraction of local spacing.
    pub jitter: f64,
    /// Per-image fraction of candidate positions kept is uniform in this range.
    pub occupancy: (f64, f64),
    pub noise: f64,
    pub brightness: f64,
    pub seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            rows: 7,
            base_per_row: 5,
            perspective: 2.0,
            radius_near: 3.0,
            row_pitch: 16.0,
            margin: 4.0,
            jitter: 0.3,
            occupancy: (0.35, 1.0),
            noise: 0.1,
            brightness: 0.8,
            seed: 0,
        }
    }
}

/// One rendered scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub pixels: Vec<u8>,
    pub annotation: PointAnnotation,
}

impl Scene {
    /// `[1, 1, H, W]` grayscale tensor in `[0, 1]`.
    pub fn image(&self) -> Tensor {
        pixels_to_tensor(self.annotation.width, self.annotation.height, &self.pixels)
    }
}

pub fn pixels_to_tensor(width: usize, height: usize, pixels: &[u8]) -> Tensor {
    Tensor::new(
        [1, 1, height, width],
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )
    .expect("pixel count matches dimensions")
}

struct Row {
    y: f64,
    scale: f64,
    count: usize,
}

impl SceneParams {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("scene: {m}")));
        if self.width == 0 || self.height == 0 || self.rows == 0 || self.base_per_row == 0 {
            return bad("sizes and counts must be positive");
        }
        if !(self.radius_near > 0.0 && self.row_pitch > 0.0 && self.margin >= 0.0) {
            return bad("radius_near and row_pitch must be positive");
        }
        if !(self.perspective >= 0.0) || !(self.jitter >= 0.0) || !(self.noise >= 0.0) {
            return bad("perspective, jitter, and noise must be non-negative");
        }
        let (lo, hi) = self.occupancy;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad("occupancy must satisfy 0 <= lo <= hi <= 1");
        }
        Ok(())
    }

    fn layout(&self) -> Result<Vec<Row>> {
        let depth = |r: usize| {
            if self.rows == 1 {
                0.0
            } else {
                r as f64 / (self.rows - 1) as f64
            }
        };
        let mut rows = Vec::with_capacity(self.rows);
        let mut y = self.height as f64 - self.margin;
        for r in 0..self.rows {
            let grow = 1.0 + self.perspective * depth(r);
            let scale = 1.0 / grow;
            if let Some(prev) = rows.last() {
                let prev: &Row = prev;
                y -= self.row_pitch * (prev.scale + scale) / 2.0;
            }
            rows.push(Row {
                y,
                scale,
                count: (self.base_per_row as f64 * grow).round() as usize,
            });
        }
        if y < self.margin {
            return Err(Error::InvalidConfig(format!(
                "scene: {} rows with pitch {} need {:.1} px but the image is {} px tall",
                self.rows,
                self.row_pitch,
                self.height as f64 - y + self.margin,
                self.height
            )));
        }
        Ok(rows)
    }
}

/// Renders one scene; deterministic in `p.seed`.
pub fn generate_scene(p: &SceneParams) -> Result<Scene> {
    p.validate()?;
    let rows = p.layout()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let (w, h) = (p.width as f64, p.height as f64);
    let (lo, hi) = p.occupancy;
    let keep_prob = lo + (hi - lo) * rng.gen::<f64>();

    let mut blobs = Vec::new();
    for row in &rows {
        let spacing = w / row.count as f64;
        for k in 0..row.count {
            let jx = rng.gen::<f64>() - 0.5;
            let jy = rng.gen::<f64>() - 0.5;
            let keep = rng.gen::<f64>() < keep_prob;
            if !keep {
                continue;
            }
            let x = ((k as f64 + 0.5) * spacing + p.jitter * jx * spacing).clamp(0.0, w - 1e-3);
            let y = (row.y + p.jitter * jy * p.row_pitch * row.scale).clamp(0.0, h - 1e-3);
            blobs.push((x, y, p.radius_near * row.scale));
        }
    }

    let mut pixels = Vec::with_capacity(p.width * p.height);
    for py in 0..p.height {
        for px in 0..p.width {
            let mut v = p.noise * rng.gen::<f64>();
            let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
            for &(x, y, r) in &blobs {
                let (dx, dy) = (cx - x, cy - y);
                if dx.abs() > r + 1.0 || dy.abs() > r + 1.0 {
                    continue;
                }
                let coverage = (r + 0.5 - (dx * dx + dy * dy).sqrt()).clamp(0.0, 1.0);
                v += p.brightness * coverage;
            }
            pixels.push((v.min(1.0) * 255.0).round() as u8);
        }
    }
    let points = blobs.into_iter().map(|(x, y, _)| (x, y)).collect();
    Ok(Scene {
        pixels,
        annotation: PointAnnotation::new(p.width, p.height, points)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub annotation: PointAnnotation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn counts(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.annotation.count() as f64).collect()
    }

    /// Reads `<dir>/<split>/` as listed in `<dir>/manifest.json`.
    pub fn load(dir: &Path, split: Split) -> Result<Self> {
        let manifest: BenchmarkManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let ids = match split {
            Split::Train => &manifest.train,
            Split::Test => &manifest.test,
        };
        let base = dir.join(split.dir_name());
        let samples = ids
            .iter()
            .map(|id| {
                let (w, h, px) = decode_pgm(&fs::read(base.join(format!("{id}.pgm")))?)?;
                let annotation = read_annotation(&base.join(format!("{id}.json")))?;
                if (annotation.width, annotation.height) != (w, h) {
                    return Err(Error::format(
                        "dataset",
                        format!("{id}: annotation size differs from image"),
                    ));
                }
                Ok(Sample {
                    id: id.clone(),
                    image: pixels_to_tensor(w, h, &px),
                    annotation,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { split, samples })
    }
}

/// Index written next to a generated benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkManifest {
    pub seed: u64,
    pub scene: SceneParams,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Size and seed of a synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    #[serde(default)]
    pub scene: SceneParams,
}

/// Child seed for stream `index`; the split-mix finalizer keeps neighboring indices decorrelated.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn render_split(n: usize, offset: usize, p: &SceneParams, seed: u64) -> Result<Vec<(String, Scene)>> {
    par::map_range(n, |i| {
        let mut sp = p.clone();
        sp.seed = derive_seed(seed, (offset + i) as u64);
        generate_scene(&sp).map(|s| (format!("img_{i:04}"), s))
    })
    .into_iter()
    .collect()
}

/// Generates `n_train + n_test` scenes and, when `out` is given, writes
/// `train/`, `test/` (PGM + JSON per image), and `manifest.json`.
pub fn make_benchmark(
    n_train: usize,
    n_test: usize,
    p: &SceneParams,
    seed: u64,
    out: Option<&Path>,
) -> Result<(Dataset, Dataset)> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::invalid("benchmark needs at least one train and one test image"));
    }
    let train = render_split(n_train, 0, p, seed)?;
    let test = render_split(n_test, n_train, p, seed)?;

    if let Some(dir) = out {
        for (split, scenes) in [(Split::Train, &train), (Split::Test, &test)] {
            let base = dir.join(split.dir_name());
            fs::create_dir_all(&base)?;
            for (id, s) in scenes {
                let a = &s.annotation;
                fs::write(base.join(format!("{id}.pgm")), encode_pgm(a.width, a.height, &s.pixels))?;
                write_annotation(&base.join(format!("{id}.json")), a)?;
            }
        }
        let manifest = BenchmarkManifest {
            seed,
            scene: p.clone(),
            train: train.iter().map(|(id, _)| id.clone()).collect(),
            test: test.iter().map(|(id, _)| id.clone()).collect(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    }

    let to_dataset = |split, scenes: Vec<(String, Scene)>| Dataset {
        split,
        samples: scenes
            .into_iter()
            .map(|(id, s)| Sample {
                image: s.image(),
                id,
                annotation: s.annotation,
            })
            .collect(),
    };
    Ok((to_dataset(Split::Train, train), to_dataset(Split::Test, test)))
}

impl BenchmarkSpec {
    pub fn generate(&self, out: Option<&Path>) -> Result<(Dataset, Dataset)> {
        make_benchmark(self.n_train, self.n_test, &self.scene, self.seed, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn band_counts(ann: &PointAnnotation, bands: usize) -> Vec<usize> {
        let mut c = vec![0; bands];
        for &(_, y) in &ann.points {
            c[(y / ann.height as f64 * bands as f64) as usize] += 1;
        }
        c
    }

    #[test]
    fn same_seed_same_scene() {
        let p = SceneParams {
            seed: 9,
            ..SceneParams::default()
        };
        assert_eq!(generate_scene(&p).unwrap(), generate_scene(&p).unwrap());
        let q = SceneParams { seed: 10, ..p.clone() };
        assert_ne!(generate_scene(&p).unwrap(), generate_scene(&q).unwrap());
    }

    #[test]
    fn no_gradient_means_uniform_rows() {
        let p = SceneParams {
            perspective: 0.0,
            rows: 3,
            ..SceneParams::default()
        };
        let rows = p.layout().unwrap();
        assert!(rows.iter().all(|r| r.count == p.base_per_row && r.scale == 1.0));
    }

    #[test]
    fn default_scenes_are_denser_at_the_top() {
        for seed in 0..10 {
            let s = generate_scene(&SceneParams {
                seed,
                ..SceneParams::default()
            })
            .unwrap();
            let b = band_counts(&s.annotation, 4);
            assert!(b[0] > b[3], "seed {seed}: bands {b:?}");
            assert!(
                (20..=80).contains(&s.annotation.count()),
                "seed {seed}: {}",
                s.annotation.count()
            );
        }
    }

    #[test]
    fn nearest_neighbor_spacing_grows_toward_the_bottom() {
        let s = generate_scene(&SceneParams {
            seed: 3,
            occupancy: (1.0, 1.0),
            ..SceneParams::default()
        })
        .unwrap();
        let pts = &s.annotation.points;
        let third = 64.0 / 3.0;
        let nn = |band: std::ops::Range<f64>| {
            let sel: Vec<_> = pts.iter().filter(|p| band.contains(&p.1)).collect();
            let total: f64 = sel
                .iter()
                .map(|a| {
                    pts.iter()
                        .filter(|b| *b != *a)
                        .map(|b| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .sum();
            total / sel.len() as f64
        };
        assert!(nn(0.0..third) < nn(2.0 * third..64.0));
    }

    #[test]
    fn oversized_layout_is_rejected() {
        let p = SceneParams {
            rows: 20,
            ..SceneParams::default()
        };
        assert!(generate_scene(&p).is_err());
    }

    #[test]
    fn benchmark_on_disk_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = make_benchmark(4, 2, &SceneParams::default(), 5, Some(dir.path())).unwrap();
        assert_eq!((train.len(), test.len()), (4, 2));
        let files = |split: &str| fs::read_dir(dir.path().join(split)).unwrap().count();
        assert_eq!(files("train") + files("test"), 12);
        assert_eq!(Dataset::load(dir.path(), Split::Train).unwrap(), train);
        assert_eq!(Dataset::load(dir.path(), Split::Test).unwrap(), test);
        assert!(make_benchmark(0, 2, &SceneParams::default(), 5, None).is_err());
    }
}
