//! Toy counting backbones.
//!
//! Both networks share one topology: a front end of 3×3 conv + ReLU stages
//! with 2× max pooling, a back end of 3×3 convs on the output grid, and a
//! 1×1 head followed by ReLU. In the precise network the last
//! `refined_layers` back-end convs sample at the per-position rates of a
//! [`DilationMap`].

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::{checkpoint_bytes, read_checkpoint};
use crate::autodiff::{ConvParams, Graph, Parameter, Tensor, Var};
use crate::densitygen::DensityMap;
use crate::drf::DilationMap;
use crate::error::{Error, Result};
use crate::rfanalysis::RfLayer;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Output width of each front-end conv stage.
    pub stage_channels: Vec<usize>,
    /// The first `pool_stages` stages end in a 2× max pool.
    pub pool_stages: usize,
    /// Output widths of the back-end 3×3 convs.
    pub backend_channels: Vec<usize>,
    /// Trailing back-end convs replaced by refined dilated convs in the precise network.
    pub refined_layers: usize,
    /// Dilation of the non-refined back-end convs.
    pub backend_dilation: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            stage_channels: vec![8, 16, 16],
            pool_stages: 3,
            backend_channels: vec![16, 16, 16],
            refined_layers: 3,
            backend_dilation: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.in_channels == 0 {
            return fail("in_channels must be >= 1".into());
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return fail("stage_channels must be non-empty with positive widths".into());
        }
        if self.backend_channels.contains(&0) {
            return fail("backend_channels must be positive".into());
        }
        if self.pool_stages > self.stage_channels.len() {
            return fail(format!(
                "pool_stages ({}) exceeds the number of front-end stages ({})",
                self.pool_stages,
                self.stage_channels.len()
            ));
        }
        if self.refined_layers > self.backend_channels.len() {
            return fail(format!(
                "refined_layers ({}) exceeds backend conv count ({})",
                self.refined_layers,
                self.backend_channels.len()
            ));
        }
        if self.backend_dilation == 0 {
            return fail("backend_dilation must be >= 1".into());
        }
        Ok(())
    }

    pub fn downsample(&self) -> usize {
        1 << self.pool_stages
    }

    /// `(input channels, output channels, kernel side)` of every conv, in order.
    fn conv_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut shapes = Vec::new();
        let mut c = self.in_channels;
        for &w in &self.stage_channels {
            shapes.push((c, w, 3));
            c = w;
        }
        for &w in &self.backend_channels {
            shapes.push((c, w, 3));
            c = w;
        }
        shapes.push((c, 1, 1));
        shapes
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.conv_shapes()
            .iter()
            .map(|&(cin, cout, k)| cin * cout * k * k + cout)
            .sum()
    }

    fn layer_names(&self) -> Vec<String> {
        let front = (0..self.stage_channels.len()).map(|i| format!("front{i}"));
        let back = (0..self.backend_channels.len()).map(|i| format!("back{i}"));
        front.chain(back).chain(std::iter::once("head".to_string())).collect()
    }

    fn first_refined(&self) -> usize {
        self.backend_channels.len() - self.refined_layers
    }

    /// Layer stack for receptive-field analysis.
    pub fn rf_layers(&self, role: Role) -> Vec<RfLayer> {
        let mut layers = Vec::new();
        for i in 0..self.stage_channels.len() {
            layers.push(RfLayer::Conv {
                kernel: 3,
                stride: 1,
                dilation: 1,
            });
            if i < self.pool_stages {
                layers.push(RfLayer::Pool { kernel: 2, stride: 2 });
            }
        }
        for i in 0..self.backend_channels.len() {
            if role == Role::Precise && i >= self.first_refined() {
                layers.push(RfLayer::Refined { kernel: 3 });
            } else {
                layers.push(RfLayer::Conv {
                    kernel: 3,
                    stride: 1,
                    dilation: self.backend_dilation,
                });
            }
        }
        layers.push(RfLayer::Conv {
            kernel: 1,
            stride: 1,
            dilation: 1,
        });
        layers
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Rough,
    Precise,
}

/// How the back end treats the layers that are refined in the precise network.
#[derive(Debug, Clone, Copy)]
enum Backend<'a> {
    Plain,
    Refined(&'a DilationMap),
    Fixed(usize),
}

/// A recorded forward pass ready for `backward`.
pub struct ForwardPass {
    pub graph: Graph,
    /// Graph handles of the model parameters, in `Model::params` order.
    pub params: Vec<Var>,
    pub output: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub role: Role,
    pub params: Vec<Parameter>,
}

/// Fresh model with He-normal conv weights (half-normal for the 1×1 head)
/// and zero biases.
pub fn build_model(cfg: &ModelConfig, role: Role, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    for (name, (cin, cout, k)) in cfg.layer_names().into_iter().zip(cfg.conv_shapes()) {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let mut w: Vec<f64> = (0..cout * cin * k * k).map(|_| normal.sample(&mut rng)).collect();
        if name == "head" {
            w.iter_mut().for_each(|v| *v = v.abs());
        }
        params.push(Parameter::new(
            format!("{name}.weight"),
            Tensor::new([cout, cin, k, k], w)?,
        ));
        params.push(Parameter::new(format!("{name}.bias"), Tensor::zeros([cout])));
    }
    Ok(Model {
        config: cfg.clone(),
        role,
        params,
    })
}

impl Model {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    fn check_role(&self, want: Role) -> Result<()> {
        if self.role != want {
            return Err(Error::invalid(format!(
                "expected a {want:?} model, got {:?}",
                self.role
            )));
        }
        Ok(())
    }

    fn check_image(&self, image: &Tensor) -> Result<(usize, usize)> {
        let (b, c, h, w) = image.dims4()?;
        let ds = self.config.downsample();
        if b != 1 || c != self.config.in_channels || h % ds != 0 || w % ds != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "image shape {:?} incompatible with model (batch 1, {} channels, sides divisible by {ds})",
                image.shape(),
                self.config.in_channels
            )));
        }
        Ok((h / ds, w / ds))
    }

    fn record(&self, image: &Tensor, backend: Backend<'_>, track: bool) -> Result<ForwardPass> {
        let (oh, ow) = self.check_image(image)?;
        if let Backend::Refined(d) = backend {
            if (d.height, d.width) != (oh, ow) {
                return Err(Error::ShapeMismatch {
                    op: "forward_precise dilation map",
                    expected: vec![oh, ow],
                    got: vec![d.height, d.width],
                });
            }
        }
        let cfg = &self.config;
        let mut g = Graph::new();
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if track {
                    g.param(p.tensor.clone())
                } else {
                    g.constant(p.tensor.clone())
                }
            })
            .collect();
        let mut x = g.constant(image.clone());
        let mut layer = 0;
        for i in 0..cfg.stage_channels.len() {
            x = g.conv2d(x, params[2 * layer], Some(params[2 * layer + 1]), ConvParams::same3(1))?;
            x = g.relu(x);
            if i < cfg.pool_stages {
                x = g.max_pool2(x)?;
            }
            layer += 1;
        }
        for i in 0..cfg.backend_channels.len() {
            let (w, b) = (params[2 * layer], Some(params[2 * layer + 1]));
            let refined = i >= cfg.first_refined();
            x = match backend {
                Backend::Refined(d) if refined => g.refined_dilated_conv(x, w, b, d)?,
                Backend::Fixed(dil) if refined => g.conv2d(x, w, b, ConvParams::same3(dil))?,
                _ => g.conv2d(x, w, b, ConvParams::same3(cfg.backend_dilation))?,
            };
            x = g.relu(x);
            layer += 1;
        }
        x = g.conv2d(
            x,
            params[2 * layer],
            Some(params[2 * layer + 1]),
            ConvParams::new(1, 0, 1),
        )?;
        let output = g.relu(x);
        Ok(ForwardPass {
            graph: g,
            params,
            output,
        })
    }

    /// Records a training forward pass. Precise models require `dmap`.
    pub fn forward_graph(&self, image: &Tensor, dmap: Option<&DilationMap>) -> Result<ForwardPass> {
        let backend = match (self.role, dmap) {
            (Role::Rough, None) => Backend::Plain,
            (Role::Precise, Some(d)) => Backend::Refined(d),
            (Role::Rough, Some(_)) => return Err(Error::invalid("rough model takes no dilation map")),
            (Role::Precise, None) => return Err(Error::invalid("precise model requires a dilation map")),
        };
        self.record(image, backend, true)
    }

    fn to_density(&self, pass: &ForwardPass) -> DensityMap {
        let out = pass.graph.value(pass.output);
        let (_, _, h, w) = out.dims4().expect("rank-4 output");
        DensityMap {
            width: w,
            height: h,
            values: out.data().to_vec(),
            scale: 1.0 / self.config.downsample() as f64,
        }
    }

    pub fn forward_rough(&self, image: &Tensor) -> Result<DensityMap> {
        self.check_role(Role::Rough)?;
        let pass = self.record(image, Backend::Plain, false)?;
        Ok(self.to_density(&pass))
    }

    pub fn forward_precise(&self, image: &Tensor, dmap: &DilationMap) -> Result<DensityMap> {
        self.check_role(Role::Precise)?;
        let pass = self.record(image, Backend::Refined(dmap), false)?;
        Ok(self.to_density(&pass))
    }

    /// Precise network with its refined layers run as standard convs of
    /// constant `dilation`.
    pub fn forward_fixed(&self, image: &Tensor, dilation: usize) -> Result<DensityMap> {
        self.check_role(Role::Precise)?;
        if dilation == 0 {
            return Err(Error::invalid("fixed dilation must be >= 1"));
        }
        let pass = self.record(image, Backend::Fixed(dilation), false)?;
        Ok(self.to_density(&pass))
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint_bytes(&self.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.checkpoint_bytes())?;
        Ok(())
    }

    /// Loads parameters from a checkpoint, checking names and shapes against `cfg`.
    pub fn load(path: &Path, cfg: &ModelConfig, role: Role) -> Result<Model> {
        let bytes = std::fs::read(path)?;
        Self::from_checkpoint(&bytes, cfg, role)
    }

    pub fn from_checkpoint(bytes: &[u8], cfg: &ModelConfig, role: Role) -> Result<Model> {
        let template = build_model(cfg, role, 0)?;
        let params = read_checkpoint(bytes)?;
        if params.len() != template.params.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{} parameters, model expects {}", params.len(), template.params.len()),
            ));
        }
        for (p, t) in params.iter().zip(&template.params) {
            if p.name != t.name || p.tensor.shape() != t.tensor.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!(
                        "parameter {} {:?} does not match model's {} {:?}",
                        p.name,
                        p.tensor.shape(),
                        t.name,
                        t.tensor.shape()
                    ),
                ));
            }
        }
        Ok(Model {
            config: cfg.clone(),
            role,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{conv2d, finite_diff_grad, max_pool2, max_relative_error, relu};
    use rand::Rng;

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new([1, 1, h, w], (0..h * w).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    fn small() -> ModelConfig {
        ModelConfig {
            in_channels: 1,
            stage_channels: vec![3, 4],
            pool_stages: 2,
            backend_channels: vec![4],
            refined_layers: 1,
            backend_dilation: 1,
        }
    }

    #[test]
    fn seeds_are_deterministic() {
        let cfg = ModelConfig::default();
        assert_eq!(
            build_model(&cfg, Role::Rough, 7).unwrap(),
            build_model(&cfg, Role::Rough, 7).unwrap()
        );
        assert_ne!(
            build_model(&cfg, Role::Rough, 7).unwrap(),
            build_model(&cfg, Role::Rough, 8).unwrap()
        );
    }

    #[test]
    fn default_output_is_eighth_scale() {
        let m = build_model(&ModelConfig::default(), Role::Rough, 1).unwrap();
        let d = m.forward_rough(&image(64, 64, 1)).unwrap();
        assert_eq!((d.width, d.height, d.scale), (8, 8, 0.125));
    }

    #[test]
    fn param_count_matches_hand_count() {
        // 1→8, 8→16, 16→16 front; 16→16 ×3 back; 16→1 head
        let hand = (9 * 8 + 8) + (8 * 16 * 9 + 16) + (16 * 16 * 9 + 16) + 3 * (16 * 16 * 9 + 16) + (16 + 1);
        let cfg = ModelConfig::default();
        assert_eq!(cfg.param_count(), hand);
        assert_eq!(build_model(&cfg, Role::Precise, 0).unwrap().param_count(), hand);
    }

    #[test]
    fn invalid_configs_are_named() {
        let cfg = ModelConfig {
            refined_layers: 4,
            ..ModelConfig::default()
        };
        assert!(build_model(&cfg, Role::Precise, 0)
            .unwrap_err()
            .to_string()
            .contains("refined_layers"));
        let cfg = ModelConfig {
            pool_stages: 5,
            ..ModelConfig::default()
        };
        assert!(build_model(&cfg, Role::Precise, 0)
            .unwrap_err()
            .to_string()
            .contains("pool_stages"));
        assert!(serde_json::from_str::<ModelConfig>(r#"{"stage_chanels": [4]}"#).is_err());
    }

    #[test]
    fn zero_image_gives_zero_map() {
        let cfg = ModelConfig::default();
        let rough = build_model(&cfg, Role::Rough, 2).unwrap();
        let precise = build_model(&cfg, Role::Precise, 3).unwrap();
        let zero = Tensor::zeros([1, 1, 32, 32]);
        assert!(rough.forward_rough(&zero).unwrap().values.iter().all(|&v| v == 0.0));
        let d = DilationMap::constant(4, 4, 1.3, 0.125);
        assert!(precise
            .forward_precise(&zero, &d)
            .unwrap()
            .values
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn roles_and_grids_are_checked() {
        let cfg = ModelConfig::default();
        let rough = build_model(&cfg, Role::Rough, 2).unwrap();
        let precise = build_model(&cfg, Role::Precise, 3).unwrap();
        let img = image(32, 32, 4);
        assert!(precise.forward_rough(&img).is_err());
        assert!(rough
            .forward_precise(&img, &DilationMap::constant(4, 4, 1.0, 0.125))
            .is_err());
        assert!(precise
            .forward_precise(&img, &DilationMap::constant(5, 4, 1.0, 0.125))
            .is_err());
        assert!(rough.forward_rough(&image(30, 32, 1)).is_err());
    }

    #[test]
    fn forward_matches_manual_composition() {
        let cfg = ModelConfig {
            in_channels: 1,
            stage_channels: vec![2],
            pool_stages: 1,
            backend_channels: vec![],
            refined_layers: 0,
            backend_dilation: 1,
        };
        let m = build_model(&cfg, Role::Rough, 5).unwrap();
        let img = image(8, 8, 6);
        let p = |i: usize| &m.params[i].tensor;
        let h = relu(&conv2d(&img, p(0), Some(p(1)), ConvParams::same3(1)).unwrap());
        let (h, _) = max_pool2(&h).unwrap();
        let y = relu(&conv2d(&h, p(2), Some(p(3)), ConvParams::new(1, 0, 1)).unwrap());
        assert_eq!(m.forward_rough(&img).unwrap().values, y.data());
    }

    #[test]
    fn constant_map_equals_fixed_dilation_net() {
        let cfg = ModelConfig::default();
        let mut m = build_model(&cfg, Role::Precise, 9).unwrap();
        // non-zero biases so every layer matters
        for p in m.params.iter_mut().filter(|p| p.name.ends_with("bias")) {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.05);
        }
        let img = image(64, 64, 10);
        for d in [1usize, 2] {
            let a = m
                .forward_precise(&img, &DilationMap::constant(8, 8, d as f64, 0.125))
                .unwrap();
            let b = m.forward_fixed(&img, d).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn first_layer_gradient_matches_finite_differences() {
        let cfg = small();
        let mut m = build_model(&cfg, Role::Precise, 11).unwrap();
        for p in m.params.iter_mut().filter(|p| p.name.ends_with("bias")) {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.1);
        }
        let img = image(16, 16, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let rates = (0..16)
            .map(|_| rng.gen_range(0.1..0.9) + if rng.gen() { 1.0 } else { 0.0 })
            .collect();
        let dmap = DilationMap::new(4, 4, rates, 2.0, 0.25).unwrap();

        let mut pass = m.forward_graph(&img, Some(&dmap)).unwrap();
        let loss = pass.graph.sum(pass.output);
        pass.graph.backward(loss).unwrap();
        let analytic = pass.graph.grad(pass.params[0]).unwrap().to_vec();

        let w0 = m.params[0].tensor.clone();
        let fd = finite_diff_grad(
            |w| {
                let mut probe = m.clone();
                probe.params[0].tensor = w.clone();
                probe.forward_precise(&img, &dmap).unwrap().count()
            },
            &w0,
            1e-5,
        );
        let err = max_relative_error(&analytic, fd.data(), 1e-6);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn checkpoint_roundtrip_and_mismatch() {
        let cfg = ModelConfig::default();
        let m = build_model(&cfg, Role::Precise, 14).unwrap();
        let back = Model::from_checkpoint(&m.checkpoint_bytes(), &cfg, Role::Precise).unwrap();
        assert_eq!(back, m);
        assert!(Model::from_checkpoint(&m.checkpoint_bytes(), &small(), Role::Precise).is_err());
    }

    #[test]
    fn predicted_count_is_non_negative() {
        let m = build_model(&ModelConfig::default(), Role::Rough, 15).unwrap();
        for s in 0..5 {
            let c = m.forward_rough(&image(32, 32, 100 + s)).unwrap().count();
            assert!(c.is_finite() && c >= 0.0);
        }
    }
}
