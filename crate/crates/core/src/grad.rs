//! Whole-pipeline gradients, a central-difference oracle and the gradcheck
//! harness that compares the two block by block.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SceneData;
use crate::error::{Error, Result};
use crate::fields::{normal, FieldConfig};
use crate::losses::LossWeights;
use crate::model::{
    evaluate_scene, sample_rays, scene_forward, Evaluation, LossSetup, Model, ModelConfig, PreparedScene, RayRequest,
};
use crate::seed;
use crate::synth::{render_scene, sample_scene, SynthConfig};

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Flat view of a model's parameters with a matching gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    pub tensors: Vec<TensorInfo>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

pub fn layout(model: &Model) -> Vec<TensorInfo> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    model.visit(&mut |name, shape, v| {
        tensors.push(TensorInfo {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
            len: v.len(),
        });
        offset += v.len();
    });
    tensors
}

impl ParameterStore {
    pub fn from_model(model: &Model) -> Self {
        let values = model.flatten();
        ParameterStore {
            tensors: layout(model),
            grad: vec![0.0; values.len()],
            values,
        }
    }

    pub fn write_to(&self, model: &mut Model) {
        model.unflatten(&self.values);
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// A scalar function with a hand-written reverse pass.
pub trait Objective {
    fn value(&self, params: &[f64]) -> Result<f64>;
    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Reverse-mode gradient; fails on a non-finite forward value.
pub fn grad<O: Objective + ?Sized>(objective: &O, params: &[f64]) -> Result<Vec<f64>> {
    let (v, g) = objective.value_and_grad(params)?;
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss { step: None });
    }
    Ok(g)
}

/// Central differences `(f(θ + h eᵢ) − f(θ − h eᵢ)) / 2h`, one coordinate at
/// a time.
pub fn finite_difference_grad<O: Objective + ?Sized>(objective: &O, params: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut theta = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let x = theta[i];
        theta[i] = x + h;
        let plus = objective.value(&theta)?;
        theta[i] = x - h;
        let minus = objective.value(&theta)?;
        theta[i] = x;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteLoss { step: None });
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// `|a − b| / max(|a|, |b|, 1e-8)`
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub name: String,
    pub len: usize,
    pub max_rel_err: f64,
    /// Coordinate inside the block where the worst error occurs.
    pub argmax: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub pass: bool,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub parameters: usize,
    pub loss: f64,
    pub attempts: usize,
    /// Wall time; left out of the serialised report so reports are
    /// reproducible byte for byte.
    #[serde(skip)]
    pub seconds: f64,
    pub blocks: Vec<BlockReport>,
}

pub fn compare_blocks(tensors: &[TensorInfo], analytic: &[f64], numeric: &[f64], tolerance: f64) -> Vec<BlockReport> {
    tensors
        .iter()
        .map(|t| {
            let mut worst = (0.0, 0usize);
            for k in 0..t.len {
                let e = rel_err(analytic[t.offset + k], numeric[t.offset + k]);
                if e > worst.0 || k == 0 {
                    worst = (e, k);
                }
            }
            BlockReport {
                name: t.name.clone(),
                len: t.len,
                max_rel_err: worst.0,
                argmax: worst.1,
                analytic: analytic[t.offset + worst.1],
                numeric: numeric[t.offset + worst.1],
                pass: worst.0 <= tolerance,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub dims: [usize; 3],
    pub channels: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// Softer than the training default: at `h = 1e-4` the truncation error
    /// of central differences grows with the square of the sharpness.
    pub sdf_sharpness: f64,
    pub rays_per_view: usize,
    pub samples: usize,
    pub views: usize,
    pub image_size: usize,
    pub weights: LossWeights,
    pub tolerance: f64,
    pub step: f64,
    /// Resample when any opacity ratio is this close to the clamp.
    pub clamp_margin: f64,
    /// Resample when any ReLU input is this close to zero.
    pub kink_margin: f64,
    /// Random perturbation added to the initialised weights.
    pub perturbation: f64,
    /// Typical gap between the supervision targets and the initial
    /// predictions.
    pub target_residual: f64,
    pub max_attempts: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            dims: [8, 8, 8],
            channels: 4,
            hidden_width: 32,
            hidden_layers: 2,
            sdf_sharpness: 10.0,
            rays_per_view: 4,
            samples: 8,
            views: 2,
            image_size: 16,
            weights: LossWeights::default(),
            tolerance: 1e-4,
            step: 1e-4,
            clamp_margin: 1e-7,
            kink_margin: 2e-4,
            perturbation: 0.1,
            target_residual: 0.05,
            max_attempts: 32,
        }
    }
}

/// The full objective on one scene with the rendered-density targets frozen.
pub struct PipelineObjective<'a> {
    pub template: Model,
    pub scene: PreparedScene<'a>,
    pub rays: Vec<RayRequest>,
    pub setup: LossSetup,
    pub labeled: bool,
    pub targets: Vec<f64>,
}

impl PipelineObjective<'_> {
    fn model_at(&self, params: &[f64]) -> Model {
        let mut m = self.template.clone();
        m.unflatten(params);
        m
    }
}

impl Objective for PipelineObjective<'_> {
    fn value(&self, params: &[f64]) -> Result<f64> {
        let m = self.model_at(params);
        let e = evaluate_scene(&m, &self.scene, &self.rays, &self.setup, self.labeled, Some(&self.targets), None)?;
        Ok(e.report.total)
    }

    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let m = self.model_at(params);
        let mut g = m.zeros_like();
        let e = evaluate_scene(
            &m,
            &self.scene,
            &self.rays,
            &self.setup,
            self.labeled,
            Some(&self.targets),
            Some(&mut g),
        )?;
        Ok((e.report.total, g.flatten()))
    }
}

pub fn gradcheck_model_config(cfg: &GradcheckConfig) -> ModelConfig {
    ModelConfig {
        dims: cfg.dims,
        channels: cfg.channels,
        field: FieldConfig {
            hidden_width: cfg.hidden_width,
            hidden_layers: cfg.hidden_layers,
            sdf_sharpness: cfg.sdf_sharpness,
            ..FieldConfig::default()
        },
        ..ModelConfig::default()
    }
}

/// A fixed model, ray batch and scene on which to compare gradients.
pub struct GradcheckInstance {
    pub scene: SceneData,
    pub model: Model,
    pub rays: Vec<RayRequest>,
    pub setup: LossSetup,
    pub targets: Vec<f64>,
    pub attempts: usize,
}

impl GradcheckInstance {
    /// Draws a perturbed model and a ray batch whose samples sit clear of the
    /// opacity clamp and every ReLU kink, then replaces every supervision
    /// target with the model's own prediction plus a positive offset of about
    /// `target_residual`.
    pub fn new(cfg: &GradcheckConfig, seed: u64) -> Result<Self> {
        let synth = SynthConfig {
            scenes: 1,
            min_entities: 2,
            max_entities: 3,
            image_size: cfg.image_size,
            cameras: cfg.views,
            oracle_samples: 64,
            volume_dims: cfg.dims,
            ..SynthConfig::default()
        };
        let spec = sample_scene(&synth, seed, 0)?;
        let sample = render_scene(&spec, &synth, seed, 0)?;
        let mut scene = SceneData::from_sample(&sample, "scene_0000");
        let mcfg = gradcheck_model_config(cfg);
        let setup = LossSetup {
            weights: cfg.weights,
            samples: cfg.samples,
            rendered_density_scale: 1.0,
        };
        for attempt in 0..cfg.max_attempts.max(1) {
            let mut rng = seed::rng(seed, &[0x6772_6164, attempt as u64]);
            let mut model = Model::initialize(&mcfg, &[scene.id.clone()], &mut rng)?;
            let p = cfg.perturbation;
            model.visit_mut(&mut |name, _, v| {
                if name != "log_beta" {
                    for x in v.iter_mut() {
                        *x += p * normal(&mut rng);
                    }
                }
            });
            let rays = sample_rays(&scene, cfg.rays_per_view, &mut rng);
            let probe = {
                let prepared = PreparedScene::new(&scene, &mcfg);
                evaluate_scene(&model, &prepared, &rays, &setup, true, None, None)?
            };
            if probe.min_clamp_distance < cfg.clamp_margin || probe.min_kink_distance < cfg.kink_margin {
                continue;
            }
            let targets = retarget(&mut scene, &model, &mcfg, &rays, &probe, cfg.target_residual, &mut rng)?;
            return Ok(GradcheckInstance {
                scene,
                model,
                rays,
                setup,
                targets,
                attempts: attempt + 1,
            });
        }
        Err(Error::Config(format!(
            "no instance clear of kinks after {} attempts",
            cfg.max_attempts
        )))
    }

    pub fn objective(&self) -> PipelineObjective<'_> {
        PipelineObjective {
            template: self.model.clone(),
            scene: PreparedScene::new(&self.scene, &self.model.config),
            rays: self.rays.clone(),
            setup: self.setup,
            labeled: true,
            targets: self.targets.clone(),
        }
    }
}

/// Target minus prediction: one-signed, so the data gradients do not cancel
/// out across rays.
fn offset<R: Rng>(residual: f64, rng: &mut R) -> f64 {
    residual * (1.0 + 0.5 * normal(rng)).abs()
}

fn retarget<R: Rng>(
    scene: &mut SceneData,
    model: &Model,
    mcfg: &ModelConfig,
    rays: &[RayRequest],
    probe: &Evaluation,
    residual: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let maps = {
        let prepared = PreparedScene::new(scene, mcfg);
        scene_forward(model, &prepared)?.density_maps
    };
    for (view, map) in scene.supervision.views.iter_mut().zip(maps) {
        view.density_map = map;
        for x in &mut view.density_map.data {
            *x += offset(residual, rng);
        }
    }
    for (r, pred) in rays.iter().zip(&probe.predictions) {
        let view = &mut scene.supervision.views[r.view];
        view.depth.pixel_mut(r.x, r.y)[0] = pred.depth + offset(residual, rng);
        for (c, p) in view.rgb.pixel_mut(r.x, r.y).iter_mut().zip(pred.color) {
            *c = p + offset(residual, rng);
        }
    }
    let n = probe.sample_density.len().max(1) as f64;
    let mean = probe.sample_density.iter().sum::<f64>() / n;
    for x in &mut scene.supervision.density_volume.0.values {
        *x = mean + offset(residual, rng);
    }
    Ok(probe
        .predictions
        .iter()
        .map(|p| p.density + offset(residual, rng))
        .collect())
}

/// Reverse mode vs central differences over every parameter block of the
/// full supervised + self-supervised loss.
pub fn gradcheck(cfg: &GradcheckConfig, seed: u64) -> Result<GradReport> {
    let start = Instant::now();
    let instance = GradcheckInstance::new(cfg, seed)?;
    let objective = instance.objective();
    let params = instance.model.flatten();
    let (loss, analytic) = objective.value_and_grad(&params)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step: None });
    }
    let numeric = finite_difference_grad(&objective, &params, cfg.step)?;
    let tensors = layout(&objective.template);
    let blocks = compare_blocks(&tensors, &analytic, &numeric, cfg.tolerance);
    let max_rel_err = blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max);
    Ok(GradReport {
        pass: blocks.iter().all(|b| b.pass),
        tolerance: cfg.tolerance,
        max_rel_err,
        parameters: params.len(),
        loss,
        attempts: instance.attempts,
        seconds: start.elapsed().as_secs_f64(),
        blocks,
    })
}
