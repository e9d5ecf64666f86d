//! The trainable model and the whole-pipeline forward/backward pass.
//!
//! Per scene the decoded volume is
//! `V = V_base + V_scene + lift(encoder(images))`, where `V_base` is shared,
//! `V_scene` is an optional per-scene residual, and the lift is mean
//! projection pooling of the encoder features. The encoder's density maps
//! supply the supervised map term and, detached, the rendered-density target.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::SceneData;
use crate::encoder::{
    extract_features_backward, extract_features_traced, predict_density_map,
    predict_density_map_backward, BilinearStencil, ConvNetParams, FeatureTape, ImageFeatureMap,
    LiftPlan, FEATURE_STRIDE,
};
use crate::error::{Error, Result};
use crate::fields::{normal, FieldConfig, FieldNets, MlpParams};
use crate::image::Image;
use crate::losses::{
    fsl_loss, fsl_loss_grad, ssl_loss, ssl_loss_grad, total_loss, LossReport, LossWeights,
    RayPrediction, RayTarget, DEPTH_VALID_ACCUMULATION,
};
use crate::renderer::{backward_ray, trace_ray, RayTrace, RayUpstream, RenderOutput};
use crate::seed;
use crate::volume::{BoundingBox, FeatureVolume};

/// Rays per work item. Fixed so the gradient reduction order does not depend
/// on the thread count.
pub const RAY_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dims: [usize; 3],
    pub channels: usize,
    pub bbox: BoundingBox,
    pub field: FieldConfig,
    /// Add lifted encoder features to the volume.
    pub lift_features: bool,
    /// Give every training scene its own learnable residual volume.
    pub scene_volumes: bool,
    /// Standard deviation of the initial base volume.
    pub volume_init_scale: f64,
    pub encoder_head_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dims: [16, 16, 16],
            channels: 8,
            bbox: BoundingBox::unit(),
            field: FieldConfig::default(),
            lift_features: true,
            scene_volumes: true,
            volume_init_scale: 1e-2,
            encoder_head_bias: -4.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 2) || self.channels == 0 {
            return Err(Error::Config(format!(
                "volume needs dims >= 2 and channels >= 1, got {:?} x {}",
                self.dims, self.channels
            )));
        }
        if self.field.hidden_width == 0 || !(self.field.init_beta > 0.0) {
            return Err(Error::Config("field nets need width >= 1 and beta > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneVolume {
    pub id: String,
    pub volume: FeatureVolume,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub volume: FeatureVolume,
    /// Sorted by id.
    pub scene_volumes: Vec<SceneVolume>,
    pub nets: FieldNets,
    pub encoder: ConvNetParams,
}

/// Calls `f(name, shape, values)` for every tensor of an MLP.
/// Callback over `(name, shape, values)` of each parameter tensor.
pub type Visit<'f> = dyn FnMut(&str, &[usize], &[f64]) + 'f;
pub type VisitMut<'f> = dyn FnMut(&str, &[usize], &mut [f64]) + 'f;

fn visit_mlp(prefix: &str, mlp: &MlpParams, f: &mut Visit<'_>) {
    for (l, layer) in mlp.layers.iter().enumerate() {
        f(&format!("{prefix}.{l}.weight"), &[layer.outputs, layer.inputs], &layer.weights);
        f(&format!("{prefix}.{l}.bias"), &[layer.outputs], &layer.biases);
    }
}

fn visit_mlp_mut(prefix: &str, mlp: &mut MlpParams, f: &mut VisitMut<'_>) {
    for (l, layer) in mlp.layers.iter_mut().enumerate() {
        let (o, i) = (layer.outputs, layer.inputs);
        f(&format!("{prefix}.{l}.weight"), &[o, i], &mut layer.weights);
        f(&format!("{prefix}.{l}.bias"), &[o], &mut layer.biases);
    }
}

impl Model {
    /// Zero parameters with the given per-scene volumes.
    pub fn zeros(config: &ModelConfig, scene_ids: &[String]) -> Self {
        let mut ids = scene_ids.to_vec();
        ids.sort();
        ids.dedup();
        let vol = FeatureVolume::zeros(config.dims, config.channels, config.bbox);
        Model {
            config: config.clone(),
            scene_volumes: if config.scene_volumes {
                ids.into_iter()
                    .map(|id| SceneVolume {
                        id,
                        volume: vol.clone(),
                    })
                    .collect()
            } else {
                Vec::new()
            },
            volume: vol,
            nets: FieldNets::zeros(config.channels, &config.field),
            encoder: ConvNetParams::zeros(config.channels),
        }
    }

    pub fn initialize<R: Rng + ?Sized>(config: &ModelConfig, scene_ids: &[String], rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut model = Self::zeros(config, scene_ids);
        let extent = config.bbox.extent();
        model.nets = FieldNets::initialize(
            config.channels,
            &config.field,
            config.bbox.center(),
            extent[0].min(extent[1]).min(extent[2]),
            rng,
        );
        model.encoder = ConvNetParams::initialize(config.channels, config.encoder_head_bias, rng);
        for v in &mut model.volume.values {
            *v = config.volume_init_scale * normal(rng);
        }
        Ok(model)
    }

    pub fn zeros_like(&self) -> Self {
        let ids: Vec<String> = self.scene_volumes.iter().map(|s| s.id.clone()).collect();
        let mut z = Self::zeros(&self.config, &ids);
        z.nets.log_beta = 0.0;
        z
    }

    pub fn scene_slot(&self, id: &str) -> Option<usize> {
        self.scene_volumes
            .binary_search_by(|s| s.id.as_str().cmp(id))
            .ok()
    }

    /// Visits every tensor in canonical order.
    pub fn visit(&self, f: &mut Visit<'_>) {
        let d = self.config.dims;
        let shape = [d[0], d[1], d[2], self.config.channels];
        f("volume", &shape, &self.volume.values);
        for s in &self.scene_volumes {
            f(&format!("volume/{}", s.id), &shape, &s.volume.values);
        }
        visit_mlp("sdf", &self.nets.sdf, f);
        visit_mlp("rgb", &self.nets.rgb, f);
        visit_mlp("density", &self.nets.density, f);
        f("log_beta", &[], std::slice::from_ref(&self.nets.log_beta));
        let e = &self.encoder;
        for (name, conv) in [("encoder.conv1", &e.conv1), ("encoder.conv2", &e.conv2)] {
            f(
                &format!("{name}.weight"),
                &[conv.out_channels, conv.in_channels, 3, 3],
                &conv.weights,
            );
            f(&format!("{name}.bias"), &[conv.out_channels], &conv.biases);
        }
        f("encoder.head.weight", &[e.head_weights.len()], &e.head_weights);
        f("encoder.head.bias", &[], std::slice::from_ref(&e.head_bias));
    }

    pub fn visit_mut(&mut self, f: &mut VisitMut<'_>) {
        let d = self.config.dims;
        let shape = [d[0], d[1], d[2], self.config.channels];
        f("volume", &shape, &mut self.volume.values);
        for s in &mut self.scene_volumes {
            f(&format!("volume/{}", s.id), &shape, &mut s.volume.values);
        }
        visit_mlp_mut("sdf", &mut self.nets.sdf, f);
        visit_mlp_mut("rgb", &mut self.nets.rgb, f);
        visit_mlp_mut("density", &mut self.nets.density, f);
        f("log_beta", &[], std::slice::from_mut(&mut self.nets.log_beta));
        let e = &mut self.encoder;
        for (name, conv) in [("encoder.conv1", &mut e.conv1), ("encoder.conv2", &mut e.conv2)] {
            let shape = [conv.out_channels, conv.in_channels, 3, 3];
            f(&format!("{name}.weight"), &shape, &mut conv.weights);
            f(&format!("{name}.bias"), &[conv.out_channels], &mut conv.biases);
        }
        let n = e.head_weights.len();
        f("encoder.head.weight", &[n], &mut e.head_weights);
        f("encoder.head.bias", &[], std::slice::from_mut(&mut e.head_bias));
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, v| n += v.len());
        n
    }

    /// All parameters in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        self.visit(&mut |_, _, v| out.extend_from_slice(v));
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut(&mut |_, _, v| {
            v.copy_from_slice(&flat[offset..offset + v.len()]);
            offset += v.len();
        });
        assert_eq!(offset, flat.len(), "flat vector does not match the model layout");
    }

    /// `self += other` tensor by tensor.
    pub fn add_assign(&mut self, other: &Model) {
        let flat = other.flatten();
        let mut offset = 0;
        self.visit_mut(&mut |_, _, v| {
            for (a, b) in v.iter_mut().zip(&flat[offset..]) {
                *a += b;
            }
            offset += v.len();
        });
    }

    pub fn round_to_f32(&mut self) {
        self.visit_mut(&mut |_, _, v| {
            for x in v.iter_mut() {
                *x = *x as f32 as f64;
            }
        });
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, _, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }

    /// Decoded volume of one scene given its lifted features.
    fn scene_volume(&self, slot: Option<usize>, lifted: Option<&FeatureVolume>) -> FeatureVolume {
        let mut vol = self.volume.clone();
        if let Some(s) = slot {
            for (a, b) in vol.values.iter_mut().zip(&self.scene_volumes[s].volume.values) {
                *a += b;
            }
        }
        if let Some(l) = lifted {
            for (a, b) in vol.values.iter_mut().zip(&l.values) {
                *a += b;
            }
        }
        vol
    }
}

/// Scene data plus the precomputed lift geometry.
pub struct PreparedScene<'a> {
    pub data: &'a SceneData,
    pub plan: LiftPlan,
}

impl<'a> PreparedScene<'a> {
    pub fn new(data: &'a SceneData, config: &ModelConfig) -> Self {
        PreparedScene {
            data,
            plan: LiftPlan::new(&data.cameras, config.bbox, config.dims),
        }
    }
}

/// Encoder outputs and the decoded volume of one scene.
pub struct SceneForward {
    pub maps: Vec<ImageFeatureMap>,
    pub tapes: Vec<FeatureTape>,
    pub density_maps: Vec<Image>,
    pub volume: FeatureVolume,
    pub slot: Option<usize>,
}

impl SceneForward {
    /// Smallest |pre-activation| of the encoder ReLU.
    pub fn min_kink_distance(&self) -> f64 {
        self.tapes
            .iter()
            .flat_map(|t| t.hidden_pre.data.iter())
            .fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }
}

pub fn scene_forward(model: &Model, scene: &PreparedScene) -> Result<SceneForward> {
    let c = model.config.channels;
    let mut maps = Vec::new();
    let mut tapes = Vec::new();
    for (v, img) in scene.data.images.iter().enumerate() {
        let (m, t) = extract_features_traced(img, &model.encoder, v)?;
        maps.push(m);
        tapes.push(t);
    }
    let density_maps = maps
        .iter()
        .map(|m| predict_density_map(m, &model.encoder))
        .collect();
    let lifted = model
        .config
        .lift_features
        .then(|| scene.plan.forward(&maps, c));
    let slot = model.scene_slot(&scene.data.id);
    Ok(SceneForward {
        volume: model.scene_volume(slot, lifted.as_ref()),
        maps,
        tapes,
        density_maps,
        slot,
    })
}

/// One training ray: an integer pixel of a view and its sampling seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RayRequest {
    pub view: usize,
    pub x: usize,
    pub y: usize,
    pub seed: u64,
}

/// `per_view` uniformly drawn pixels from every view.
pub fn sample_rays<R: Rng + ?Sized>(scene: &SceneData, per_view: usize, rng: &mut R) -> Vec<RayRequest> {
    let mut rays = Vec::with_capacity(per_view * scene.views());
    for (v, cam) in scene.cameras.iter().enumerate() {
        for _ in 0..per_view {
            rays.push(RayRequest {
                view: v,
                x: rng.gen_range(0..cam.width),
                y: rng.gen_range(0..cam.height),
                seed: rng.gen(),
            });
        }
    }
    rays
}

/// Encoder density at the pixel centre, bilinear on the quarter-res map.
pub fn encoder_density_at(map: &Image, x: usize, y: usize) -> f64 {
    let st = BilinearStencil::for_pixel(x as f64 + 0.5, y as f64 + 0.5, map.width, map.height);
    let mut out = [0.0];
    st.sample(map, &mut out);
    out[0]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSetup {
    pub weights: LossWeights,
    pub samples: usize,
    /// Converts rendered density (persons per unit volume along the ray) to
    /// density-map units before it is compared with the encoder map.
    pub rendered_density_scale: f64,
}

impl Default for LossSetup {
    fn default() -> Self {
        LossSetup {
            weights: LossWeights::default(),
            samples: 32,
            rendered_density_scale: 1.0,
        }
    }
}

/// Result of one forward (and optionally backward) evaluation.
pub struct Evaluation {
    pub report: LossReport,
    /// Rendered-density targets actually used, one per ray.
    pub encoder_targets: Vec<f64>,
    pub min_clamp_distance: f64,
    pub min_kink_distance: f64,
    pub predictions: Vec<RayPrediction>,
    /// Predicted density at every sample of every ray that hit the box.
    pub sample_density: Vec<f64>,
}

fn ray_target(scene: &SceneData, fwd: &SceneForward, r: &RayRequest) -> RayTarget {
    let sup = &scene.supervision.views[r.view];
    let c = sup.rgb.pixel(r.x, r.y);
    RayTarget {
        encoder_density: encoder_density_at(&fwd.density_maps[r.view], r.x, r.y),
        depth: sup.depth.get(r.x, r.y, 0),
        depth_valid: sup.accumulation.get(r.x, r.y, 0) >= DEPTH_VALID_ACCUMULATION,
        color: [c[0], c[1], c[2]],
    }
}

fn trace_request(
    scene: &SceneData,
    volume: &FeatureVolume,
    nets: &FieldNets,
    r: &RayRequest,
    samples: usize,
) -> Option<RayTrace> {
    let ray = scene.cameras[r.view].ray_for_pixel_center(r.x, r.y);
    let mut rng = seed::rng(r.seed, &[]);
    trace_ray(volume, nets, &ray, samples, &mut rng)
}

/// Full objective on one scene's ray batch. With `grad` set, accumulates the
/// gradient of `report.total` into it. `targets` overrides the detached
/// rendered-density targets (used to hold them fixed across evaluations).
pub fn evaluate_scene(
    model: &Model,
    scene: &PreparedScene,
    rays: &[RayRequest],
    setup: &LossSetup,
    labeled: bool,
    targets: Option<&[f64]>,
    grad: Option<&mut Model>,
) -> Result<Evaluation> {
    if rays.is_empty() {
        return Err(Error::EmptyInput);
    }
    if setup.samples < 2 {
        return Err(Error::Config("need at least two samples per ray".into()));
    }
    let data = scene.data;
    let fwd = scene_forward(model, scene)?;
    let nets = &model.nets;

    let traces: Vec<Option<RayTrace>> = rays
        .par_iter()
        .map(|r| trace_request(data, &fwd.volume, nets, r, setup.samples))
        .collect();

    let mut ray_targets: Vec<RayTarget> = rays
        .iter()
        .map(|r| ray_target(data, &fwd, r))
        .collect();
    if let Some(t) = targets {
        if t.len() != rays.len() {
            return Err(Error::ShapeMismatch("one target per ray".into()));
        }
        for (rt, v) in ray_targets.iter_mut().zip(t) {
            rt.encoder_density = *v;
        }
    }
    let predictions: Vec<RayPrediction> = traces
        .iter()
        .map(|t| match t {
            Some(t) => RayPrediction {
                depth: t.output.depth,
                color: t.output.color,
                density: setup.rendered_density_scale * t.output.density,
            },
            None => RayPrediction::default(),
        })
        .collect();

    // Sampled volume densities and their ground truth, ray by ray.
    let mut sample_density = Vec::new();
    let mut sample_target = Vec::new();
    let gt = &data.supervision.density_volume;
    for t in traces.iter().flatten() {
        sample_density.extend_from_slice(&t.densities);
        sample_target.extend(t.samples.points.iter().map(|&p| gt.sample(p)));
    }

    let mut fsl_weights = setup.weights;
    if sample_density.is_empty() {
        fsl_weights.density_volume = 0.0;
    }
    let fsl = if labeled {
        Some(fsl_loss(
            &fwd.density_maps,
            &data.supervision,
            &sample_density,
            &sample_target,
            &fsl_weights,
        )?)
    } else {
        None
    };
    let ssl = ssl_loss(&predictions, &ray_targets, &setup.weights)?;
    let report = total_loss(fsl, Some(ssl), rays.len());
    if !report.is_finite() {
        return Err(Error::NonFiniteLoss { step: None });
    }

    let min_clamp_distance = traces
        .iter()
        .flatten()
        .map(|t| t.min_clamp_distance())
        .fold(f64::INFINITY, f64::min);
    let min_kink_distance = traces
        .iter()
        .flatten()
        .map(|t| t.min_kink_distance(nets))
        .fold(fwd.min_kink_distance(), f64::min);
    let encoder_targets = ray_targets.iter().map(|t| t.encoder_density).collect();

    if let Some(grad) = grad {
        let mut ssl_grads = ssl_loss_grad(&predictions, &ray_targets, &setup.weights);
        for g in &mut ssl_grads {
            g.density *= setup.rendered_density_scale;
        }
        let (map_grads, sample_grads) = if labeled {
            fsl_loss_grad(
                &fwd.density_maps,
                &data.supervision,
                &sample_density,
                &sample_target,
                &fsl_weights,
            )
        } else {
            (Vec::new(), vec![0.0; sample_density.len()])
        };
        backward_scene(model, scene, &fwd, &traces, &ssl_grads, &sample_grads, &map_grads, grad);
    }

    Ok(Evaluation {
        report,
        encoder_targets,
        min_clamp_distance,
        min_kink_distance,
        predictions,
        sample_density,
    })
}

#[allow(clippy::too_many_arguments)]
fn backward_scene(
    model: &Model,
    scene: &PreparedScene,
    fwd: &SceneForward,
    traces: &[Option<RayTrace>],
    ssl_grads: &[RayPrediction],
    sample_grads: &[f64],
    map_grads: &[Image],
    grad: &mut Model,
) {
    let c = model.config.channels;
    // Offsets of each ray's samples in the flat sample arrays.
    let mut offsets = Vec::with_capacity(traces.len());
    let mut acc = 0;
    for t in traces {
        offsets.push(acc);
        acc += t.as_ref().map_or(0, |t| t.samples.len());
    }

    let n = traces.len();
    let partials: Vec<(FieldNets, Vec<f64>)> = (0..n.div_ceil(RAY_CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut nets_grad = model.nets.zeros_like();
            let mut vol_grad = vec![0.0; fwd.volume.values.len()];
            for i in chunk * RAY_CHUNK..((chunk + 1) * RAY_CHUNK).min(n) {
                let Some(trace) = &traces[i] else { continue };
                let g = &ssl_grads[i];
                let m = trace.samples.len();
                let upstream = RayUpstream {
                    depth: g.depth,
                    color: g.color,
                    density: g.density,
                    sample_density: sample_grads[offsets[i]..offsets[i] + m].to_vec(),
                };
                backward_ray(&fwd.volume, &model.nets, trace, &upstream, &mut nets_grad, &mut vol_grad);
            }
            (nets_grad, vol_grad)
        })
        .collect();

    let mut vol_grad = vec![0.0; fwd.volume.values.len()];
    for (nets_grad, vg) in &partials {
        add_nets(&mut grad.nets, nets_grad);
        for (a, b) in vol_grad.iter_mut().zip(vg) {
            *a += b;
        }
    }

    for (a, b) in grad.volume.values.iter_mut().zip(&vol_grad) {
        *a += b;
    }
    if let Some(s) = fwd.slot {
        for (a, b) in grad.scene_volumes[s].volume.values.iter_mut().zip(&vol_grad) {
            *a += b;
        }
    }

    let mut d_maps: Vec<Image> = fwd
        .maps
        .iter()
        .map(|m| Image::zeros(m.features.width, m.features.height, c))
        .collect();
    if model.config.lift_features {
        scene.plan.backward(&vol_grad, c, &mut d_maps);
    }
    for (v, g) in map_grads.iter().enumerate() {
        let d = predict_density_map_backward(&fwd.maps[v], &model.encoder, g, &mut grad.encoder);
        for (a, b) in d_maps[v].data.iter_mut().zip(&d.data) {
            *a += b;
        }
    }
    for (v, d) in d_maps.iter().enumerate() {
        if d.data.iter().all(|x| *x == 0.0) {
            continue;
        }
        extract_features_backward(&model.encoder, &fwd.tapes[v], d, &mut grad.encoder);
    }
}

fn add_mlp(dst: &mut MlpParams, src: &MlpParams) {
    for (a, b) in dst.layers.iter_mut().zip(&src.layers) {
        for (x, y) in a.weights.iter_mut().zip(&b.weights) {
            *x += y;
        }
        for (x, y) in a.biases.iter_mut().zip(&b.biases) {
            *x += y;
        }
    }
}

pub fn add_nets(dst: &mut FieldNets, src: &FieldNets) {
    add_mlp(&mut dst.sdf, &src.sdf);
    add_mlp(&mut dst.rgb, &src.rgb);
    add_mlp(&mut dst.density, &src.density);
    dst.log_beta += src.log_beta;
}

/// Renders every pixel of `camera` through the decoded volume of a scene.
pub struct RenderedView {
    pub rgb: Image,
    pub depth: Image,
    pub density: Image,
    pub accumulation: Image,
}

pub fn render_view(
    volume: &FeatureVolume,
    nets: &FieldNets,
    camera: &crate::geometry::CameraModel,
    samples: usize,
    seed_base: u64,
) -> RenderedView {
    let (w, h) = (camera.width, camera.height);
    let rows: Vec<Vec<RenderOutput>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let ray = camera.ray_for_pixel_center(x, y);
                    let mut rng = seed::rng(seed_base, &[(y * w + x) as u64]);
                    crate::renderer::render_ray(volume, nets, &ray, samples, &mut rng)
                })
                .collect()
        })
        .collect();
    let mut out = RenderedView {
        rgb: Image::zeros(w, h, 3),
        depth: Image::zeros(w, h, 1),
        density: Image::zeros(w, h, 1),
        accumulation: Image::zeros(w, h, 1),
    };
    for (y, row) in rows.iter().enumerate() {
        for (x, o) in row.iter().enumerate() {
            out.rgb.pixel_mut(x, y).copy_from_slice(&o.color);
            out.depth.pixel_mut(x, y)[0] = o.depth;
            out.density.pixel_mut(x, y)[0] = o.density;
            out.accumulation.pixel_mut(x, y)[0] = o.accumulation;
        }
    }
    out
}

/// Feature-map side for an image side.
pub fn map_side(pixels: usize) -> usize {
    pixels / FEATURE_STRIDE
}
