//! Synthetic multi-camera crowd scenes.
//!
//! People are capsules standing on an optional ground plane with a sphere for
//! the head. Every annotation the losses need comes from analytic oracles:
//! a union SDF, a sum of unit-mass Gaussian blobs centred on the heads, and
//! flat per-entity albedo.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, DatasetManifest, SceneManifest, ViewManifest};
use crate::error::{Error, Result};
use crate::geometry::{sample_ray_depths, CameraModel, Ray};
use crate::image::{encode_pfm, encode_ppm, Image};
use crate::math::{self, Vec3};
use crate::renderer::{render_samples, SceneField};
use crate::seed;
use crate::volume::{encode_volume_header, encode_volume_raw, BoundingBox, DensityVolume, FeatureVolume};

const SCENE_STREAM: u64 = 0x5343_454e;
const RENDER_STREAM: u64 = 0x5245_4e44;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Body {
    Sphere { center: Vec3, radius: f64 },
    Capsule { a: Vec3, b: Vec3, radius: f64 },
}

impl Body {
    pub fn sdf(&self, p: Vec3) -> f64 {
        match *self {
            Body::Sphere { center, radius } => math::norm(math::sub(p, center)) - radius,
            Body::Capsule { a, b, radius } => {
                let ab = math::sub(b, a);
                let ap = math::sub(p, a);
                let len2 = math::dot(ab, ab);
                let h = if len2 > 0.0 {
                    (math::dot(ap, ab) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                math::norm(math::sub(ap, math::scale(ab, h))) - radius
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entity {
    pub center: Vec3,
    pub body: Body,
    /// Head point carrying the entity's unit density mass.
    pub head: Vec3,
    /// Radius of the head sphere; zero for bodies without one.
    pub head_radius: f64,
    pub albedo: [f64; 3],
    /// Standard deviation of the density blob, world units.
    pub sigma: f64,
}

impl Entity {
    pub fn sdf(&self, p: Vec3) -> f64 {
        let body = self.body.sdf(p);
        if self.head_radius > 0.0 {
            body.min(math::norm(math::sub(p, self.head)) - self.head_radius)
        } else {
            body
        }
    }

    pub fn density(&self, p: Vec3) -> f64 {
        let r2 = math::dot(math::sub(p, self.head), math::sub(p, self.head));
        let var = self.sigma * self.sigma;
        (2.0 * PI * var).powf(-1.5) * (-r2 / (2.0 * var)).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ground {
    pub height: f64,
    pub albedo: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub bbox: BoundingBox,
    pub entities: Vec<Entity>,
    pub cameras: Vec<CameraModel>,
    pub ground: Option<Ground>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.entities.iter().enumerate() {
            if !(e.sigma > 0.0) {
                return Err(Error::Config(format!("entity {i}: sigma must be positive")));
            }
            if !self.bbox.contains(e.head) || !self.bbox.contains(e.center) {
                return Err(Error::Config(format!("entity {i} lies outside the scene box")));
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.entities.len()
    }
}

/// Union of entity SDFs and the ground plane; `+∞` for an empty scene.
pub fn analytic_sdf(scene: &SceneSpec, p: Vec3) -> f64 {
    let mut s = scene
        .entities
        .iter()
        .map(|e| e.sdf(p))
        .fold(f64::INFINITY, f64::min);
    if let Some(g) = &scene.ground {
        s = s.min(p[2] - g.height);
    }
    s
}

pub fn analytic_density(scene: &SceneSpec, p: Vec3) -> f64 {
    scene.entities.iter().map(|e| e.density(p)).sum()
}

/// Albedo of whichever surface is closest to `p`.
pub fn analytic_color(scene: &SceneSpec, p: Vec3) -> [f64; 3] {
    let mut best = f64::INFINITY;
    let mut color = [0.0; 3];
    for e in &scene.entities {
        let s = e.sdf(p);
        if s < best {
            best = s;
            color = e.albedo;
        }
    }
    if let Some(g) = &scene.ground {
        if p[2] - g.height < best {
            color = g.albedo;
        }
    }
    color
}

impl SceneField for SceneSpec {
    fn sdf(&self, p: Vec3) -> f64 {
        analytic_sdf(self, p)
    }

    fn color(&self, p: Vec3, _direction: Vec3) -> [f64; 3] {
        analytic_color(self, p)
    }

    fn density(&self, p: Vec3) -> f64 {
        analytic_density(self, p)
    }
}

/// Closest positive intersection of a ray with a sphere.
pub fn ray_sphere_intersection(ray: &Ray, center: Vec3, radius: f64) -> Option<f64> {
    let oc = math::sub(ray.origin, center);
    let b = math::dot(oc, ray.direction);
    let c = math::dot(oc, oc) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let root = disc.sqrt();
    [-b - root, -b + root].into_iter().find(|t| *t > 0.0)
}

/// Images produced by compositing the analytic fields through one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleView {
    pub rgb: Image,
    pub depth: Image,
    pub accumulation: Image,
    /// Composited 3D density, the quantity the learned renderer produces.
    pub density: Image,
}

/// Depth, colour, accumulation and density of one oracle pixel.
type OraclePixel = (f64, [f64; 3], f64, f64);

/// Renders every pixel centre with `m_hi` stratified samples at sharpness
/// `beta`. Rays that miss the box stay black.
pub fn oracle_render_view<F: SceneField + Sync>(
    field: &F,
    bbox: &BoundingBox,
    camera: &CameraModel,
    m_hi: usize,
    beta: f64,
    seed: u64,
) -> OracleView {
    let (w, h) = (camera.width, camera.height);
    let rows: Vec<Vec<OraclePixel>> = (0..h)
        .into_par_iter()
        .map(|j| {
            (0..w)
                .map(|i| {
                    let ray = camera.ray_for_pixel_center(i, j);
                    let Some(clipped) = ray.clip_to_box(bbox) else {
                        return (0.0, [0.0; 3], 0.0, 0.0);
                    };
                    let mut rng = seed::rng(seed, &[(j * w + i) as u64]);
                    let samples = sample_ray_depths(&clipped, m_hi, &mut rng);
                    let out = render_samples(field, &clipped, &samples, beta);
                    (out.depth, out.color, out.accumulation, out.density)
                })
                .collect()
        })
        .collect();
    let mut view = OracleView {
        rgb: Image::zeros(w, h, 3),
        depth: Image::zeros(w, h, 1),
        accumulation: Image::zeros(w, h, 1),
        density: Image::zeros(w, h, 1),
    };
    for (j, row) in rows.into_iter().enumerate() {
        for (i, (z, c, acc, d)) in row.into_iter().enumerate() {
            view.rgb.pixel_mut(i, j).copy_from_slice(&c);
            view.depth.pixel_mut(i, j)[0] = z;
            view.accumulation.pixel_mut(i, j)[0] = acc;
            view.density.pixel_mut(i, j)[0] = d;
        }
    }
    view
}

/// Continuous feature-map coordinate of image coordinate `u`: cell `j`
/// covers pixels `4j..4j+4` and its centre sits at `u = 4j + 2`.
pub fn feature_coord(u: f64) -> f64 {
    (u - 0.5 * crate::encoder::FEATURE_STRIDE as f64) / crate::encoder::FEATURE_STRIDE as f64
}

/// Ground-truth count map at feature resolution: each head that projects in
/// front of the camera and inside the frame adds a Gaussian of width
/// `sigma_cells`, renormalised to unit mass over the map.
pub fn gt_density_map_2d(scene: &SceneSpec, camera: &CameraModel, sigma_cells: f64) -> Result<Image> {
    if !(sigma_cells > 0.0) {
        return Err(Error::Config("splat sigma must be positive".into()));
    }
    let stride = crate::encoder::FEATURE_STRIDE;
    if !camera.width.is_multiple_of(stride) || !camera.height.is_multiple_of(stride) {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} is not divisible by {stride}",
            camera.width, camera.height
        )));
    }
    let (mw, mh) = (camera.width / stride, camera.height / stride);
    let mut map = Image::zeros(mw, mh, 1);
    let mut splat = vec![0.0; mw * mh];
    for e in &scene.entities {
        let Ok((u, v, _)) = camera.project_point(e.head) else {
            continue;
        };
        if !camera.in_frame(u, v) {
            continue;
        }
        let (x, y) = (feature_coord(u), feature_coord(v));
        let mut total = 0.0;
        for j in 0..mh {
            for i in 0..mw {
                let d2 = (i as f64 - x).powi(2) + (j as f64 - y).powi(2);
                let g = (-d2 / (2.0 * sigma_cells * sigma_cells)).exp();
                splat[j * mw + i] = g;
                total += g;
            }
        }
        for (m, g) in map.data.iter_mut().zip(&splat) {
            *m += g / total;
        }
    }
    Ok(map)
}

pub fn gt_density_volume(scene: &SceneSpec, dims: [usize; 3]) -> DensityVolume {
    let mut vol = FeatureVolume::zeros(dims, 1, scene.bbox);
    for node in 0..vol.node_count() {
        vol.values[node] = analytic_density(scene, vol.node_position(node));
    }
    DensityVolume::new(vol).expect("analytic density is nonnegative")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub scenes: usize,
    pub min_entities: usize,
    pub max_entities: usize,
    /// Square image side in pixels; must be divisible by 4.
    pub image_size: usize,
    pub cameras: usize,
    /// Horizontal distance of each camera from the box centre.
    pub camera_distance: f64,
    pub camera_height: f64,
    /// Height of the point every camera looks at.
    pub target_height: f64,
    pub fov_degrees: f64,
    pub ground: bool,
    pub ground_height: f64,
    pub ground_albedo: [f64; 3],
    pub body_radius: f64,
    /// Height of the body capsule's top above the ground.
    pub body_height: f64,
    pub head_radius: f64,
    /// 3D density blob width; defaults to the head radius.
    pub blob_sigma: Option<f64>,
    /// 2D splat width in feature cells.
    pub splat_sigma_cells: f64,
    pub volume_dims: [usize; 3],
    /// Keeps heads at least this far from the box side walls.
    pub placement_margin: f64,
    pub oracle_samples: usize,
    pub oracle_beta: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            scenes: 24,
            min_entities: 3,
            max_entities: 12,
            image_size: 32,
            cameras: 4,
            camera_distance: 1.4,
            camera_height: 1.4,
            target_height: 0.25,
            fov_degrees: 45.0,
            ground: true,
            ground_height: 0.1,
            ground_albedo: [0.5, 0.5, 0.5],
            body_radius: 0.05,
            body_height: 0.4,
            head_radius: 0.07,
            blob_sigma: None,
            splat_sigma_cells: 2.0,
            volume_dims: [32, 32, 32],
            placement_margin: 0.22,
            oracle_samples: 512,
            oracle_beta: 200.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let stride = crate::encoder::FEATURE_STRIDE;
        let checks = [
            (self.min_entities <= self.max_entities, "min_entities exceeds max_entities"),
            (self.image_size >= stride && self.image_size.is_multiple_of(stride), "image_size must be a positive multiple of 4"),
            (self.cameras >= 1, "need at least one camera"),
            (self.fov_degrees > 0.0 && self.fov_degrees < 180.0, "fov_degrees out of range"),
            (self.body_radius > 0.0 && self.head_radius >= 0.0, "radii must be positive"),
            (self.blob_sigma() > 0.0, "blob sigma must be positive"),
            (self.splat_sigma_cells > 0.0, "splat sigma must be positive"),
            (self.volume_dims.iter().all(|&d| d >= 2), "volume dims must be at least 2"),
            (self.placement_margin >= 0.0 && self.placement_margin < 0.5, "placement margin must lie in [0, 0.5)"),
            (self.oracle_samples >= 2, "oracle needs at least two samples"),
            (self.oracle_beta > 0.0, "oracle beta must be positive"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        let top = self.floor() + self.body_height + self.head_radius + 0.5 * self.body_radius;
        if top + self.head_radius > 1.0 {
            return Err(Error::Config("entities do not fit in the unit box".into()));
        }
        Ok(())
    }

    pub fn blob_sigma(&self) -> f64 {
        self.blob_sigma.unwrap_or(self.head_radius)
    }

    fn floor(&self) -> f64 {
        if self.ground {
            self.ground_height
        } else {
            0.0
        }
    }

    pub fn focal(&self) -> f64 {
        0.5 * self.image_size as f64 / (0.5 * self.fov_degrees.to_radians()).tan()
    }
}

/// Cameras evenly spaced on a circle around the box, all looking inward.
pub fn camera_rig(cfg: &SynthConfig) -> Result<Vec<CameraModel>> {
    let bbox = BoundingBox::unit();
    let c = bbox.center();
    (0..cfg.cameras)
        .map(|v| {
            let theta = 2.0 * PI * v as f64 / cfg.cameras as f64 + 0.25 * PI;
            let eye = [
                c[0] + cfg.camera_distance * theta.cos(),
                c[1] + cfg.camera_distance * theta.sin(),
                cfg.camera_height,
            ];
            let target = [c[0], c[1], cfg.target_height];
            CameraModel::look_at(eye, target, cfg.focal(), cfg.image_size, cfg.image_size)
        })
        .collect()
}

fn person(cfg: &SynthConfig, x: f64, y: f64, albedo: [f64; 3]) -> Entity {
    let floor = cfg.floor();
    let r = cfg.body_radius;
    let head_z = floor + cfg.body_height + cfg.head_radius + 0.5 * r;
    Entity {
        center: [x, y, 0.5 * (floor + head_z)],
        body: Body::Capsule {
            a: [x, y, floor + r],
            b: [x, y, floor + cfg.body_height],
            radius: r,
        },
        head: [x, y, head_z],
        head_radius: cfg.head_radius,
        albedo,
        sigma: cfg.blob_sigma(),
    }
}

/// Draws scene `index` of the dataset generated from `seed`.
///
/// People are rejection-sampled to keep their axes `2.2 r` apart; if no
/// clear spot turns up in 1000 draws the last draw is kept and they overlap.
pub fn sample_scene(cfg: &SynthConfig, seed: u64, index: usize) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = seed::rng(seed, &[SCENE_STREAM, index as u64]);
    let n = rng.gen_range(cfg.min_entities..=cfg.max_entities);
    let lo = cfg.placement_margin;
    let hi = 1.0 - cfg.placement_margin;
    let min_gap = 2.2 * cfg.body_radius.max(cfg.head_radius);
    let mut entities: Vec<Entity> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut xy = [0.0; 2];
        for _attempt in 0..1000 {
            xy = [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)];
            let clear = entities.iter().all(|e| {
                (e.head[0] - xy[0]).hypot(e.head[1] - xy[1]) >= min_gap
            });
            if clear {
                break;
            }
        }
        let albedo = [
            rng.gen_range(0.15..1.0),
            rng.gen_range(0.15..1.0),
            rng.gen_range(0.15..1.0),
        ];
        entities.push(person(cfg, xy[0], xy[1], albedo));
    }
    let scene = SceneSpec {
        bbox: BoundingBox::unit(),
        entities,
        cameras: camera_rig(cfg)?,
        ground: cfg.ground.then_some(Ground {
            height: cfg.ground_height,
            albedo: cfg.ground_albedo,
        }),
    };
    scene.validate()?;
    Ok(scene)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSample {
    pub camera: CameraModel,
    pub oracle: OracleView,
    pub density_map: Image,
}

impl ViewSample {
    pub fn visible_count(&self) -> f64 {
        self.density_map.sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub spec: SceneSpec,
    pub views: Vec<ViewSample>,
    pub density_volume: DensityVolume,
}

impl SceneSample {
    pub fn count(&self) -> usize {
        self.spec.count()
    }
}

pub fn render_scene(spec: &SceneSpec, cfg: &SynthConfig, seed: u64, index: usize) -> Result<SceneSample> {
    let views = spec
        .cameras
        .iter()
        .enumerate()
        .map(|(v, cam)| {
            let render_seed = seed::derive(seed, &[RENDER_STREAM, index as u64, v as u64]);
            Ok(ViewSample {
                camera: cam.clone(),
                oracle: oracle_render_view(spec, &spec.bbox, cam, cfg.oracle_samples, cfg.oracle_beta, render_seed),
                density_map: gt_density_map_2d(spec, cam, cfg.splat_sigma_cells)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneSample {
        spec: spec.clone(),
        views,
        density_volume: gt_density_volume(spec, cfg.volume_dims),
    })
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:04}")
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("value serialises");
    s.push('\n');
    s.into_bytes()
}

/// Every file of one scene directory, in a fixed order.
pub fn scene_files(sample: &SceneSample, id: &str) -> (SceneManifest, Vec<(String, Vec<u8>)>) {
    let mut files = Vec::new();
    let mut views = Vec::new();
    for (v, view) in sample.views.iter().enumerate() {
        let names = ViewManifest {
            index: v,
            count: view.visible_count(),
            camera: format!("camera_{v}.json"),
            rgb: format!("rgb_{v}.ppm"),
            depth: format!("depth_{v}.pfm"),
            accumulation: format!("accumulation_{v}.pfm"),
            density_map: format!("density_{v}.pfm"),
            rendered_density: format!("rendered_density_{v}.pfm"),
        };
        files.push((names.camera.clone(), to_json(&view.camera)));
        files.push((names.rgb.clone(), encode_ppm(&view.oracle.rgb)));
        files.push((names.depth.clone(), encode_pfm(&view.oracle.depth)));
        files.push((names.accumulation.clone(), encode_pfm(&view.oracle.accumulation)));
        files.push((names.density_map.clone(), encode_pfm(&view.density_map)));
        files.push((names.rendered_density.clone(), encode_pfm(&view.oracle.density)));
        views.push(names);
    }
    let mut index = std::collections::BTreeMap::new();
    index.insert("scene".to_string(), "scene.json".to_string());
    index.insert("density_volume".to_string(), "density_volume.raw".to_string());
    index.insert("density_volume_header".to_string(), "density_volume.json".to_string());
    files.push(("scene.json".into(), to_json(&sample.spec)));
    files.push(("density_volume.raw".into(), encode_volume_raw(&sample.density_volume.0)));
    files.push((
        "density_volume.json".into(),
        encode_volume_header(&sample.density_volume.0).into_bytes(),
    ));
    let manifest = SceneManifest {
        scene_id: id.to_string(),
        count: sample.count(),
        views,
        files: index,
    };
    files.push((dataset::SCENE_MANIFEST.into(), to_json(&manifest)));
    (manifest, files)
}

/// Writes `files` into `dir` through a temporary sibling directory that is
/// renamed into place once complete.
pub fn write_dir_atomic(dir: &Path, files: &[(String, Vec<u8>)]) -> Result<()> {
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} has no file name", dir.display())))?;
    let tmp = dir.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    for (file, bytes) in files {
        let path = tmp.join(file);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

pub fn write_file_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Generates `cfg.scenes` scenes under `out`, one directory each, plus a
/// top-level `dataset.json`.
pub fn generate_dataset(cfg: &SynthConfig, seed: u64, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ids: Vec<String> = (0..cfg.scenes)
        .into_par_iter()
        .map(|i| {
            let spec = sample_scene(cfg, seed, i)?;
            let sample = render_scene(&spec, cfg, seed, i)?;
            let id = scene_id(i);
            let (_, files) = scene_files(&sample, &id);
            write_dir_atomic(&out.join(&id), &files)?;
            Ok(id)
        })
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest {
        seed,
        config: cfg.clone(),
        scenes: ids,
    };
    write_file_atomic(&out.join(dataset::DATASET_MANIFEST), &to_json(&manifest))?;
    Ok(manifest)
}

pub fn scene_dir(root: &Path, id: &str) -> PathBuf {
    root.join(id)
}
