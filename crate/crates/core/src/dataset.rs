//! On-disk dataset layout and its reader.
//!
//! ```text
//! <root>/dataset.json
//! <root>/scene_0000/manifest.json
//!                  camera_<v>.json  rgb_<v>.ppm  depth_<v>.pfm
//!                  accumulation_<v>.pfm  density_<v>.pfm  rendered_density_<v>.pfm
//!                  density_volume.raw  density_volume.json  scene.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraModel;
use crate::image::{read_pfm, read_ppm, Image};
use crate::losses::{SupervisionBundle, ViewSupervision};
use crate::synth::{SceneSample, SceneSpec, SynthConfig};
use crate::volume::{read_volume, DensityVolume};

pub const DATASET_MANIFEST: &str = "dataset.json";
pub const SCENE_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub config: SynthConfig,
    pub scenes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewManifest {
    pub index: usize,
    /// Heads visible in this view (sum of its density map).
    pub count: f64,
    pub camera: String,
    pub rgb: String,
    pub depth: String,
    pub accumulation: String,
    pub density_map: String,
    pub rendered_density: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub scene_id: String,
    pub count: usize,
    pub views: Vec<ViewManifest>,
    pub files: BTreeMap<String, String>,
}

/// One scene as the trainer sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneData {
    pub id: String,
    pub count: usize,
    pub cameras: Vec<CameraModel>,
    pub images: Vec<Image>,
    pub view_counts: Vec<f64>,
    pub supervision: SupervisionBundle,
    /// Composited ground-truth 3D density per view.
    pub rendered_density: Vec<Image>,
}

impl SceneData {
    /// In-memory scene straight from the generator, without the 8-bit and
    /// f32 quantisation a disk round trip applies.
    pub fn from_sample(sample: &SceneSample, id: &str) -> Self {
        let views = sample
            .views
            .iter()
            .map(|v| ViewSupervision {
                density_map: v.density_map.clone(),
                rgb: v.oracle.rgb.clone(),
                depth: v.oracle.depth.clone(),
                accumulation: v.oracle.accumulation.clone(),
            })
            .collect();
        SceneData {
            id: id.to_string(),
            count: sample.count(),
            cameras: sample.views.iter().map(|v| v.camera.clone()).collect(),
            images: sample.views.iter().map(|v| v.oracle.rgb.clone()).collect(),
            view_counts: sample.views.iter().map(|v| v.visible_count()).collect(),
            supervision: SupervisionBundle {
                views,
                density_volume: sample.density_volume.clone(),
            },
            rendered_density: sample.views.iter().map(|v| v.oracle.density.clone()).collect(),
        }
    }

    pub fn views(&self) -> usize {
        self.cameras.len()
    }

    pub fn volume(&self) -> &DensityVolume {
        &self.supervision.density_volume
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub scenes: Vec<SceneData>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn expect_shape(img: &Image, w: usize, h: usize, c: usize, path: &Path) -> Result<()> {
    if img.width == w && img.height == h && img.channels == c {
        Ok(())
    } else {
        Err(Error::format(
            path,
            format!(
                "expected {w}x{h}x{c}, found {}x{}x{}",
                img.width, img.height, img.channels
            ),
        ))
    }
}

pub fn load_scene(dir: &Path) -> Result<SceneData> {
    let manifest: SceneManifest = read_json(&dir.join(SCENE_MANIFEST))?;
    if manifest.views.is_empty() {
        return Err(Error::format(dir.join(SCENE_MANIFEST), "scene has no views"));
    }
    let mut cameras = Vec::new();
    let mut images = Vec::new();
    let mut views = Vec::new();
    let mut view_counts = Vec::new();
    let mut rendered_density = Vec::new();
    let stride = crate::encoder::FEATURE_STRIDE;
    for v in &manifest.views {
        let cam = CameraModel::load(&dir.join(&v.camera))?;
        let (w, h) = (cam.width, cam.height);
        let load_pfm = |name: &str, w, h| {
            let p = dir.join(name);
            let img = read_pfm(&p)?;
            expect_shape(&img, w, h, 1, &p)?;
            Ok::<_, Error>(img)
        };
        let rgb_path = dir.join(&v.rgb);
        let rgb = read_ppm(&rgb_path)?;
        expect_shape(&rgb, w, h, 3, &rgb_path)?;
        let depth = load_pfm(&v.depth, w, h)?;
        let accumulation = load_pfm(&v.accumulation, w, h)?;
        let density_map = load_pfm(&v.density_map, w / stride, h / stride)?;
        rendered_density.push(load_pfm(&v.rendered_density, w, h)?);
        views.push(ViewSupervision {
            density_map,
            rgb: rgb.clone(),
            depth,
            accumulation,
        });
        images.push(rgb);
        cameras.push(cam);
        view_counts.push(v.count);
    }
    let raw_name = manifest
        .files
        .get("density_volume")
        .ok_or_else(|| Error::format(dir.join(SCENE_MANIFEST), "missing density_volume entry"))?;
    let raw_path = dir.join(raw_name);
    let density_volume = DensityVolume::new(read_volume(&raw_path)?)
        .map_err(|e| Error::format(&raw_path, e.to_string()))?;
    Ok(SceneData {
        id: manifest.scene_id,
        count: manifest.count,
        cameras,
        images,
        view_counts,
        supervision: SupervisionBundle {
            views,
            density_volume,
        },
        rendered_density,
    })
}

pub fn load_scene_spec(dir: &Path) -> Result<SceneSpec> {
    read_json(&dir.join("scene.json"))
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = read_json(&root.join(DATASET_MANIFEST))?;
    let scenes = manifest
        .scenes
        .iter()
        .map(|id| load_scene(&root.join(id)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
        scenes,
    })
}
