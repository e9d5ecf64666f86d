//! Pinhole cameras, ray generation and stratified depth sampling.
//!
//! Conventions: right-handed world frame; the camera looks down its own +z
//! axis with +x to the right and +y down the image. Pixel coordinates are
//! continuous, so the integer pixel `(i, j)` is traversed by the ray through
//! `(i + 0.5, j + 0.5)`; [`CameraModel::ray_for_pixel_center`] applies that
//! offset and every other caller uses it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Mat3, Vec3};
use crate::volume::BoundingBox;

/// Smallest camera-frame depth still considered in front of the camera.
pub const MIN_VISIBLE_DEPTH: f64 = 1e-6;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraFile", into = "CameraFile")]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World to camera rotation.
    pub rotation: Mat3,
    pub translation: Vec3,
}

/// On-disk layout: rotation flattened row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl TryFrom<CameraFile> for CameraModel {
    type Error = Error;

    fn try_from(f: CameraFile) -> Result<Self> {
        let r = f.rotation;
        CameraModel::new(
            [f.fx, f.fy],
            [f.cx, f.cy],
            [f.width, f.height],
            [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]],
            f.translation,
        )
    }
}

impl From<CameraModel> for CameraFile {
    fn from(c: CameraModel) -> Self {
        let r = c.rotation;
        CameraFile {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            rotation: [
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ],
            translation: c.translation,
        }
    }
}

impl CameraModel {
    pub fn new(
        focal: [f64; 2],
        principal: [f64; 2],
        size: [usize; 2],
        rotation: Mat3,
        translation: Vec3,
    ) -> Result<Self> {
        let [fx, fy] = focal;
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive, got ({fx}, {fy})"
            )));
        }
        if size[0] < 1 || size[1] < 1 {
            return Err(Error::InvalidCamera(format!(
                "image size must be at least 1x1, got {}x{}",
                size[0], size[1]
            )));
        }
        if !principal.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("non-finite intrinsics or translation".into()));
        }
        for i in 0..3 {
            for j in 0..3 {
                let d = math::dot(rotation[i], rotation[j]);
                let expected = if i == j { 1.0 } else { 0.0 };
                if !((d - expected).abs() <= ORTHONORMAL_TOL) {
                    return Err(Error::InvalidCamera(format!(
                        "rotation is not orthonormal (row {i} . row {j} = {d})"
                    )));
                }
            }
        }
        let det = math::det(&rotation);
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::InvalidCamera(format!(
                "rotation determinant must be +1, got {det}"
            )));
        }
        Ok(CameraModel {
            fx,
            fy,
            cx: principal[0],
            cy: principal[1],
            width: size[0],
            height: size[1],
            rotation,
            translation,
        })
    }

    /// Camera at `eye` looking at `target`, with world +z as the up hint.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = math::normalize(math::sub(target, eye));
        let mut right = math::cross(forward, [0.0, 0.0, 1.0]);
        if math::norm(right) < 1e-9 {
            right = math::cross(forward, [0.0, 1.0, 0.0]);
        }
        let right = math::normalize(right);
        let down = math::cross(forward, right);
        let rotation = [right, down, forward];
        let translation = math::scale(math::mat_vec(&rotation, eye), -1.0);
        CameraModel::new(
            [focal, focal],
            [width as f64 / 2.0, height as f64 / 2.0],
            [width, height],
            rotation,
            translation,
        )
    }

    /// Camera centre in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vec3 {
        math::scale(math::mat_t_vec(&self.rotation, self.translation), -1.0)
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        math::add(math::mat_vec(&self.rotation, p), self.translation)
    }

    /// Ray through continuous image coordinates `(u, v)`.
    ///
    /// The returned ray starts at the camera centre and is unbounded
    /// (`t_far = ∞`); clip it with [`Ray::clip_to_box`] before sampling.
    pub fn ray_for_pixel(&self, u: f64, v: f64) -> Ray {
        debug_assert!(
            (0.0..self.width as f64).contains(&u) && (0.0..self.height as f64).contains(&v),
            "pixel ({u}, {v}) outside {}x{} frame",
            self.width,
            self.height
        );
        let dir_cam = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        let dir = math::normalize(math::mat_t_vec(&self.rotation, dir_cam));
        Ray {
            origin: self.center(),
            direction: dir,
            t_near: 0.0,
            t_far: f64::INFINITY,
        }
    }

    /// Ray through the centre of integer pixel `(i, j)`.
    pub fn ray_for_pixel_center(&self, i: usize, j: usize) -> Ray {
        self.ray_for_pixel(i as f64 + 0.5, j as f64 + 0.5)
    }

    /// Projects a world point, returning `(u, v, z)` with `z` the
    /// camera-frame depth.
    pub fn project_point(&self, p: Vec3) -> Result<(f64, f64, f64)> {
        let [x, y, z] = self.world_to_camera(p);
        if !(z > MIN_VISIBLE_DEPTH) {
            return Err(Error::PointBehindCamera { z });
        }
        Ok((self.fx * x / z + self.cx, self.fy * y / z + self.cy, z))
    }

    pub fn in_frame(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        math::axpy(self.origin, t, self.direction)
    }

    /// Restricts the ray to its overlap with `bbox` (slab test). Returns
    /// `None` when the ray misses the box or only touches it.
    pub fn clip_to_box(&self, bbox: &BoundingBox) -> Option<Ray> {
        let mut t0 = self.t_near;
        let mut t1 = self.t_far;
        for axis in 0..3 {
            let o = self.origin[axis];
            let d = self.direction[axis];
            if d.abs() < 1e-15 {
                if o < bbox.min[axis] || o > bbox.max[axis] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let mut ta = (bbox.min[axis] - o) * inv;
            let mut tb = (bbox.max[axis] - o) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 < t1).then_some(Ray {
            t_near: t0,
            t_far: t1,
            ..*self
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    /// Strictly ascending.
    pub depths: Vec<f64>,
    pub points: Vec<Vec3>,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    pub fn from_depths(ray: &Ray, depths: Vec<f64>) -> Self {
        let points = depths.iter().map(|&t| ray.at(t)).collect();
        RaySamples { depths, points }
    }
}

/// Stratified depths: `[t_near, t_far]` is cut into `m` equal bins and one
/// uniform draw is taken inside each bin.
pub fn sample_ray_depths<R: Rng + ?Sized>(ray: &Ray, m: usize, rng: &mut R) -> RaySamples {
    assert!(m >= 1, "at least one sample per ray is required");
    assert!(
        ray.t_far.is_finite(),
        "ray must be clipped to a finite segment before sampling"
    );
    let width = (ray.t_far - ray.t_near) / m as f64;
    let depths = (0..m)
        .map(|i| ray.t_near + (i as f64 + rng.gen::<f64>()) * width)
        .collect();
    RaySamples::from_depths(ray, depths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    fn unit_camera(translation: Vec3) -> CameraModel {
        CameraModel::new([1.0, 1.0], [0.0, 0.0], [4, 4], IDENTITY, translation).unwrap()
    }

    fn assert_vec_close(a: Vec3, b: Vec3, tol: f64) {
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn principal_point_maps_to_optical_axis() {
        let ray = unit_camera([0.0; 3]).ray_for_pixel(0.0, 0.0);
        assert_vec_close(ray.direction, [0.0, 0.0, 1.0], 1e-15);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn off_axis_pixel_direction() {
        let ray = unit_camera([0.0; 3]).ray_for_pixel(1.0, 0.0);
        assert_vec_close(ray.direction, [0.7071068, 0.0, 0.7071068], 1e-7);
    }

    #[test]
    fn camera_center_from_translation() {
        let cam = unit_camera([0.0, 0.0, -5.0]);
        assert_vec_close(cam.ray_for_pixel(0.0, 0.0).origin, [0.0, 0.0, 5.0], 1e-15);
    }

    #[test]
    fn projection_examples() {
        let cam = CameraModel::new([1.0, 1.0], [3.0, 2.0], [8, 8], IDENTITY, [0.0; 3]).unwrap();
        assert_eq!(cam.project_point([0.0, 0.0, 2.0]).unwrap(), (3.0, 2.0, 2.0));

        let cam = unit_camera([0.0; 3]);
        let (u, _, _) = cam.project_point([2.0, 0.0, 2.0]).unwrap();
        assert_eq!(u, 1.0);
        assert!(matches!(
            cam.project_point([0.0, 0.0, -1.0]),
            Err(Error::PointBehindCamera { .. })
        ));
    }

    #[test]
    fn rejects_bad_cameras() {
        let skew = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(CameraModel::new([1.0, 1.0], [0.0, 0.0], [4, 4], skew, [0.0; 3]).is_err());
        let mirror = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(CameraModel::new([1.0, 1.0], [0.0, 0.0], [4, 4], mirror, [0.0; 3]).is_err());
        assert!(CameraModel::new([0.0, 1.0], [0.0, 0.0], [4, 4], IDENTITY, [0.0; 3]).is_err());
        assert!(CameraModel::new([1.0, 1.0], [0.0, 0.0], [0, 4], IDENTITY, [0.0; 3]).is_err());
    }

    #[test]
    fn look_at_points_forward() {
        let cam = CameraModel::look_at([2.0, 0.5, 1.0], [0.5, 0.5, 0.2], 30.0, 32, 32).unwrap();
        let (u, v, _) = cam.project_point([0.5, 0.5, 0.2]).unwrap();
        assert!((u - 16.0).abs() < 1e-9 && (v - 16.0).abs() < 1e-9);
        // Higher world points appear higher in the image (smaller v).
        let (_, v_up, _) = cam.project_point([0.5, 0.5, 0.6]).unwrap();
        assert!(v_up < v);
    }

    #[test]
    fn camera_json_round_trip() {
        let cam = CameraModel::look_at([2.0, 0.3, 1.0], [0.5, 0.5, 0.2], 30.0, 32, 32).unwrap();
        let text = serde_json::to_string(&cam).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value["rotation"].as_array().unwrap().len(), 9);
        let back: CameraModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cam);
        assert!(serde_json::from_str::<CameraModel>(r#"{"fx":1}"#).is_err());
    }

    #[test]
    fn stratified_bins() {
        let ray = Ray {
            origin: [0.0; 3],
            direction: [0.0, 0.0, 1.0],
            t_near: 0.0,
            t_far: 4.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = sample_ray_depths(&ray, 4, &mut rng);
        for (i, t) in s.depths.iter().enumerate() {
            assert!(*t >= i as f64 && *t < i as f64 + 1.0);
        }

        let ray = Ray {
            t_near: 1.0,
            t_far: 2.0,
            ..ray
        };
        let s = sample_ray_depths(&ray, 1, &mut rng);
        assert!(s.depths[0] >= 1.0 && s.depths[0] < 2.0);
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let ray = Ray {
            origin: [0.1, 0.2, 0.3],
            direction: math::normalize([1.0, 1.0, 1.0]),
            t_near: 0.5,
            t_far: 3.0,
        };
        let a = sample_ray_depths(&ray, 8, &mut ChaCha8Rng::seed_from_u64(42));
        let b = sample_ray_depths(&ray, 8, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }

    #[test]
    fn box_clipping() {
        let bbox = BoundingBox::unit();
        let ray = Ray {
            origin: [0.5, 0.5, -1.0],
            direction: [0.0, 0.0, 1.0],
            t_near: 0.0,
            t_far: f64::INFINITY,
        };
        let clipped = ray.clip_to_box(&bbox).unwrap();
        assert!((clipped.t_near - 1.0).abs() < 1e-12 && (clipped.t_far - 2.0).abs() < 1e-12);
        let miss = Ray {
            origin: [2.0, 2.0, -1.0],
            ..ray
        };
        assert!(miss.clip_to_box(&bbox).is_none());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn pixel_ray_reprojects(u in 0.0f64..32.0, v in 0.0f64..24.0, s in 0.05f64..20.0,
                                    ex in -3.0f64..3.0, ey in -3.0f64..3.0) {
                let cam = CameraModel::look_at([ex, ey, 1.5], [0.5, 0.5, 0.0], 27.0, 32, 24).unwrap();
                let ray = cam.ray_for_pixel(u, v);
                let (pu, pv, _) = cam.project_point(ray.at(s)).unwrap();
                prop_assert!((pu - u).abs() <= 1e-6 && (pv - v).abs() <= 1e-6);
            }

            #[test]
            fn samples_sorted_and_stratified(m in 1usize..64, seed in any::<u64>(),
                                             near in 0.0f64..2.0, len in 0.01f64..5.0) {
                let ray = Ray { origin: [0.0; 3], direction: [1.0, 0.0, 0.0], t_near: near, t_far: near + len };
                let s = sample_ray_depths(&ray, m, &mut ChaCha8Rng::seed_from_u64(seed));
                let bin = len / m as f64;
                for (i, t) in s.depths.iter().enumerate() {
                    prop_assert!(*t >= near + i as f64 * bin - 1e-12);
                    prop_assert!(*t <= near + (i + 1) as f64 * bin + 1e-12);
                    prop_assert!(*t >= ray.t_near && *t <= ray.t_far);
                }
                for w in s.depths.windows(2) {
                    prop_assert!(w[0] < w[1]);
                }
                for (t, p) in s.depths.iter().zip(&s.points) {
                    prop_assert!((p[0] - t).abs() <= 1e-12);
                }
            }
        }
    }
}
