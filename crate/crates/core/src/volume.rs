//! Node-centred feature grids with trilinear sampling and its adjoint.
//!
//! Nodes sit on the bounding-box corners: node `(i, j, k)` is at
//! `bbox.min + (i, j, k) * cell` with `cell = extent / (dims - 1)`. Values are
//! stored node by node with x slowest and channels fastest:
//! `((i * ny + j) * nz + k) * channels + c`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundingBox {
    pub min: Vec3,
    pub max: Vec3,
}

impl BoundingBox {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if (0..3).all(|a| min[a] < max[a]) {
            Ok(BoundingBox { min, max })
        } else {
            Err(Error::Config(format!(
                "bounding box min {min:?} must be below max {max:?}"
            )))
        }
    }

    pub fn unit() -> Self {
        BoundingBox {
            min: [0.0; 3],
            max: [1.0; 3],
        }
    }

    pub fn extent(&self) -> Vec3 {
        crate::math::sub(self.max, self.min)
    }

    pub fn center(&self) -> Vec3 {
        crate::math::scale(crate::math::add(self.min, self.max), 0.5)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e[0] * e[1] * e[2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCoord {
    /// Continuous node coordinates; `0` is `bbox.min`, `dims - 1` is `bbox.max`.
    pub coords: Vec3,
    pub in_bounds: bool,
}

/// The eight nodes enclosing a query and their trilinear weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrilinearStencil {
    pub nodes: [usize; 8],
    pub weights: [f64; 8],
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub dims: [usize; 3],
    pub channels: usize,
    pub bbox: BoundingBox,
    pub values: Vec<f64>,
}

impl FeatureVolume {
    pub fn zeros(dims: [usize; 3], channels: usize, bbox: BoundingBox) -> Self {
        assert!(dims.iter().all(|&d| d >= 2), "each grid axis needs at least 2 nodes");
        assert!(channels >= 1);
        FeatureVolume {
            dims,
            channels,
            bbox,
            values: vec![0.0; dims[0] * dims[1] * dims[2] * channels],
        }
    }

    pub fn from_values(
        dims: [usize; 3],
        channels: usize,
        bbox: BoundingBox,
        values: Vec<f64>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) || channels == 0 {
            return Err(Error::ShapeMismatch(format!(
                "volume dims {dims:?} x {channels} channels"
            )));
        }
        let expected = dims[0] * dims[1] * dims[2] * channels;
        if values.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "volume expects {expected} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("volume values must be finite".into()));
        }
        Ok(FeatureVolume {
            dims,
            channels,
            bbox,
            values,
        })
    }

    pub fn node_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn cell(&self) -> Vec3 {
        let e = self.bbox.extent();
        [
            e[0] / (self.dims[0] - 1) as f64,
            e[1] / (self.dims[1] - 1) as f64,
            e[2] / (self.dims[2] - 1) as f64,
        ]
    }

    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn node_ijk(&self, node: usize) -> [usize; 3] {
        let k = node % self.dims[2];
        let j = (node / self.dims[2]) % self.dims[1];
        let i = node / (self.dims[1] * self.dims[2]);
        [i, j, k]
    }

    pub fn node_position(&self, node: usize) -> Vec3 {
        let ijk = self.node_ijk(node);
        let cell = self.cell();
        [
            self.bbox.min[0] + ijk[0] as f64 * cell[0],
            self.bbox.min[1] + ijk[1] as f64 * cell[1],
            self.bbox.min[2] + ijk[2] as f64 * cell[2],
        ]
    }

    pub fn node_features(&self, node: usize) -> &[f64] {
        &self.values[node * self.channels..(node + 1) * self.channels]
    }

    pub fn node_features_mut(&mut self, node: usize) -> &mut [f64] {
        let c = self.channels;
        &mut self.values[node * c..(node + 1) * c]
    }

    pub fn world_to_grid(&self, p: Vec3) -> GridCoord {
        let mut coords = [0.0; 3];
        for a in 0..3 {
            let span = self.bbox.max[a] - self.bbox.min[a];
            coords[a] = (p[a] - self.bbox.min[a]) / span * (self.dims[a] - 1) as f64;
        }
        GridCoord {
            coords,
            in_bounds: self.bbox.contains(p),
        }
    }

    /// Enclosing nodes and weights for `p`, clamped to the box faces.
    pub fn stencil(&self, p: Vec3) -> TrilinearStencil {
        let g = self.world_to_grid(p).coords;
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let hi = (self.dims[a] - 1) as f64;
            let x = if g[a].is_nan() { 0.0 } else { g[a].clamp(0.0, hi) };
            let i0 = (x.floor() as usize).min(self.dims[a] - 2);
            base[a] = i0;
            frac[a] = x - i0 as f64;
        }
        let mut nodes = [0usize; 8];
        let mut weights = [0.0; 8];
        for corner in 0..8 {
            let (di, dj, dk) = (corner >> 2 & 1, corner >> 1 & 1, corner & 1);
            nodes[corner] = self.node_index(base[0] + di, base[1] + dj, base[2] + dk);
            let wx = if di == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dj == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dk == 1 { frac[2] } else { 1.0 - frac[2] };
            weights[corner] = wx * wy * wz;
        }
        TrilinearStencil { nodes, weights }
    }

    pub fn gather(&self, stencil: &TrilinearStencil, out: &mut [f64]) {
        let c = self.channels;
        out[..c].fill(0.0);
        for (node, w) in stencil.nodes.iter().zip(stencil.weights) {
            if w == 0.0 {
                continue;
            }
            let feat = self.node_features(*node);
            for ch in 0..c {
                out[ch] += w * feat[ch];
            }
        }
    }

    pub fn sample_trilinear(&self, p: Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.gather(&self.stencil(p), &mut out);
        out
    }

    /// Adjoint of [`sample_trilinear`](Self::sample_trilinear): adds
    /// `weight * upstream` into each enclosing node of `grad` (same layout as
    /// `values`).
    pub fn sample_trilinear_backward(&self, p: Vec3, upstream: &[f64], grad: &mut [f64]) {
        scatter(&self.stencil(p), self.channels, upstream, grad);
    }

    /// Trapezoidal-rule quadrature weight of each node over the box.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let cell = self.cell();
        let axis = |a: usize, i: usize| {
            if i == 0 || i == self.dims[a] - 1 {
                0.5 * cell[a]
            } else {
                cell[a]
            }
        };
        (0..self.node_count())
            .map(|n| {
                let [i, j, k] = self.node_ijk(n);
                axis(0, i) * axis(1, j) * axis(2, k)
            })
            .collect()
    }

    /// Trapezoidal integral of one channel over the bounding box.
    pub fn integrate_channel(&self, channel: usize) -> f64 {
        self.trapezoid_weights()
            .iter()
            .enumerate()
            .map(|(n, w)| w * self.values[n * self.channels + channel])
            .sum()
    }
}

pub fn scatter(stencil: &TrilinearStencil, channels: usize, upstream: &[f64], grad: &mut [f64]) {
    for (node, w) in stencil.nodes.iter().zip(stencil.weights) {
        if w == 0.0 {
            continue;
        }
        let g = &mut grad[node * channels..(node + 1) * channels];
        for ch in 0..channels {
            g[ch] += w * upstream[ch];
        }
    }
}

/// Single-channel, nonnegative volume of persons per unit volume.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityVolume(pub FeatureVolume);

impl DensityVolume {
    pub fn new(volume: FeatureVolume) -> Result<Self> {
        if volume.channels != 1 {
            return Err(Error::ShapeMismatch(format!(
                "density volume must have 1 channel, got {}",
                volume.channels
            )));
        }
        if volume.values.iter().any(|&v| v < 0.0) {
            return Err(Error::ShapeMismatch("density volume must be nonnegative".into()));
        }
        Ok(DensityVolume(volume))
    }

    pub fn sample(&self, p: Vec3) -> f64 {
        self.0.sample_trilinear(p)[0]
    }

    /// Person count: trapezoidal integral over the box.
    pub fn integral(&self) -> f64 {
        self.0.integrate_channel(0)
    }
}

/// JSON sidecar of a raw volume file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub channels: usize,
    pub bbox: BoundingBox,
}

/// Sidecar path for a raw volume: `x.raw` -> `x.json`.
pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

/// Little-endian f32 values in node order.
pub fn encode_volume_raw(volume: &FeatureVolume) -> Vec<u8> {
    volume
        .values
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

pub fn encode_volume_header(volume: &FeatureVolume) -> String {
    let header = VolumeHeader {
        dims: volume.dims,
        channels: volume.channels,
        bbox: volume.bbox,
    };
    let mut s = serde_json::to_string_pretty(&header).expect("header serialises");
    s.push('\n');
    s
}

pub fn write_volume(raw: &Path, volume: &FeatureVolume) -> Result<()> {
    std::fs::write(raw, encode_volume_raw(volume)).map_err(|e| Error::io(raw, e))?;
    let side = sidecar_path(raw);
    std::fs::write(&side, encode_volume_header(volume)).map_err(|e| Error::io(&side, e))
}

pub fn read_volume(raw: &Path) -> Result<FeatureVolume> {
    let side = sidecar_path(raw);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let header: VolumeHeader =
        serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
    let bytes = std::fs::read(raw).map_err(|e| Error::io(raw, e))?;
    let expected = header.dims.iter().product::<usize>() * header.channels * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            raw,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    FeatureVolume::from_values(header.dims, header.channels, header.bbox, values)
        .map_err(|e| Error::format(raw, e.to_string()))
}
