//! Per-view convolutional features, projection-pooling lift into a feature
//! volume, and the image-level density head.
//!
//! Feature maps are at quarter resolution. Feature cell `(i, j)` is centred
//! on the pixel block `[4i, 4i + 4) x [4j, 4j + 4)`, so continuous pixel
//! coordinate `u` maps to feature coordinate `(u - 2) / 4`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::fields::normal;
use crate::geometry::CameraModel;
use crate::image::Image;
use crate::math;
use crate::volume::{BoundingBox, FeatureVolume};

pub const FEATURE_STRIDE: usize = 4;
const HIDDEN_CHANNELS: usize = 8;

/// 3x3, stride 2, zero padding 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out][in][ky][kx]`, flattened.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Conv2d {
            in_channels,
            out_channels,
            weights: vec![0.0; out_channels * in_channels * 9],
            biases: vec![0.0; out_channels],
        }
    }

    #[inline]
    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * 3 + ky) * 3 + kx
    }

    pub fn forward(&self, input: &Image) -> Image {
        let (ow, oh) = (input.width / 2, input.height / 2);
        let mut out = Image::zeros(ow, oh, self.out_channels);
        for oy in 0..oh {
            for ox in 0..ow {
                let px = out.index(ox, oy);
                out.data[px..px + self.out_channels].copy_from_slice(&self.biases);
                for ky in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= input.height as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix < 0 || ix >= input.width as isize {
                            continue;
                        }
                        let src = input.pixel(ix as usize, iy as usize);
                        for o in 0..self.out_channels {
                            let mut acc = 0.0;
                            for (i, s) in src.iter().enumerate() {
                                acc += self.weights[self.w(o, i, ky, kx)] * s;
                            }
                            out.data[px + o] += acc;
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight gradients into `grad` and returns the input gradient.
    pub fn backward(&self, input: &Image, upstream: &Image, grad: &mut Conv2d) -> Image {
        let mut d_input = Image::zeros(input.width, input.height, input.channels);
        for oy in 0..upstream.height {
            for ox in 0..upstream.width {
                let g = upstream.pixel(ox, oy);
                for o in 0..self.out_channels {
                    grad.biases[o] += g[o];
                }
                for ky in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= input.height as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix < 0 || ix >= input.width as isize {
                            continue;
                        }
                        let (ix, iy) = (ix as usize, iy as usize);
                        let base = input.index(ix, iy);
                        for o in 0..self.out_channels {
                            let go = g[o];
                            if go == 0.0 {
                                continue;
                            }
                            for i in 0..self.in_channels {
                                let wi = self.w(o, i, ky, kx);
                                grad.weights[wi] += go * input.data[base + i];
                                d_input.data[base + i] += go * self.weights[wi];
                            }
                        }
                    }
                }
            }
        }
        d_input
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvNetParams {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    /// 1x1 convolution to one channel.
    pub head_weights: Vec<f64>,
    pub head_bias: f64,
}

impl ConvNetParams {
    pub fn zeros(channels: usize) -> Self {
        ConvNetParams {
            conv1: Conv2d::zeros(3, HIDDEN_CHANNELS),
            conv2: Conv2d::zeros(HIDDEN_CHANNELS, channels),
            head_weights: vec![0.0; channels],
            head_bias: 0.0,
        }
    }

    /// He-style init for the convolutions; the density head starts at zero
    /// weights with `head_bias`.
    pub fn initialize<R: Rng + ?Sized>(channels: usize, head_bias: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(channels);
        for conv in [&mut p.conv1, &mut p.conv2] {
            let std = (2.0 / (conv.in_channels * 9) as f64).sqrt();
            for w in &mut conv.weights {
                *w = std * normal(rng);
            }
        }
        p.head_bias = head_bias;
        p
    }

    pub fn channels(&self) -> usize {
        self.conv2.out_channels
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.channels())
    }
}

/// Quarter-resolution feature map of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatureMap {
    pub features: Image,
    pub view: usize,
}

/// Activations kept for the backward pass of [`extract_features`].
#[derive(Debug, Clone)]
pub struct FeatureTape {
    pub input: Image,
    pub hidden_pre: Image,
    pub hidden: Image,
}

pub fn check_image_dims(image: &Image) -> Result<()> {
    if image.channels != 3
        || image.width == 0
        || image.height == 0
        || !image.width.is_multiple_of(FEATURE_STRIDE)
        || !image.height.is_multiple_of(FEATURE_STRIDE)
    {
        return Err(Error::ShapeMismatch(format!(
            "encoder input must be RGB with sides divisible by {FEATURE_STRIDE}, got {}x{}x{}",
            image.width, image.height, image.channels
        )));
    }
    Ok(())
}

pub fn extract_features_traced(
    image: &Image,
    params: &ConvNetParams,
    view: usize,
) -> Result<(ImageFeatureMap, FeatureTape)> {
    check_image_dims(image)?;
    let hidden_pre = params.conv1.forward(image);
    let mut hidden = hidden_pre.clone();
    for v in &mut hidden.data {
        *v = v.max(0.0);
    }
    let features = params.conv2.forward(&hidden);
    Ok((
        ImageFeatureMap { features, view },
        FeatureTape {
            input: image.clone(),
            hidden_pre,
            hidden,
        },
    ))
}

pub fn extract_features(image: &Image, params: &ConvNetParams) -> Result<ImageFeatureMap> {
    extract_features_traced(image, params, 0).map(|(m, _)| m)
}

pub fn extract_features_backward(
    params: &ConvNetParams,
    tape: &FeatureTape,
    d_features: &Image,
    grad: &mut ConvNetParams,
) {
    let mut d_hidden = params.conv2.backward(&tape.hidden, d_features, &mut grad.conv2);
    for (g, z) in d_hidden.data.iter_mut().zip(&tape.hidden_pre.data) {
        if *z <= 0.0 {
            *g = 0.0;
        }
    }
    params.conv1.backward(&tape.input, &d_hidden, &mut grad.conv1);
}

/// Encoder density map: 1x1 conv then softplus, one entry per feature cell.
pub fn predict_density_map(map: &ImageFeatureMap, params: &ConvNetParams) -> Image {
    let f = &map.features;
    let mut out = Image::zeros(f.width, f.height, 1);
    for (cell, o) in out.data.iter_mut().enumerate() {
        let feat = &f.data[cell * f.channels..(cell + 1) * f.channels];
        let z = params.head_bias + math::dot_slice(&params.head_weights, feat);
        *o = math::softplus(z);
    }
    out
}

/// Backward of [`predict_density_map`]; returns the feature-map gradient.
pub fn predict_density_map_backward(
    map: &ImageFeatureMap,
    params: &ConvNetParams,
    upstream: &Image,
    grad: &mut ConvNetParams,
) -> Image {
    let f = &map.features;
    let c = f.channels;
    let mut d_feat = Image::zeros(f.width, f.height, c);
    for cell in 0..f.width * f.height {
        let g = upstream.data[cell];
        if g == 0.0 {
            continue;
        }
        let feat = &f.data[cell * c..(cell + 1) * c];
        let z = params.head_bias + math::dot_slice(&params.head_weights, feat);
        let dz = g * math::sigmoid(z);
        grad.head_bias += dz;
        for k in 0..c {
            grad.head_weights[k] += dz * feat[k];
            d_feat.data[cell * c + k] += dz * params.head_weights[k];
        }
    }
    d_feat
}

/// Four taps of a clamp-to-edge bilinear lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearStencil {
    pub cells: [usize; 4],
    pub weights: [f64; 4],
}

impl BilinearStencil {
    /// Stencil at continuous feature coordinates `(x, y)` of a `w x h` grid.
    pub fn new(x: f64, y: f64, w: usize, h: usize) -> Self {
        let axis = |v: f64, n: usize| -> (usize, usize, f64) {
            if n == 1 {
                return (0, 0, 0.0);
            }
            let v = v.clamp(0.0, (n - 1) as f64);
            let i0 = (v.floor() as usize).min(n - 2);
            (i0, i0 + 1, v - i0 as f64)
        };
        let (x0, x1, fx) = axis(x, w);
        let (y0, y1, fy) = axis(y, h);
        BilinearStencil {
            cells: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
            weights: [
                (1.0 - fx) * (1.0 - fy),
                fx * (1.0 - fy),
                (1.0 - fx) * fy,
                fx * fy,
            ],
        }
    }

    /// Stencil for continuous pixel coordinates on a quarter-resolution map.
    pub fn for_pixel(u: f64, v: f64, map_w: usize, map_h: usize) -> Self {
        let s = FEATURE_STRIDE as f64;
        Self::new((u - s / 2.0) / s, (v - s / 2.0) / s, map_w, map_h)
    }

    pub fn sample(&self, img: &Image, out: &mut [f64]) {
        let c = img.channels;
        out[..c].fill(0.0);
        for (cell, w) in self.cells.iter().zip(self.weights) {
            if w == 0.0 {
                continue;
            }
            for k in 0..c {
                out[k] += w * img.data[cell * c + k];
            }
        }
    }

    pub fn scatter(&self, upstream: &[f64], grad: &mut Image) {
        let c = grad.channels;
        for (cell, w) in self.cells.iter().zip(self.weights) {
            if w == 0.0 {
                continue;
            }
            for k in 0..c {
                grad.data[cell * c + k] += w * upstream[k];
            }
        }
    }
}

/// For every volume node, the views that see it and where.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftPlan {
    pub dims: [usize; 3],
    pub bbox: BoundingBox,
    pub taps: Vec<Vec<(usize, BilinearStencil)>>,
}

impl LiftPlan {
    pub fn new(cameras: &[CameraModel], bbox: BoundingBox, dims: [usize; 3]) -> Self {
        let grid = FeatureVolume::zeros(dims, 1, bbox);
        let taps = (0..grid.node_count())
            .map(|node| {
                let p = grid.node_position(node);
                cameras
                    .iter()
                    .enumerate()
                    .filter_map(|(v, cam)| {
                        let (u, vv, _) = cam.project_point(p).ok()?;
                        if !cam.in_frame(u, vv) {
                            return None;
                        }
                        let (mw, mh) = (cam.width / FEATURE_STRIDE, cam.height / FEATURE_STRIDE);
                        Some((v, BilinearStencil::for_pixel(u, vv, mw, mh)))
                    })
                    .collect()
            })
            .collect();
        LiftPlan { dims, bbox, taps }
    }

    pub fn forward(&self, maps: &[ImageFeatureMap], channels: usize) -> FeatureVolume {
        let mut vol = FeatureVolume::zeros(self.dims, channels, self.bbox);
        let mut buf = vec![0.0; channels];
        for (node, taps) in self.taps.iter().enumerate() {
            if taps.is_empty() {
                continue;
            }
            let inv = 1.0 / taps.len() as f64;
            let out = vol.node_features_mut(node);
            for (view, st) in taps {
                st.sample(&maps[*view].features, &mut buf);
                for k in 0..channels {
                    out[k] += buf[k] * inv;
                }
            }
        }
        vol
    }

    /// Distributes a volume gradient back onto per-view feature-map gradients.
    pub fn backward(&self, d_volume: &[f64], channels: usize, d_maps: &mut [Image]) {
        let mut scaled = vec![0.0; channels];
        for (node, taps) in self.taps.iter().enumerate() {
            if taps.is_empty() {
                continue;
            }
            let inv = 1.0 / taps.len() as f64;
            let g = &d_volume[node * channels..(node + 1) * channels];
            for k in 0..channels {
                scaled[k] = g[k] * inv;
            }
            for (view, st) in taps {
                st.scatter(&scaled, &mut d_maps[*view]);
            }
        }
    }
}

/// Mean projection pooling of per-view feature maps into a volume. Nodes no
/// camera sees stay zero.
pub fn lift_to_volume(
    maps: &[ImageFeatureMap],
    cameras: &[CameraModel],
    bbox: BoundingBox,
    dims: [usize; 3],
    channels: usize,
) -> FeatureVolume {
    assert_eq!(maps.len(), cameras.len(), "one camera per feature map");
    LiftPlan::new(cameras, bbox, dims).forward(maps, channels)
}
