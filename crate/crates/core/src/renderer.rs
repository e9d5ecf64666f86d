//! SDF-driven alpha compositing along rays.
//!
//! For `M` samples the opacity of interval `k` comes from the drop of the
//! logistic of consecutive SDF values,
//! `α_k = max((δ(s_k) − δ(s_{k+1})) / δ(s_k), 0)`, the occlusion weight is
//! `w_k = α_k Π_{j<k}(1 − α_j)`, and depth, colour and density are the raw
//! (unnormalised) weighted sums over the first `M − 1` samples.

use rand::Rng;

use crate::fields::{logistic_delta, FieldNets, FieldSample};
use crate::geometry::{sample_ray_depths, Ray, RaySamples};
use crate::math::Vec3;
use crate::volume::{scatter, FeatureVolume, TrilinearStencil};

/// Guard on the logistic in the opacity denominator.
pub const DELTA_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub depth: f64,
    pub color: [f64; 3],
    pub density: f64,
    /// `M − 1` interval opacities.
    pub alphas: Vec<f64>,
    pub weights: Vec<f64>,
    pub accumulation: f64,
}

impl RenderOutput {
    /// Output of a ray that never enters the scene.
    pub fn empty(samples: usize) -> Self {
        let n = samples.saturating_sub(1);
        RenderOutput {
            depth: 0.0,
            color: [0.0; 3],
            density: 0.0,
            alphas: vec![0.0; n],
            weights: vec![0.0; n],
            accumulation: 0.0,
        }
    }
}

/// Unclamped opacity ratio `(δ(s_k) − δ(s_{k+1})) / max(δ(s_k), ε)`.
#[inline]
fn alpha_ratio(s_k: f64, s_k1: f64, beta: f64) -> f64 {
    let dk = logistic_delta(s_k, beta);
    let dk1 = logistic_delta(s_k1, beta);
    (dk - dk1) / dk.max(DELTA_EPS)
}

pub fn alpha_from_sdf(s_k: f64, s_k1: f64, beta: f64) -> f64 {
    debug_assert!(beta > 0.0);
    alpha_ratio(s_k, s_k1, beta).max(0.0)
}

/// Partial derivatives of the opacity with respect to `(s_k, s_{k+1}, β)`.
/// The clamped branch (ratio ≤ 0) has zero gradient.
pub fn alpha_from_sdf_grad(s_k: f64, s_k1: f64, beta: f64) -> (f64, [f64; 3]) {
    let dk = logistic_delta(s_k, beta);
    let dk1 = logistic_delta(s_k1, beta);
    let denom = dk.max(DELTA_EPS);
    let ratio = (dk - dk1) / denom;
    if ratio <= 0.0 {
        return (0.0, [0.0; 3]);
    }
    // ∂ratio/∂δk, ∂ratio/∂δk1
    let (r_dk, r_dk1) = if dk > DELTA_EPS {
        (dk1 / (dk * dk), -1.0 / dk)
    } else {
        (1.0 / DELTA_EPS, -1.0 / DELTA_EPS)
    };
    let slope_k = dk * (1.0 - dk);
    let slope_k1 = dk1 * (1.0 - dk1);
    let d_sk = r_dk * slope_k * beta;
    let d_sk1 = r_dk1 * slope_k1 * beta;
    let d_beta = r_dk * slope_k * s_k + r_dk1 * slope_k1 * s_k1;
    (ratio, [d_sk, d_sk1, d_beta])
}

pub fn occlusion_weights(alphas: &[f64]) -> Vec<f64> {
    let mut transmittance = 1.0;
    alphas
        .iter()
        .map(|&a| {
            let w = transmittance * a;
            transmittance *= 1.0 - a;
            w
        })
        .collect()
}

/// Adjoint of [`occlusion_weights`]. Uses the suffix recursion
/// `S_k = g_{k+1} α_{k+1} + (1 − α_{k+1}) S_{k+1}` so no division by
/// `1 − α` is needed: `∂L/∂α_k = T_k (g_k − S_k)`.
pub fn occlusion_weights_backward(alphas: &[f64], upstream: &[f64]) -> Vec<f64> {
    let n = alphas.len();
    let mut prefix = Vec::with_capacity(n);
    let mut t = 1.0;
    for &a in alphas {
        prefix.push(t);
        t *= 1.0 - a;
    }
    let mut grad = vec![0.0; n];
    let mut suffix = 0.0;
    for k in (0..n).rev() {
        grad[k] = prefix[k] * (upstream[k] - suffix);
        suffix = upstream[k] * alphas[k] + (1.0 - alphas[k]) * suffix;
    }
    grad
}

pub fn composite(weights: &[f64], values: &[f64]) -> f64 {
    assert_eq!(weights.len(), values.len(), "composite length mismatch");
    weights.iter().zip(values).map(|(w, v)| w * v).sum()
}

pub fn composite_rgb(weights: &[f64], values: &[[f64; 3]]) -> [f64; 3] {
    assert_eq!(weights.len(), values.len(), "composite length mismatch");
    let mut out = [0.0; 3];
    for (w, c) in weights.iter().zip(values) {
        for k in 0..3 {
            out[k] += w * c[k];
        }
    }
    out
}

/// Any field that can be composited: learned or analytic.
pub trait SceneField {
    fn sdf(&self, p: Vec3) -> f64;
    fn color(&self, p: Vec3, direction: Vec3) -> [f64; 3];
    fn density(&self, p: Vec3) -> f64;
}

/// Composites `field` over precomputed samples of `ray`.
pub fn render_samples<F: SceneField + ?Sized>(
    field: &F,
    ray: &Ray,
    samples: &RaySamples,
    beta: f64,
) -> RenderOutput {
    let m = samples.len();
    assert!(m >= 2, "compositing needs at least two samples");
    let sdf: Vec<f64> = samples.points.iter().map(|&p| field.sdf(p)).collect();
    let alphas: Vec<f64> = sdf
        .windows(2)
        .map(|s| alpha_from_sdf(s[0], s[1], beta))
        .collect();
    let weights = occlusion_weights(&alphas);
    let mut color = [0.0; 3];
    let mut density = 0.0;
    let mut depth = 0.0;
    for i in 0..m - 1 {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        let p = samples.points[i];
        let c = field.color(p, ray.direction);
        for k in 0..3 {
            color[k] += w * c[k];
        }
        density += w * field.density(p);
        depth += w * samples.depths[i];
    }
    let accumulation = weights.iter().sum();
    RenderOutput {
        depth,
        color,
        density,
        alphas,
        weights,
        accumulation,
    }
}

/// Learned field: trilinear features from a volume decoded by the nets.
pub struct NeuralField<'a> {
    pub volume: &'a FeatureVolume,
    pub nets: &'a FieldNets,
}

impl SceneField for NeuralField<'_> {
    fn sdf(&self, p: Vec3) -> f64 {
        self.nets.phi_sdf(p, &self.volume.sample_trilinear(p))
    }

    fn color(&self, p: Vec3, direction: Vec3) -> [f64; 3] {
        self.nets
            .phi_rgb(p, &self.volume.sample_trilinear(p), direction)
    }

    fn density(&self, p: Vec3) -> f64 {
        self.nets.phi_density(p, &self.volume.sample_trilinear(p))
    }
}

/// Everything the backward pass needs from one rendered ray.
#[derive(Debug, Clone)]
pub struct RayTrace {
    pub ray: Ray,
    pub samples: RaySamples,
    pub stencils: Vec<TrilinearStencil>,
    pub fields: Vec<FieldSample>,
    /// Per-sample volume density `d_i` (all `M` samples).
    pub densities: Vec<f64>,
    /// Unclamped opacity ratios, used to detect samples on the clamp kink.
    pub ratios: Vec<f64>,
    pub output: RenderOutput,
}

impl RayTrace {
    /// Distance of the closest opacity ratio to the clamp at zero.
    pub fn min_clamp_distance(&self) -> f64 {
        self.ratios.iter().fold(f64::INFINITY, |m, r| m.min(r.abs()))
    }

    /// Distance of the closest ReLU pre-activation to its kink.
    pub fn min_kink_distance(&self, nets: &FieldNets) -> f64 {
        self.fields.iter().fold(f64::INFINITY, |m, f| {
            let mut m = m
                .min(nets.sdf.min_kink_distance(&f.sdf_tape))
                .min(nets.density.min_kink_distance(&f.density_tape));
            if let Some(t) = &f.rgb_tape {
                m = m.min(nets.rgb.min_kink_distance(t));
            }
            m
        })
    }
}

/// Upstream gradients arriving at one ray.
#[derive(Debug, Clone, Default)]
pub struct RayUpstream {
    pub depth: f64,
    pub color: [f64; 3],
    pub density: f64,
    /// Direct gradient on each sample's density `d_i` (length `M`, or empty).
    pub sample_density: Vec<f64>,
}

/// Forward pass over explicit samples, recording the trace.
pub fn trace_samples(
    volume: &FeatureVolume,
    nets: &FieldNets,
    ray: &Ray,
    samples: RaySamples,
) -> RayTrace {
    let m = samples.len();
    assert!(m >= 2, "compositing needs at least two samples");
    let beta = nets.beta();
    let mut stencils = Vec::with_capacity(m);
    let mut fields = Vec::with_capacity(m);
    let mut feat = vec![0.0; volume.channels];
    for (i, &p) in samples.points.iter().enumerate() {
        let st = volume.stencil(p);
        volume.gather(&st, &mut feat);
        fields.push(nets.evaluate_traced(p, &feat, ray.direction, i + 1 < m));
        stencils.push(st);
    }
    let ratios: Vec<f64> = fields
        .windows(2)
        .map(|f| alpha_ratio(f[0].sdf, f[1].sdf, beta))
        .collect();
    let alphas: Vec<f64> = ratios.iter().map(|r| r.max(0.0)).collect();
    let weights = occlusion_weights(&alphas);
    let mut color = [0.0; 3];
    let mut density = 0.0;
    let mut depth = 0.0;
    for i in 0..m - 1 {
        let w = weights[i];
        for k in 0..3 {
            color[k] += w * fields[i].rgb[k];
        }
        density += w * fields[i].density;
        depth += w * samples.depths[i];
    }
    let accumulation = weights.iter().sum();
    let densities = fields.iter().map(|f| f.density).collect();
    RayTrace {
        ray: *ray,
        samples,
        stencils,
        fields,
        densities,
        ratios,
        output: RenderOutput {
            depth,
            color,
            density,
            alphas,
            weights,
            accumulation,
        },
    }
}

/// Clips `ray` to the volume, draws `m` stratified samples and traces them.
/// Returns `None` for rays that miss the volume.
pub fn trace_ray<R: Rng + ?Sized>(
    volume: &FeatureVolume,
    nets: &FieldNets,
    ray: &Ray,
    m: usize,
    rng: &mut R,
) -> Option<RayTrace> {
    let clipped = ray.clip_to_box(&volume.bbox)?;
    let samples = sample_ray_depths(&clipped, m, rng);
    Some(trace_samples(volume, nets, &clipped, samples))
}

pub fn render_ray<R: Rng + ?Sized>(
    volume: &FeatureVolume,
    nets: &FieldNets,
    ray: &Ray,
    m: usize,
    rng: &mut R,
) -> RenderOutput {
    assert!(m >= 2, "compositing needs at least two samples");
    match trace_ray(volume, nets, ray, m, rng) {
        Some(t) => t.output,
        None => RenderOutput::empty(m),
    }
}

/// Reverse pass of [`trace_samples`]: accumulates into the net gradients and
/// into `volume_grad` (same layout as the volume values).
pub fn backward_ray(
    volume: &FeatureVolume,
    nets: &FieldNets,
    trace: &RayTrace,
    upstream: &RayUpstream,
    nets_grad: &mut FieldNets,
    volume_grad: &mut [f64],
) {
    let m = trace.samples.len();
    let beta = nets.beta();
    let out = &trace.output;

    let mut d_weights = vec![0.0; m - 1];
    for i in 0..m - 1 {
        let f = &trace.fields[i];
        d_weights[i] = upstream.depth * trace.samples.depths[i]
            + upstream.density * f.density
            + (0..3).map(|k| upstream.color[k] * f.rgb[k]).sum::<f64>();
    }
    let d_alphas = occlusion_weights_backward(&out.alphas, &d_weights);

    let mut d_sdf = vec![0.0; m];
    let mut d_beta = 0.0;
    for k in 0..m - 1 {
        if d_alphas[k] == 0.0 {
            continue;
        }
        let (_, g) = alpha_from_sdf_grad(trace.fields[k].sdf, trace.fields[k + 1].sdf, beta);
        d_sdf[k] += d_alphas[k] * g[0];
        d_sdf[k + 1] += d_alphas[k] * g[1];
        d_beta += d_alphas[k] * g[2];
    }
    nets_grad.log_beta += d_beta * beta;

    for i in 0..m {
        let w = if i + 1 < m { out.weights[i] } else { 0.0 };
        let d_rgb = [
            upstream.color[0] * w,
            upstream.color[1] * w,
            upstream.color[2] * w,
        ];
        let mut d_density = upstream.density * w;
        if let Some(g) = upstream.sample_density.get(i) {
            d_density += g;
        }
        if d_sdf[i] == 0.0 && d_density == 0.0 && d_rgb.iter().all(|v| *v == 0.0) {
            continue;
        }
        let df = nets.backward_sample(&trace.fields[i], d_sdf[i], d_rgb, d_density, nets_grad);
        scatter(&trace.stencils[i], volume.channels, &df, volume_grad);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{normal, FieldConfig};
    use crate::volume::BoundingBox;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn alpha_examples() {
        assert_eq!(alpha_from_sdf(0.3, 0.3, 5.0), 0.0);
        let a = alpha_from_sdf(0.0, -(3f64.ln()), 1.0);
        assert!((a - 0.5).abs() <= 1e-12);
        assert_eq!(alpha_from_sdf(-0.2, 0.3, 10.0), 0.0);
    }

    #[test]
    fn alpha_grad_matches_finite_differences() {
        let h = 1e-6;
        for &(a, b, beta) in &[(0.1, -0.05, 10.0), (0.4, 0.1, 3.0), (-0.2, -0.3, 7.0)] {
            let (_, g) = alpha_from_sdf_grad(a, b, beta);
            let fd = [
                (alpha_from_sdf(a + h, b, beta) - alpha_from_sdf(a - h, b, beta)) / (2.0 * h),
                (alpha_from_sdf(a, b + h, beta) - alpha_from_sdf(a, b - h, beta)) / (2.0 * h),
                (alpha_from_sdf(a, b, beta + h) - alpha_from_sdf(a, b, beta - h)) / (2.0 * h),
            ];
            for k in 0..3 {
                assert!((g[k] - fd[k]).abs() <= 1e-6 * g[k].abs().max(1.0), "{g:?} vs {fd:?}");
            }
        }
    }

    #[test]
    fn weight_examples() {
        assert_eq!(occlusion_weights(&[1.0, 0.7]), vec![1.0, 0.0]);
        assert_eq!(occlusion_weights(&[0.5, 0.5, 0.5]), vec![0.5, 0.25, 0.125]);
        assert_eq!(occlusion_weights(&[0.0; 4]), vec![0.0; 4]);
    }

    #[test]
    fn weights_backward_handles_opaque_samples() {
        let alphas = [0.3, 1.0, 0.6, 0.2];
        let up = [0.5, -1.0, 2.0, 0.7];
        let g = occlusion_weights_backward(&alphas, &up);
        let h = 1e-7;
        for k in 0..4 {
            let mut p = alphas;
            p[k] += h;
            let mut m = alphas;
            m[k] -= h;
            let f = |a: &[f64]| composite(&occlusion_weights(a), &up);
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((g[k] - fd).abs() < 1e-6, "{k}: {} vs {fd}", g[k]);
        }
    }

    #[test]
    fn composite_examples() {
        assert_eq!(composite(&[1.0], &[2.0]), 2.0);
        assert_eq!(composite(&[0.5, 0.25], &[1.0, 2.0]), 1.0);
        assert_eq!(composite(&[0.0, 0.0], &[3.0, 4.0]), 0.0);
        assert_eq!(composite_rgb(&[0.0, 0.0], &[[1.0; 3], [0.5; 3]]), [0.0; 3]);
    }

    #[test]
    #[should_panic]
    fn composite_rejects_length_mismatch() {
        composite(&[1.0], &[1.0, 2.0]);
    }

    struct Plane {
        crossing: f64,
    }

    impl SceneField for Plane {
        fn sdf(&self, p: Vec3) -> f64 {
            self.crossing - p[2]
        }
        fn color(&self, _: Vec3, _: Vec3) -> [f64; 3] {
            [1.0, 0.5, 0.25]
        }
        fn density(&self, _: Vec3) -> f64 {
            2.0
        }
    }

    struct Receding;

    impl SceneField for Receding {
        fn sdf(&self, p: Vec3) -> f64 {
            p[2] + 0.1
        }
        fn color(&self, _: Vec3, _: Vec3) -> [f64; 3] {
            [1.0; 3]
        }
        fn density(&self, _: Vec3) -> f64 {
            1.0
        }
    }

    fn z_ray() -> Ray {
        Ray {
            origin: [0.0, 0.0, 0.0],
            direction: [0.0, 0.0, 1.0],
            t_near: 0.0,
            t_far: 1.0,
        }
    }

    #[test]
    fn leaving_geometry_renders_nothing() {
        let ray = z_ray();
        let s = sample_ray_depths(&ray, 16, &mut ChaCha8Rng::seed_from_u64(0));
        let out = render_samples(&Receding, &ray, &s, 10.0);
        assert!(out.alphas.iter().all(|a| *a == 0.0));
        assert_eq!((out.depth, out.color, out.density), (0.0, [0.0; 3], 0.0));
    }

    #[test]
    fn plane_crossing_concentrates_weight() {
        // At β = 200 the logistic's central 95% spans ±0.018, so the segment
        // must be long enough that ±2 samples cover it.
        let ray = Ray {
            t_far: 4.0,
            ..z_ray()
        };
        let m = 256;
        let crossing = 1.737;
        let s = sample_ray_depths(&ray, m, &mut ChaCha8Rng::seed_from_u64(5));
        let out = render_samples(&Plane { crossing }, &ray, &s, 200.0);
        let idx = s.depths.iter().position(|t| *t > crossing).unwrap();
        let lo = idx.saturating_sub(3);
        let hi = (idx + 2).min(m - 1);
        let mass: f64 = out.weights[lo..hi].iter().sum();
        assert!(mass >= 0.95, "mass near crossing {mass}");
        assert!((out.depth - crossing).abs() <= 2.0 * (ray.t_far - ray.t_near) / m as f64);
        assert!((out.density - 2.0 * out.accumulation).abs() < 1e-12);
    }

    fn random_setup(seed: u64, channels: usize, width: usize) -> (FeatureVolume, FieldNets) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = FieldConfig {
            hidden_width: width,
            sdf_sharpness: 10.0,
            init_scale: 0.3,
            ..Default::default()
        };
        let mut vol = FeatureVolume::zeros([4, 4, 4], channels, BoundingBox::unit());
        for v in &mut vol.values {
            *v = 0.3 * normal(&mut rng);
        }
        let mut nets = FieldNets::initialize(channels, &cfg, [0.5; 3], 1.0, &mut rng);
        for l in &mut nets.sdf.layers[0].weights {
            if *l == 0.0 {
                *l = 0.2 * normal(&mut rng);
            }
        }
        for net in [&mut nets.rgb, &mut nets.density] {
            for l in &mut net.layers {
                for b in &mut l.biases {
                    *b = 0.1 * normal(&mut rng);
                }
            }
        }
        (vol, nets)
    }

    fn diagonal_ray() -> Ray {
        Ray {
            origin: [-0.2, 0.1, 0.15],
            direction: crate::math::normalize([1.0, 0.7, 0.6]),
            t_near: 0.0,
            t_far: f64::INFINITY,
        }
    }

    #[test]
    fn seeded_render_is_bit_identical() {
        let (vol, nets) = random_setup(1, 3, 16);
        let a = render_ray(&vol, &nets, &diagonal_ray(), 32, &mut ChaCha8Rng::seed_from_u64(4));
        let b = render_ray(&vol, &nets, &diagonal_ray(), 32, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
    }

    #[test]
    fn traced_render_matches_generic_compositor() {
        let (vol, nets) = random_setup(2, 3, 16);
        let ray = diagonal_ray().clip_to_box(&vol.bbox).unwrap();
        let s = sample_ray_depths(&ray, 24, &mut ChaCha8Rng::seed_from_u64(8));
        let traced = trace_samples(&vol, &nets, &ray, s.clone()).output;
        let generic = render_samples(
            &NeuralField {
                volume: &vol,
                nets: &nets,
            },
            &ray,
            &s,
            nets.beta(),
        );
        assert_eq!(traced.alphas, generic.alphas);
        assert!((traced.depth - generic.depth).abs() < 1e-14);
        assert!((traced.density - generic.density).abs() < 1e-14);
    }

    #[test]
    fn missing_rays_render_zero() {
        let (vol, nets) = random_setup(3, 2, 8);
        let ray = Ray {
            origin: [3.0, 3.0, 3.0],
            direction: [1.0, 0.0, 0.0],
            t_near: 0.0,
            t_far: f64::INFINITY,
        };
        let out = render_ray(&vol, &nets, &ray, 8, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(out, RenderOutput::empty(8));
    }

    #[test]
    fn two_sample_alpha_monotone() {
        let beta = 6.0;
        let s1 = 0.2;
        let mut last = -1.0;
        for i in 0..50 {
            let gap = -0.5 + 0.04 * i as f64;
            let a = alpha_from_sdf(s1, s1 - gap, beta);
            assert!(a >= last);
            last = a;
        }
    }
}
