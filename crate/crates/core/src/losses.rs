//! Fully supervised and self-supervised loss terms.
//!
//! Supervised: encoder density map vs ground-truth map, and sampled volume
//! density `d_i` vs the ground-truth volume at the same points. Self
//! supervised: rendered density vs the (detached) encoder map, rendered depth
//! vs the depth prior on rays where the prior is valid, and rendered colour
//! vs the observed image. Sums over rays are implemented as means.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::volume::DensityVolume;

/// Rays whose prior accumulation is below this carry no depth supervision.
pub const DEPTH_VALID_ACCUMULATION: f64 = 0.5;

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "mse operands have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Gradient of [`mse`] with respect to `a`.
pub fn mse_grad(a: &[f64], b: &[f64]) -> Vec<f64> {
    let scale = 2.0 / a.len() as f64;
    a.iter().zip(b).map(|(x, y)| scale * (x - y)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub density_map: f64,
    pub density_volume: f64,
    pub rendered_density: f64,
    pub depth: f64,
    pub rgb: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            density_map: 1.0,
            density_volume: 1.0,
            rendered_density: 1.0,
            depth: 1.0,
            rgb: 1.0,
        }
    }
}

impl LossWeights {
    pub fn fsl_only(self) -> Self {
        LossWeights {
            rendered_density: 0.0,
            depth: 0.0,
            rgb: 0.0,
            ..self
        }
    }

    pub fn ssl_only(self) -> Self {
        LossWeights {
            density_map: 0.0,
            density_volume: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.density_map,
            self.density_volume,
            self.rendered_density,
            self.depth,
            self.rgb,
        ];
        if all.iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be nonnegative: {self:?}")))
        }
    }

    pub fn any_ssl(&self) -> bool {
        self.rendered_density > 0.0 || self.depth > 0.0 || self.rgb > 0.0
    }
}

/// Ground truth for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSupervision {
    /// Quarter-resolution density map, sums to the visible head count.
    pub density_map: Image,
    pub rgb: Image,
    /// Depth prior.
    pub depth: Image,
    /// Accumulated opacity of the prior render; gates depth supervision.
    pub accumulation: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionBundle {
    pub views: Vec<ViewSupervision>,
    pub density_volume: DensityVolume,
}

/// Rendered quantities of one ray.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RayPrediction {
    pub depth: f64,
    pub color: [f64; 3],
    pub density: f64,
}

/// Targets of one ray, looked up at its pixel.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RayTarget {
    /// Encoder density at the pixel, treated as a constant.
    pub encoder_density: f64,
    pub depth: f64,
    pub depth_valid: bool,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub density_map: f64,
    pub density_volume: f64,
    pub rendered_density: f64,
    pub depth: f64,
    pub rgb: f64,
    pub fsl: f64,
    pub ssl: f64,
    pub total: f64,
    pub depth_valid_rays: usize,
    pub rays: usize,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.fsl.is_finite() && self.ssl.is_finite()
    }

    /// Adds every term and ray count of `other`.
    pub fn accumulate(&mut self, other: &LossReport) {
        self.for_each_term(|a, b| *a += b, other);
        self.depth_valid_rays += other.depth_valid_rays;
        self.rays += other.rays;
    }

    /// Scales the loss terms; counts are left alone.
    pub fn scale(&mut self, s: f64) {
        let copy = *self;
        self.for_each_term(|a, _| *a *= s, &copy);
    }

    fn for_each_term(&mut self, mut f: impl FnMut(&mut f64, f64), other: &LossReport) {
        f(&mut self.density_map, other.density_map);
        f(&mut self.density_volume, other.density_volume);
        f(&mut self.rendered_density, other.rendered_density);
        f(&mut self.depth, other.depth);
        f(&mut self.rgb, other.rgb);
        f(&mut self.fsl, other.fsl);
        f(&mut self.ssl, other.ssl);
        f(&mut self.total, other.total);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FslTerms {
    pub density_map: f64,
    pub density_volume: f64,
    pub weighted: f64,
}

/// Supervised loss: mean over views of the density-map MSE plus the mean
/// squared error of sampled volume densities against their targets.
pub fn fsl_loss(
    predicted_maps: &[Image],
    bundle: &SupervisionBundle,
    sample_density: &[f64],
    sample_target: &[f64],
    weights: &LossWeights,
) -> Result<FslTerms> {
    let mut terms = FslTerms::default();
    if weights.density_map > 0.0 {
        if predicted_maps.is_empty() || predicted_maps.len() != bundle.views.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} predicted maps for {} views",
                predicted_maps.len(),
                bundle.views.len()
            )));
        }
        let mut acc = 0.0;
        for (pred, view) in predicted_maps.iter().zip(&bundle.views) {
            acc += mse(&pred.data, &view.density_map.data)?;
        }
        terms.density_map = acc / predicted_maps.len() as f64;
    }
    if weights.density_volume > 0.0 {
        terms.density_volume = mse(sample_density, sample_target)?;
    }
    terms.weighted =
        weights.density_map * terms.density_map + weights.density_volume * terms.density_volume;
    Ok(terms)
}

/// Gradients of [`fsl_loss`] with respect to each predicted map and each
/// sampled density.
pub fn fsl_loss_grad(
    predicted_maps: &[Image],
    bundle: &SupervisionBundle,
    sample_density: &[f64],
    sample_target: &[f64],
    weights: &LossWeights,
) -> (Vec<Image>, Vec<f64>) {
    let maps = predicted_maps
        .iter()
        .zip(&bundle.views)
        .map(|(pred, view)| {
            let mut g = Image::zeros(pred.width, pred.height, 1);
            if weights.density_map > 0.0 {
                let scale = weights.density_map / predicted_maps.len() as f64;
                for (o, d) in g.data.iter_mut().zip(mse_grad(&pred.data, &view.density_map.data)) {
                    *o = scale * d;
                }
            }
            g
        })
        .collect();
    let samples = if weights.density_volume > 0.0 && !sample_density.is_empty() {
        mse_grad(sample_density, sample_target)
            .into_iter()
            .map(|g| g * weights.density_volume)
            .collect()
    } else {
        vec![0.0; sample_density.len()]
    };
    (maps, samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SslTerms {
    pub rendered_density: f64,
    pub depth: f64,
    pub rgb: f64,
    pub depth_valid_rays: usize,
    pub weighted: f64,
}

/// Self-supervised loss over the sampled rays.
pub fn ssl_loss(
    predictions: &[RayPrediction],
    targets: &[RayTarget],
    weights: &LossWeights,
) -> Result<SslTerms> {
    if predictions.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = predictions.len() as f64;
    let mut terms = SslTerms {
        depth_valid_rays: targets.iter().filter(|t| t.depth_valid).count(),
        ..Default::default()
    };
    if weights.rendered_density > 0.0 {
        terms.rendered_density = predictions
            .iter()
            .zip(targets)
            .map(|(p, t)| (p.density - t.encoder_density).powi(2))
            .sum::<f64>()
            / n;
    }
    if weights.depth > 0.0 && terms.depth_valid_rays > 0 {
        terms.depth = predictions
            .iter()
            .zip(targets)
            .filter(|(_, t)| t.depth_valid)
            .map(|(p, t)| (p.depth - t.depth).powi(2))
            .sum::<f64>()
            / terms.depth_valid_rays as f64;
    }
    if weights.rgb > 0.0 {
        terms.rgb = predictions
            .iter()
            .zip(targets)
            .map(|(p, t)| (0..3).map(|k| (p.color[k] - t.color[k]).powi(2)).sum::<f64>())
            .sum::<f64>()
            / (3.0 * n);
    }
    terms.weighted = weights.rendered_density * terms.rendered_density
        + weights.depth * terms.depth
        + weights.rgb * terms.rgb;
    Ok(terms)
}

/// Gradient of [`ssl_loss`] with respect to each ray's prediction.
pub fn ssl_loss_grad(
    predictions: &[RayPrediction],
    targets: &[RayTarget],
    weights: &LossWeights,
) -> Vec<RayPrediction> {
    let n = predictions.len() as f64;
    let valid = targets.iter().filter(|t| t.depth_valid).count();
    predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            let mut g = RayPrediction::default();
            if weights.rendered_density > 0.0 {
                g.density = weights.rendered_density * 2.0 * (p.density - t.encoder_density) / n;
            }
            if weights.depth > 0.0 && t.depth_valid {
                g.depth = weights.depth * 2.0 * (p.depth - t.depth) / valid as f64;
            }
            if weights.rgb > 0.0 {
                for k in 0..3 {
                    g.color[k] = weights.rgb * 2.0 * (p.color[k] - t.color[k]) / (3.0 * n);
                }
            }
            g
        })
        .collect()
}

/// Combined objective. Unlabeled batches drop the supervised terms.
pub fn total_loss(
    fsl: Option<FslTerms>,
    ssl: Option<SslTerms>,
    rays: usize,
) -> LossReport {
    let fsl = fsl.unwrap_or_default();
    let ssl = ssl.unwrap_or_default();
    LossReport {
        density_map: fsl.density_map,
        density_volume: fsl.density_volume,
        rendered_density: ssl.rendered_density,
        depth: ssl.depth,
        rgb: ssl.rgb,
        fsl: fsl.weighted,
        ssl: ssl.weighted,
        total: fsl.weighted + ssl.weighted,
        depth_valid_rays: ssl.depth_valid_rays,
        rays,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{BoundingBox, FeatureVolume};

    fn bundle_with_map(map: Image) -> SupervisionBundle {
        let (w, h) = (map.width * 4, map.height * 4);
        SupervisionBundle {
            views: vec![ViewSupervision {
                density_map: map,
                rgb: Image::zeros(w, h, 3),
                depth: Image::zeros(w, h, 1),
                accumulation: Image::zeros(w, h, 1),
            }],
            density_volume: DensityVolume::new(FeatureVolume::zeros([2, 2, 2], 1, BoundingBox::unit()))
                .unwrap(),
        }
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 2.5);
        assert!(matches!(mse(&[], &[]), Err(Error::EmptyInput)));
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn fsl_examples() {
        let mut map = Image::zeros(2, 2, 1);
        map.data = vec![0.1, 0.2, 0.3, 0.4];
        let bundle = bundle_with_map(map.clone());
        let w = LossWeights::default();
        let perfect = fsl_loss(&[map.clone()], &bundle, &[0.5], &[0.5], &w).unwrap();
        assert_eq!(perfect.weighted, 0.0);

        let off = LossWeights {
            density_map: 0.0,
            density_volume: 0.0,
            ..w
        };
        assert_eq!(fsl_loss(&[Image::zeros(2, 2, 1)], &bundle, &[9.0], &[0.0], &off).unwrap().weighted, 0.0);

        let lam = LossWeights {
            density_volume: 0.7,
            ..w
        };
        let t = fsl_loss(&[map], &bundle, &[1.0], &[0.0], &lam).unwrap();
        assert!((t.weighted - 0.7).abs() < 1e-15);
    }

    #[test]
    fn ssl_examples() {
        let pred = RayPrediction {
            depth: 1.0,
            color: [0.2, 0.4, 0.6],
            density: 0.3,
        };
        let exact = RayTarget {
            encoder_density: 0.3,
            depth: 1.0,
            depth_valid: true,
            color: [0.2, 0.4, 0.6],
        };
        let w = LossWeights::default();
        assert_eq!(ssl_loss(&[pred], &[exact], &w).unwrap().weighted, 0.0);

        let depth_only = LossWeights {
            rendered_density: 0.0,
            rgb: 0.0,
            ..w
        };
        let target = RayTarget { depth: 2.0, ..exact };
        assert_eq!(ssl_loss(&[pred], &[target], &depth_only).unwrap().weighted, 1.0);

        let invalid = RayTarget {
            depth_valid: false,
            ..target
        };
        let t = ssl_loss(&[pred], &[invalid], &depth_only).unwrap();
        assert_eq!((t.weighted, t.depth_valid_rays), (0.0, 0));
        assert!(matches!(ssl_loss(&[], &[], &w), Err(Error::EmptyInput)));
    }

    #[test]
    fn disabled_terms_have_no_gradient() {
        let pred = RayPrediction {
            depth: 1.3,
            color: [0.9, 0.1, 0.5],
            density: 0.8,
        };
        let target = RayTarget {
            encoder_density: 0.1,
            depth: 0.4,
            depth_valid: true,
            color: [0.0; 3],
        };
        let w = LossWeights {
            depth: 0.0,
            ..Default::default()
        };
        let g = ssl_loss_grad(&[pred], &[target], &w);
        assert_eq!(g[0].depth, 0.0);
        assert!(g[0].density != 0.0 && g[0].color[0] != 0.0);
    }

    #[test]
    fn totals_and_masks() {
        let fsl = FslTerms {
            density_map: 0.5,
            density_volume: 2.0,
            weighted: 2.5,
        };
        let ssl = SslTerms {
            rendered_density: 0.25,
            depth: 1.0,
            rgb: 0.125,
            depth_valid_rays: 3,
            weighted: 1.375,
        };
        let r = total_loss(Some(fsl), Some(ssl), 4);
        let five = r.density_map + r.density_volume + r.rendered_density + r.depth + r.rgb;
        assert!((r.total - five).abs() < 1e-12);
        assert!((r.total - (r.fsl + r.ssl)).abs() < 1e-12);
        let unlabeled = total_loss(None, Some(ssl), 4);
        assert_eq!(unlabeled.total, unlabeled.ssl);
        assert_eq!(total_loss(None, None, 0).total, 0.0);
    }

    #[test]
    fn grad_matches_finite_differences() {
        let preds = [
            RayPrediction { depth: 1.3, color: [0.9, 0.1, 0.5], density: 0.8 },
            RayPrediction { depth: 0.2, color: [0.3, 0.6, 0.2], density: 0.1 },
        ];
        let targets = [
            RayTarget { encoder_density: 0.1, depth: 0.4, depth_valid: true, color: [0.0; 3] },
            RayTarget { encoder_density: 0.5, depth: 0.9, depth_valid: false, color: [1.0; 3] },
        ];
        let w = LossWeights { depth: 0.5, rgb: 2.0, ..Default::default() };
        let g = ssl_loss_grad(&preds, &targets, &w);
        let h = 1e-6;
        let f = |p: &[RayPrediction]| ssl_loss(p, &targets, &w).unwrap().weighted;
        for r in 0..2 {
            let mut a = preds;
            a[r].depth += h;
            let mut b = preds;
            b[r].depth -= h;
            assert!(((f(&a) - f(&b)) / (2.0 * h) - g[r].depth).abs() < 1e-8);
            let mut a = preds;
            a[r].color[1] += h;
            let mut b = preds;
            b[r].color[1] -= h;
            assert!(((f(&a) - f(&b)) / (2.0 * h) - g[r].color[1]).abs() < 1e-8);
        }
    }
}
