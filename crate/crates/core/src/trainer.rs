//! Adam training under the combined loss, count evaluation and the ablation
//! harness.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Precision;
use crate::dataset::SceneData;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{LossReport, LossWeights};
use crate::model::{
    encoder_density_at, evaluate_scene, render_view, sample_rays, scene_forward, LossSetup, Model,
    ModelConfig, PreparedScene, RenderedView,
};
use crate::seed;

const SPLIT_STREAM: u64 = 0x7370_6c69;
const INIT_STREAM: u64 = 0x696e_6974;
const STEP_STREAM: u64 = 0x7374_6570;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of steps taken so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update; advances `state.t` first.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam: {} params, {} grads, state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub adam: AdamConfig,
    /// Rays drawn from every view of a scene per step.
    pub rays_per_view: usize,
    pub samples: usize,
    pub scenes_per_step: usize,
    pub weights: LossWeights,
    pub labeled_fraction: f64,
    /// Apply the self-supervised terms to unlabeled scenes too.
    pub ssl_on_unlabeled: bool,
    /// Factor from rendered density to density-map units. `None` fits it by
    /// least squares on the labeled scenes.
    pub rendered_density_scale: Option<f64>,
    pub seed: u64,
    pub precision: Precision,
    pub log_interval: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            adam: AdamConfig::default(),
            rays_per_view: 64,
            samples: 32,
            scenes_per_step: 1,
            weights: LossWeights::default(),
            labeled_fraction: 1.0,
            ssl_on_unlabeled: true,
            rendered_density_scale: None,
            seed: 0,
            precision: Precision::F32,
            log_interval: 50,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "labeled_fraction must be in (0, 1], got {}",
                self.labeled_fraction
            )));
        }
        if self.steps == 0 || self.rays_per_view == 0 || self.samples < 2 || self.scenes_per_step == 0 {
            return Err(Error::Config(
                "steps, rays_per_view and scenes_per_step must be >= 1, samples >= 2".into(),
            ));
        }
        if !(self.adam.lr >= 0.0) || !(self.adam.eps > 0.0) {
            return Err(Error::Config("lr must be >= 0 and eps > 0".into()));
        }
        if let Some(s) = self.rendered_density_scale {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("rendered_density_scale must be >= 0, got {s}")));
            }
        }
        self.weights.validate()?;
        self.model.validate()
    }
}

/// Which scenes carry labels. Deterministic in `seed`; at least one scene is
/// labeled.
pub fn labeled_split(n: usize, fraction: f64, seed: u64) -> Vec<bool> {
    let k = ((fraction * n as f64).round() as usize).clamp(1.min(n), n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, &[SPLIT_STREAM]));
    let mut labeled = vec![false; n];
    for &i in &order[..k] {
        labeled[i] = true;
    }
    labeled
}

/// Least-squares factor `κ` with `encoder map ≈ κ · rendered` over every
/// pixel of the given scenes, using the ground-truth map and the oracle's
/// composited density.
pub fn calibrate_density_scale<'a>(scenes: impl IntoIterator<Item = &'a SceneData>) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for s in scenes {
        for (view, rendered) in s.supervision.views.iter().zip(&s.rendered_density) {
            for y in 0..rendered.height {
                for x in 0..rendered.width {
                    let e = encoder_density_at(&view.density_map, x, y);
                    let r = rendered.get(x, y, 0);
                    num += e * r;
                    den += r * r;
                }
            }
        }
    }
    if den > 0.0 {
        num / den
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    /// Mean total loss over the steps since the previous record.
    pub mean_total: f64,
    pub beta: f64,
    pub loss: LossReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub labeled: Vec<bool>,
    pub rendered_density_scale: f64,
    /// Total loss of every step.
    pub losses: Vec<f64>,
    pub log: Vec<LogRecord>,
}

pub fn initial_model(cfg: &TrainConfig, scenes: &[SceneData]) -> Result<Model> {
    let ids: Vec<String> = scenes.iter().map(|s| s.id.clone()).collect();
    let mut model = Model::initialize(&cfg.model, &ids, &mut seed::rng(cfg.seed, &[INIT_STREAM]))?;
    if cfg.precision == Precision::F32 {
        model.round_to_f32();
    }
    Ok(model)
}

/// Trains from a fresh initialisation. `on_log` sees every log record as it
/// is produced.
pub fn train(cfg: &TrainConfig, scenes: &[SceneData], on_log: &mut dyn FnMut(&LogRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::EmptyInput);
    }
    let labeled = labeled_split(scenes.len(), cfg.labeled_fraction, cfg.seed);
    let kappa = match cfg.rendered_density_scale {
        Some(k) => k,
        None => calibrate_density_scale(scenes.iter().zip(&labeled).filter(|(_, l)| **l).map(|(s, _)| s)),
    };
    // FSL-only runs never touch unlabeled scenes.
    let use_unlabeled = cfg.ssl_on_unlabeled && cfg.weights.any_ssl();
    let trainable: Vec<usize> = (0..scenes.len()).filter(|&i| labeled[i] || use_unlabeled).collect();
    let prepared: Vec<PreparedScene> = scenes.iter().map(|s| PreparedScene::new(s, &cfg.model)).collect();
    let setup = LossSetup {
        weights: cfg.weights,
        samples: cfg.samples,
        rendered_density_scale: kappa,
    };

    let mut model = initial_model(cfg, scenes)?;
    let mut params = model.flatten();
    let mut adam = AdamState::new(params.len());
    let mut rng = seed::rng(cfg.seed, &[STEP_STREAM]);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut log = Vec::new();
    let mut since_log = 0.0;
    let interval = cfg.log_interval.max(1);

    for step in 0..cfg.steps {
        let mut grad = model.zeros_like();
        let mut report = LossReport::default();
        for _ in 0..cfg.scenes_per_step {
            let idx = trainable[rng.gen_range(0..trainable.len())];
            let rays = sample_rays(&scenes[idx], cfg.rays_per_view, &mut rng);
            let eval = evaluate_scene(&model, &prepared[idx], &rays, &setup, labeled[idx], None, Some(&mut grad))
                .map_err(|e| match e {
                    Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { step: Some(step) },
                    e => e,
                })?;
            report.accumulate(&eval.report);
        }
        report.scale(1.0 / cfg.scenes_per_step as f64);
        let mut g = grad.flatten();
        if cfg.scenes_per_step > 1 {
            let s = 1.0 / cfg.scenes_per_step as f64;
            g.iter_mut().for_each(|x| *x *= s);
        }
        adam_step(&mut params, &g, &mut adam, &cfg.adam)?;
        if cfg.precision == Precision::F32 {
            for x in params.iter_mut().chain(&mut adam.m).chain(&mut adam.v) {
                *x = *x as f32 as f64;
            }
        }
        if params.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteLoss { step: Some(step) });
        }
        model.unflatten(&params);

        losses.push(report.total);
        since_log += report.total;
        if (step + 1) % interval == 0 || step + 1 == cfg.steps {
            let n = (step % interval + 1) as f64;
            let rec = LogRecord {
                step: step + 1,
                mean_total: since_log / n,
                beta: model.nets.beta(),
                loss: report,
            };
            on_log(&rec);
            log.push(rec);
            since_log = 0.0;
        }
    }
    Ok(TrainOutcome {
        model,
        labeled,
        rendered_density_scale: kappa,
        losses,
        log,
    })
}

/// Trapezoidal integral over the box of the density net evaluated at every
/// node of the scene's decoded volume.
pub fn predict_scene_count(model: &Model, scene: &SceneData) -> Result<f64> {
    let prepared = PreparedScene::new(scene, &model.config);
    let volume = scene_forward(model, &prepared)?.volume;
    let weights = volume.trapezoid_weights();
    let values: Vec<f64> = (0..volume.node_count())
        .into_par_iter()
        .map(|n| weights[n] * model.nets.phi_density(volume.node_position(n), volume.node_features(n)))
        .collect();
    Ok(values.iter().sum())
}

/// Encoder density map of every view.
pub fn predict_density_maps(model: &Model, scene: &SceneData) -> Result<Vec<Image>> {
    let prepared = PreparedScene::new(scene, &model.config);
    Ok(scene_forward(model, &prepared)?.density_maps)
}

pub fn render_scene_view(
    model: &Model,
    scene: &SceneData,
    view: usize,
    samples: usize,
    seed_base: u64,
) -> Result<RenderedView> {
    let camera = scene
        .cameras
        .get(view)
        .ok_or_else(|| Error::Config(format!("scene {} has no view {view}", scene.id)))?;
    let prepared = PreparedScene::new(scene, &model.config);
    let volume = scene_forward(model, &prepared)?.volume;
    Ok(render_view(&volume, &model.nets, camera, samples, seed_base))
}

/// `10 log10(1 / MSE)` for images in [0, 1].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let mse = crate::losses::mse(&a.data, &b.data)?;
    Ok(10.0 * (1.0 / mse).log10())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub id: String,
    pub gt: f64,
    pub pred: f64,
    pub view_gt: Vec<f64>,
    pub view_pred: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub nae: f64,
    pub view_mae: f64,
    pub view_nae: f64,
    pub scenes: Vec<SceneEval>,
}

/// `(mean |p − g|, mean |p − g| / max(g, 1))`; zeros for no pairs.
pub fn count_errors(pairs: impl IntoIterator<Item = (f64, f64)>) -> (f64, f64) {
    let (mut abs, mut rel, mut n) = (0.0, 0.0, 0usize);
    for (p, g) in pairs {
        let e = (p - g).abs();
        abs += e;
        rel += e / g.max(1.0);
        n += 1;
    }
    if n == 0 {
        (0.0, 0.0)
    } else {
        (abs / n as f64, rel / n as f64)
    }
}

impl EvalReport {
    pub fn from_scenes(scenes: Vec<SceneEval>) -> Self {
        let (mae, nae) = count_errors(scenes.iter().map(|s| (s.pred, s.gt)));
        let (view_mae, view_nae) = count_errors(
            scenes
                .iter()
                .flat_map(|s| s.view_pred.iter().copied().zip(s.view_gt.iter().copied())),
        );
        EvalReport {
            mae,
            nae,
            view_mae,
            view_nae,
            scenes,
        }
    }
}

pub fn evaluate_scene_counts(model: &Model, scene: &SceneData) -> Result<SceneEval> {
    let maps = predict_density_maps(model, scene)?;
    Ok(SceneEval {
        id: scene.id.clone(),
        gt: scene.count as f64,
        pred: predict_scene_count(model, scene)?,
        view_gt: scene.view_counts.clone(),
        view_pred: maps.iter().map(|m| m.sum()).collect(),
    })
}

pub fn evaluate<'a>(model: &Model, scenes: impl IntoIterator<Item = &'a SceneData>) -> Result<EvalReport> {
    let evals = scenes
        .into_iter()
        .map(|s| evaluate_scene_counts(model, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_scenes(evals))
}

/// Which scenes an ablation cell is scored on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    All,
    /// Scenes without labels in that run; all scenes when every scene is
    /// labeled.
    #[default]
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    pub name: String,
    #[serde(default)]
    pub labeled_fraction: Option<f64>,
    #[serde(default)]
    pub ssl_on_unlabeled: Option<bool>,
    #[serde(default)]
    pub weights: Option<LossWeights>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationMatrix {
    pub base: TrainConfig,
    pub seeds: Vec<u64>,
    pub eval_split: EvalSplit,
    pub cells: Vec<AblationCell>,
}

impl Default for AblationMatrix {
    fn default() -> Self {
        let w = LossWeights::default();
        let cell = |name: &str, fraction: f64, weights: LossWeights| AblationCell {
            name: name.into(),
            labeled_fraction: Some(fraction),
            ssl_on_unlabeled: Some(true),
            weights: Some(weights),
        };
        AblationMatrix {
            base: TrainConfig::default(),
            seeds: vec![0, 1, 2],
            eval_split: EvalSplit::Unlabeled,
            cells: vec![
                cell("70% FSL", 0.7, w.fsl_only()),
                cell("70% FSL+SSL", 0.7, w),
                cell("100% FSL", 1.0, w.fsl_only()),
                cell("100% FSL+SSL", 1.0, w),
            ],
        }
    }
}

impl AblationMatrix {
    pub fn cell_config(&self, cell: &AblationCell, seed: u64) -> TrainConfig {
        let mut cfg = self.base.clone();
        cfg.seed = seed;
        if let Some(f) = cell.labeled_fraction {
            cfg.labeled_fraction = f;
        }
        if let Some(s) = cell.ssl_on_unlabeled {
            cfg.ssl_on_unlabeled = s;
        }
        if let Some(w) = cell.weights {
            cfg.weights = w;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub labeled_fraction: f64,
    pub weights: LossWeights,
    pub seeds: Vec<u64>,
    pub reports: Vec<EvalReport>,
    pub median_mae: f64,
    pub median_nae: f64,
    pub median_view_mae: f64,
    pub median_view_nae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub eval_split: EvalSplit,
    pub rows: Vec<AblationRow>,
}

/// Median; the mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains every cell once per seed and scores it on the configured split.
pub fn ablate(
    matrix: &AblationMatrix,
    scenes: &[SceneData],
    on_run: &mut dyn FnMut(&str, u64, &EvalReport),
) -> Result<AblationTable> {
    if matrix.seeds.is_empty() || matrix.cells.is_empty() {
        return Err(Error::Config("ablation needs at least one seed and one cell".into()));
    }
    let mut rows = Vec::new();
    for cell in &matrix.cells {
        let mut reports = Vec::new();
        let mut fraction = matrix.base.labeled_fraction;
        let mut weights = matrix.base.weights;
        for &seed in &matrix.seeds {
            let cfg = matrix.cell_config(cell, seed);
            fraction = cfg.labeled_fraction;
            weights = cfg.weights;
            let out = train(&cfg, scenes, &mut |_| {})?;
            let any_unlabeled = out.labeled.iter().any(|l| !l);
            let subset = scenes
                .iter()
                .zip(&out.labeled)
                .filter(|(_, l)| matrix.eval_split == EvalSplit::All || !any_unlabeled || !**l)
                .map(|(s, _)| s);
            let report = evaluate(&out.model, subset)?;
            on_run(&cell.name, seed, &report);
            reports.push(report);
        }
        let pick = |f: fn(&EvalReport) -> f64| median(&reports.iter().map(f).collect::<Vec<_>>());
        rows.push(AblationRow {
            name: cell.name.clone(),
            labeled_fraction: fraction,
            weights,
            seeds: matrix.seeds.clone(),
            median_mae: pick(|r| r.mae),
            median_nae: pick(|r| r.nae),
            median_view_mae: pick(|r| r.view_mae),
            median_view_nae: pick(|r| r.view_nae),
            reports,
        });
    }
    Ok(AblationTable {
        eval_split: matrix.eval_split,
        rows,
    })
}

impl AblationTable {
    /// Aligned plain-text rendering, one row per cell.
    pub fn render_text(&self) -> String {
        let on = |w: f64| if w > 0.0 { "x" } else { "-" };
        let header = [
            "cell", "labeled", "dmap", "dvol", "dens", "depth", "rgb", "MAE", "NAE", "view MAE", "view NAE",
        ];
        let mut lines: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            let w = &r.weights;
            lines.push(vec![
                r.name.clone(),
                format!("{:.0}%", 100.0 * r.labeled_fraction),
                on(w.density_map).into(),
                on(w.density_volume).into(),
                on(w.rendered_density).into(),
                on(w.depth).into(),
                on(w.rgb).into(),
                format!("{:.3}", r.median_mae),
                format!("{:.4}", r.median_nae),
                format!("{:.3}", r.median_view_mae),
                format!("{:.4}", r.median_view_nae),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, l) in lines.iter().enumerate() {
            let cells: Vec<String> = l
                .iter()
                .enumerate()
                .map(|(c, s)| {
                    if c == 0 {
                        format!("{s:<w$}", w = widths[c])
                    } else {
                        format!("{s:>w$}", w = widths[c])
                    }
                })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                out.push('\n');
            }
        }
        out
    }
}
