//! The `mvcount` command-line tool.
//!
//! Every subcommand reads an optional JSON [`RunConfig`], applies the global
//! flags and writes its products under `--out`. Failures print one JSON
//! record `{"error": kind, "message": text}` on stderr; the exit code is 1
//! for invalid input or a failed check and 2 for filesystem or file-format
//! problems.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::dataset::{load_dataset, load_scene, Dataset};
use crate::error::Error;
use crate::geometry::CameraModel;
use crate::grad::{gradcheck, GradcheckConfig};
use crate::image::{encode_pfm, encode_ppm};
use crate::model::{render_view, scene_forward, PreparedScene};
use crate::synth::{generate_dataset, scene_dir, write_file_atomic, SynthConfig};
use crate::trainer::{
    ablate, evaluate, train, AblationCell, AblationMatrix, EvalSplit, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(name = "mvcount", version, about = "Multi-view crowd counting with an SDF volume renderer")]
pub struct Cli {
    /// JSON run config; every field is optional.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice; overrides `seed` in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run on a single worker thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth,
    /// Train on a dataset and write a checkpoint plus the metric log.
    Train {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Render RGB, depth and density for one camera.
    Render {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        camera: PathBuf,
        /// Dataset holding the scene whose images feed the encoder.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Scene id; defaults to the first scene of the dataset.
        #[arg(long)]
        scene: Option<String>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck,
    /// Train an ablation matrix and tabulate median errors.
    Ablate {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderOptions {
    pub samples: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions { samples: 64 }
    }
}

/// Ablation settings; the base training config is `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationOptions {
    pub seeds: Vec<u64>,
    pub eval_split: EvalSplit,
    pub cells: Vec<AblationCell>,
}

impl Default for AblationOptions {
    fn default() -> Self {
        let m = AblationMatrix::default();
        AblationOptions {
            seeds: m.seeds,
            eval_split: m.eval_split,
            cells: m.cells,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed. When set (here or by `--seed`) it replaces `train.seed`
    /// and offsets the ablation seeds.
    pub seed: Option<u64>,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub render: RenderOptions,
    pub gradcheck: GradcheckConfig,
    pub ablation: AblationOptions,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn train_config(&self) -> TrainConfig {
        let mut cfg = self.train.clone();
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg
    }

    fn ablation_matrix(&self) -> AblationMatrix {
        let offset = self.seed.unwrap_or(0);
        AblationMatrix {
            base: self.train.clone(),
            seeds: self.ablation.seeds.iter().map(|s| s.wrapping_add(offset)).collect(),
            eval_split: self.ablation.eval_split,
            cells: self.ablation.cells.clone(),
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
    CheckFailed(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Run(e) => e.kind(),
            CliError::CheckFailed(_) => "check_failed",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Run(e) if e.is_io() => 2,
            _ => 1,
        }
    }

    pub fn message(&self) -> String {
        match self {
            CliError::Usage(m) | CliError::CheckFailed(m) => m.clone(),
            CliError::Run(e) => e.to_string(),
        }
    }

    /// The one-line JSON error record.
    pub fn record(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.message() }).to_string()
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let err = CliError::Usage(e.to_string().lines().next().unwrap_or("").to_string());
            eprintln!("{}", err.record());
            return err.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.record());
            e.exit_code()
        }
    }
}

fn require_out(cli: &Cli) -> Result<&Path, CliError> {
    cli.out
        .as_deref()
        .ok_or_else(|| CliError::Usage("--out is required for this subcommand".into()))
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value).expect("report serialises");
    text.push('\n');
    write_file_atomic(path, text.as_bytes())
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    if cli.sequential {
        // Fails only if a pool already exists, which then stays in use.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    let mut run = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        run.seed = cli.seed;
    }
    match &cli.command {
        Command::Synth => cmd_synth(&run, require_out(cli)?),
        Command::Train { data } => cmd_train(&run, data, require_out(cli)?),
        Command::Render {
            checkpoint,
            camera,
            data,
            scene,
        } => cmd_render(&run, checkpoint, camera, data, scene.as_deref(), require_out(cli)?),
        Command::Eval { checkpoint, data } => cmd_eval(checkpoint, data, cli.out.as_deref()),
        Command::Gradcheck => cmd_gradcheck(&run, cli.out.as_deref()),
        Command::Ablate { data } => cmd_ablate(&run, data, require_out(cli)?),
    }
}

#[derive(Serialize)]
struct SynthSummary<'a> {
    scenes: usize,
    out: &'a Path,
}

fn cmd_synth(run: &RunConfig, out: &Path) -> Result<(), CliError> {
    let manifest = generate_dataset(&run.synth, run.seed(), out)?;
    println!(
        "{}",
        serde_json::to_string(&SynthSummary {
            scenes: manifest.scenes.len(),
            out,
        })
        .expect("summary serialises")
    );
    Ok(())
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub seed: u64,
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub rendered_density_scale: f64,
    pub final_loss: f64,
}

fn cmd_train(run: &RunConfig, data: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = run.train_config();
    cfg.validate()?;
    let dataset = load_dataset(data)?;
    create_dir(out)?;
    let mut log = String::new();
    let outcome = train(&cfg, &dataset.scenes, &mut |r| {
        let line = serde_json::to_string(r).expect("log record serialises");
        eprintln!("{line}");
        log.push_str(&line);
        log.push('\n');
    })?;
    write_file_atomic(&out.join(TRAIN_LOG_FILE), log.as_bytes())?;
    write_checkpoint(
        &out.join(CHECKPOINT_FILE),
        &outcome.model,
        cfg.precision,
        Some(outcome.rendered_density_scale),
    )?;
    let (labeled, unlabeled): (Vec<_>, Vec<_>) = dataset
        .scenes
        .iter()
        .zip(&outcome.labeled)
        .partition(|(_, l)| **l);
    let summary = TrainSummary {
        steps: cfg.steps,
        seed: cfg.seed,
        labeled: labeled.into_iter().map(|(s, _)| s.id.clone()).collect(),
        unlabeled: unlabeled.into_iter().map(|(s, _)| s.id.clone()).collect(),
        rendered_density_scale: outcome.rendered_density_scale,
        final_loss: outcome.losses.last().copied().unwrap_or(f64::NAN),
    };
    write_json(&out.join(TRAIN_SUMMARY_FILE), &summary)?;
    println!("{}", serde_json::to_string(&summary).expect("summary serialises"));
    Ok(())
}

fn cmd_render(
    run: &RunConfig,
    checkpoint: &Path,
    camera: &Path,
    data: &Path,
    scene: Option<&str>,
    out: &Path,
) -> Result<(), CliError> {
    if run.render.samples < 2 {
        return Err(Error::Config("render.samples must be >= 2".into()).into());
    }
    let ckpt = read_checkpoint(checkpoint)?;
    let camera = CameraModel::load(camera)?;
    let id = match scene {
        Some(id) => id.to_string(),
        None => first_scene(data)?,
    };
    let scene = load_scene(&scene_dir(data, &id))?;
    let prepared = PreparedScene::new(&scene, &ckpt.model.config);
    let volume = scene_forward(&ckpt.model, &prepared)?.volume;
    let mut view = render_view(&volume, &ckpt.model.nets, &camera, run.render.samples, run.seed());
    // Density in density-map units when the training scale is known.
    if let Some(k) = ckpt.rendered_density_scale {
        view.density.data.iter_mut().for_each(|v| *v *= k);
    }
    create_dir(out)?;
    write_file_atomic(&out.join("rgb.ppm"), &encode_ppm(&view.rgb))?;
    write_file_atomic(&out.join("depth.pfm"), &encode_pfm(&view.depth))?;
    write_file_atomic(&out.join("density.pfm"), &encode_pfm(&view.density))?;
    write_file_atomic(&out.join("accumulation.pfm"), &encode_pfm(&view.accumulation))?;
    println!(
        "{}",
        serde_json::json!({ "scene": id, "width": camera.width, "height": camera.height })
    );
    Ok(())
}

fn first_scene(data: &Path) -> Result<String, Error> {
    let path = data.join(crate::dataset::DATASET_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: crate::dataset::DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    manifest
        .scenes
        .first()
        .cloned()
        .ok_or_else(|| Error::format(&path, "dataset has no scenes"))
}

pub const EVAL_REPORT_FILE: &str = "eval_report.json";

fn cmd_eval(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let ckpt = read_checkpoint(checkpoint)?;
    let Dataset { scenes, .. } = load_dataset(data)?;
    let report = evaluate(&ckpt.model, &scenes)?;
    if let Some(out) = out {
        create_dir(out)?;
        write_json(&out.join(EVAL_REPORT_FILE), &report)?;
    }
    println!("{}", serde_json::to_string(&report).expect("report serialises"));
    Ok(())
}

pub const GRADCHECK_FILE: &str = "gradcheck.json";

fn cmd_gradcheck(run: &RunConfig, out: Option<&Path>) -> Result<(), CliError> {
    let report = gradcheck(&run.gradcheck, run.seed())?;
    if let Some(out) = out {
        create_dir(out)?;
        write_json(&out.join(GRADCHECK_FILE), &report)?;
    }
    println!("{}", serde_json::to_string(&report).expect("report serialises"));
    if report.pass {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "max relative error {:.3e} exceeds {:.1e}",
            report.max_rel_err, report.tolerance
        )))
    }
}

pub const ABLATION_JSON_FILE: &str = "ablation.json";
pub const ABLATION_TEXT_FILE: &str = "ablation.txt";

fn cmd_ablate(run: &RunConfig, data: &Path, out: &Path) -> Result<(), CliError> {
    let matrix = run.ablation_matrix();
    matrix.base.validate()?;
    let dataset = load_dataset(data)?;
    create_dir(out)?;
    let table = ablate(&matrix, &dataset.scenes, &mut |name, seed, report| {
        eprintln!(
            "{}",
            serde_json::json!({ "cell": name, "seed": seed, "mae": report.mae, "nae": report.nae })
        );
    })?;
    let text = table.render_text();
    write_json(&out.join(ABLATION_JSON_FILE), &table)?;
    write_file_atomic(&out.join(ABLATION_TEXT_FILE), text.as_bytes())?;
    print!("{text}");
    Ok(())
}
