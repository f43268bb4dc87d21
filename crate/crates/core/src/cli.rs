//! Command-line pipeline: `degrade`, `restore`, `ablate` and `metrics`.
//!
//! A degradation directory holds `obs/` (PNG previews), `observations.f32`
//! (exact values), `gt/` (the clean frames) and `degrade.json` (operator
//! parameters). `restore` and `ablate` read such a directory, or a plain
//! directory of observation PNGs when `--task` and the operator flags are given.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{ContentConstraint, DistanceNorm};
use crate::denoiser::unet::{UNetArch, WeightSource};
use crate::denoiser::{EpsilonModel, OracleDenoiser, ShrinkageDenoiser, TinyUNet, TinyUNetSpec};
use crate::error::{Error, Result};
use crate::flow::{FlowParams, OcclusionMask};
use crate::io;
use crate::metrics::MetricsReport;
use crate::operators::{
    awgn, blur_conv, estimate_gain_blind, gaussian_kernel, grayscale, inpaint_mask, low_light, random_mask,
    sr_avgpool, DegradationOperator, Task,
};
use crate::sampler::{ablation_run, restore_video, AblationTable, FlowSource, RunManifest, SamplerConfig};
use crate::video::VideoTensor;

pub const DEGRADE_RECORD: &str = "degrade.json";
pub const OBSERVATION_BLOB: &str = "observations";
pub const DEFAULT_BLUR_SIZE: usize = 9;
pub const DEFAULT_BLUR_SIGMA: f64 = 2.0;
pub const DEFAULT_GAIN: f64 = 0.25;
pub const DEFAULT_NOISE_SIGMA: f64 = 50.0 / 255.0;
pub const DEFAULT_MISSING: f64 = 0.25;
/// Mean intensity assumed for a well-exposed frame when the gain is unknown.
pub const TARGET_MEAN_INTENSITY: f64 = 0.5;

#[derive(Debug, Parser)]
#[command(name = "zvrd", version, about = "Zero-shot video restoration with temporally coupled diffusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize degraded observations from clean frames.
    Degrade(DegradeArgs),
    /// Restore a degraded video.
    Restore(RunArgs),
    /// Run the five-row mechanism ablation.
    Ablate(RunArgs),
    /// Score restored frames against ground truth.
    Metrics(MetricsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintChoice {
    /// Null-space projection.
    Ddnm,
    /// Gradient of the squared distance.
    Gdp,
    /// Same update as `gdp`.
    Dps,
}

impl ConstraintChoice {
    pub fn constraint(self) -> ContentConstraint {
        match self {
            ConstraintChoice::Ddnm => ContentConstraint::projection(),
            ConstraintChoice::Gdp | ConstraintChoice::Dps => ContentConstraint::gradient(DistanceNorm::L2Squared),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DenoiserChoice {
    Shrinkage,
    Unet,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Sr2,
    Sr4,
    Inpaint,
    Color,
    Deblur,
    Denoise,
    Lowlight,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Sr2 => Task::Sr2,
            TaskArg::Sr4 => Task::Sr4,
            TaskArg::Inpaint => Task::Inpaint,
            TaskArg::Color => Task::Color,
            TaskArg::Deblur => Task::Deblur,
            TaskArg::Denoise => Task::Denoise,
            TaskArg::Lowlight => Task::Lowlight,
        }
    }
}

/// Operator parameters shared by `degrade` and by `restore` on plain inputs.
#[derive(Debug, Clone, Default, Args)]
pub struct OperatorArgs {
    /// Inpainting mask PNG (0 = missing).
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Fraction of pixels dropped by a random inpainting mask.
    #[arg(long)]
    pub missing: Option<f64>,
    /// Blur kernel text file (one row per line).
    #[arg(long)]
    pub kernel: Option<PathBuf>,
    /// Low-light gain on [0, 1] intensities.
    #[arg(long)]
    pub gain: Option<f64>,
    /// Noise standard deviation on [0, 1] intensities.
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct DegradeArgs {
    /// Directory of clean frame_%05d.png files.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum)]
    pub task: TaskArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub operator: OperatorArgs,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Degradation directory, or a directory of observation PNGs.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Flat JSON file of settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long, value_enum)]
    pub constraint: Option<ConstraintChoice>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of diffusion steps T.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub ttc: Option<usize>,
    #[arg(long)]
    pub tes: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Temporal guidance scale s.
    #[arg(long)]
    pub scale: Option<f64>,
    /// Content guidance scale (gradient constraints).
    #[arg(long)]
    pub content_scale: Option<f64>,
    #[arg(long, overrides_with = "no_early_stop")]
    pub early_stop: bool,
    #[arg(long)]
    pub no_early_stop: bool,
    #[arg(long)]
    pub no_attention: bool,
    #[arg(long)]
    pub no_noise_sharing: bool,
    #[arg(long)]
    pub no_warp_noise: bool,
    #[arg(long)]
    pub literal_algo1: bool,
    #[arg(long, value_enum)]
    pub denoiser: Option<DenoiserChoice>,
    /// Shrinkage denoiser strength.
    #[arg(long)]
    pub strength: Option<f64>,
    /// U-Net weight manifest (seeded weights otherwise).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Directory of flow_%05d.flo files (and optional mask_%05d.png) for
    /// frame pairs (i-1, i), i >= 1.
    #[arg(long)]
    pub flow_dir: Option<PathBuf>,
    /// Ground-truth frames for metrics (defaults to `<input>/gt` if present).
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Report path (defaults to `<output>/report.json`).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Keep per-step wall-clock times in the report.
    #[arg(long)]
    pub timings: bool,
    #[command(flatten)]
    pub operator: OperatorArgs,
}

#[derive(Debug, Clone, Args)]
pub struct MetricsArgs {
    /// Restored frames.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Frames the warping-error flow is estimated on (defaults to `--gt`).
    #[arg(long)]
    pub flow_source: Option<PathBuf>,
    /// CSV destination (stdout otherwise).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// Settings accepted in a `--config` file. Every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub task: Option<Task>,
    pub steps: Option<usize>,
    pub t_tc: Option<usize>,
    pub t_es: Option<usize>,
    pub early_stop: Option<bool>,
    pub lambda: Option<f64>,
    pub s: Option<f64>,
    pub s_content: Option<f64>,
    pub charbonnier_eps: Option<f64>,
    pub constraint: Option<ConstraintChoice>,
    pub attention: Option<bool>,
    pub share_noise: Option<bool>,
    pub warp_noise: Option<bool>,
    pub literal_algo1: Option<bool>,
    pub seed: Option<u64>,
    pub denoiser: Option<DenoiserChoice>,
    pub strength: Option<f64>,
    pub weights: Option<PathBuf>,
    pub flow_levels: Option<usize>,
    pub flow_window: Option<usize>,
    pub flow_iterations: Option<usize>,
}

macro_rules! overlay {
    ($base:expr, $top:expr, $($field:ident),*) => {
        $( if $top.$field.is_some() { $base.$field = $top.$field.clone(); } )*
    };
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Values of `top` replace those of `self` where set.
    pub fn overlay(mut self, top: &ConfigFile) -> Self {
        overlay!(
            self, top, task, steps, t_tc, t_es, early_stop, lambda, s, s_content, charbonnier_eps, constraint,
            attention, share_noise, warp_noise, literal_algo1, seed, denoiser, strength, weights, flow_levels,
            flow_window, flow_iterations
        );
        self
    }

    /// The keys that are set, as JSON.
    pub fn to_map(&self) -> serde_json::Map<String, serde_json::Value> {
        match serde_json::to_value(self) {
            Ok(serde_json::Value::Object(mut m)) => {
                m.retain(|_, v| !v.is_null());
                m
            }
            _ => serde_json::Map::new(),
        }
    }

    /// Sampler settings for `op`. Early stopping defaults to the task's
    /// convention and the constraint to projection when `op` supports it.
    pub fn sampler_config(&self, task: Task, op: &dyn DegradationOperator) -> SamplerConfig {
        let d = SamplerConfig::default();
        let constraint = match self.constraint {
            Some(c) => c.constraint(),
            None if op.has_pseudo_inverse() => ContentConstraint::projection(),
            None => ConstraintChoice::Gdp.constraint(),
        };
        SamplerConfig {
            steps: self.steps.unwrap_or(d.steps),
            t_tc: self.t_tc.unwrap_or(d.t_tc),
            t_es: self.t_es.unwrap_or(d.t_es),
            early_stop: self.early_stop.unwrap_or(task.early_stop_by_default()),
            lambda: self.lambda.unwrap_or(d.lambda),
            s: self.s.unwrap_or(d.s),
            s_content: self.s_content.unwrap_or(d.s_content),
            charbonnier_eps: self.charbonnier_eps.unwrap_or(d.charbonnier_eps),
            constraint,
            attention: self.attention.unwrap_or(d.attention),
            share_noise: self.share_noise.unwrap_or(d.share_noise),
            warp_noise: self.warp_noise.unwrap_or(d.warp_noise),
            literal_algo1: self.literal_algo1.unwrap_or(d.literal_algo1),
            seed: self.seed.unwrap_or(d.seed),
            flow: FlowParams {
                levels: self.flow_levels.unwrap_or(d.flow.levels),
                window: self.flow_window.unwrap_or(d.flow.window),
                iterations: self.flow_iterations.unwrap_or(d.flow.iterations),
                ..d.flow
            },
        }
    }
}

impl RunArgs {
    /// The settings given as flags.
    pub fn flag_config(&self) -> ConfigFile {
        let early_stop = if self.early_stop {
            Some(true)
        } else if self.no_early_stop {
            Some(false)
        } else {
            None
        };
        let off = |flag: bool| flag.then_some(false);
        ConfigFile {
            task: self.task.map(Task::from),
            steps: self.steps,
            t_tc: self.ttc,
            t_es: self.tes,
            early_stop,
            lambda: self.lambda,
            s: self.scale,
            s_content: self.content_scale,
            constraint: self.constraint,
            attention: off(self.no_attention),
            share_noise: off(self.no_noise_sharing),
            warp_noise: off(self.no_warp_noise),
            literal_algo1: self.literal_algo1.then_some(true),
            seed: self.seed,
            denoiser: self.denoiser,
            strength: self.strength,
            weights: self.weights.clone(),
            ..ConfigFile::default()
        }
    }

    /// File settings overlaid with flag settings.
    pub fn merged_config(&self) -> Result<ConfigFile> {
        let file = match &self.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        Ok(file.overlay(&self.flag_config()))
    }
}

/// Parameters needed to rebuild the operator used by `degrade`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OperatorParams {
    /// Mask PNG, relative to the degradation directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gain: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

/// Contents of `degrade.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradeRecord {
    pub task: Task,
    pub frames: usize,
    /// Clean frame shape `(height, width, channels)`.
    pub input_shape: (usize, usize, usize),
    pub observation_shape: (usize, usize, usize),
    pub params: OperatorParams,
    pub manifest: RunManifest,
}

/// Maps an error to the process exit status.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numerical { .. } => 3,
        _ => 1,
    }
}

/// Sizes the global thread pool from `ZVRD_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("ZVRD_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(format!("ZVRD_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config(format!("cannot size thread pool: {e}")))
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Degrade(a) => cmd_degrade(a),
        Command::Restore(a) => cmd_restore(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Metrics(a) => cmd_metrics(a),
    }
}

fn timestamp() -> Result<u64> {
    match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("SOURCE_DATE_EPOCH must be an integer, got '{v}'"))),
        Err(_) => Ok(SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)),
    }
}

fn manifest(
    command: &str,
    input: &Path,
    output: &Path,
    task: Task,
    denoiser: &str,
    overrides: serde_json::Map<String, serde_json::Value>,
    seed: u64,
) -> Result<RunManifest> {
    Ok(RunManifest {
        command: command.to_string(),
        input_dir: input.display().to_string(),
        output_dir: output.display().to_string(),
        task: task.name().to_string(),
        denoiser: denoiser.to_string(),
        overrides,
        seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp: timestamp()?,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::input(path, e.to_string()))
}

fn check_fraction(name: &str, v: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(Error::config(format!("{name} must be in [0, 1], got {v}")))
    }
}

fn load_mask(path: &Path, h: usize, w: usize) -> Result<Vec<f64>> {
    let (mh, mw, values) = io::read_mask(path)?;
    if (mh, mw) != (h, w) {
        return Err(Error::input(path, format!("mask is {mh}x{mw}, frames are {h}x{w}")));
    }
    Ok(values)
}

/// Builds the operator for `task` on clean frames of height `h` and width `w`.
/// `base` resolves relative mask paths.
fn build_operator(
    task: Task,
    params: &OperatorParams,
    base: &Path,
    h: usize,
    w: usize,
) -> Result<Box<dyn DegradationOperator>> {
    Ok(match task {
        Task::Sr2 => Box::new(sr_avgpool(2)?),
        Task::Sr4 => Box::new(sr_avgpool(4)?),
        Task::Color => Box::new(grayscale()),
        Task::Inpaint => {
            let name = params
                .mask
                .as_ref()
                .ok_or_else(|| Error::config("inpainting needs a mask (--mask)"))?;
            Box::new(inpaint_mask(h, w, load_mask(&base.join(name), h, w)?)?)
        }
        Task::Deblur => Box::new(blur_conv(
            params
                .kernel
                .clone()
                .unwrap_or_else(|| gaussian_kernel(DEFAULT_BLUR_SIZE, DEFAULT_BLUR_SIGMA)),
        )?),
        Task::Denoise => Box::new(awgn(params.sigma.unwrap_or(DEFAULT_NOISE_SIGMA))?),
        Task::Lowlight => Box::new(low_light(params.gain.unwrap_or(DEFAULT_GAIN))?),
    })
}

pub fn cmd_degrade(a: &DegradeArgs) -> Result<()> {
    let task = Task::from(a.task);
    let gt = io::read_frames(&a.input)?;
    let (h, w, c) = gt.frame_shape();
    create_dir(&a.output)?;
    let o = &a.operator;
    let mut params = OperatorParams::default();
    match task {
        Task::Inpaint => {
            let mask = match (&o.mask, o.missing) {
                (Some(_), Some(_)) => return Err(Error::config("give either --mask or --missing, not both")),
                (Some(p), None) => load_mask(p, h, w)?,
                (None, m) => random_mask(h, w, check_fraction("missing", m.unwrap_or(DEFAULT_MISSING))?, a.seed),
            };
            io::write_mask(&a.output.join("mask.png"), h, w, &mask)?;
            params.mask = Some("mask.png".to_string());
        }
        Task::Deblur => {
            params.kernel = Some(match &o.kernel {
                Some(p) => io::read_kernel(p)?,
                None => gaussian_kernel(DEFAULT_BLUR_SIZE, DEFAULT_BLUR_SIGMA),
            });
        }
        Task::Denoise => params.sigma = Some(o.sigma.unwrap_or(DEFAULT_NOISE_SIGMA)),
        Task::Lowlight => params.gain = Some(o.gain.unwrap_or(DEFAULT_GAIN)),
        Task::Sr2 | Task::Sr4 | Task::Color => {}
    }
    let op = build_operator(task, &params, &a.output, h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let obs = gt
        .frames()
        .iter()
        .map(|f| {
            let frame_seed: u64 = rng.random();
            op.degrade(f, frame_seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let obs = VideoTensor::new(obs)?;

    io::write_frames(&a.output.join("obs"), &obs)?;
    io::write_blob(&a.output, OBSERVATION_BLOB, &obs)?;
    let gt_dir = a.output.join("gt");
    create_dir(&gt_dir)?;
    for i in 0..gt.len() {
        let (src, dst) = (a.input.join(io::frame_name(i)), gt_dir.join(io::frame_name(i)));
        fs::copy(&src, &dst).map_err(|e| Error::io(&src, e))?;
    }
    let mut overrides = serde_json::Map::new();
    if let Some(p) = &o.mask {
        overrides.insert("mask".into(), p.display().to_string().into());
    }
    if let Some(m) = o.missing {
        overrides.insert("missing".into(), m.into());
    }
    if let Some(p) = &o.kernel {
        overrides.insert("kernel".into(), p.display().to_string().into());
    }
    if let Some(g) = o.gain {
        overrides.insert("gain".into(), g.into());
    }
    if let Some(s) = o.sigma {
        overrides.insert("sigma".into(), s.into());
    }
    let record = DegradeRecord {
        task,
        frames: gt.len(),
        input_shape: (h, w, c),
        observation_shape: obs.frame_shape(),
        params,
        manifest: manifest("degrade", &a.input, &a.output, task, "none", overrides, a.seed)?,
    };
    write_text(&a.output.join(DEGRADE_RECORD), &to_json(&record))
}

/// Everything a restoration run needs, resolved from the inputs and settings.
struct Prepared {
    task: Task,
    obs: VideoTensor,
    gt: Option<VideoTensor>,
    op: Box<dyn DegradationOperator>,
    cfg: SamplerConfig,
    model: Box<dyn EpsilonModel>,
    flow: FlowSource,
    settings: ConfigFile,
}

fn load_observations(input: &Path) -> Result<VideoTensor> {
    if io::has_blob(input, OBSERVATION_BLOB) {
        io::read_blob(input, OBSERVATION_BLOB)
    } else if input.join("obs").is_dir() {
        io::read_frames(&input.join("obs"))
    } else {
        io::read_frames(input)
    }
}

fn load_external_flow(dir: &Path, n: usize, h: usize, w: usize) -> Result<FlowSource> {
    let mut pairs = Vec::with_capacity(n.saturating_sub(1));
    for i in 1..n {
        let path = dir.join(io::flow_name(i));
        let flow = io::read_flo(&path)?;
        if (flow.height(), flow.width()) != (h, w) {
            return Err(Error::input(
                &path,
                format!("flow is {}x{}, frames are {h}x{w}", flow.height(), flow.width()),
            ));
        }
        let mask_path = dir.join(io::mask_name(i));
        let mask = if mask_path.exists() {
            OcclusionMask::new(h, w, load_mask(&mask_path, h, w)?)?
        } else {
            OcclusionMask::ones(h, w)
        };
        pairs.push((flow, mask));
    }
    Ok(FlowSource::External(pairs))
}

fn prepare(a: &RunArgs) -> Result<Prepared> {
    let record_path = a.input.join(DEGRADE_RECORD);
    let record: Option<DegradeRecord> = if record_path.exists() {
        Some(read_json(&record_path)?)
    } else {
        None
    };
    let settings = a.merged_config()?;
    let task = match (&record, settings.task) {
        (Some(r), Some(t)) if r.task != t => {
            return Err(Error::config(format!(
                "task {} conflicts with the degradation record ({})",
                t.name(),
                r.task.name()
            )))
        }
        (Some(r), _) => r.task,
        (None, Some(t)) => t,
        (None, None) => return Err(Error::config("no degradation record in the input; --task is required")),
    };
    let obs = load_observations(&a.input)?;
    let gt_dir = a.gt.clone().or_else(|| Some(a.input.join("gt")).filter(|p| p.is_dir()));
    let gt = gt_dir.as_deref().map(io::read_frames).transpose()?;

    let (h, w, c) = match (&record, &gt) {
        (Some(r), _) => r.input_shape,
        (None, Some(g)) => g.frame_shape(),
        (None, None) => {
            let (oh, ow, oc) = obs.frame_shape();
            match task {
                Task::Sr2 => (oh * 2, ow * 2, oc),
                Task::Sr4 => (oh * 4, ow * 4, oc),
                Task::Color => (oh, ow, 3),
                _ => (oh, ow, oc),
            }
        }
    };
    let op = match &record {
        Some(r) => build_operator(task, &r.params, &a.input, h, w)?,
        None => {
            let o = &a.operator;
            let gain = match (task, o.gain) {
                (Task::Lowlight, None) => Some(estimate_gain_blind(&obs.frames()[0], TARGET_MEAN_INTENSITY)?),
                (_, g) => g,
            };
            let params = OperatorParams {
                mask: o.mask.as_ref().map(|p| p.display().to_string()),
                kernel: o.kernel.as_deref().map(io::read_kernel).transpose()?,
                gain,
                sigma: o.sigma,
            };
            build_operator(task, &params, Path::new(""), h, w)?
        }
    };
    if let Some(g) = &gt {
        if g.len() != obs.len() || g.frame_shape() != (h, w, c) {
            return Err(Error::config(format!(
                "ground truth has {} frames of {:?}, expected {} of {:?}",
                g.len(),
                g.frame_shape(),
                obs.len(),
                (h, w, c)
            )));
        }
    }

    let cfg = settings.sampler_config(task, op.as_ref());
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    let model: Box<dyn EpsilonModel> = match settings.denoiser.unwrap_or(DenoiserChoice::Shrinkage) {
        DenoiserChoice::Shrinkage => Box::new(ShrinkageDenoiser::new(schedule, settings.strength.unwrap_or(1.0))?),
        DenoiserChoice::Oracle => {
            let truth = gt
                .clone()
                .ok_or_else(|| Error::config("the oracle denoiser needs ground truth (--gt)"))?;
            Box::new(OracleDenoiser::new(schedule, truth))
        }
        DenoiserChoice::Unet => {
            let weights = match &settings.weights {
                Some(p) => WeightSource::File(p.clone()),
                None => WeightSource::Seed(cfg.seed),
            };
            let arch = UNetArch {
                in_channels: c,
                ..UNetArch::default()
            };
            Box::new(TinyUNet::from_spec(&TinyUNetSpec { arch, weights })?)
        }
    };
    let flow = match &a.flow_dir {
        Some(d) => load_external_flow(d, obs.len(), h, w)?,
        None => FlowSource::Internal,
    };
    Ok(Prepared {
        task,
        obs,
        gt,
        op,
        cfg,
        model,
        flow,
        settings,
    })
}

pub fn cmd_restore(a: &RunArgs) -> Result<()> {
    let p = prepare(a)?;
    let (out, report) = restore_video(&p.obs, p.op.as_ref(), p.model.as_ref(), &p.cfg, &p.flow)?;
    let mut report = if a.timings { report } else { report.without_timings() };
    create_dir(&a.output)?;
    io::write_frames(&a.output, &out)?;
    if let Some(gt) = &p.gt {
        let m = MetricsReport::compute(&out, gt, gt, &FlowParams::default())?;
        write_text(&a.output.join("metrics.csv"), &m.to_csv())?;
        report.metrics = Some(m);
    }
    report.manifest = Some(manifest(
        "restore",
        &a.input,
        &a.output,
        p.task,
        p.model.name(),
        p.settings.to_map(),
        p.cfg.seed,
    )?);
    let path = a.report.clone().unwrap_or_else(|| a.output.join("report.json"));
    write_text(&path, &to_json(&report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub table: AblationTable,
    pub config: SamplerConfig,
    pub manifest: RunManifest,
}

pub fn cmd_ablate(a: &RunArgs) -> Result<()> {
    let p = prepare(a)?;
    let (table, _) = ablation_run(&p.obs, p.op.as_ref(), p.model.as_ref(), &p.cfg, &p.flow, p.gt.as_ref())?;
    create_dir(&a.output)?;
    write_text(&a.output.join("ablation.csv"), &table.to_csv())?;
    let report = AblationReport {
        table,
        config: p.cfg,
        manifest: manifest(
            "ablate",
            &a.input,
            &a.output,
            p.task,
            p.model.name(),
            p.settings.to_map(),
            p.cfg.seed,
        )?,
    };
    let path = a.report.clone().unwrap_or_else(|| a.output.join("ablation.json"));
    write_text(&path, &to_json(&report))
}

pub fn cmd_metrics(a: &MetricsArgs) -> Result<()> {
    let out = io::read_frames(&a.input)?;
    let gt = io::read_frames(&a.gt)?;
    let source = match &a.flow_source {
        Some(d) => io::read_frames(d)?,
        None => gt.clone(),
    };
    let csv = MetricsReport::compute(&out, &gt, &source, &FlowParams::default())?.to_csv();
    match &a.output {
        Some(p) => write_text(p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}
