//! Frame-sequential reverse diffusion with previous-frame coupling.
//!
//! Each frame runs its own reverse chain from the shared starting state. Frame
//! `i` reads frame `i - 1`'s cached trajectory: attention keys/values at every
//! step, and its clean-image estimates and noise fields inside the temporal
//! window `t < T_TC`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::constraints::{ConstraintMode, ContentConstraint, CHARBONNIER_EPS};
use crate::denoiser::{EpsilonModel, PrevFrameContext};
use crate::error::{Error, Result};
use crate::flow::{estimate_flow, FlowField, FlowParams, OcclusionMask};
use crate::metrics::MetricsReport;
use crate::operators::DegradationOperator;
use crate::schedule::{DiffusionSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use crate::temporal::{blend_noise, blend_noise_unwarped, tc_loss_and_grad, NoiseBank, SHARED_STREAM};
use crate::video::{Frame, Observation, VideoTensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Number of diffusion steps `T`.
    pub steps: usize,
    /// Temporal guidance and noise blending act for `t < t_tc`.
    pub t_tc: usize,
    pub t_es: usize,
    pub early_stop: bool,
    pub lambda: f64,
    /// Temporal-consistency gradient scale.
    pub s: f64,
    /// Content gradient scale (gradient constraints only).
    pub s_content: f64,
    pub charbonnier_eps: f64,
    pub constraint: ContentConstraint,
    /// Cross-previous-frame attention (self-attention when off).
    pub attention: bool,
    /// One noise stream for all frames plus flow-guided blending.
    pub share_noise: bool,
    /// Align the previous frame's noise with the flow before blending.
    pub warp_noise: bool,
    /// Re-run the previous frame without guidance for every pair instead of
    /// reusing its cached trajectory.
    pub literal_algo1: bool,
    pub seed: u64,
    pub flow: FlowParams,
}

/// Flow settings used while sampling: the photometric test is off because it
/// would mask exactly the inconsistent pixels the temporal term corrects.
pub fn guidance_flow_params() -> FlowParams {
    FlowParams {
        photometric: None,
        ..FlowParams::default()
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            t_tc: 300,
            t_es: 50,
            early_stop: true,
            lambda: 0.5,
            s: 1.0,
            s_content: 1.0,
            charbonnier_eps: CHARBONNIER_EPS,
            constraint: ContentConstraint::projection(),
            attention: true,
            share_noise: true,
            warp_noise: true,
            literal_algo1: false,
            seed: 0,
            flow: guidance_flow_params(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("T must be at least 1"));
        }
        if !(self.t_es <= self.t_tc && self.t_tc <= self.steps) {
            return Err(Error::config(format!(
                "need 0 <= T_ES <= T_TC <= T, got T_ES={} T_TC={} T={}",
                self.t_es, self.t_tc, self.steps
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        for (name, v) in [("s", self.s), ("s_content", self.s_content), ("charbonnier_eps", self.charbonnier_eps)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        self.flow.validate()
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.steps, DEFAULT_BETA_START, DEFAULT_BETA_END)
    }

    /// Step whose clean-image estimate is returned, or 0 when the chain runs
    /// to `x_0`.
    pub fn output_step(&self) -> usize {
        if self.early_stop {
            self.t_es
        } else {
            0
        }
    }

    /// Reverse transitions executed per frame.
    pub fn reverse_steps(&self) -> usize {
        self.steps - self.output_step()
    }
}

/// Where frame-to-frame correspondences come from.
#[derive(Debug, Clone, Default)]
pub enum FlowSource {
    /// Estimated on the clean-image estimates at every guided step.
    #[default]
    Internal,
    /// Fixed per pair: entry `i - 1` maps frame `i` onto frame `i - 1`.
    External(Vec<(FlowField, OcclusionMask)>),
}

/// The previous frame's trajectory as seen by the current frame.
#[derive(Debug, Clone, Default)]
pub struct FrameTrajectoryCache {
    contexts: Vec<Option<PrevFrameContext>>,
    x0: Vec<Option<Frame>>,
    noise: Vec<Option<Frame>>,
}

impl FrameTrajectoryCache {
    fn new(steps: usize) -> Self {
        Self {
            contexts: vec![None; steps + 1],
            x0: vec![None; steps + 1],
            noise: vec![None; steps + 1],
        }
    }

    pub fn context(&self, t: usize) -> Option<&PrevFrameContext> {
        self.contexts.get(t).and_then(Option::as_ref)
    }

    /// Clean-image estimate after the content constraint.
    pub fn x0(&self, t: usize) -> Option<&Frame> {
        self.x0.get(t).and_then(Option::as_ref)
    }

    /// Noise actually injected at step `t`, after blending.
    pub fn noise(&self, t: usize) -> Option<&Frame> {
        self.noise.get(t).and_then(Option::as_ref)
    }

    /// Steps with a cached clean-image estimate, descending.
    pub fn guided_steps(&self) -> Vec<usize> {
        (0..self.x0.len()).rev().filter(|&t| self.x0[t].is_some()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// Content loss of the estimate before the constraint was applied.
    pub content_loss: f64,
    /// Temporal loss, when the temporal gradient was evaluated.
    pub tc_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub reverse_steps: usize,
    /// Step of the returned estimate (0 for `x_0`).
    pub output_t: usize,
    pub steps: Vec<StepRecord>,
}

/// Provenance of a command-line run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub input_dir: String,
    pub output_dir: String,
    pub task: String,
    pub denoiser: String,
    /// Options that differ from the built-in defaults, as given.
    pub overrides: serde_json::Map<String, serde_json::Value>,
    pub seed: u64,
    pub tool_version: String,
    /// Seconds since the Unix epoch, from `SOURCE_DATE_EPOCH` when set.
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub denoiser: String,
    pub operator: String,
    pub config: SamplerConfig,
    pub frames: Vec<FrameRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<RunManifest>,
}

impl RunReport {
    /// Drops wall-clock measurements so reports compare byte for byte.
    pub fn without_timings(mut self) -> Self {
        for s in self.frames.iter_mut().flat_map(|f| f.steps.iter_mut()) {
            s.wall_ms = None;
        }
        self
    }
}

struct Run<'a> {
    cfg: &'a SamplerConfig,
    schedule: DiffusionSchedule,
    op: &'a dyn DegradationOperator,
    model: &'a dyn EpsilonModel,
    flow: &'a FlowSource,
    bank: NoiseBank,
    shape: (usize, usize, usize),
}

/// Clean-image estimate at one step after the content constraint.
struct Estimate {
    x0: Frame,
    content_grad: Option<Frame>,
    content_loss: f64,
}

fn numerical(frame: usize, t: usize, what: impl Into<String>) -> Error {
    Error::Numerical {
        frame,
        t,
        what: what.into(),
    }
}

/// Re-labels a non-finite frame rejection as a numerical failure at `(frame, t)`.
fn non_finite_as_numerical(e: Error, frame: usize, t: usize, what: &str) -> Error {
    match e {
        Error::Contract(m) if m.contains("non-finite") => numerical(frame, t, format!("{what}: {m}")),
        e => e,
    }
}

impl Run<'_> {
    fn stream(&self, i: usize) -> u64 {
        if self.cfg.share_noise {
            SHARED_STREAM
        } else {
            i as u64 + 1
        }
    }

    fn estimate(
        &self,
        i: usize,
        t: usize,
        x: &Frame,
        y: &Observation,
        prev: Option<&FrameTrajectoryCache>,
        cache: &mut FrameTrajectoryCache,
    ) -> Result<Estimate> {
        let ctx = match prev {
            Some(p) if self.cfg.attention && self.model.attends() => Some(p.context(t).ok_or_else(|| {
                Error::contract(format!("previous frame has no attention context for step {t}"))
            })?),
            _ => None,
        };
        let pred = self
            .model
            .predict(x, t, i, ctx)
            .map_err(|e| non_finite_as_numerical(e, i, t, "noise prediction"))?;
        let x0 = self
            .schedule
            .predict_x0(x, t, &pred.eps)
            .map_err(|e| non_finite_as_numerical(e, i, t, "clean-image estimate"))?;
        let c = self.cfg.constraint.apply(&x0, y, self.op)?;
        if !c.loss.is_finite() {
            return Err(numerical(i, t, "content loss is not finite"));
        }
        cache.contexts[t] = pred.context;
        Ok(Estimate {
            x0: c.x0,
            content_grad: c.grad,
            content_loss: c.loss,
        })
    }

    fn correspondence(&self, i: usize, prev_x0: &Frame, x0: &Frame) -> Result<(FlowField, OcclusionMask)> {
        match self.flow {
            FlowSource::Internal => estimate_flow(prev_x0, x0, &self.cfg.flow),
            FlowSource::External(pairs) => Ok(pairs[i - 1].clone()),
        }
    }

    /// One reverse transition `x_t -> x_{t-1}`.
    fn step(
        &self,
        i: usize,
        t: usize,
        x: &Frame,
        y: &Observation,
        prev: Option<&FrameTrajectoryCache>,
        cache: &mut FrameTrajectoryCache,
    ) -> Result<(Frame, StepRecord)> {
        let cfg = self.cfg;
        let est = self.estimate(i, t, x, y, prev, cache)?;
        let mut z = self.bank.step(t, self.shape, self.stream(i));
        let mut tc = None;
        let mut tc_loss = None;
        let coupled = prev.filter(|_| t < cfg.t_tc);
        if let Some(p) = coupled {
            let blend = cfg.share_noise && cfg.lambda < 1.0;
            if cfg.s > 0.0 || blend {
                let prev_x0 = p
                    .x0(t)
                    .ok_or_else(|| Error::contract(format!("previous frame has no estimate for step {t}")))?;
                let (flow, mask) = self.correspondence(i, prev_x0, &est.x0)?;
                if cfg.s > 0.0 {
                    let (loss, grad) = tc_loss_and_grad(&est.x0, prev_x0, &flow, &mask, cfg.charbonnier_eps)?;
                    let grad = match cfg.constraint.mode {
                        ConstraintMode::Projection => self.op.null_space_part(&grad)?,
                        ConstraintMode::Gradient => grad,
                    };
                    tc_loss = Some(loss);
                    tc = Some(grad);
                }
                if blend {
                    let z_prev = p
                        .noise(t)
                        .ok_or_else(|| Error::contract(format!("previous frame has no noise for step {t}")))?;
                    z = if cfg.warp_noise {
                        blend_noise(&z, z_prev, &flow, &mask, cfg.lambda)?
                    } else {
                        blend_noise_unwarped(&z, z_prev, &mask, cfg.lambda)?
                    };
                }
            }
        }

        let (c0, ct) = self.schedule.posterior_coefs(t);
        let sigma = self.schedule.posterior_variance(t).sqrt();
        let mut next: Vec<f64> = est
            .x0
            .data()
            .iter()
            .zip(x.data())
            .map(|(&x0, &xt)| c0 * x0 + ct * xt)
            .collect();
        if let Some(g) = &est.content_grad {
            for (v, d) in next.iter_mut().zip(g.data()) {
                *v -= cfg.s_content * d;
            }
        }
        if let Some(g) = &tc {
            for (v, d) in next.iter_mut().zip(g.data()) {
                *v -= cfg.s * d;
            }
        }
        for (v, e) in next.iter_mut().zip(z.data()) {
            *v += sigma * e;
        }
        if let Some(k) = next.iter().position(|v| !v.is_finite()) {
            return Err(numerical(i, t, format!("x_{} has a non-finite sample at index {k}", t - 1)));
        }
        if t < cfg.t_tc {
            cache.x0[t] = Some(est.x0);
            cache.noise[t] = Some(z);
        }
        let (h, w, c) = self.shape;
        let record = StepRecord {
            t,
            content_loss: est.content_loss,
            tc_loss,
            wall_ms: None,
        };
        Ok((Frame::new(h, w, c, next)?, record))
    }

    /// Runs frame `i` against `prev` and returns its result and trajectory.
    fn frame(
        &self,
        i: usize,
        y: &Observation,
        prev: Option<&FrameTrajectoryCache>,
    ) -> Result<(Frame, FrameTrajectoryCache, FrameRecord)> {
        let cfg = self.cfg;
        let mut cache = FrameTrajectoryCache::new(cfg.steps);
        let mut x = self.bank.initial(self.shape, self.stream(i));
        let out_t = cfg.output_step();
        let mut steps = Vec::with_capacity(cfg.reverse_steps());
        for t in (out_t + 1..=cfg.steps).rev() {
            let start = Instant::now();
            let (next, mut rec) = self.step(i, t, &x, y, prev, &mut cache)?;
            rec.wall_ms = Some(start.elapsed().as_secs_f64() * 1e3);
            steps.push(rec);
            x = next;
        }
        let out = if out_t > 0 {
            self.estimate(i, out_t, &x, y, prev, &mut cache)?.x0
        } else {
            x
        };
        let record = FrameRecord {
            index: i,
            reverse_steps: steps.len(),
            output_t: out_t,
            steps,
        };
        Ok((out, cache, record))
    }
}

fn check_inputs(obs: &VideoTensor, op: &dyn DegradationOperator, cfg: &SamplerConfig, flow: &FlowSource) -> Result<(usize, usize, usize)> {
    cfg.validate()?;
    cfg.constraint.check(op)?;
    let shape = op.input_shape(obs.frame_shape())?;
    if op.output_shape(shape)? != obs.frame_shape() {
        return Err(Error::config(format!(
            "observations of shape {:?} do not match operator '{}'",
            obs.frame_shape(),
            op.name()
        )));
    }
    if let FlowSource::External(pairs) = flow {
        if pairs.len() + 1 != obs.len() {
            return Err(Error::config(format!(
                "{} frames need {} flow fields, got {}",
                obs.len(),
                obs.len() - 1,
                pairs.len()
            )));
        }
        for (k, (f, m)) in pairs.iter().enumerate() {
            if (f.height(), f.width()) != (shape.0, shape.1) || (m.height(), m.width()) != (shape.0, shape.1) {
                return Err(Error::config(format!(
                    "flow for pair {} is {}x{}, frames are {}x{}",
                    k + 1,
                    f.height(),
                    f.width(),
                    shape.0,
                    shape.1
                )));
            }
        }
    }
    Ok(shape)
}

/// Restores every frame of `obs` in order.
pub fn restore_video(
    obs: &VideoTensor,
    op: &dyn DegradationOperator,
    model: &dyn EpsilonModel,
    cfg: &SamplerConfig,
    flow: &FlowSource,
) -> Result<(VideoTensor, RunReport)> {
    let shape = check_inputs(obs, op, cfg, flow)?;
    let run = Run {
        cfg,
        schedule: cfg.schedule()?,
        op,
        model,
        flow,
        bank: NoiseBank::new(cfg.seed),
        shape,
    };
    let ys = obs.frames();
    let mut outputs = Vec::with_capacity(ys.len());
    let mut records = Vec::with_capacity(ys.len());
    let mut prev: Option<FrameTrajectoryCache> = None;
    for (i, y) in ys.iter().enumerate() {
        if cfg.literal_algo1 && i > 0 {
            prev = Some(run.frame(i - 1, &ys[i - 1], None)?.1);
        }
        let (out, cache, record) = run.frame(i, y, prev.as_ref())?;
        outputs.push(out);
        records.push(record);
        prev = Some(cache);
    }
    let report = RunReport {
        denoiser: model.name().to_string(),
        operator: op.name().to_string(),
        config: *cfg,
        frames: records,
        metrics: None,
        manifest: None,
    };
    Ok((VideoTensor::new(outputs)?, report))
}

/// Mechanism sets of the ablation, in table order.
pub const ABLATION_ROWS: [&str; 5] = ["none", "+attention", "+tc_guidance", "+noise_sharing", "+early_stop"];

/// Configuration of ablation row `row` (0-based) derived from `base`.
pub fn ablation_config(base: &SamplerConfig, row: usize) -> Result<SamplerConfig> {
    if row >= ABLATION_ROWS.len() {
        return Err(Error::config(format!("ablation has {} rows, asked for {row}", ABLATION_ROWS.len())));
    }
    Ok(SamplerConfig {
        attention: row >= 1,
        s: if row >= 2 { base.s } else { 0.0 },
        share_noise: row >= 3,
        early_stop: row >= 4,
        ..*base
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mechanisms: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub warping_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["mechanisms", "psnr", "ssim", "we_x100"]).expect("in-memory write");
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.mechanisms.clone(),
                opt(r.psnr),
                opt(r.ssim),
                format!("{:.6}", r.warping_error * 100.0),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }
}

/// Runs the five cumulative mechanism sets. With `truth`, rows carry PSNR and
/// SSIM and the warping error uses flow from the ground truth; without it the
/// flow comes from each output itself.
pub fn ablation_run(
    obs: &VideoTensor,
    op: &dyn DegradationOperator,
    model: &dyn EpsilonModel,
    base: &SamplerConfig,
    flow: &FlowSource,
    truth: Option<&VideoTensor>,
) -> Result<(AblationTable, Vec<VideoTensor>)> {
    base.validate()?;
    let mut rows = Vec::with_capacity(ABLATION_ROWS.len());
    let mut outputs = Vec::with_capacity(ABLATION_ROWS.len());
    for (k, name) in ABLATION_ROWS.iter().enumerate() {
        let cfg = ablation_config(base, k)?;
        let (out, _) = restore_video(obs, op, model, &cfg, flow)?;
        let row = match truth {
            Some(gt) => {
                let m = MetricsReport::compute(&out, gt, gt, &base.flow)?;
                AblationRow {
                    mechanisms: name.to_string(),
                    psnr: Some(m.mean_psnr),
                    ssim: Some(m.mean_ssim),
                    warping_error: m.warping_error,
                }
            }
            None => AblationRow {
                mechanisms: name.to_string(),
                psnr: None,
                ssim: None,
                warping_error: if out.len() >= 2 {
                    crate::metrics::warping_error(&out, &out, &base.flow)?
                } else {
                    0.0
                },
            },
        };
        rows.push(row);
        outputs.push(out);
    }
    Ok((AblationTable { rows }, outputs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{ddnm_project, DistanceNorm};
    use crate::denoiser::unet::{UNetArch, WeightSource};
    use crate::denoiser::{OracleDenoiser, Prediction, ShrinkageDenoiser, TinyUNet, TinyUNetSpec};
    use crate::operators::{blur_conv, gaussian_kernel, inpaint_mask, random_mask, sr_avgpool};
    use crate::video::{make_fixture, FixtureKind, FixtureSpec};

    fn small_cfg() -> SamplerConfig {
        SamplerConfig {
            steps: 20,
            t_tc: 10,
            t_es: 4,
            s: 50.0,
            ..SamplerConfig::default()
        }
    }

    fn fixture(kind: FixtureKind, n: usize, seed: u64) -> VideoTensor {
        make_fixture(&FixtureSpec::new(kind, 16, n, (1.0, 0.0), seed)).unwrap()
    }

    fn observe(video: &VideoTensor, op: &dyn DegradationOperator) -> VideoTensor {
        VideoTensor::new(video.frames().iter().map(|f| op.apply(f).unwrap()).collect()).unwrap()
    }

    fn unet() -> TinyUNet {
        let arch = UNetArch {
            base_channels: 4,
            head_dim: 4,
            ..UNetArch::default()
        };
        TinyUNet::from_spec(&TinyUNetSpec {
            arch,
            weights: WeightSource::Seed(3),
        })
        .unwrap()
    }

    #[test]
    fn config_ordering_enforced() {
        let ok = SamplerConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            SamplerConfig { t_es: 301, ..ok },
            SamplerConfig { t_tc: 1001, ..ok },
            SamplerConfig { lambda: 1.5, ..ok },
            SamplerConfig { s: -1.0, ..ok },
            SamplerConfig { steps: 0, t_tc: 0, t_es: 0, ..ok },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn static_video_gives_identical_frames() {
        let truth = fixture(FixtureKind::Static, 4, 1);
        let op = sr_avgpool(2).unwrap();
        let obs = observe(&truth, &op);
        let model = unet();
        let cfg = small_cfg();
        let (out, report) = restore_video(&obs, &op, &model, &cfg, &FlowSource::Internal).unwrap();
        for f in &out.frames()[1..] {
            assert_eq!(f, &out.frames()[0]);
        }
        assert_eq!(crate::metrics::warping_error(&out, &out, &cfg.flow).unwrap(), 0.0);
        assert!(report.frames[1].steps.iter().any(|s| s.tc_loss == Some(0.0)));
    }

    #[test]
    fn disabled_mechanisms_reduce_to_single_image_runs() {
        let truth = fixture(FixtureKind::TranslatingTexture, 3, 2);
        let op = sr_avgpool(2).unwrap();
        let obs = observe(&truth, &op);
        let schedule = small_cfg().schedule().unwrap();
        let model = ShrinkageDenoiser::new(schedule, 1.0).unwrap();
        let cfg = SamplerConfig {
            s: 0.0,
            lambda: 1.0,
            attention: false,
            early_stop: false,
            ..small_cfg()
        };
        let (out, _) = restore_video(&obs, &op, &model, &cfg, &FlowSource::Internal).unwrap();
        for (i, y) in obs.frames().iter().enumerate() {
            let single = VideoTensor::new(vec![y.clone()]).unwrap();
            let (alone, _) = restore_video(&single, &op, &model, &cfg, &FlowSource::Internal).unwrap();
            assert_eq!(&alone.frames()[0], &out.frames()[i], "frame {i}");
        }
    }

    #[test]
    fn early_stop_at_t_is_one_prediction() {
        let truth = fixture(FixtureKind::TranslatingTexture, 2, 3);
        let op = sr_avgpool(2).unwrap();
        let obs = observe(&truth, &op);
        let cfg = SamplerConfig {
            t_es: 20,
            t_tc: 20,
            ..small_cfg()
        };
        let schedule = cfg.schedule().unwrap();
        let model = ShrinkageDenoiser::new(schedule.clone(), 1.0).unwrap();
        let (out, report) = restore_video(&obs, &op, &model, &cfg, &FlowSource::Internal).unwrap();
        let x_t = NoiseBank::new(cfg.seed).initial((16, 16, 3), SHARED_STREAM);
        for (i, y) in obs.frames().iter().enumerate() {
            assert_eq!(report.frames[i].reverse_steps, 0);
            assert_eq!(report.frames[i].output_t, 20);
            let eps = model.predict(&x_t, 20, i, None).unwrap().eps;
            let expected = ddnm_project(&schedule.predict_x0(&x_t, 20, &eps).unwrap(), y, &op).unwrap();
            assert_eq!(out.frames()[i], expected);
        }
    }

    #[test]
    fn reverse_step_count_follows_early_stop() {
        let truth = fixture(FixtureKind::TranslatingTexture, 2, 3);
        let op = sr_avgpool(2).unwrap();
        let obs = observe(&truth, &op);
        let model = ShrinkageDenoiser::new(small_cfg().schedule().unwrap(), 1.0).unwrap();
        for (early_stop, steps, out_t) in [(true, 16, 4), (false, 20, 0)] {
            let cfg = SamplerConfig { early_stop, ..small_cfg() };
            let (_, report) = restore_video(&obs, &op, &model, &cfg, &FlowSource::Internal).unwrap();
            for f in &report.frames {
                assert_eq!((f.reverse_steps, f.steps.len(), f.output_t), (steps, steps, out_t));
                let ts: Vec<usize> = f.steps.iter().map(|s| s.t).collect();
                assert_eq!(ts, (out_t + 1..=20).rev().collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let truth = fixture(FixtureKind::MovingSquare, 3, 4);
        let op = inpaint_mask(16, 16, random_mask(16, 16, 0.3, 5)).unwrap();
        let obs = observe(&truth, &op);
        let model = unet();
        let cfg = small_cfg();
        let (a, ra) = restore_video(&obs, &op, &model, &cfg, &FlowSource::Internal).unwrap();
        let (b, rb) = restore_video(&obs, &op, &model, &cfg, &FlowSource::Internal).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.without_timings(), rb.without_timings());
    }

    #[test]
    fn later_frames_never_affect_earlier_ones() {
        let truth = fixture(FixtureKind::TranslatingTexture, 4, 6);
        let op = sr_avgpool(2).unwrap();
        let obs = observe(&truth, &op);
        let prefix = VideoTensor::new(obs.frames()[..3].to_vec()).unwrap();
        let model = unet();
        for literal_algo1 in [false, true] {
            let cfg = SamplerConfig { literal_algo1, ..small_cfg() };
            let (full, _) = restore_video(&obs, &op, &model, &cfg, &FlowSource::Internal).unwrap();
            let (part, _) = restore_video(&prefix, &op, &model, &cfg, &FlowSource::Internal).unwrap();
            assert_eq!(&full.frames()[..3], part.frames());
        }
    }

    #[test]
    fn temporal_term_is_exactly_zero_outside_window() {
        let truth = fixture(FixtureKind::TranslatingTexture, 2, 7);
        let op = sr_avgpool(2).unwrap();
        let obs = observe(&truth, &op);
        let model = ShrinkageDenoiser::new(small_cfg().schedule().unwrap(), 1.0).unwrap();
        let guided = SamplerConfig {
            s: 200.0,
            share_noise: false,
            ..small_cfg()
        };
        let unguided = SamplerConfig { s: 0.0, ..guided };
        let make = |cfg: &'static SamplerConfig, flow: &'static FlowSource| Run {
            cfg,
            schedule: cfg.schedule().unwrap(),
            op: Box::leak(Box::new(sr_avgpool(2).unwrap())),
            model: Box::leak(Box::new(ShrinkageDenoiser::new(cfg.schedule().unwrap(), 1.0).unwrap())),
            flow,
            bank: NoiseBank::new(cfg.seed),
            shape: (16, 16, 3),
        };
        let flow: &'static FlowSource = Box::leak(Box::new(FlowSource::Internal));
        let g = make(Box::leak(Box::new(guided)), flow);
        let u = make(Box::leak(Box::new(unguided)), flow);
        let (_, prev, _) = g.frame(0, &obs.frames()[0], None).unwrap();
        let y = &obs.frames()[1];
        let x = model.predict(&truth.frames()[1], 1, 1, None).unwrap().eps;
        for t in [20, 15, 10] {
            let a = g.step(1, t, &x, y, Some(&prev), &mut FrameTrajectoryCache::new(20)).unwrap();
            let b = u.step(1, t, &x, y, Some(&prev), &mut FrameTrajectoryCache::new(20)).unwrap();
            assert_eq!(a.0, b.0, "t={t}");
            assert_eq!(a.1.tc_loss, None);
        }
        let t = 9;
        let a = g.step(1, t, &x, y, Some(&prev), &mut FrameTrajectoryCache::new(20)).unwrap();
        let b = u.step(1, t, &x, y, Some(&prev), &mut FrameTrajectoryCache::new(20)).unwrap();
        assert!(a.1.tc_loss.unwrap() > 0.0);
        assert_ne!(a.0, b.0);
    }

    #[test]
    fn projection_keeps_observations_exact() {
        let truth = fixture(FixtureKind::MovingSquare, 3, 8);
        let op = sr_avgpool(4).unwrap();
        let obs = observe(&truth, &op);
        let schedule = small_cfg().schedule().unwrap();
        let model = OracleDenoiser::new(schedule, truth.clone());
        for early_stop in [true, false] {
            let cfg = SamplerConfig { early_stop, ..small_cfg() };
            let (out, _) = restore_video(&obs, &op, &model, &cfg, &FlowSource::Internal).unwrap();
            for (o, y) in out.frames().iter().zip(obs.frames()) {
                assert!(op.apply(o).unwrap().max_abs_diff(y) < 1e-5);
            }
        }
    }

    #[test]
    fn gradient_constraint_pulls_toward_observation() {
        let truth = fixture(FixtureKind::TranslatingTexture, 2, 9);
        let op = blur_conv(gaussian_kernel(5, 1.0)).unwrap();
        let obs = observe(&truth, &op);
        let schedule = small_cfg().schedule().unwrap();
        let model = ShrinkageDenoiser::new(schedule, 1.0).unwrap();
        let projection = small_cfg();
        assert!(matches!(
            restore_video(&obs, &op, &model, &projection, &FlowSource::Internal),
            Err(Error::Config(_))
        ));
        let loss = |s_content| {
            let cfg = SamplerConfig {
                constraint: ContentConstraint::gradient(DistanceNorm::L2Squared),
                s_content,
                ..small_cfg()
            };
            let (out, _) = restore_video(&obs, &op, &model, &cfg, &FlowSource::Internal).unwrap();
            let r = op.apply(&out.frames()[0]).unwrap().sub(&obs.frames()[0]);
            r.dot(&r)
        };
        assert!(loss(0.5) < loss(0.0));
    }

    /// Predicts zero noise except at one `(frame, t)`, where its output
    /// contains NaN.
    struct Exploding {
        frame: usize,
        t: usize,
    }

    impl EpsilonModel for Exploding {
        fn name(&self) -> &'static str {
            "exploding"
        }

        fn predict(&self, x_t: &Frame, t: usize, frame_index: usize, _ctx: Option<&PrevFrameContext>) -> Result<Prediction> {
            let (h, w, c) = x_t.shape();
            let v = if (frame_index, t) == (self.frame, self.t) { f64::NAN } else { 0.0 };
            Ok(Prediction {
                eps: Frame::new(h, w, c, vec![v; h * w * c])?,
                context: None,
            })
        }
    }

    #[test]
    fn blow_up_reports_frame_and_step() {
        let truth = fixture(FixtureKind::TranslatingTexture, 3, 10);
        let op = sr_avgpool(2).unwrap();
        let obs = observe(&truth, &op);
        let model = Exploding { frame: 1, t: 7 };
        match restore_video(&obs, &op, &model, &small_cfg(), &FlowSource::Internal) {
            Err(Error::Numerical { frame, t, .. }) => assert_eq!((frame, t), (1, 7)),
            other => panic!("expected numerical failure, got {other:?}"),
        }
    }

    #[test]
    fn external_flow_is_checked_and_used() {
        let truth = fixture(FixtureKind::TranslatingTexture, 3, 11);
        let op = sr_avgpool(2).unwrap();
        let obs = observe(&truth, &op);
        let model = ShrinkageDenoiser::new(small_cfg().schedule().unwrap(), 1.0).unwrap();
        let cfg = small_cfg();
        let one = vec![(FlowField::zeros(16, 16), OcclusionMask::ones(16, 16))];
        assert!(matches!(
            restore_video(&obs, &op, &model, &cfg, &FlowSource::External(one.clone())),
            Err(Error::Config(_))
        ));
        let exact = FlowField::constant(16, 16, (-1.0, 0.0));
        let pairs = vec![(exact.clone(), OcclusionMask::ones(16, 16)); 2];
        let (a, _) = restore_video(&obs, &op, &model, &cfg, &FlowSource::External(pairs)).unwrap();
        let (b, _) = restore_video(&obs, &op, &model, &cfg, &FlowSource::Internal).unwrap();
        assert_eq!(a.frames()[0], b.frames()[0]);
        assert_ne!(a.frames()[1], b.frames()[1]);
    }

    #[test]
    fn literal_mode_matches_cached_mode_on_first_pair_without_guidance() {
        let truth = fixture(FixtureKind::TranslatingTexture, 3, 12);
        let op = sr_avgpool(2).unwrap();
        let obs = observe(&truth, &op);
        let model = unet();
        let cached = small_cfg();
        let literal = SamplerConfig {
            literal_algo1: true,
            ..cached
        };
        let (a, _) = restore_video(&obs, &op, &model, &cached, &FlowSource::Internal).unwrap();
        let (b, _) = restore_video(&obs, &op, &model, &literal, &FlowSource::Internal).unwrap();
        // Frame 0 is uncoupled in both modes, so frame 1 sees the same
        // previous trajectory.
        assert_eq!(a.frames()[..2], b.frames()[..2]);
        assert_ne!(a.frames()[2], b.frames()[2]);
    }

    #[test]
    fn ablation_rows_accumulate_mechanisms() {
        let base = small_cfg();
        let rows: Vec<SamplerConfig> = (0..5).map(|k| ablation_config(&base, k).unwrap()).collect();
        let flags: Vec<(bool, bool, bool, bool)> = rows
            .iter()
            .map(|c| (c.attention, c.s > 0.0, c.share_noise, c.early_stop))
            .collect();
        assert_eq!(
            flags,
            vec![
                (false, false, false, false),
                (true, false, false, false),
                (true, true, false, false),
                (true, true, true, false),
                (true, true, true, true),
            ]
        );
        assert!(ablation_config(&base, 5).is_err());
    }

    #[test]
    fn ablation_first_row_is_plain_run() {
        let truth = fixture(FixtureKind::Static, 3, 13);
        let op = sr_avgpool(2).unwrap();
        let obs = observe(&truth, &op);
        let model = unet();
        let base = small_cfg();
        let (table, outputs) = ablation_run(&obs, &op, &model, &base, &FlowSource::Internal, Some(&truth)).unwrap();
        assert_eq!(table.rows.len(), 5);
        let off = SamplerConfig {
            attention: false,
            s: 0.0,
            share_noise: false,
            early_stop: false,
            ..base
        };
        assert_eq!(outputs[0], restore_video(&obs, &op, &model, &off, &FlowSource::Internal).unwrap().0);
        let we: Vec<f64> = table.rows.iter().map(|r| r.warping_error).collect();
        assert!(we.iter().all(|w| w.is_finite() && *w >= 0.0));
        for k in 1..5 {
            assert!(we[k] <= we[k - 1], "{we:?}");
        }
        assert_eq!(we[4], 0.0);
        assert_eq!(table.to_csv().lines().count(), 6);
    }
}
