//! PSNR, SSIM and flow-based warping error. Inputs are frames in `[-1, 1]`;
//! every metric works on intensities shifted to `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{estimate_flow, warp, FlowParams};
use crate::video::{Frame, VideoTensor};

/// Reported PSNR for identical frames.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    a.ensure_same_shape(b, "psnr")?;
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) * 0.5).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn ssim_weights() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable weighted average over every fully contained window.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM with an 11x11 Gaussian window, averaged over channels.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    a.ensure_same_shape(b, "ssim")?;
    let (h, w, c) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::config(format!(
            "SSIM needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let k = ssim_weights();
    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = a.data().iter().skip(ch).step_by(c).map(|v| (v + 1.0) * 0.5).collect();
        let pb: Vec<f64> = b.data().iter().skip(ch).step_by(c).map(|v| (v + 1.0) * 0.5).collect();
        let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
        let ma = filter_valid(&pa, h, w, &k);
        let mb = filter_valid(&pb, h, w, &k);
        let maa = filter_valid(&prod(&pa, &pa), h, w, &k);
        let mbb = filter_valid(&prod(&pb, &pb), h, w, &k);
        let mab = filter_valid(&prod(&pa, &pb), h, w, &k);
        let n = ma.len();
        let mut s = 0.0;
        for i in 0..n {
            let (ua, ub) = (ma[i], mb[i]);
            let va = maa[i] - ua * ua;
            let vb = mbb[i] - ub * ub;
            let cov = mab[i] - ua * ub;
            s += ((2.0 * ua * ub + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ua * ua + ub * ub + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += s / n as f64;
    }
    Ok(total / c as f64)
}

/// Mean over consecutive pairs of the masked mean absolute difference
/// between frame `i` and frame `i-1` warped by the flow estimated on
/// `flow_source`. Pairs with an empty mask are skipped.
pub fn warping_error(video: &VideoTensor, flow_source: &VideoTensor, params: &FlowParams) -> Result<f64> {
    if video.len() < 2 {
        return Err(Error::contract("warping error needs at least two frames"));
    }
    if video.len() != flow_source.len() {
        return Err(Error::contract(format!(
            "video has {} frames, flow source has {}",
            video.len(),
            flow_source.len()
        )));
    }
    let (vh, vw, _) = video.frame_shape();
    let (fh, fw, _) = flow_source.frame_shape();
    if (vh, vw) != (fh, fw) {
        return Err(Error::contract(format!("video is {vh}x{vw}, flow source is {fh}x{fw}")));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 1..video.len() {
        let src = flow_source.frames();
        let (flow, mask) = estimate_flow(&src[i - 1], &src[i], params)?;
        if let Some(e) = pair_error(&video.frames()[i], &warp(&video.frames()[i - 1], &flow)?, mask.data()) {
            sum += e;
            pairs += 1;
        }
    }
    Ok(if pairs == 0 { 0.0 } else { sum / pairs as f64 })
}

fn pair_error(cur: &Frame, warped: &Frame, mask: &[f64]) -> Option<f64> {
    let c = cur.channels();
    let valid: f64 = mask.iter().sum::<f64>() * c as f64;
    if valid == 0.0 {
        return None;
    }
    let s: f64 = cur
        .data()
        .iter()
        .zip(warped.data())
        .enumerate()
        .map(|(i, (a, b))| mask[i / c] * (a - b).abs() * 0.5)
        .sum();
    Some(s / valid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub psnr: Vec<f64>,
    pub mean_psnr: f64,
    pub ssim: Vec<f64>,
    pub mean_ssim: f64,
    /// Raw warping error on `[0, 1]` intensities.
    pub warping_error: f64,
}

impl MetricsReport {
    /// Scores `output` against `truth`, with warping error measured on flow
    /// from `flow_source`.
    pub fn compute(output: &VideoTensor, truth: &VideoTensor, flow_source: &VideoTensor, params: &FlowParams) -> Result<Self> {
        if output.len() != truth.len() {
            return Err(Error::contract(format!(
                "output has {} frames, ground truth has {}",
                output.len(),
                truth.len()
            )));
        }
        let mut psnrs = Vec::with_capacity(output.len());
        let mut ssims = Vec::with_capacity(output.len());
        for (o, t) in output.frames().iter().zip(truth.frames()) {
            psnrs.push(psnr(o, t)?);
            ssims.push(ssim(o, t)?);
        }
        let we = if output.len() >= 2 {
            warping_error(output, flow_source, params)?
        } else {
            0.0
        };
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Ok(Self {
            mean_psnr: mean(&psnrs),
            mean_ssim: mean(&ssims),
            psnr: psnrs,
            ssim: ssims,
            warping_error: we,
        })
    }

    /// Warping error in the customary x10^-2 display unit.
    pub fn we_x100(&self) -> f64 {
        self.warping_error * 100.0
    }

    /// `frame,psnr,ssim` rows followed by `mean_psnr`, `mean_ssim` and
    /// `we_x100` footer rows.
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
        w.write_record(["frame", "psnr", "ssim"]).expect("in-memory write");
        for (i, (p, s)) in self.psnr.iter().zip(&self.ssim).enumerate() {
            w.write_record([i.to_string(), format!("{p:.6}"), format!("{s:.6}")]).expect("in-memory write");
        }
        w.write_record(["mean_psnr".to_string(), format!("{:.6}", self.mean_psnr)]).expect("in-memory write");
        w.write_record(["mean_ssim".to_string(), format!("{:.6}", self.mean_ssim)]).expect("in-memory write");
        w.write_record(["we_x100".to_string(), format!("{:.6}", self.we_x100())]).expect("in-memory write");
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }
}
