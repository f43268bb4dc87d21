//! Dense optical flow, backward warping and occlusion masks.
//!
//! Convention: a flow `F` estimated for the pair `(prev, cur)` maps pixel `p`
//! of `cur` to position `p + F(p)` in `prev`, so `warp(prev, F)` aligns
//! `prev` with `cur`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::Frame;

/// Per-pixel `(u, v)` displacement, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    data: Vec<[f64; 2]>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, data: Vec<[f64; 2]>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::contract(format!(
                "flow has {} vectors, expected {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|d| !d[0].is_finite() || !d[1].is_finite()) {
            return Err(Error::contract("flow contains non-finite values"));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, (0.0, 0.0))
    }

    pub fn constant(height: usize, width: usize, (u, v): (f64, f64)) -> Self {
        Self {
            height,
            width,
            data: vec![[u, v]; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[[f64; 2]] {
        &self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> [f64; 2] {
        self.data[y * self.width + x]
    }

    fn check_frame(&self, f: &Frame) -> Result<()> {
        if (f.height(), f.width()) != (self.height, self.width) {
            return Err(Error::contract(format!(
                "flow is {}x{}, frame is {}x{}",
                self.height,
                self.width,
                f.height(),
                f.width()
            )));
        }
        Ok(())
    }
}

/// Per-pixel correspondence validity in `[0, 1]`; 1 means valid.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl OcclusionMask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::contract(format!(
                "mask has {} entries, expected {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::contract("mask values must lie in [0, 1]"));
        }
        Ok(Self { height, width, data })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1.0; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Bilinear sample of channel `c` at `(y, x)` with clamp-to-edge.
#[inline]
fn bilinear(data: &[f64], h: usize, w: usize, ch: usize, c: usize, y: f64, x: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |yy: usize, xx: usize| data[(yy * w + xx) * ch + c];
    (1.0 - fx) * (1.0 - fy) * at(y0, x0)
        + fx * (1.0 - fy) * at(y0, x1)
        + (1.0 - fx) * fy * at(y1, x0)
        + fx * fy * at(y1, x1)
}

/// Backward warp: `out(p) = src(p + flow(p))`, bilinear, clamp-to-edge.
pub fn warp(src: &Frame, flow: &FlowField) -> Result<Frame> {
    flow.check_frame(src)?;
    let (h, w, c) = src.shape();
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let [u, v] = flow.at(y, x);
            for ch in 0..c {
                out.push(bilinear(src.data(), h, w, c, ch, y as f64 + v, x as f64 + u));
            }
        }
    }
    Frame::new(h, w, c, out)
}

/// Forward-backward consistency check.
pub fn fb_occlusion(fwd: &FlowField, bwd: &FlowField, alpha1: f64, alpha2: f64) -> Result<OcclusionMask> {
    if (fwd.height, fwd.width) != (bwd.height, bwd.width) {
        return Err(Error::contract("forward and backward flows differ in shape"));
    }
    let (h, w) = (fwd.height, fwd.width);
    let bu: Vec<f64> = bwd.data.iter().map(|d| d[0]).collect();
    let bv: Vec<f64> = bwd.data.iter().map(|d| d[1]).collect();
    let mut mask = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let [u, v] = fwd.at(y, x);
            let (sy, sx) = (y as f64 + v, x as f64 + u);
            let b = [bilinear(&bu, h, w, 1, 0, sy, sx), bilinear(&bv, h, w, 1, 0, sy, sx)];
            let sum2 = (u + b[0]).powi(2) + (v + b[1]).powi(2);
            let mag2 = u * u + v * v + b[0] * b[0] + b[1] * b[1];
            mask.push(if sum2 <= alpha1 * mag2 + alpha2 { 1.0 } else { 0.0 });
        }
    }
    OcclusionMask::new(h, w, mask)
}

/// Pixels where `|grad u|^2 + |grad v|^2 > 0.01 |w|^2 + 0.1`, using
/// central differences.
pub fn motion_boundaries(flow: &FlowField) -> Vec<bool> {
    let (h, w) = (flow.height, flow.width);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let mut g2 = 0.0;
            for k in 0..2 {
                let dx = (flow.at(y, xr)[k] - flow.at(y, xl)[k]) / (xr - xl).max(1) as f64;
                let dy = (flow.at(yd, x)[k] - flow.at(yu, x)[k]) / (yd - yu).max(1) as f64;
                g2 += dx * dx + dy * dy;
            }
            let [u, v] = flow.at(y, x);
            out.push(g2 > 0.01 * (u * u + v * v) + 0.1);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    pub levels: usize,
    /// Side of the square integration window (odd).
    pub window: usize,
    pub iterations: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Also invalidate pixels where the forward flow changes sharply.
    #[serde(default = "enabled")]
    pub motion_boundary: bool,
    /// Also invalidate pixels whose 3x3 mean luminance residual after warping
    /// (luminance in `[0, 1]`) exceeds this.
    #[serde(default = "default_photometric")]
    pub photometric: Option<f64>,
}

fn default_photometric() -> Option<f64> {
    Some(0.02)
}

fn enabled() -> bool {
    true
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            levels: 3,
            window: 7,
            iterations: 3,
            alpha1: 0.01,
            alpha2: 0.5,
            motion_boundary: true,
            photometric: default_photometric(),
        }
    }
}

/// Smallest side allowed at the coarsest pyramid level.
const MIN_LEVEL_SIZE: usize = 4;
/// Tikhonov term on the 2x2 structure tensor.
const LK_REGULARIZATION: f64 = 1e-6;
/// Windows whose structure tensor is flatter than this keep their estimate.
const LK_MIN_EIGENVALUE: f64 = 1e-4;
/// Largest update (pixels at the current level) per iteration.
const LK_MAX_STEP: f64 = 1.0;

impl FlowParams {
    pub fn min_size(&self) -> usize {
        MIN_LEVEL_SIZE << self.levels.saturating_sub(1)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.iterations == 0 {
            return Err(Error::config("flow needs at least one level and one iteration"));
        }
        if self.window.is_multiple_of(2) {
            return Err(Error::config(format!("flow window must be odd, got {}", self.window)));
        }
        if let Some(p) = self.photometric {
            if !(p.is_finite() && p >= 0.0) {
                return Err(Error::config(format!("photometric limit must be finite and non-negative, got {p}")));
            }
        }
        Ok(())
    }
}

/// Single-channel float plane.
#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn luminance(f: &Frame) -> Plane {
        let v = match f.channels() {
            3 => f
                .data()
                .chunks_exact(3)
                .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2] + 1.0) * 0.5)
                .collect(),
            c => f.data().chunks_exact(c).map(|p| (p[0] + 1.0) * 0.5).collect(),
        };
        Plane {
            h: f.height(),
            w: f.width(),
            v,
        }
    }

    #[inline]
    fn at(&self, y: usize, x: usize) -> f64 {
        self.v[y * self.w + x]
    }

    /// Binomial `[1 4 6 4 1] / 16` blur with clamped borders, then 2x decimation.
    fn downsample(&self) -> Plane {
        const K: [f64; 5] = [0.0625, 0.25, 0.375, 0.25, 0.0625];
        let (h, w) = (self.h, self.w);
        let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        let mut rows = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                rows[y * w + x] = K.iter().enumerate().map(|(i, k)| k * self.at(y, clampi(x as isize + i as isize - 2, w))).sum();
            }
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut v = Vec::with_capacity(oh * ow);
        for y in 0..oh {
            for x in 0..ow {
                // Sample centred between the two source pixels it replaces.
                let sy = 2 * y;
                let a: f64 = K.iter().enumerate().map(|(i, k)| k * rows[clampi(sy as isize + i as isize - 2, h) * w + 2 * x]).sum();
                let b: f64 = K.iter().enumerate().map(|(i, k)| k * rows[clampi(sy as isize + i as isize - 1, h) * w + 2 * x]).sum();
                let c: f64 = K.iter().enumerate().map(|(i, k)| k * rows[clampi(sy as isize + i as isize - 2, h) * w + 2 * x + 1]).sum();
                let d: f64 = K.iter().enumerate().map(|(i, k)| k * rows[clampi(sy as isize + i as isize - 1, h) * w + 2 * x + 1]).sum();
                v.push(0.25 * (a + b + c + d));
            }
        }
        Plane { h: oh, w: ow, v }
    }

    fn warp(&self, fu: &[f64], fv: &[f64]) -> Plane {
        let mut v = Vec::with_capacity(self.h * self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                let i = y * self.w + x;
                v.push(bilinear(&self.v, self.h, self.w, 1, 0, y as f64 + fv[i], x as f64 + fu[i]));
            }
        }
        Plane { h: self.h, w: self.w, v }
    }

    fn abs_diff(&self, other: &Plane) -> Plane {
        let v = self.v.iter().zip(&other.v).map(|(a, b)| (a - b).abs()).collect();
        Plane { h: self.h, w: self.w, v }
    }

    /// Mean over the in-bounds part of each 3x3 neighbourhood.
    fn box3_mean(&self) -> Plane {
        let (h, w) = (self.h, self.w);
        let mut v = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (mut sum, mut n) = (0.0, 0.0);
                for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        sum += self.at(yy, xx);
                        n += 1.0;
                    }
                }
                v.push(sum / n);
            }
        }
        Plane { h, w, v }
    }

    /// Central-difference gradients with clamped borders.
    fn gradients(&self) -> (Vec<f64>, Vec<f64>) {
        let (h, w) = (self.h, self.w);
        let mut gx = Vec::with_capacity(h * w);
        let mut gy = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
                let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
                gx.push((self.at(y, xr) - self.at(y, xl)) / (xr - xl).max(1) as f64);
                gy.push((self.at(yd, x) - self.at(yu, x)) / (yd - yu).max(1) as f64);
            }
        }
        (gx, gy)
    }
}

/// Separable Gaussian weights over a `2r+1` window, sigma = (2r+1)/5.
fn window_weights(r: usize) -> Vec<f64> {
    let sigma = (2 * r + 1) as f64 / 5.0;
    (0..=2 * r)
        .map(|i| {
            let d = i as f64 - r as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

/// Weighted sum over a `(2r+1)^2` window truncated at the borders.
fn window_sum(src: &[f64], h: usize, w: usize, weights: &[f64]) -> Vec<f64> {
    let r = weights.len() / 2;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (a, b) = (x.saturating_sub(r), (x + r).min(w - 1));
            rows[y * w + x] = (a..=b).map(|xx| weights[xx + r - x] * src[y * w + xx]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (a, b) = (y.saturating_sub(r), (y + r).min(h - 1));
        for x in 0..w {
            out[y * w + x] = (a..=b).map(|yy| weights[yy + r - y] * rows[yy * w + x]).sum();
        }
    }
    out
}

/// Coarse-to-fine Lucas-Kanade evaluated at every pixel: finds `F` with
/// `reference(p) ~ target(p + F(p))`. Each pixel's window is matched using
/// that pixel's own displacement against the fixed reference gradients.
fn lucas_kanade(reference: &Plane, target: &Plane, params: &FlowParams) -> (Vec<f64>, Vec<f64>) {
    let mut refs = vec![reference.clone()];
    let mut tgts = vec![target.clone()];
    for _ in 1..params.levels {
        let (r, t) = (refs.last().unwrap().downsample(), tgts.last().unwrap().downsample());
        refs.push(r);
        tgts.push(t);
    }
    let weights = window_weights(params.window / 2);
    let r = (params.window / 2) as isize;

    let (mut fu, mut fv): (Vec<f64>, Vec<f64>) = {
        let c = refs.last().unwrap();
        (vec![0.0; c.h * c.w], vec![0.0; c.h * c.w])
    };
    let mut prev_dims = (refs.last().unwrap().h, refs.last().unwrap().w);

    for level in (0..params.levels).rev() {
        let (rf, tg) = (&refs[level], &tgts[level]);
        let (h, w) = (rf.h, rf.w);
        if level + 1 < params.levels {
            // Upsample the coarser estimate; coarse pixel k covers fine pixels 2k, 2k+1.
            let (ch, cw) = prev_dims;
            let mut nu = Vec::with_capacity(h * w);
            let mut nv = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    let (cy, cx) = ((y as f64 - 0.5) / 2.0, (x as f64 - 0.5) / 2.0);
                    nu.push(2.0 * bilinear(&fu, ch, cw, 1, 0, cy, cx));
                    nv.push(2.0 * bilinear(&fv, ch, cw, 1, 0, cy, cx));
                }
            }
            fu = nu;
            fv = nv;
        }
        prev_dims = (h, w);

        let (gx, gy) = rf.gradients();
        let (sxx, sxy, syy) = {
            let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p * q).collect() };
            (
                window_sum(&prod(&gx, &gx), h, w, &weights),
                window_sum(&prod(&gx, &gy), h, w, &weights),
                window_sum(&prod(&gy, &gy), h, w, &weights),
            )
        };
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (a, b, d) = (sxx[i] + LK_REGULARIZATION, sxy[i], syy[i] + LK_REGULARIZATION);
                let det = a * d - b * b;
                let min_eig = 0.5 * (a + d) - (0.25 * (a - d) * (a - d) + b * b).sqrt();
                if det <= 0.0 || min_eig < LK_MIN_EIGENVALUE {
                    continue;
                }
                let (ya, yb) = ((y as isize - r).max(0) as usize, ((y as isize + r) as usize).min(h - 1));
                let (xa, xb) = ((x as isize - r).max(0) as usize, ((x as isize + r) as usize).min(w - 1));
                for _ in 0..params.iterations {
                    let (u, v) = (fu[i], fv[i]);
                    // The window shares one sub-pixel offset; only the base index moves.
                    let (iu, iv) = (u.floor(), v.floor());
                    let (fx, fy) = (u - iu, v - iv);
                    let (su, sv) = (iu as isize, iv as isize);
                    let clamp = |p: isize, n: usize| p.clamp(0, n as isize - 1) as usize;
                    let (mut bx, mut by) = (0.0, 0.0);
                    for qy in ya..=yb {
                        let wy = weights[(qy as isize - y as isize + r) as usize];
                        let y0 = clamp(qy as isize + sv, h) * w;
                        let y1 = clamp(qy as isize + sv + 1, h) * w;
                        for qx in xa..=xb {
                            let wq = wy * weights[(qx as isize - x as isize + r) as usize];
                            let q = qy * w + qx;
                            let (x0, x1) = (clamp(qx as isize + su, w), clamp(qx as isize + su + 1, w));
                            let sample = (1.0 - fy) * ((1.0 - fx) * tg.v[y0 + x0] + fx * tg.v[y0 + x1])
                                + fy * ((1.0 - fx) * tg.v[y1 + x0] + fx * tg.v[y1 + x1]);
                            let it = sample - rf.v[q];
                            bx += wq * gx[q] * it;
                            by += wq * gy[q] * it;
                        }
                    }
                    // Solve [a b; b d] delta = -[bx; by].
                    let du = -(d * bx - b * by) / det;
                    let dv = -(a * by - b * bx) / det;
                    let step = (du * du + dv * dv).sqrt();
                    let k = if step > LK_MAX_STEP { LK_MAX_STEP / step } else { 1.0 };
                    fu[i] += k * du;
                    fv[i] += k * dv;
                }
            }
        }
    }
    (fu, fv)
}

fn to_field(h: usize, w: usize, fu: Vec<f64>, fv: Vec<f64>) -> Result<FlowField> {
    FlowField::new(h, w, fu.into_iter().zip(fv).map(|(u, v)| [u, v]).collect())
}

/// Estimates the flow from `cur` to `prev` and its occlusion mask.
pub fn estimate_flow(prev: &Frame, cur: &Frame, params: &FlowParams) -> Result<(FlowField, OcclusionMask)> {
    params.validate()?;
    prev.ensure_same_shape(cur, "estimate_flow")?;
    let (h, w) = (cur.height(), cur.width());
    let min = params.min_size();
    if h < min || w < min {
        return Err(Error::config(format!(
            "frames {h}x{w} are smaller than the {min}x{min} minimum for {} pyramid levels",
            params.levels
        )));
    }
    let (lp, lc) = (Plane::luminance(prev), Plane::luminance(cur));
    let (fu, fv) = lucas_kanade(&lc, &lp, params);
    let (bu, bv) = lucas_kanade(&lp, &lc, params);
    let residual = params.photometric.map(|_| lp.warp(&fu, &fv).abs_diff(&lc).box3_mean());
    let fwd = to_field(h, w, fu, fv)?;
    let bwd = to_field(h, w, bu, bv)?;
    let mut mask = fb_occlusion(&fwd, &bwd, params.alpha1, params.alpha2)?;
    if params.motion_boundary {
        for (m, edge) in mask.data.iter_mut().zip(motion_boundaries(&fwd)) {
            if edge {
                *m = 0.0;
            }
        }
    }
    if let (Some(limit), Some(residual)) = (params.photometric, residual) {
        for (m, r) in mask.data.iter_mut().zip(residual.v) {
            if r > limit {
                *m = 0.0;
            }
        }
    }
    Ok((fwd, mask))
}

/// Mean endpoint error against a constant reference flow over pixels at
/// least `margin` away from the border.
pub fn mean_epe(flow: &FlowField, reference: (f64, f64), margin: usize) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in margin..flow.height.saturating_sub(margin) {
        for x in margin..flow.width.saturating_sub(margin) {
            let [u, v] = flow.at(y, x);
            sum += ((u - reference.0).powi(2) + (v - reference.1).powi(2)).sqrt();
            n += 1;
        }
    }
    sum / n.max(1) as f64
}
