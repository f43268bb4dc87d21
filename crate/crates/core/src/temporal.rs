//! Flow-coupled temporal mechanisms: the masked warping loss that guides
//! sampling, flow-aligned noise blending, and the keyed noise bank.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::constraints::CHARBONNIER_EPS;
use crate::error::{Error, Result};
use crate::flow::{warp, FlowField, OcclusionMask};
use crate::video::Frame;

/// Stream shared by every frame.
pub const SHARED_STREAM: u64 = 0;

const DOMAIN_INITIAL: u64 = 0x7854;
const DOMAIN_STEP: u64 = 0x7a74;

/// Deterministic Gaussian noise keyed by `(seed, domain, t, stream)`.
///
/// Each field comes from its own generator, so results never depend on the
/// order in which fields are requested.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseBank {
    seed: u64,
}

impl NoiseBank {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn field(&self, domain: u64, t: u64, stream: u64, (h, w, c): (usize, usize, usize)) -> Frame {
        let mut key = [0u8; 32];
        for (i, word) in [self.seed, domain, t, stream].into_iter().enumerate() {
            key[i * 8..(i + 1) * 8].copy_from_slice(&word.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        let data = (0..h * w * c).map(|_| StandardNormal.sample(&mut rng)).collect();
        Frame::new(h, w, c, data).expect("gaussian samples are finite")
    }

    /// Starting state `x_T` for `stream`.
    pub fn initial(&self, shape: (usize, usize, usize), stream: u64) -> Frame {
        self.field(DOMAIN_INITIAL, 0, stream, shape)
    }

    /// Reverse-step noise `z_t` for `stream`.
    pub fn step(&self, t: usize, shape: (usize, usize, usize), stream: u64) -> Frame {
        self.field(DOMAIN_STEP, t as u64, stream, shape)
    }

    /// Shared reverse-step noise `z_t`.
    pub fn noise_at(&self, t: usize, shape: (usize, usize, usize)) -> Frame {
        self.step(t, shape, SHARED_STREAM)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalGuidanceConfig {
    /// Guidance and blending act only for `t < t_tc`.
    pub t_tc: usize,
    pub s: f64,
    pub lambda: f64,
    pub charbonnier_eps: f64,
}

impl Default for TemporalGuidanceConfig {
    fn default() -> Self {
        Self {
            t_tc: 300,
            s: 1.0,
            lambda: 0.5,
            charbonnier_eps: CHARBONNIER_EPS,
        }
    }
}

impl TemporalGuidanceConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.t_tc > steps {
            return Err(Error::config(format!("T_TC={} exceeds T={steps}", self.t_tc)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        if !(self.s >= 0.0 && self.s.is_finite()) {
            return Err(Error::config(format!("gradient scale s must be finite and >= 0, got {}", self.s)));
        }
        if !(self.charbonnier_eps >= 0.0 && self.charbonnier_eps.is_finite()) {
            return Err(Error::config(format!(
                "Charbonnier epsilon must be finite and >= 0, got {}",
                self.charbonnier_eps
            )));
        }
        Ok(())
    }
}

fn check_mask(mask: &OcclusionMask, f: &Frame) -> Result<()> {
    if (mask.height(), mask.width()) != (f.height(), f.width()) {
        return Err(Error::contract(format!(
            "mask is {}x{}, frame is {}x{}",
            mask.height(),
            mask.width(),
            f.height(),
            f.width()
        )));
    }
    Ok(())
}

/// Masked Charbonnier distance between `x0_cur` and the flow-warped previous
/// estimate, averaged over valid samples, and its gradient in `x0_cur`.
///
/// The warped frame is held constant. With `eps_s = 0` the penalty is plain
/// L1 and the gradient is the sign of the residual (0 at 0).
pub fn tc_loss_and_grad(
    x0_cur: &Frame,
    x0_prev: &Frame,
    flow: &FlowField,
    mask: &OcclusionMask,
    eps_s: f64,
) -> Result<(f64, Frame)> {
    x0_cur.ensure_same_shape(x0_prev, "tc_loss_and_grad")?;
    check_mask(mask, x0_cur)?;
    let target = warp(x0_prev, flow)?;
    let c = x0_cur.channels();
    let valid = mask.sum() * c as f64;
    if valid == 0.0 {
        return Ok((0.0, Frame::zeros_like(x0_cur)));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(x0_cur.data().len());
    for (i, (&a, &b)) in x0_cur.data().iter().zip(target.data()).enumerate() {
        let m = mask.data()[i / c];
        let r = a - b;
        if m == 0.0 {
            grad.push(0.0);
            continue;
        }
        let root = (r * r + eps_s * eps_s).sqrt();
        loss += m * (root - eps_s);
        grad.push(if root == 0.0 { 0.0 } else { m * r / root / valid });
    }
    Ok((loss / valid, Frame::new(x0_cur.height(), x0_cur.width(), c, grad)?))
}

fn blend(z_cur: &Frame, aligned_prev: &Frame, mask: &OcclusionMask, lambda: f64) -> Result<Frame> {
    z_cur.ensure_same_shape(aligned_prev, "blend_noise")?;
    check_mask(mask, z_cur)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("lambda must be in [0, 1], got {lambda}")));
    }
    let c = z_cur.channels();
    let k = 1.0 - lambda;
    let data = z_cur
        .data()
        .iter()
        .zip(aligned_prev.data())
        .enumerate()
        .map(|(i, (&z, &p))| z + k * mask.data()[i / c] * (p - z))
        .collect();
    Frame::new(z_cur.height(), z_cur.width(), c, data)
}

/// `M (lambda z_cur + (1 - lambda) warp(z_prev)) + (1 - M) z_cur`.
///
/// Evaluated as `z_cur + (1 - lambda) M (warp(z_prev) - z_cur)`, which is
/// exactly `z_cur` whenever the mask is 0, `lambda` is 1, or the aligned
/// inputs agree.
pub fn blend_noise(z_cur: &Frame, z_prev: &Frame, flow: &FlowField, mask: &OcclusionMask, lambda: f64) -> Result<Frame> {
    blend(z_cur, &warp(z_prev, flow)?, mask, lambda)
}

/// The same blend without aligning `z_prev` to the current frame.
pub fn blend_noise_unwarped(z_cur: &Frame, z_prev: &Frame, mask: &OcclusionMask, lambda: f64) -> Result<Frame> {
    blend(z_cur, z_prev, mask, lambda)
}
