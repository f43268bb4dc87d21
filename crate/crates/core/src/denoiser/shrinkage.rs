//! Analytic stand-in denoiser: the clean estimate is a Gaussian blur of the
//! rescaled state whose width shrinks with the noise level.

use super::{EpsilonModel, Prediction, PrevFrameContext};
use crate::error::{Error, Result};
use crate::schedule::DiffusionSchedule;
use crate::video::Frame;

/// Blur sigma (pixels) at full noise and strength 1.
pub const SIGMA_MAX: f64 = 2.0;

/// Below this sigma the blur is the identity.
const MIN_SIGMA: f64 = 1e-3;

/// Separable Gaussian blur with clamp-to-edge borders.
pub(crate) fn gaussian_blur(f: &Frame, sigma: f64) -> Frame {
    if sigma < MIN_SIGMA {
        return f.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);

    let (h, w, c) = f.shape();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (i, kv) in k.iter().enumerate() {
                        let d = i as isize - r;
                        let (yy, xx) = if horizontal {
                            (y, (x as isize + d).clamp(0, w as isize - 1) as usize)
                        } else {
                            ((y as isize + d).clamp(0, h as isize - 1) as usize, x)
                        };
                        acc += kv * src[(yy * w + xx) * c + ch];
                    }
                    out[(y * w + x) * c + ch] = acc;
                }
            }
        }
        out
    };
    let data = pass(&pass(f.data(), true), false);
    Frame::new(h, w, c, data).expect("blur of a finite frame is finite")
}

/// Blur sigma used at step `t`.
pub fn shrinkage_sigma(schedule: &DiffusionSchedule, t: usize, strength: f64) -> f64 {
    strength * SIGMA_MAX * (1.0 - schedule.alpha_bar(t)).sqrt()
}

/// Noise prediction whose implied clean estimate is `G_t(x_t / sqrt(abar_t))`.
pub fn shrinkage_predict(schedule: &DiffusionSchedule, x_t: &Frame, t: usize, strength: f64) -> Result<Frame> {
    schedule.check_step(t)?;
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::config(format!("shrinkage strength must be in [0, 1], got {strength}")));
    }
    let ab = schedule.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    if sb <= 0.0 {
        return Err(Error::contract(format!("alpha_bar at step {t} is 1; noise is undefined")));
    }
    let x0 = gaussian_blur(&x_t.scale(1.0 / sa), shrinkage_sigma(schedule, t, strength));
    Ok(x_t.zip_map(&x0, |x, x0| (x - sa * x0) / sb))
}

pub struct ShrinkageDenoiser {
    schedule: DiffusionSchedule,
    strength: f64,
}

impl ShrinkageDenoiser {
    pub fn new(schedule: DiffusionSchedule, strength: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&strength) {
            return Err(Error::config(format!("shrinkage strength must be in [0, 1], got {strength}")));
        }
        Ok(Self { schedule, strength })
    }
}

impl EpsilonModel for ShrinkageDenoiser {
    fn name(&self) -> &'static str {
        "shrinkage"
    }

    fn predict(&self, x_t: &Frame, t: usize, _frame_index: usize, _ctx: Option<&PrevFrameContext>) -> Result<Prediction> {
        Ok(Prediction {
            eps: shrinkage_predict(&self.schedule, x_t, t, self.strength)?,
            context: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noisy(seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame::from_fn(12, 10, 3, |_, _, _| rng.random_range(-2.0..2.0)).unwrap()
    }

    fn implied_x0(s: &DiffusionSchedule, x: &Frame, t: usize, strength: f64) -> Frame {
        let eps = shrinkage_predict(s, x, t, strength).unwrap();
        s.predict_x0_unclamped(x, t, &eps).unwrap()
    }

    #[test]
    fn zero_strength_is_plain_rescale() {
        let s = DiffusionSchedule::default();
        let x = noisy(1);
        let x0 = implied_x0(&s, &x, 700, 0.0);
        assert!(x0.max_abs_diff(&x.scale(1.0 / s.alpha_bar(700).sqrt())) < 1e-9);
    }

    #[test]
    fn constants_stay_constant() {
        let s = DiffusionSchedule::default();
        let x = Frame::filled(9, 9, 3, 0.3);
        let x0 = implied_x0(&s, &x, 900, 1.0);
        let expect = 0.3 / s.alpha_bar(900).sqrt();
        assert!(x0.data().iter().all(|v| (v - expect).abs() < 1e-9 * expect.abs().max(1.0)));
    }

    #[test]
    fn blur_vanishes_near_step_zero() {
        let s = DiffusionSchedule::default();
        let x = noisy(2);
        let sigma = shrinkage_sigma(&s, 1, 1.0);
        assert!(sigma < 0.05);
        let x0 = implied_x0(&s, &x, 1, 1.0);
        assert!(x0.max_abs_diff(&x.scale(1.0 / s.alpha_bar(1).sqrt())) < 1e-4);
    }

    #[test]
    fn blur_width_shrinks_with_step() {
        let s = DiffusionSchedule::default();
        let sig: Vec<f64> = [1000, 500, 100, 10].iter().map(|&t| shrinkage_sigma(&s, t, 1.0)).collect();
        assert!(sig.windows(2).all(|w| w[0] > w[1]));
        assert!((sig[0] - SIGMA_MAX).abs() < 1e-3);
    }

    #[test]
    fn deterministic_and_shape_preserving() {
        let s = DiffusionSchedule::default();
        let x = noisy(3);
        let a = shrinkage_predict(&s, &x, 400, 0.7).unwrap();
        let b = shrinkage_predict(&s, &x, 400, 0.7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), x.shape());
    }

    #[test]
    fn strength_out_of_range_rejected() {
        let s = DiffusionSchedule::default();
        assert!(shrinkage_predict(&s, &noisy(4), 10, 1.5).is_err());
        assert!(ShrinkageDenoiser::new(s, -0.1).is_err());
    }
}
