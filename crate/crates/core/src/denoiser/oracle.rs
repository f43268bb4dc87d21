//! Noise prediction from a known clean video.

use super::{EpsilonModel, Prediction, PrevFrameContext};
use crate::error::{Error, Result};
use crate::schedule::DiffusionSchedule;
use crate::video::{Frame, VideoTensor};

/// The exact noise that maps `x0_true` to `x_t`:
/// `(x_t - sqrt(abar_t) x0) / sqrt(1 - abar_t)`.
pub fn oracle_predict(schedule: &DiffusionSchedule, x_t: &Frame, t: usize, x0_true: &Frame) -> Result<Frame> {
    schedule.check_step(t)?;
    x_t.ensure_same_shape(x0_true, "oracle_predict")?;
    let ab = schedule.alpha_bar(t);
    let denom = (1.0 - ab).sqrt();
    if denom <= 0.0 {
        return Err(Error::contract(format!("alpha_bar at step {t} is 1; noise is undefined")));
    }
    let sa = ab.sqrt();
    Ok(x_t.zip_map(x0_true, |x, x0| (x - sa * x0) / denom))
}

pub struct OracleDenoiser {
    schedule: DiffusionSchedule,
    truth: VideoTensor,
}

impl OracleDenoiser {
    pub fn new(schedule: DiffusionSchedule, truth: VideoTensor) -> Self {
        Self { schedule, truth }
    }
}

impl EpsilonModel for OracleDenoiser {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn predict(&self, x_t: &Frame, t: usize, frame_index: usize, _ctx: Option<&PrevFrameContext>) -> Result<Prediction> {
        let x0 = self.truth.frames().get(frame_index).ok_or_else(|| {
            Error::contract(format!(
                "oracle knows {} frames, asked for frame {frame_index}",
                self.truth.len()
            ))
        })?;
        Ok(Prediction {
            eps: oracle_predict(&self.schedule, x_t, t, x0)?,
            context: None,
        })
    }
}
