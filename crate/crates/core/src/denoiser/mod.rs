//! Noise-prediction models.
//!
//! Three implementations share the [`EpsilonModel`] interface: an oracle that
//! knows the clean video, an analytic blur-shrinkage stand-in, and a small
//! U-Net with inflated convolutions and cross-previous-frame attention.

pub mod attention;
pub mod oracle;
pub mod shrinkage;
pub mod unet;
pub mod weights;

pub use attention::{AttentionLayer, KeyValue, Matrix, PrevFrameContext};
pub use oracle::{oracle_predict, OracleDenoiser};
pub use shrinkage::{shrinkage_predict, ShrinkageDenoiser, SIGMA_MAX};
pub use unet::{TinyUNet, TinyUNetSpec};

use crate::error::Result;
use crate::video::Frame;

/// Result of one noise prediction.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub eps: Frame,
    /// Keys/values for the next frame at the same step, if the model attends.
    pub context: Option<PrevFrameContext>,
}

pub trait EpsilonModel: Send + Sync {
    fn name(&self) -> &'static str;

    /// Predicts the noise in `x_t`. `frame_index` identifies the frame for
    /// models that carry per-frame state; `ctx` switches attention layers to
    /// cross-previous-frame mode.
    fn predict(&self, x_t: &Frame, t: usize, frame_index: usize, ctx: Option<&PrevFrameContext>) -> Result<Prediction>;

    /// Whether the model has attention layers that can consume a context.
    fn attends(&self) -> bool {
        false
    }
}
