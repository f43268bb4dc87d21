//! Content constraints tying the clean-image estimate to the observation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::DegradationOperator;
use crate::video::{Frame, Observation};

/// Smoothing constant of the Charbonnier distance.
pub const CHARBONNIER_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceNorm {
    L2Squared,
    L1Smooth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintMode {
    /// Range-space replacement `A^+ y + (I - A^+ A) x`.
    Projection,
    /// Descent along the gradient of `||A x - y||`.
    Gradient,
}

/// Outcome of applying a constraint to one estimate.
#[derive(Debug, Clone)]
pub struct ConstraintOutput {
    /// The estimate after projection (unchanged in gradient mode).
    pub x0: Frame,
    /// Gradient of the content loss (gradient mode only).
    pub grad: Option<Frame>,
    /// Content loss of the estimate before the constraint was applied.
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentConstraint {
    pub mode: ConstraintMode,
    pub norm: DistanceNorm,
}

impl ContentConstraint {
    pub fn projection() -> Self {
        Self {
            mode: ConstraintMode::Projection,
            norm: DistanceNorm::L2Squared,
        }
    }

    pub fn gradient(norm: DistanceNorm) -> Self {
        Self {
            mode: ConstraintMode::Gradient,
            norm,
        }
    }

    pub fn check(&self, op: &dyn DegradationOperator) -> Result<()> {
        if self.mode == ConstraintMode::Projection && !op.has_pseudo_inverse() {
            return Err(Error::config(format!(
                "null-space projection needs a pseudo-inverse, which '{}' does not provide",
                op.name()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, x0_hat: &Frame, y: &Observation, op: &dyn DegradationOperator) -> Result<ConstraintOutput> {
        match self.mode {
            ConstraintMode::Projection => {
                let residual = op.apply(x0_hat)?.sub(y);
                let loss = residual.dot(&residual);
                Ok(ConstraintOutput {
                    x0: ddnm_project(x0_hat, y, op)?,
                    grad: None,
                    loss,
                })
            }
            ConstraintMode::Gradient => {
                let (grad, loss) = distance_gradient(x0_hat, y, op, self.norm)?;
                Ok(ConstraintOutput {
                    x0: x0_hat.clone(),
                    grad: Some(grad),
                    loss,
                })
            }
        }
    }
}

/// Keeps the null-space content of `x0_hat` and replaces its range-space
/// content with the observation.
pub fn ddnm_project(x0_hat: &Frame, y: &Observation, op: &dyn DegradationOperator) -> Result<Frame> {
    if !op.has_pseudo_inverse() {
        return Err(Error::config(format!("'{}' has no pseudo-inverse", op.name())));
    }
    let range = op.pseudo_inverse(y)?;
    let null = op.null_space_part(x0_hat)?;
    range.ensure_same_shape(&null, "ddnm_project")?;
    Ok(range.add(&null))
}

/// Distance between `A x0_hat` and `y` and its gradient with respect to `x0_hat`.
pub fn distance_gradient(
    x0_hat: &Frame,
    y: &Observation,
    op: &dyn DegradationOperator,
    norm: DistanceNorm,
) -> Result<(Frame, f64)> {
    let ax = op.apply(x0_hat)?;
    ax.ensure_same_shape(y, "distance_gradient")?;
    let r = ax.sub(y);
    let (loss, dr) = match norm {
        DistanceNorm::L2Squared => (r.dot(&r), r.scale(2.0)),
        DistanceNorm::L1Smooth => {
            let e = CHARBONNIER_EPS;
            let loss = r.data().iter().map(|v| (v * v + e * e).sqrt() - e).sum();
            (loss, r.map(|v| v / (v * v + e * e).sqrt()))
        }
    };
    Ok((op.adjoint(&dr)?, loss))
}
