//! DDPM noise schedule and the closed-form forward/reverse relations.
//!
//! Arrays are indexed by step `t` in `0..=T`; index 0 holds the boundary
//! values (`alpha_bar[0] = 1`, `beta[0] = 0`).

use crate::error::{Error, Result};
use crate::video::Frame;

/// Linear-beta schedule with all derived quantities precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_variance: Vec<f64>,
    posterior_coef_x0: Vec<f64>,
    posterior_coef_xt: Vec<f64>,
}

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

impl DiffusionSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let mut beta = Vec::with_capacity(steps + 1);
        beta.push(0.0);
        for i in 0..steps {
            let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            beta.push(beta_start + frac * (beta_end - beta_start));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        let mut acc = 1.0;
        for &a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }

        let mut posterior_variance = vec![0.0; steps + 1];
        let mut posterior_coef_x0 = vec![0.0; steps + 1];
        let mut posterior_coef_xt = vec![0.0; steps + 1];
        for t in 1..=steps {
            let ab = alpha_bar[t];
            let ab_prev = alpha_bar[t - 1];
            posterior_variance[t] = (1.0 - ab_prev) / (1.0 - ab) * beta[t];
            posterior_coef_x0[t] = ab_prev.sqrt() * beta[t] / (1.0 - ab);
            posterior_coef_xt[t] = alpha[t].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        }

        Ok(Self {
            steps,
            beta,
            alpha,
            alpha_bar,
            posterior_variance,
            posterior_coef_x0,
            posterior_coef_xt,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_variance[t]
    }

    /// `(coef_x0, coef_xt)` of the posterior mean at step `t`.
    pub fn posterior_coefs(&self, t: usize) -> (f64, f64) {
        (self.posterior_coef_x0[t], self.posterior_coef_xt[t])
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::contract(format!("step {t} outside 1..={}", self.steps)));
        }
        Ok(())
    }

    /// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
    pub fn forward_sample(&self, x0: &Frame, t: usize, eps: &Frame) -> Result<Frame> {
        self.check_step(t)?;
        x0.ensure_same_shape(eps, "forward_sample")?;
        let (a, b) = (self.alpha_bar[t].sqrt(), (1.0 - self.alpha_bar[t]).sqrt());
        Ok(x0.zip_map(eps, |x, e| a * x + b * e))
    }

    /// Clean-image estimate from `x_t` and a noise prediction, before clamping.
    pub fn predict_x0_unclamped(&self, x_t: &Frame, t: usize, eps_hat: &Frame) -> Result<Frame> {
        self.check_step(t)?;
        x_t.ensure_same_shape(eps_hat, "predict_x0")?;
        let sa = self.alpha_bar[t].sqrt();
        let sb = (1.0 - self.alpha_bar[t]).sqrt();
        let data: Vec<f64> = x_t
            .data()
            .iter()
            .zip(eps_hat.data())
            .map(|(&x, &e)| x / sa - sb * e / sa)
            .collect();
        Frame::new(x_t.height(), x_t.width(), x_t.channels(), data)
    }

    /// Clean-image estimate clamped to `[-1, 1]`.
    pub fn predict_x0(&self, x_t: &Frame, t: usize, eps_hat: &Frame) -> Result<Frame> {
        Ok(self.predict_x0_unclamped(x_t, t, eps_hat)?.clamp_unit())
    }

    /// Mean and variance of `q(x_{t-1} | x_t, x0_hat)`.
    pub fn posterior_mean_var(&self, x_t: &Frame, x0_hat: &Frame, t: usize) -> Result<(Frame, f64)> {
        self.check_step(t)?;
        x_t.ensure_same_shape(x0_hat, "posterior_mean_var")?;
        let (c0, ct) = self.posterior_coefs(t);
        let mean = x0_hat.zip_map(x_t, |x0, xt| c0 * x0 + ct * xt);
        Ok((mean, self.posterior_variance[t]))
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule")
    }
}
