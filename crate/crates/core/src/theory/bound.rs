use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inputs of the high-probability public-gradient gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapParams {
    /// Uniform bound on per-example gradient norms.
    pub grad_bound: f64,
    /// KL divergence between the reference and public prompt marginals.
    pub kl_shift: f64,
    /// Expected TV distance between reference and pseudo-label conditionals.
    pub label_noise: f64,
    /// Public examples per gradient estimate.
    pub public_batch: u64,
    pub param_dim: u64,
    pub total_steps: u64,
    /// Failure probability of the concentration event, strictly inside (0, 1).
    pub confidence: f64,
}

impl GapParams {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |name, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(name, format!("must be finite and >= 0, got {v}")))
            }
        };
        nonneg("grad_bound", self.grad_bound)?;
        nonneg("kl_shift", self.kl_shift)?;
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::invalid(
                "label_noise",
                format!("must lie in [0, 1], got {}", self.label_noise),
            ));
        }
        for (name, v) in [
            ("public_batch", self.public_batch),
            ("param_dim", self.param_dim),
            ("total_steps", self.total_steps),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::invalid(
                "confidence",
                format!("must lie strictly inside (0, 1), got {}", self.confidence),
            ));
        }
        Ok(())
    }
}

/// `G sqrt(2 tau) + 2 G eta + 4 G sqrt((2 / B) (d ln 5 + ln(2 T / rho)))`.
pub fn delta_t(p: &GapParams) -> Result<f64> {
    p.validate()?;
    let g = p.grad_bound;
    let shift = g * (2.0 * p.kl_shift).sqrt();
    let noise = 2.0 * g * p.label_noise;
    let log_term = p.param_dim as f64 * 5f64.ln() + (2.0 * p.total_steps as f64 / p.confidence).ln();
    let sampling = 4.0 * g * (2.0 / p.public_batch as f64 * log_term).sqrt();
    Ok(shift + noise + sampling)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationarityParams {
    pub gap: GapParams,
    pub smoothness: f64,
    pub step: f64,
    pub noise_var: f64,
    pub heterogeneity: f64,
    /// Initial suboptimality of the reference objective.
    pub init_gap: f64,
}

impl StationarityParams {
    pub fn validate(&self) -> Result<()> {
        self.gap.validate()?;
        if !(self.smoothness.is_finite() && self.smoothness > 0.0) {
            return Err(Error::invalid("smoothness", "must be finite and positive"));
        }
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(Error::invalid("step", "must be finite and positive"));
        }
        for (name, v) in [
            ("noise_var", self.noise_var),
            ("heterogeneity", self.heterogeneity),
            ("init_gap", self.init_gap),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        let limit = 1.0 / (4.0 * self.smoothness);
        if self.step > limit {
            return Err(Error::StepTooLarge {
                step: self.step,
                limit,
            });
        }
        Ok(())
    }
}

/// Right-hand side of the stationarity bound, split into its three terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StationarityBound {
    /// `4 (Phi(theta_0) - Phi*) / (step T)`.
    pub optimization: f64,
    /// `2 Lambda step (sigma^2 + zeta^2 / 4)`.
    pub noise: f64,
    /// `(3/4) Delta_T^2`.
    pub bias: f64,
    pub delta: f64,
    pub total: f64,
}

pub fn stationarity_rhs(p: &StationarityParams) -> Result<StationarityBound> {
    p.validate()?;
    let delta = delta_t(&p.gap)?;
    let t = p.gap.total_steps as f64;
    let optimization = 4.0 * p.init_gap / (p.step * t);
    let noise = 2.0 * p.smoothness * p.step * (p.noise_var + p.heterogeneity / 4.0);
    let bias = 0.75 * delta * delta;
    Ok(StationarityBound {
        optimization,
        noise,
        bias,
        delta,
        total: optimization + noise + bias,
    })
}
