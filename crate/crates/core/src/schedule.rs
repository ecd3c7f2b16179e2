//! Cosine variance schedule and accelerated-sampling step selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Variance schedule for steps `1..=T`. Index 0 of every table holds the
/// conventional step-0 values (`beta = 0`, `alpha_bar = 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// Builds a schedule from `beta_1..beta_T`.
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument(
                "schedule needs at least one step".into(),
            ));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside (0, 1)")));
        }
        let mut beta = Vec::with_capacity(betas.len() + 1);
        let mut alpha = Vec::with_capacity(betas.len() + 1);
        let mut alpha_bar = Vec::with_capacity(betas.len() + 1);
        beta.push(0.0);
        alpha.push(1.0);
        alpha_bar.push(1.0);
        for &b in betas {
            beta.push(b);
            alpha.push(1.0 - b);
            alpha_bar.push(alpha_bar.last().unwrap() * (1.0 - b));
        }
        Ok(Self {
            steps: betas.len(),
            beta,
            alpha,
            alpha_bar,
        })
    }

    /// Total number of diffusion steps `T`.
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

    pub fn betas(&self) -> &[f64] {
        &self.beta[1..]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            Err(Error::InvalidArgument(format!(
                "diffusion step {t} outside [1, {}]",
                self.steps
            )))
        } else {
            Ok(())
        }
    }
}

/// `alpha_bar(t) = f(t)/f(0)` with `f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)`,
/// betas clipped to 0.999.
pub fn cosine_schedule(steps: usize) -> Result<DiffusionSchedule> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!(
            "cosine schedule needs T >= 2, got {steps}"
        )));
    }
    let f = |t: usize| {
        let u = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
        (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
    };
    let f0 = f(0);
    let betas: Vec<f64> = (1..=steps)
        .map(|t| {
            let ab = f(t) / f0;
            let ab_prev = f(t - 1) / f0;
            (1.0 - ab / ab_prev).min(MAX_BETA)
        })
        .collect();
    DiffusionSchedule::from_betas(&betas)
}

/// Evenly spaced subsequence of `steps` indices from `1..=T`, in sampling
/// order (descending). Contains both `T` and `1` whenever `steps >= 2`.
pub fn ddim_subsequence(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::InvalidArgument(format!(
            "sampling steps {steps} outside [1, {total}]"
        )));
    }
    if steps == 1 {
        return Ok(vec![total]);
    }
    let span = (total - 1) as f64 / (steps - 1) as f64;
    Ok((0..steps)
        .rev()
        .map(|k| (1.0 + k as f64 * span).round() as usize)
        .collect())
}
