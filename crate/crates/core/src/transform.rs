//! Box-Cox power transform for strictly positive inter-arrival times.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SHIFT: f64 = 1e-7;
pub const DEFAULT_SCALE: f64 = 100.0;
/// Smallest value `invert` will return.
pub const MIN_DELTA: f64 = 1e-12;

const LAMBDA_BRACKET: (f64, f64) = (-5.0, 5.0);
const LAMBDA_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCoxParams {
    pub lambda: f64,
    pub shift: f64,
    pub scale: f64,
}

impl Default for BoxCoxParams {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            shift: DEFAULT_SHIFT,
            scale: DEFAULT_SCALE,
        }
    }
}

impl BoxCoxParams {
    pub fn new(lambda: f64, shift: f64, scale: f64) -> Result<Self> {
        if !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lambda {lambda} is not finite"
            )));
        }
        if !(shift > 0.0 && scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "shift ({shift}) and scale ({scale}) must be positive"
            )));
        }
        Ok(Self {
            lambda,
            shift,
            scale,
        })
    }

    /// Like [`BoxCoxParams::new`] but allows a zero shift; used for the
    /// textbook transform in tests and analysis.
    pub fn raw(lambda: f64) -> Self {
        Self {
            lambda,
            shift: 0.0,
            scale: 1.0,
        }
    }

    pub fn apply(&self, x_plus: f64) -> Result<f64> {
        apply(x_plus, self)
    }

    pub fn invert(&self, y: f64) -> Result<f64> {
        invert(y, self)
    }
}

fn box_cox(x: f64, lambda: f64) -> f64 {
    let l = lambda * x.ln();
    if lambda == 0.0 {
        x.ln()
    } else if l.abs() < 0.5 {
        // expm1 keeps precision for |lambda| close to zero.
        l.exp_m1() / lambda
    } else {
        (x.powf(lambda) - 1.0) / lambda
    }
}

pub fn apply(x_plus: f64, p: &BoxCoxParams) -> Result<f64> {
    if x_plus.is_nan() || x_plus <= 0.0 || !x_plus.is_finite() {
        return Err(Error::Domain(format!(
            "Box-Cox input {x_plus} must be positive and finite"
        )));
    }
    Ok(box_cox((x_plus + p.shift) * p.scale, p.lambda))
}

pub fn invert(y: f64, p: &BoxCoxParams) -> Result<f64> {
    if !y.is_finite() {
        return Err(Error::NonFinite(format!("Box-Cox inverse of {y}")));
    }
    let scaled = if p.lambda == 0.0 {
        y.exp()
    } else {
        let ly = p.lambda * y;
        if ly <= -1.0 {
            0.0
        } else {
            (ly.ln_1p() / p.lambda).exp()
        }
    };
    let x = scaled / p.scale - p.shift;
    Ok(x.clamp(MIN_DELTA, f64::MAX))
}

/// Profile log-likelihood of the Box-Cox model at `lambda` (up to a constant).
pub fn profile_log_likelihood(data: &[f64], lambda: f64) -> f64 {
    let n = data.len() as f64;
    let transformed: Vec<f64> = data.iter().map(|&x| box_cox(x, lambda)).collect();
    let mean = transformed.iter().sum::<f64>() / n;
    let var = transformed.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    let log_sum: f64 = data.iter().map(|x| x.ln()).sum();
    -0.5 * n * var.ln() + (lambda - 1.0) * log_sum
}

/// Fits lambda on training deltas by maximizing the profile likelihood of
/// `(delta + shift) * scale` with golden-section search over [-5, 5].
pub fn fit_lambda(train_deltas: &[f64]) -> Result<BoxCoxParams> {
    if train_deltas.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot fit Box-Cox on empty data".into(),
        ));
    }
    if let Some(bad) = train_deltas
        .iter()
        .find(|x| x.is_nan() || **x <= 0.0 || !x.is_finite())
    {
        return Err(Error::Domain(format!(
            "Box-Cox input {bad} must be positive"
        )));
    }
    let scaled: Vec<f64> = train_deltas
        .iter()
        .map(|x| (x + DEFAULT_SHIFT) * DEFAULT_SCALE)
        .collect();
    let first = scaled[0];
    let lambda = if scaled.iter().all(|&x| x == first) {
        1.0
    } else {
        golden_section_max(
            |l| profile_log_likelihood(&scaled, l),
            LAMBDA_BRACKET.0,
            LAMBDA_BRACKET.1,
            LAMBDA_TOL,
        )
    };
    BoxCoxParams::new(lambda, DEFAULT_SHIFT, DEFAULT_SCALE)
}

fn golden_section_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    while hi - lo > tol {
        // NaN likelihoods (overflow at extreme lambda) lose every comparison.
        if fc > fd || fd.is_nan() {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Maps raw deltas to the diffusion's real line: Box-Cox followed by a
/// z-score fitted on the transformed training data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeCodec {
    pub boxcox: BoxCoxParams,
    pub mean: f64,
    pub std: f64,
}

impl TimeCodec {
    pub fn identity(boxcox: BoxCoxParams) -> Self {
        Self {
            boxcox,
            mean: 0.0,
            std: 1.0,
        }
    }

    pub fn fit(train_deltas: &[f64]) -> Result<Self> {
        let boxcox = fit_lambda(train_deltas)?;
        let ys = train_deltas
            .iter()
            .map(|&x| apply(x, &boxcox))
            .collect::<Result<Vec<_>>>()?;
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 0.0 && var.is_finite() {
            var.sqrt()
        } else {
            1.0
        };
        Ok(Self { boxcox, mean, std })
    }

    pub fn encode(&self, delta: f64) -> Result<f64> {
        Ok((apply(delta, &self.boxcox)? - self.mean) / self.std)
    }

    pub fn decode(&self, z: f64) -> Result<f64> {
        invert(z * self.std + self.mean, &self.boxcox)
    }

    pub fn encode_all(&self, deltas: &[f64]) -> Result<Vec<f64>> {
        deltas.iter().map(|&d| self.encode(d)).collect()
    }
}
