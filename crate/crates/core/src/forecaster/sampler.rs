//! Reverse-diffusion sampling of one `(x_0, e_0)` draw.

use std::fmt;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{sample_categorical, type_mixture_between};
use crate::encoder::{one_hot, ContextEmbedding};
use crate::error::{Error, Result};
use crate::model::CDiffModel;
use crate::neural::{DenoiseOrder, Graph};
use crate::schedule::{ddim_subsequence, DiffusionSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Number of reverse steps; `None` runs the full chain.
    pub steps: Option<usize>,
    /// Deterministic time updates (no injected noise).
    pub eta_zero: bool,
    /// Samples aggregated per forecast.
    pub num_samples: usize,
    /// Which modality is updated first in each step; `None` follows the model.
    pub order: Option<DenoiseOrder>,
    /// Bound on the implied `x_0` (in codec units) at every step; `None`
    /// runs the raw recursion.
    pub clip_x0: Option<f64>,
}

pub const DEFAULT_X0_CLIP: f64 = 5.0;

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: None,
            eta_zero: false,
            num_samples: 5,
            order: None,
            clip_x0: Some(DEFAULT_X0_CLIP),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if let Some(s) = self.steps {
            if s == 0 || s > total_steps {
                return Err(Error::InvalidArgument(format!(
                    "sampler steps {s} must be in [1, {total_steps}]"
                )));
            }
        }
        if self.num_samples == 0 {
            return Err(Error::InvalidArgument("num_samples must be >= 1".into()));
        }
        if let Some(c) = self.clip_x0 {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "clip_x0 {c} must be positive"
                )));
            }
        }
        Ok(())
    }

    pub fn rule_name(&self) -> &'static str {
        if self.eta_zero {
            "ddim"
        } else {
            "ancestral"
        }
    }
}

/// One reverse update of the transformed times from step `t` to `t_next`.
pub trait TimeStepRule: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn step(
        &self,
        x: &[f64],
        eps: &[f64],
        t: usize,
        t_next: usize,
        sched: &DiffusionSchedule,
        rng: &mut dyn rand::RngCore,
    ) -> Vec<f64>;
}

/// Ancestral step with variance `1 - abar_t / abar_next` (equal to
/// `beta_t` when `t_next = t - 1`); the final step adds no noise.
#[derive(Debug, Clone, Copy, Default)]
pub struct Ancestral;

impl TimeStepRule for Ancestral {
    fn name(&self) -> &'static str {
        "ancestral"
    }

    fn step(
        &self,
        x: &[f64],
        eps: &[f64],
        t: usize,
        t_next: usize,
        sched: &DiffusionSchedule,
        rng: &mut dyn rand::RngCore,
    ) -> Vec<f64> {
        let alpha = sched.alpha_bar(t) / sched.alpha_bar(t_next);
        let beta = 1.0 - alpha;
        let coef = beta / (1.0 - sched.alpha_bar(t)).sqrt();
        let inv = 1.0 / alpha.sqrt();
        let sd = if t_next == 0 { 0.0 } else { beta.sqrt() };
        x.iter()
            .zip(eps)
            .map(|(&x, &e)| {
                let mean = (x - coef * e) * inv;
                if sd > 0.0 {
                    let z: f64 = rng.sample(StandardNormal);
                    mean + sd * z
                } else {
                    mean
                }
            })
            .collect()
    }
}

/// Deterministic implicit step through the predicted `x_0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Ddim;

impl TimeStepRule for Ddim {
    fn name(&self) -> &'static str {
        "ddim"
    }

    fn step(
        &self,
        x: &[f64],
        eps: &[f64],
        t: usize,
        t_next: usize,
        sched: &DiffusionSchedule,
        _rng: &mut dyn rand::RngCore,
    ) -> Vec<f64> {
        let ab = sched.alpha_bar(t);
        let ab_next = sched.alpha_bar(t_next);
        x.iter()
            .zip(eps)
            .map(|(&x, &e)| {
                let x0 = (x - (1.0 - ab).sqrt() * e) / ab.sqrt();
                ab_next.sqrt() * x0 + (1.0 - ab_next).sqrt() * e
            })
            .collect()
    }
}

const RULES: [&str; 2] = ["ancestral", "ddim"];

/// Looks up a time update rule by name.
pub fn time_step_rule(name: &str) -> Result<Box<dyn TimeStepRule>> {
    match name {
        "ancestral" => Ok(Box::new(Ancestral)),
        "ddim" => Ok(Box::new(Ddim)),
        _ => Err(Error::UnknownStrategy {
            name: name.to_string(),
            available: RULES.join(", "),
        }),
    }
}

/// One reverse-chain draw: transformed times and type indices.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSample {
    pub x0: Vec<f64>,
    pub types: Vec<usize>,
    pub num_types: usize,
}

impl GeneratedSample {
    pub fn one_hot(&self) -> Array2<f64> {
        one_hot(&self.types, self.num_types)
    }
}

fn e0_probs(
    model: &CDiffModel,
    x: &[f64],
    e: &[usize],
    t: usize,
    ctx: &ContextEmbedding,
) -> Result<Array2<f64>> {
    let mut g = Graph::new(&model.params);
    let vars = ctx.to_vars(&mut g);
    let logits = model.net.e0_logits(&mut g, x, e, t, vars)?;
    let p = g.softmax(logits);
    let p = g.value(p).clone();
    if p.iter().all(|v| v.is_finite()) {
        Ok(p)
    } else {
        Err(Error::SamplerDivergence { t })
    }
}

fn eps_values(
    model: &CDiffModel,
    x: &[f64],
    e: &[usize],
    t: usize,
    ctx: &ContextEmbedding,
) -> Result<Vec<f64>> {
    let mut g = Graph::new(&model.params);
    let vars = ctx.to_vars(&mut g);
    let eps = model.net.eps(&mut g, x, e, t, vars)?;
    let eps = g.value(eps).column(0).to_vec();
    if eps.iter().all(|v| v.is_finite()) {
        Ok(eps)
    } else {
        Err(Error::SamplerDivergence { t })
    }
}

fn jump_types(
    probs: &Array2<f64>,
    e: &[usize],
    t: usize,
    t_next: usize,
    sched: &DiffusionSchedule,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    probs
        .rows()
        .into_iter()
        .zip(e)
        .map(|(row, &et)| {
            let row = row.as_slice().expect("row");
            let mix = type_mixture_between(et, row, t, t_next, sched)?;
            Ok(sample_categorical(&mix, rng.random::<f64>()))
        })
        .collect()
}

/// Runs the reverse chain for `n` events over the steps of
/// `ddim_subsequence(T, steps)`.
/// Replaces `eps` by the noise consistent with the implied `x_0` clamped to
/// `[-c, c]`. Both step rules are linear in `eps`, so this is the same as
/// stepping from the clamped `x_0`.
fn clip_eps(
    x: &[f64],
    eps: Vec<f64>,
    t: usize,
    sched: &DiffusionSchedule,
    clip: Option<f64>,
) -> Vec<f64> {
    let Some(c) = clip else {
        return eps;
    };
    let (a, b) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
    x.iter()
        .zip(eps)
        .map(|(&x, e)| {
            let x0 = (x - b * e) / a;
            if x0.abs() > c {
                (x - a * x0.clamp(-c, c)) / b
            } else {
                e
            }
        })
        .collect()
}

pub fn sample_sequence(
    model: &CDiffModel,
    ctx: &ContextEmbedding,
    n: usize,
    scfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<GeneratedSample> {
    let sched = &model.schedule;
    let total = sched.steps();
    scfg.validate(total)?;
    if n == 0 {
        return Err(Error::InvalidArgument("cannot sample zero events".into()));
    }
    let k = model.config().num_types;
    let rule = time_step_rule(scfg.rule_name())?;
    let order = scfg.order.unwrap_or(model.config().order);
    let taus = ddim_subsequence(total, scfg.steps.unwrap_or(total))?;

    let mut x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let mut e: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    for (i, &t) in taus.iter().enumerate() {
        let t_next = taus.get(i + 1).copied().unwrap_or(0);
        match order {
            DenoiseOrder::TypeFirst | DenoiseOrder::Independent => {
                let probs = e0_probs(model, &x, &e, t, ctx)?;
                let e_next = jump_types(&probs, &e, t, t_next, sched, rng)?;
                let eps = clip_eps(
                    &x,
                    eps_values(model, &x, &e_next, t, ctx)?,
                    t,
                    sched,
                    scfg.clip_x0,
                );
                x = rule.step(&x, &eps, t, t_next, sched, rng);
                e = e_next;
            }
            DenoiseOrder::TimeFirst => {
                let eps = clip_eps(
                    &x,
                    eps_values(model, &x, &e, t, ctx)?,
                    t,
                    sched,
                    scfg.clip_x0,
                );
                let x_next = rule.step(&x, &eps, t, t_next, sched, rng);
                if x_next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::SamplerDivergence { t });
                }
                let probs = e0_probs(model, &x_next, &e, t, ctx)?;
                e = jump_types(&probs, &e, t, t_next, sched, rng)?;
                x = x_next;
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SamplerDivergence { t });
        }
        log::trace!("t={t} x={x:?}");
    }
    Ok(GeneratedSample {
        x0: x,
        types: e,
        num_types: k,
    })
}
