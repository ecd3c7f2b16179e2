//! Multivariate Hawkes simulation (Ogata thinning) for synthetic corpora,
//! and the homogeneous Poisson baseline.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::sample_categorical;
use crate::error::{Error, Result};
use crate::forecaster::Forecaster;
use crate::rng::{seeded, stream_id, stream_rng, TAG_HAWKES};
use crate::sequences::{Dataset, EventSequence, Split};

/// Intensities below this are treated as zero when pruning history.
const NEGLIGIBLE: f64 = 1e-14;
/// Runaway guard relative to the total base intensity.
const RUNAWAY: f64 = 1e6;

/// The four impact functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    A,
    B,
    C,
    D,
}

impl Kernel {
    pub const ALL: [Kernel; 4] = [Kernel::A, Kernel::B, Kernel::C, Kernel::D];

    fn eval(self, y: f64) -> f64 {
        match self {
            Kernel::A => 0.99 * (-0.4 * y).exp(),
            Kernel::B => {
                0.01 * (-0.8 * y).exp() + 0.03 * (-0.6 * y).exp() + 0.05 * (-0.4 * y).exp()
            }
            Kernel::C => 0.25 * (3.0 * y).cos().abs() * (-0.1 * y).exp(),
            Kernel::D => {
                if y <= 0.5 {
                    0.1 * (0.5 + y).powi(2)
                } else {
                    0.1 * (-0.1 * (y - 0.5)).exp()
                }
            }
        }
    }

    /// `sup_{s >= y} g(s)`: a non-increasing bound on the kernel.
    pub fn envelope(self, y: f64) -> f64 {
        match self {
            Kernel::A | Kernel::B => self.eval(y),
            Kernel::C => 0.25 * (-0.1 * y).exp(),
            Kernel::D => {
                if y <= 0.5 {
                    0.1
                } else {
                    self.eval(y)
                }
            }
        }
    }

    /// `int_0^inf g(y) dy`.
    pub fn integral(self) -> f64 {
        match self {
            Kernel::A => 0.99 / 0.4,
            Kernel::B => 0.01 / 0.8 + 0.03 / 0.6 + 0.05 / 0.4,
            Kernel::C => {
                // Over each half period of |cos 3y| the integral has a closed
                // form; summing the geometric series over periods gives this.
                let (a, w) = (0.1f64, 3.0f64);
                let p = std::f64::consts::PI / w;
                // int_0^{p/2} cos(wy) e^{-ay} and the two halves of one period.
                let first = |lo: f64, hi: f64, sign: f64| {
                    let f = |y: f64| {
                        (-a * y).exp() * (w * (w * y).sin() - a * (w * y).cos()) / (a * a + w * w)
                    };
                    sign * (f(hi) - f(lo))
                };
                let one_period = first(0.0, p / 2.0, 1.0) + first(p / 2.0, p, -1.0);
                0.25 * one_period / (1.0 - (-a * p).exp())
            }
            Kernel::D => 0.1 * (1.0 - 0.125) / 3.0 + 1.0,
        }
    }

    /// Lag beyond which the envelope stays below [`NEGLIGIBLE`].
    fn horizon(self) -> f64 {
        match self {
            Kernel::A => (0.99 / NEGLIGIBLE).ln() / 0.4,
            Kernel::B => (0.09 / NEGLIGIBLE).ln() / 0.4,
            Kernel::C => (0.25 / NEGLIGIBLE).ln() / 0.1,
            Kernel::D => 0.5 + (0.1 / NEGLIGIBLE).ln() / 0.1,
        }
    }
}

/// `g(y)` for one of the four kernels.
pub fn impact(kind: Kernel, y: f64) -> Result<f64> {
    if y.is_nan() || y < 0.0 {
        return Err(Error::Domain(format!("impact lag {y} must be >= 0")));
    }
    Ok(kind.eval(y))
}

/// Base rates and kernel assignment. `impact_ids[j][i]` couples type `i`
/// onto type `j`; every kernel is multiplied by `kernel_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HawkesSpec {
    pub mu: Vec<f64>,
    pub impact_ids: Vec<Vec<Kernel>>,
    pub kernel_scale: f64,
}

impl HawkesSpec {
    pub fn new(mu: Vec<f64>, impact_ids: Vec<Vec<Kernel>>, kernel_scale: f64) -> Result<Self> {
        let k = mu.len();
        if k == 0 {
            return Err(Error::InvalidArgument(
                "at least one event type is needed".into(),
            ));
        }
        if mu.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
            return Err(Error::InvalidArgument(
                "base intensities must be positive".into(),
            ));
        }
        if impact_ids.len() != k || impact_ids.iter().any(|r| r.len() != k) {
            return Err(Error::Shape(format!("impact ids must be {k} x {k}")));
        }
        if !(kernel_scale >= 0.0 && kernel_scale.is_finite()) {
            return Err(Error::InvalidArgument("kernel scale must be >= 0".into()));
        }
        let spec = Self {
            mu,
            impact_ids,
            kernel_scale,
        };
        let rho = spec.spectral_radius();
        if rho >= 1.0 {
            return Err(Error::InvalidArgument(format!(
                "unstable kernels: branching spectral radius {rho:.4} >= 1"
            )));
        }
        Ok(spec)
    }

    /// Uniform kernel draw, rescaled so the spectral radius is at most
    /// `max_branching`.
    pub fn random(num_types: usize, mu: f64, max_branching: f64, seed: u64) -> Result<Self> {
        if !(max_branching > 0.0 && max_branching < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "max_branching {max_branching} must be in (0, 1)"
            )));
        }
        let mut rng = stream_rng(seed, stream_id(TAG_HAWKES, 1, 0));
        let ids: Vec<Vec<Kernel>> = (0..num_types)
            .map(|_| {
                (0..num_types)
                    .map(|_| Kernel::ALL[rng.random_range(0..Kernel::ALL.len())])
                    .collect()
            })
            .collect();
        let raw = Self {
            mu: vec![mu; num_types],
            impact_ids: ids.clone(),
            kernel_scale: 1.0,
        }
        .spectral_radius();
        let scale = if raw > max_branching {
            max_branching / raw
        } else {
            1.0
        };
        Self::new(vec![mu; num_types], ids, scale)
    }

    /// Pure Poisson superposition.
    pub fn zero_kernels(mu: Vec<f64>) -> Result<Self> {
        let k = mu.len();
        Self::new(mu, vec![vec![Kernel::A; k]; k], 0.0)
    }

    pub fn num_types(&self) -> usize {
        self.mu.len()
    }

    pub fn branching_matrix(&self) -> DMatrix<f64> {
        let k = self.num_types();
        DMatrix::from_fn(k, k, |j, i| {
            self.kernel_scale * self.impact_ids[j][i].integral()
        })
    }

    pub fn spectral_radius(&self) -> f64 {
        self.branching_matrix()
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    fn history_horizon(&self) -> f64 {
        self.impact_ids
            .iter()
            .flatten()
            .map(|k| k.horizon())
            .fold(0.0, f64::max)
    }
}

/// Thinning bookkeeping; `max_ratio <= 1` means the bound always held.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ThinningStats {
    pub proposals: usize,
    pub accepted: usize,
    pub max_ratio: f64,
}

fn intensities(spec: &HawkesSpec, history: &[(f64, usize)], t: f64, envelope: bool) -> Vec<f64> {
    let mut lam = spec.mu.clone();
    if spec.kernel_scale == 0.0 {
        return lam;
    }
    for &(tk, i) in history {
        let y = t - tk;
        for (j, l) in lam.iter_mut().enumerate() {
            let kind = spec.impact_ids[j][i];
            let g = if envelope {
                kind.envelope(y)
            } else {
                kind.eval(y)
            };
            *l += spec.kernel_scale * g;
        }
    }
    lam
}

/// Ogata thinning for `n_events` events from time 0.
pub fn simulate(spec: &HawkesSpec, n_events: usize, rng: &mut impl Rng) -> Result<EventSequence> {
    simulate_with_stats(spec, n_events, rng).map(|(s, _)| s)
}

pub fn simulate_with_stats(
    spec: &HawkesSpec,
    n_events: usize,
    rng: &mut impl Rng,
) -> Result<(EventSequence, ThinningStats)> {
    let k = spec.num_types();
    let base: f64 = spec.mu.iter().sum();
    let horizon = spec.history_horizon();
    let mut stats = ThinningStats::default();
    let mut history: Vec<(f64, usize)> = Vec::new();
    let mut deltas = Vec::with_capacity(n_events);
    let mut types = Vec::with_capacity(n_events);
    let (mut now, mut last) = (0.0f64, 0.0f64);
    while types.len() < n_events {
        history.retain(|&(tk, _)| now - tk <= horizon);
        let bound: f64 = intensities(spec, &history, now, true).iter().sum();
        if bound > RUNAWAY * base {
            return Err(Error::HawkesDivergence {
                intensity: bound,
                events: types.len(),
            });
        }
        let gap = Exp::new(bound)
            .map_err(|e| Error::Domain(format!("intensity bound {bound}: {e}")))?
            .sample(rng);
        now += gap;
        let lam = intensities(spec, &history, now, false);
        let total: f64 = lam.iter().sum();
        stats.proposals += 1;
        stats.max_ratio = stats.max_ratio.max(total / bound);
        if rng.random::<f64>() * bound <= total {
            let kind = sample_categorical(&lam, rng.random::<f64>());
            deltas.push(now - last);
            types.push(kind);
            history.push((now, kind));
            last = now;
            stats.accepted += 1;
        }
    }
    Ok((EventSequence::new(deltas, types, k)?, stats))
}

/// Synthetic corpus settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HawkesConfig {
    pub num_types: usize,
    pub mu: f64,
    pub max_branching: f64,
    pub min_events: usize,
    pub max_events: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for HawkesConfig {
    fn default() -> Self {
        Self {
            num_types: 5,
            mu: 0.1,
            max_branching: 0.9,
            min_events: 20,
            max_events: 40,
            n_train: 1500,
            n_val: 400,
            n_test: 500,
        }
    }
}

/// Simulates the train, validation and test sequences, each from its own
/// stream. Returns the corpus and the kernel specification used.
pub fn generate_dataset(cfg: &HawkesConfig, seed: u64) -> Result<(Dataset, HawkesSpec)> {
    if cfg.min_events == 0 || cfg.min_events > cfg.max_events {
        return Err(Error::InvalidArgument(format!(
            "sequence length range [{}, {}] is empty",
            cfg.min_events, cfg.max_events
        )));
    }
    let spec = HawkesSpec::random(cfg.num_types, cfg.mu, cfg.max_branching, seed)?;
    let splits: Vec<Split> = std::iter::repeat_n(Split::Train, cfg.n_train)
        .chain(std::iter::repeat_n(Split::Val, cfg.n_val))
        .chain(std::iter::repeat_n(Split::Test, cfg.n_test))
        .collect();
    let sequences = (0..splits.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, stream_id(TAG_HAWKES, 0, i as u64));
            let n = rng.random_range(cfg.min_events..=cfg.max_events);
            simulate(&spec, n, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        Dataset::new(sequences, splits, cfg.num_types, "time")?,
        spec,
    ))
}

/// Constant-rate arrivals with types drawn from the training marginal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonBaseline {
    pub rate: f64,
    pub type_probs: Vec<f64>,
    /// Events per round in interval forecasts.
    pub interval_events: usize,
}

impl PoissonBaseline {
    pub fn with_interval_events(mut self, n: usize) -> Self {
        self.interval_events = n.max(1);
        self
    }
}

/// `rate = 1 / mean delta`, `type_probs` = empirical type frequencies.
pub fn fit_poisson(train: &[EventSequence], num_types: usize) -> Result<PoissonBaseline> {
    let (mut sum, mut n) = (0.0, 0usize);
    let mut counts = vec![0usize; num_types];
    for seq in train {
        sum += seq.deltas().iter().sum::<f64>();
        n += seq.len();
        for &k in seq.types() {
            if k >= num_types {
                return Err(Error::Domain(format!("type {k} outside [0, {num_types})")));
            }
            counts[k] += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument(
            "cannot fit a baseline on no events".into(),
        ));
    }
    Ok(PoissonBaseline {
        rate: n as f64 / sum,
        type_probs: counts.iter().map(|&c| c as f64 / n as f64).collect(),
        interval_events: 1,
    })
}

pub fn poisson_forecast_n(
    b: &PoissonBaseline,
    n: usize,
    rng: &mut impl Rng,
) -> Result<EventSequence> {
    let exp = Exp::new(b.rate).map_err(|e| Error::Domain(format!("rate {}: {e}", b.rate)))?;
    let mut deltas = Vec::with_capacity(n);
    let mut types = Vec::with_capacity(n);
    for _ in 0..n {
        let d: f64 = exp.sample(rng);
        deltas.push(d.max(f64::MIN_POSITIVE));
        types.push(sample_categorical(&b.type_probs, rng.random::<f64>()));
    }
    EventSequence::new(deltas, types, b.type_probs.len())
}

impl Forecaster for PoissonBaseline {
    fn name(&self) -> &str {
        "poisson"
    }

    fn num_types(&self) -> usize {
        self.type_probs.len()
    }

    fn interval_events(&self) -> usize {
        self.interval_events
    }

    fn forecast_n(&self, _context: &EventSequence, n: usize, seed: u64) -> Result<EventSequence> {
        poisson_forecast_n(self, n, &mut seeded(seed))
    }
}
