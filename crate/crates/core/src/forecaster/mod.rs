//! Forecasting strategies behind one trait, looked up by name.

mod sampler;

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hawkes::{fit_poisson, PoissonBaseline};
use crate::model::CDiffModel;
use crate::rng::{derive_seed, stream_id, stream_rng, TAG_ROUND, TAG_SAMPLE};
use crate::sequences::EventSequence;
use crate::transform::{TimeCodec, MIN_DELTA};

pub use sampler::{
    sample_sequence, time_step_rule, Ancestral, Ddim, GeneratedSample, SamplerConfig, TimeStepRule,
    DEFAULT_X0_CLIP,
};

/// Rounds without a single unclamped delta before an interval forecast
/// gives up.
pub const STALL_ROUNDS: usize = 100;

pub trait Forecaster: Send + Sync {
    fn name(&self) -> &str;

    fn num_types(&self) -> usize;

    /// Events generated per round by [`Forecaster::forecast_interval`].
    fn interval_events(&self) -> usize;

    /// The next `n` events after `context`. All randomness comes from `seed`.
    fn forecast_n(&self, context: &EventSequence, n: usize, seed: u64) -> Result<EventSequence>;

    /// Events inside the window `(0, t_prime]` after `context`, generated
    /// round by round and truncated at the window end.
    fn forecast_interval(
        &self,
        context: &EventSequence,
        t_prime: f64,
        seed: u64,
    ) -> Result<EventSequence> {
        if !(t_prime.is_finite() && t_prime > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "interval length {t_prime} must be positive"
            )));
        }
        let n = self.interval_events().max(1);
        let mut ctx = context.clone();
        let mut out = EventSequence::empty(self.num_types());
        let mut elapsed = 0.0;
        let mut stalled = 0;
        for round in 0.. {
            let chunk = self.forecast_n(&ctx, n, derive_seed(seed, TAG_ROUND, round))?;
            if chunk.deltas().iter().all(|&d| d <= MIN_DELTA) {
                stalled += 1;
                if stalled >= STALL_ROUNDS {
                    return Err(Error::Stalled { rounds: stalled });
                }
            } else {
                stalled = 0;
            }
            for (&d, &k) in chunk.deltas().iter().zip(chunk.types()) {
                if elapsed + d > t_prime {
                    return Ok(out);
                }
                elapsed += d;
                out.push(d, k)?;
            }
            ctx.extend(&chunk);
        }
        unreachable!("the round counter is unbounded")
    }
}

/// Most frequent value in `votes`; ties go to the smallest index.
pub fn majority_vote(votes: &[usize], num_types: usize) -> usize {
    let mut counts = vec![0usize; num_types];
    for &v in votes {
        counts[v] += 1;
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    counts.iter().position(|&c| c == best).unwrap_or(0)
}

/// Averages the transformed times across samples before inverting, and
/// votes on types per position.
pub fn aggregate(samples: &[GeneratedSample], codec: &TimeCodec) -> Result<EventSequence> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("no samples to aggregate".into()))?;
    let n = first.x0.len();
    let k = first.num_types;
    let a = samples.len() as f64;
    let mut deltas = Vec::with_capacity(n);
    let mut types = Vec::with_capacity(n);
    for i in 0..n {
        let mean = samples.iter().map(|s| s.x0[i]).sum::<f64>() / a;
        deltas.push(codec.decode(mean)?);
        let votes: Vec<usize> = samples.iter().map(|s| s.types[i]).collect();
        types.push(majority_vote(&votes, k));
    }
    EventSequence::new(deltas, types, k)
}

#[derive(Debug, Clone)]
pub struct CDiffForecaster {
    model: Arc<CDiffModel>,
    sampler: SamplerConfig,
}

impl CDiffForecaster {
    pub fn new(model: Arc<CDiffModel>, sampler: SamplerConfig) -> Result<Self> {
        sampler.validate(model.schedule.steps())?;
        Ok(Self { model, sampler })
    }

    pub fn model(&self) -> &CDiffModel {
        &self.model
    }

    /// The `A` raw draws behind one forecast, in sample order.
    pub fn samples(
        &self,
        context: &EventSequence,
        n: usize,
        seed: u64,
    ) -> Result<Vec<GeneratedSample>> {
        let ctx = self.model.embed_context(context)?;
        (0..self.sampler.num_samples)
            .into_par_iter()
            .map(|a| {
                let mut rng = stream_rng(seed, stream_id(TAG_SAMPLE, 0, a as u64));
                sample_sequence(&self.model, &ctx, n, &self.sampler, &mut rng)
            })
            .collect()
    }
}

impl Forecaster for CDiffForecaster {
    fn name(&self) -> &str {
        "cdiff"
    }

    fn num_types(&self) -> usize {
        self.model.config().num_types
    }

    fn interval_events(&self) -> usize {
        self.model.interval_n
    }

    fn forecast_n(&self, context: &EventSequence, n: usize, seed: u64) -> Result<EventSequence> {
        let samples = self.samples(context, n, seed)?;
        aggregate(&samples, &self.model.codec)
    }
}

/// What a strategy may need to build itself.
#[derive(Clone)]
pub struct ForecasterInputs<'a> {
    pub train: &'a [EventSequence],
    pub num_types: usize,
    pub model: Option<Arc<CDiffModel>>,
    pub sampler: SamplerConfig,
    pub interval_n: usize,
}

type Builder = Box<dyn Fn(&ForecasterInputs) -> Result<Box<dyn Forecaster>> + Send + Sync>;

/// Named forecaster constructors.
pub struct ForecasterRegistry {
    entries: Vec<(String, Builder)>,
}

impl Default for ForecasterRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register("cdiff", |inp| {
            let model = inp.model.clone().ok_or_else(|| {
                Error::InvalidArgument("the cdiff forecaster needs a trained model".into())
            })?;
            Ok(Box::new(CDiffForecaster::new(model, inp.sampler.clone())?))
        });
        r.register("poisson", |inp| {
            let fitted: PoissonBaseline = fit_poisson(inp.train, inp.num_types)?;
            Ok(Box::new(fitted.with_interval_events(inp.interval_n)))
        });
        r
    }
}

impl ForecasterRegistry {
    pub fn empty() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    /// Adds or replaces the strategy `name`.
    pub fn register<F>(&mut self, name: &str, build: F)
    where
        F: Fn(&ForecasterInputs) -> Result<Box<dyn Forecaster>> + Send + Sync + 'static,
    {
        self.entries.retain(|(n, _)| n != name);
        self.entries.push((name.to_string(), Box::new(build)));
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn build(&self, name: &str, inputs: &ForecasterInputs) -> Result<Box<dyn Forecaster>> {
        let (_, build) = self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::UnknownStrategy {
                name: name.to_string(),
                available: self.names().join(", "),
            })?;
        build(inputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::ModelConfig;
    use crate::transform::BoxCoxParams;

    fn forecaster(samples: usize, eta_zero: bool) -> CDiffForecaster {
        let cfg = ModelConfig {
            embed: 4,
            heads: 2,
            layers: 1,
            ff: 8,
            num_types: 3,
            horizon: 3,
            steps: 10,
            seed: 1,
            ..ModelConfig::default()
        };
        let codec = TimeCodec::fit(&[0.4, 1.2, 0.7, 2.2, 0.1, 0.9]).unwrap();
        let model = Arc::new(CDiffModel::new(cfg, codec).unwrap());
        let sampler = SamplerConfig {
            num_samples: samples,
            eta_zero,
            steps: Some(5),
            ..SamplerConfig::default()
        };
        CDiffForecaster::new(model, sampler).unwrap()
    }

    fn ctx() -> EventSequence {
        EventSequence::new(vec![0.5, 0.9, 0.2, 1.4], vec![1, 0, 2, 1], 3).unwrap()
    }

    #[test]
    fn majority_rule() {
        assert_eq!(majority_vote(&[2, 2, 5], 6), 2);
        assert_eq!(majority_vote(&[3, 1], 4), 1);
        assert_eq!(majority_vote(&[0, 4, 4, 0, 2], 5), 0);
    }

    #[test]
    fn single_sample_is_passed_through() {
        let f = forecaster(1, false);
        let samples = f.samples(&ctx(), 3, 17).unwrap();
        let out = f.forecast_n(&ctx(), 3, 17).unwrap();
        assert_eq!(out.types(), samples[0].types.as_slice());
        for (d, x) in out.deltas().iter().zip(&samples[0].x0) {
            assert_eq!(*d, f.model().codec.decode(*x).unwrap());
        }
    }

    #[test]
    fn aggregation_averages_in_transformed_space() {
        let codec = TimeCodec::identity(BoxCoxParams::raw(0.0));
        let s = |x: f64, k| GeneratedSample {
            x0: vec![x],
            types: vec![k],
            num_types: 3,
        };
        let out = aggregate(&[s(0.0, 2), s(2.0, 2), s(1.0, 1)], &codec).unwrap();
        assert!((out.deltas()[0] - 1f64.exp()).abs() < 1e-12);
        assert_eq!(out.types(), &[2]);
        assert!(aggregate(&[], &codec).is_err());
    }

    #[test]
    fn forecasts_are_valid_and_reproducible() {
        let f = forecaster(3, false);
        let a = f.forecast_n(&ctx(), 4, 5).unwrap();
        let b = f.forecast_n(&ctx(), 4, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(a.deltas().iter().all(|&d| d > 0.0));
        assert_ne!(a, f.forecast_n(&ctx(), 4, 6).unwrap());
    }

    #[test]
    fn interval_forecasts_are_prefixes() {
        let f = forecaster(2, false);
        let mut prev: Option<EventSequence> = None;
        for t_prime in [40.0, 20.0, 10.0, 5.0, 2.0, 0.5, 1e-9] {
            let out = f.forecast_interval(&ctx(), t_prime, 3).unwrap();
            assert!(out.duration() <= t_prime);
            if let Some(p) = &prev {
                assert!(out.len() <= p.len());
                assert_eq!(p.slice(0, out.len()), out);
            }
            prev = Some(out);
        }
        assert!(f.forecast_interval(&ctx(), 0.0, 3).is_err());
    }

    struct Frozen;

    impl Forecaster for Frozen {
        fn name(&self) -> &str {
            "frozen"
        }
        fn num_types(&self) -> usize {
            1
        }
        fn interval_events(&self) -> usize {
            2
        }
        fn forecast_n(&self, _: &EventSequence, n: usize, _: u64) -> Result<EventSequence> {
            EventSequence::new(vec![MIN_DELTA; n], vec![0; n], 1)
        }
    }

    #[test]
    fn clamped_rounds_stall() {
        let ctx = EventSequence::new(vec![1.0], vec![0], 1).unwrap();
        assert!(matches!(
            Frozen.forecast_interval(&ctx, 1.0, 0),
            Err(Error::Stalled {
                rounds: STALL_ROUNDS
            })
        ));
    }

    #[test]
    fn registry_lookup() {
        let reg = ForecasterRegistry::default();
        assert_eq!(reg.names(), vec!["cdiff", "poisson"]);
        let train = vec![ctx()];
        let inputs = ForecasterInputs {
            train: &train,
            num_types: 3,
            model: None,
            sampler: SamplerConfig::default(),
            interval_n: 4,
        };
        assert!(reg.build("cdiff", &inputs).is_err());
        let p = reg.build("poisson", &inputs).unwrap();
        assert_eq!(p.name(), "poisson");
        assert_eq!(p.interval_events(), 4);
        assert!(matches!(
            reg.build("hypro", &inputs),
            Err(Error::UnknownStrategy { .. })
        ));
        let mut reg = reg;
        reg.register("frozen", |_| Ok(Box::new(Frozen)));
        assert_eq!(reg.build("frozen", &inputs).unwrap().name(), "frozen");
    }
}
