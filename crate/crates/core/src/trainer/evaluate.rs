use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forecaster::{Forecaster, ForecasterInputs, ForecasterRegistry, SamplerConfig};
use crate::metrics::MetricsReport;
use crate::model::CDiffModel;
use crate::rng::{derive_seed, TAG_TASK};
use crate::sequences::{
    split_context_target, split_interval, Dataset, EventSequence, ForecastTask, Split,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalMode {
    /// Forecast the last `n` events of each sequence.
    NextN(usize),
    /// Forecast every event within this window.
    Interval(f64),
}

impl EvalMode {
    pub fn is_interval(self) -> bool {
        matches!(self, EvalMode::Interval(_))
    }

    pub fn task(self, seq: &EventSequence) -> Result<ForecastTask> {
        match self {
            EvalMode::NextN(n) => split_context_target(seq, n),
            EvalMode::Interval(t) => split_interval(seq, t),
        }
    }
}

/// Scores plus the `(forecast, truth)` pairs behind them.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub pairs: Vec<(EventSequence, EventSequence)>,
}

/// Forecasts every test task with `forecaster`. Task `j` uses a seed derived
/// from `seed` and `j`, so results do not depend on scheduling.
pub fn evaluate_forecaster(
    forecaster: &dyn Forecaster,
    test: &[EventSequence],
    mode: EvalMode,
    seed: u64,
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("the test split is empty".into()));
    }
    let tasks: Vec<ForecastTask> = test
        .iter()
        .enumerate()
        .map(|(i, s)| {
            mode.task(s).map_err(|e| Error::InvalidSequence {
                index: i,
                message: format!("test split: {e}"),
            })
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<(EventSequence, EventSequence)> = tasks
        .par_iter()
        .enumerate()
        .map(|(j, task)| {
            let s = derive_seed(seed, TAG_TASK, j as u64);
            let pred = match mode {
                EvalMode::NextN(n) => forecaster.forecast_n(&task.context, n, s)?,
                EvalMode::Interval(t) => forecaster.forecast_interval(&task.context, t, s)?,
            };
            Ok((pred, task.target.clone()))
        })
        .collect::<Result<_>>()?;
    let report = MetricsReport::compute(&pairs, forecaster.num_types(), mode.is_interval())?;
    Ok(Evaluation { report, pairs })
}

/// Evaluates the named strategy on the test split of `data`.
pub fn evaluate(
    strategy: &str,
    model: Option<Arc<CDiffModel>>,
    data: &Dataset,
    sampler: &SamplerConfig,
    mode: EvalMode,
    seed: u64,
) -> Result<Evaluation> {
    let train = data.split_vec(Split::Train);
    let interval_n = model.as_ref().map_or(1, |m| m.interval_n);
    let inputs = ForecasterInputs {
        train: &train,
        num_types: data.num_types,
        model,
        sampler: sampler.clone(),
        interval_n,
    };
    let forecaster = ForecasterRegistry::default().build(strategy, &inputs)?;
    evaluate_forecaster(
        forecaster.as_ref(),
        &data.split_vec(Split::Test),
        mode,
        seed,
    )
}
