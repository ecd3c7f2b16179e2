//! Forecast quality metrics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequences::EventSequence;

/// Deletion/insertion costs averaged by [`otd_avg`].
pub const OTD_COSTS: [f64; 7] = [0.05, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0];

/// Largest length [`otd_bruteforce`] accepts.
pub const BRUTEFORCE_MAX_LEN: usize = 6;

fn check_cost(c_del: f64) -> Result<()> {
    if c_del > 0.0 && c_del.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "deletion cost {c_del} must be positive"
        )))
    }
}

/// Arrival times of each type, measured from the forecast start.
fn by_type(seq: &EventSequence, num_types: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); num_types];
    for (t, &k) in seq.arrival_times().iter().zip(seq.types()) {
        out[k].push(*t);
    }
    out
}

/// Edit distance between two sorted time lists: match costs `|a - b|`,
/// deletion or insertion costs `c_del`.
fn align(a: &[f64], b: &[f64], c_del: f64) -> f64 {
    let mut prev: Vec<f64> = (0..=b.len()).map(|j| j as f64 * c_del).collect();
    let mut cur = vec![0.0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i as f64 * c_del;
        for j in 1..=b.len() {
            let matched = prev[j - 1] + (a[i - 1] - b[j - 1]).abs();
            cur[j] = matched.min(prev[j] + c_del).min(cur[j - 1] + c_del);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Optimal transport distance between event sequences. Only events of the
/// same type may be matched; each unmatched event costs `c_del`.
pub fn otd(pred: &EventSequence, truth: &EventSequence, c_del: f64) -> Result<f64> {
    check_cost(c_del)?;
    let k = pred.num_types().max(truth.num_types());
    let (p, t) = (by_type(pred, k), by_type(truth, k));
    Ok(p.iter().zip(&t).map(|(a, b)| align(a, b, c_del)).sum())
}

/// Exhaustive minimum over all one-to-one same-type matchings.
pub fn otd_bruteforce(pred: &EventSequence, truth: &EventSequence, c_del: f64) -> Result<f64> {
    check_cost(c_del)?;
    if pred.len() > BRUTEFORCE_MAX_LEN || truth.len() > BRUTEFORCE_MAX_LEN {
        return Err(Error::InvalidArgument(format!(
            "brute force is limited to {BRUTEFORCE_MAX_LEN} events per sequence"
        )));
    }
    let pa = pred.arrival_times();
    let ta = truth.arrival_times();

    fn search(
        i: usize,
        used: &mut Vec<bool>,
        pred: (&[f64], &[usize]),
        truth: (&[f64], &[usize]),
        c_del: f64,
        acc: f64,
        best: &mut f64,
    ) {
        if i == pred.0.len() {
            let unmatched = used.iter().filter(|u| !**u).count();
            *best = best.min(acc + unmatched as f64 * c_del);
            return;
        }
        search(i + 1, used, pred, truth, c_del, acc + c_del, best);
        for j in 0..truth.0.len() {
            if !used[j] && truth.1[j] == pred.1[i] {
                used[j] = true;
                let cost = (pred.0[i] - truth.0[j]).abs();
                search(i + 1, used, pred, truth, c_del, acc + cost, best);
                used[j] = false;
            }
        }
    }

    let mut best = f64::INFINITY;
    search(
        0,
        &mut vec![false; ta.len()],
        (&pa, pred.types()),
        (&ta, truth.types()),
        c_del,
        0.0,
        &mut best,
    );
    Ok(best)
}

/// OTD at each of [`OTD_COSTS`] and their mean.
pub fn otd_avg(pred: &EventSequence, truth: &EventSequence) -> Result<(f64, Vec<f64>)> {
    let per_cost = OTD_COSTS
        .iter()
        .map(|&c| otd(pred, truth, c))
        .collect::<Result<Vec<_>>>()?;
    let avg = per_cost.iter().sum::<f64>() / per_cost.len() as f64;
    Ok((avg, per_cost))
}

fn non_empty<T>(tasks: &[T]) -> Result<()> {
    if tasks.is_empty() {
        Err(Error::InvalidArgument("no tasks to score".into()))
    } else {
        Ok(())
    }
}

/// Root mean squared per-type count error, averaged over types then tasks.
pub fn rmse_e(tasks: &[(EventSequence, EventSequence)], num_types: usize) -> Result<f64> {
    non_empty(tasks)?;
    let mut total = 0.0;
    for (pred, truth) in tasks {
        let (p, t) = (pred.type_counts(), truth.type_counts());
        let sq: f64 = (0..num_types)
            .map(|k| {
                let a = t.get(k).copied().unwrap_or(0) as f64;
                let b = p.get(k).copied().unwrap_or(0) as f64;
                (a - b).powi(2)
            })
            .sum();
        total += sq / num_types as f64;
    }
    Ok((total / tasks.len() as f64).sqrt())
}

/// `(RMSE, MAPE, sMAPE)` on inter-arrival times; percentages are in [0, 100]
/// and [0, 200].
pub fn time_metrics(tasks: &[(EventSequence, EventSequence)]) -> Result<(f64, f64, f64)> {
    non_empty(tasks)?;
    let (mut sq, mut count) = (0.0, 0usize);
    let (mut mape, mut smape) = (0.0, 0.0);
    for (i, (pred, truth)) in tasks.iter().enumerate() {
        if pred.len() != truth.len() || truth.is_empty() {
            return Err(Error::Shape(format!(
                "task {i}: forecast has {} events, truth {}",
                pred.len(),
                truth.len()
            )));
        }
        let (mut m, mut s) = (0.0, 0.0);
        for (&x_hat, &x) in pred.deltas().iter().zip(truth.deltas()) {
            let err = (x - x_hat).abs();
            sq += err * err;
            m += err / x;
            s += 2.0 * err / (x.abs() + x_hat.abs());
        }
        let n = truth.len() as f64;
        mape += m / n;
        smape += s / n;
        count += truth.len();
    }
    let m = tasks.len() as f64;
    Ok((
        (sq / count as f64).sqrt(),
        100.0 * mape / m,
        100.0 * smape / m,
    ))
}

/// `(MAE, RMSE)` of the number of forecast events.
pub fn count_metrics(tasks: &[(EventSequence, EventSequence)]) -> Result<(f64, f64)> {
    non_empty(tasks)?;
    let diffs: Vec<f64> = tasks
        .iter()
        .map(|(p, t)| p.len() as f64 - t.len() as f64)
        .collect();
    let m = diffs.len() as f64;
    let mae = diffs.iter().map(|d| d.abs()).sum::<f64>() / m;
    let rmse = (diffs.iter().map(|d| d * d).sum::<f64>() / m).sqrt();
    Ok((mae, rmse))
}

/// `|x_i - x_hat_i|` per task and position.
pub fn per_position_errors(tasks: &[(EventSequence, EventSequence)]) -> Vec<Vec<f64>> {
    tasks
        .iter()
        .map(|(p, t)| {
            p.deltas()
                .iter()
                .zip(t.deltas())
                .map(|(a, b)| (a - b).abs())
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub otd_avg: f64,
    /// OTD per entry of [`OTD_COSTS`], averaged over tasks.
    pub otd_per_cost: Vec<f64>,
    pub rmse_e: f64,
    pub rmse_x: Option<f64>,
    pub mape: Option<f64>,
    pub smape: Option<f64>,
    pub mae_count: Option<f64>,
    pub rmse_count: Option<f64>,
    pub n_tasks: usize,
}

impl MetricsReport {
    /// Next-N reports carry time metrics; interval reports carry count
    /// metrics instead.
    pub fn compute(
        tasks: &[(EventSequence, EventSequence)],
        num_types: usize,
        interval: bool,
    ) -> Result<Self> {
        non_empty(tasks)?;
        let mut per_cost = vec![0.0; OTD_COSTS.len()];
        for (pred, truth) in tasks {
            let (_, costs) = otd_avg(pred, truth)?;
            per_cost
                .iter_mut()
                .zip(costs)
                .for_each(|(acc, c)| *acc += c);
        }
        let m = tasks.len() as f64;
        per_cost.iter_mut().for_each(|c| *c /= m);
        let otd_avg = per_cost.iter().sum::<f64>() / per_cost.len() as f64;
        let mut report = Self {
            otd_avg,
            otd_per_cost: per_cost,
            rmse_e: rmse_e(tasks, num_types)?,
            rmse_x: None,
            mape: None,
            smape: None,
            mae_count: None,
            rmse_count: None,
            n_tasks: tasks.len(),
        };
        if interval {
            let (mae, rmse) = count_metrics(tasks)?;
            report.mae_count = Some(mae);
            report.rmse_count = Some(rmse);
        } else {
            let (rmse, mape, smape) = time_metrics(tasks)?;
            report.rmse_x = Some(rmse);
            report.mape = Some(mape);
            report.smape = Some(smape);
        }
        Ok(report)
    }

    /// Column names and values in CSV order; absent metrics are skipped.
    pub fn columns(&self) -> Vec<(String, f64)> {
        let mut cols = vec![("otd_avg".to_string(), self.otd_avg)];
        for (c, v) in OTD_COSTS.iter().zip(&self.otd_per_cost) {
            cols.push((format!("otd_{c}"), *v));
        }
        cols.push(("rmse_e".into(), self.rmse_e));
        let optional = [
            ("rmse_x", self.rmse_x),
            ("mape", self.mape),
            ("smape", self.smape),
            ("mae_count", self.mae_count),
            ("rmse_count", self.rmse_count),
        ];
        for (name, v) in optional {
            if let Some(v) = v {
                cols.push((name.into(), v));
            }
        }
        cols.push(("n_tasks".into(), self.n_tasks as f64));
        cols
    }
}

/// One row per model. All reports must share the same columns.
pub fn write_reports_csv<W: Write>(rows: &[(String, MetricsReport)], w: &mut W) -> Result<()> {
    let io = |e| Error::io("<csv>", e);
    let Some((_, first)) = rows.first() else {
        return Ok(());
    };
    let header: Vec<String> = first.columns().into_iter().map(|(n, _)| n).collect();
    writeln!(w, "model,{}", header.join(",")).map_err(io)?;
    for (name, report) in rows {
        let cols = report.columns();
        if cols.len() != header.len() || cols.iter().zip(&header).any(|((a, _), b)| a != b) {
            return Err(Error::InvalidArgument(format!(
                "report for {name} has different columns"
            )));
        }
        let values: Vec<String> = cols.iter().map(|(_, v)| v.to_string()).collect();
        writeln!(w, "{name},{}", values.join(",")).map_err(io)?;
    }
    Ok(())
}
