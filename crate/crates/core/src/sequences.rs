//! Event sequences, datasets, forecasting tasks and the JSONL exchange format.
//!
//! A dataset file starts with a header line `{"K":<int>,"unit":"<string>"}`
//! followed by one JSON object per sequence:
//! `{"deltas":[...],"types":[...],"split":"train|val|test"}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An ordered list of `(inter-arrival time, event type)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSequence {
    deltas: Vec<f64>,
    types: Vec<usize>,
    num_types: usize,
}

impl EventSequence {
    pub fn new(deltas: Vec<f64>, types: Vec<usize>, num_types: usize) -> Result<Self> {
        let seq = Self {
            deltas,
            types,
            num_types,
        };
        seq.validate()
            .map_err(|message| Error::InvalidSequence { index: 0, message })?;
        Ok(seq)
    }

    pub fn empty(num_types: usize) -> Self {
        Self {
            deltas: Vec::new(),
            types: Vec::new(),
            num_types,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.num_types == 0 {
            return Err("K must be at least 1".into());
        }
        if self.deltas.len() != self.types.len() {
            return Err(format!(
                "{} deltas but {} types",
                self.deltas.len(),
                self.types.len()
            ));
        }
        if let Some((i, d)) = self
            .deltas
            .iter()
            .enumerate()
            .find(|(_, d)| !(d.is_finite() && **d > 0.0))
        {
            return Err(format!("delta[{i}] = {d} is not a positive finite number"));
        }
        if let Some((i, k)) = self
            .types
            .iter()
            .enumerate()
            .find(|(_, k)| **k >= self.num_types)
        {
            return Err(format!("type[{i}] = {k} outside [0, {})", self.num_types));
        }
        Ok(())
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    pub fn types(&self) -> &[usize] {
        &self.types
    }

    pub fn num_types(&self) -> usize {
        self.num_types
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    /// Total elapsed time, i.e. the last arrival time (0 for an empty sequence).
    pub fn duration(&self) -> f64 {
        self.deltas.iter().sum()
    }

    /// Cumulative arrival times measured from the start of the sequence.
    pub fn arrival_times(&self) -> Vec<f64> {
        self.deltas
            .iter()
            .scan(0.0, |acc, d| {
                *acc += d;
                Some(*acc)
            })
            .collect()
    }

    /// Sub-range `[start, end)` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            deltas: self.deltas[start..end].to_vec(),
            types: self.types[start..end].to_vec(),
            num_types: self.num_types,
        }
    }

    pub fn push(&mut self, delta: f64, kind: usize) -> Result<()> {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::Domain(format!("delta {delta} must be positive")));
        }
        if kind >= self.num_types {
            return Err(Error::Domain(format!(
                "type {kind} outside [0, {})",
                self.num_types
            )));
        }
        self.deltas.push(delta);
        self.types.push(kind);
        Ok(())
    }

    pub fn extend(&mut self, other: &EventSequence) {
        debug_assert_eq!(self.num_types, other.num_types);
        self.deltas.extend_from_slice(&other.deltas);
        self.types.extend_from_slice(&other.types);
    }

    /// Count of events per type.
    pub fn type_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_types];
        for &k in &self.types {
            counts[k] += 1;
        }
        counts
    }
}

/// Free-function form of [`EventSequence::arrival_times`].
pub fn arrival_times(seq: &EventSequence) -> Vec<f64> {
    seq.arrival_times()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<EventSequence>,
    pub splits: Vec<Split>,
    pub num_types: usize,
    pub unit: String,
}

impl Dataset {
    pub fn new(
        sequences: Vec<EventSequence>,
        splits: Vec<Split>,
        num_types: usize,
        unit: impl Into<String>,
    ) -> Result<Self> {
        if sequences.len() != splits.len() {
            return Err(Error::InvalidArgument(format!(
                "{} sequences but {} split tags",
                sequences.len(),
                splits.len()
            )));
        }
        for (index, seq) in sequences.iter().enumerate() {
            if seq.num_types != num_types {
                return Err(Error::InvalidSequence {
                    index,
                    message: format!("K={} differs from dataset K={num_types}", seq.num_types),
                });
            }
        }
        Ok(Self {
            sequences,
            splits,
            num_types,
            unit: unit.into(),
        })
    }

    pub fn split(&self, which: Split) -> impl Iterator<Item = &EventSequence> {
        self.sequences
            .iter()
            .zip(&self.splits)
            .filter(move |(_, s)| **s == which)
            .map(|(seq, _)| seq)
    }

    pub fn split_vec(&self, which: Split) -> Vec<EventSequence> {
        self.split(which).cloned().collect()
    }

    pub fn count(&self, which: Split) -> usize {
        self.splits.iter().filter(|s| **s == which).count()
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    #[serde(rename = "K")]
    k: usize,
    unit: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    deltas: Vec<f64>,
    types: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

/// Reads a JSONL dataset. Records without a `split` tag are treated as `train`.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut lines = reader.lines().enumerate();
    let header: Header = loop {
        match lines.next() {
            None => {
                return Err(Error::Parse {
                    line: 1,
                    message: "missing header line".into(),
                })
            }
            Some((i, line)) => {
                let line = line.map_err(|e| Error::io("<reader>", e))?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            }
        }
    };
    if header.k == 0 {
        return Err(Error::Parse {
            line: 1,
            message: "K must be at least 1".into(),
        });
    }

    let mut sequences = Vec::new();
    let mut splits = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io("<reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let index = sequences.len();
        let seq = EventSequence {
            deltas: record.deltas,
            types: record.types,
            num_types: header.k,
        };
        seq.validate()
            .map_err(|message| Error::InvalidSequence { index, message })?;
        sequences.push(seq);
        splits.push(record.split.unwrap_or(Split::Train));
    }
    Dataset::new(sequences, splits, header.k, header.unit)
}

pub fn write_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_jsonl_to(dataset, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_jsonl_to<W: Write>(dataset: &Dataset, w: &mut W) -> std::io::Result<()> {
    let header = Header {
        k: dataset.num_types,
        unit: dataset.unit.clone(),
    };
    serde_json::to_writer(&mut *w, &header)?;
    writeln!(w)?;
    for (seq, split) in dataset.sequences.iter().zip(&dataset.splits) {
        let record = Record {
            deltas: seq.deltas.clone(),
            types: seq.types.clone(),
            split: Some(*split),
        };
        serde_json::to_writer(&mut *w, &record)?;
        writeln!(w)?;
    }
    Ok(())
}

/// How far ahead a task asks to forecast.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Horizon {
    /// The next `n` events.
    Events(usize),
    /// Every event within this much time after the last context event.
    Interval(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastTask {
    pub context: EventSequence,
    pub target: EventSequence,
    pub horizon: Horizon,
}

impl ForecastTask {
    pub fn horizon_n(&self) -> Option<usize> {
        match self.horizon {
            Horizon::Events(n) => Some(n),
            Horizon::Interval(_) => None,
        }
    }

    pub fn horizon_interval(&self) -> Option<f64> {
        match self.horizon {
            Horizon::Interval(t) => Some(t),
            Horizon::Events(_) => None,
        }
    }
}

/// Uses the last `n` events as the target and everything before as context.
pub fn split_context_target(seq: &EventSequence, n: usize) -> Result<ForecastTask> {
    if n == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    if seq.len() <= n {
        return Err(Error::InsufficientLength {
            len: seq.len(),
            horizon: n,
        });
    }
    let cut = seq.len() - n;
    Ok(ForecastTask {
        context: seq.slice(0, cut),
        target: seq.slice(cut, seq.len()),
        horizon: Horizon::Events(n),
    })
}

/// Builds an interval task: the context ends at the latest event whose
/// remaining tail still spans at least `t_prime`, and the target holds the
/// following events whose cumulative time stays within `t_prime`.
pub fn split_interval(seq: &EventSequence, t_prime: f64) -> Result<ForecastTask> {
    if !(t_prime.is_finite() && t_prime > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "interval length {t_prime} must be positive"
        )));
    }
    let arrivals = seq.arrival_times();
    let end = match arrivals.last() {
        Some(&end) => end,
        None => return Err(Error::InsufficientLength { len: 0, horizon: 1 }),
    };
    // `cut` is the context length; the context must be non-empty.
    let cut = (1..seq.len())
        .rev()
        .find(|&c| end - arrivals[c - 1] >= t_prime)
        .ok_or(Error::InsufficientLength {
            len: seq.len(),
            horizon: 1,
        })?;
    let origin = arrivals[cut - 1];
    let stop = (cut..seq.len())
        .take_while(|&i| arrivals[i] - origin <= t_prime)
        .last()
        .map_or(cut, |i| i + 1);
    Ok(ForecastTask {
        context: seq.slice(0, cut),
        target: seq.slice(cut, stop),
        horizon: Horizon::Interval(t_prime),
    })
}
