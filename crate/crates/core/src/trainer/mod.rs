//! Training loop, model selection and checkpoints.

mod adam;
mod checkpoint;
mod evaluate;

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{LossNoise, TrainingExample};
use crate::error::{Error, Result};
use crate::model::CDiffModel;
use crate::neural::{Gradients, ModelConfig, ParamStore};
use crate::rng::{stream_id, stream_rng, TAG_SHUFFLE, TAG_TRAIN, TAG_VALID};
use crate::sequences::{split_context_target, Dataset, EventSequence, Split};
use crate::transform::TimeCodec;

pub use adam::{clip_grad_norm, Adam};
pub use checkpoint::{Checkpoint, EncodedTensor, TrainMeta};
pub use evaluate::{evaluate, evaluate_forecaster, EvalMode, Evaluation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_max: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global L2 norm bound on each minibatch gradient.
    pub grad_clip: f64,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Window used to size interval forecasts; `None` keeps `N`.
    pub interval_t_prime: Option<f64>,
    /// Draw a fresh cut point per sequence and epoch instead of always
    /// forecasting the last `N` events.
    pub random_windows: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_max: 500,
            batch: 16,
            lr: 0.0025,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 5.0,
            patience: 50,
            seed: 0,
            interval_t_prime: None,
            random_windows: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.epochs_max == 0 || self.batch == 0 {
            return bad("epochs_max and batch must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0 && self.grad_clip > 0.0) {
            return bad("adam eps and grad_clip must be positive");
        }
        if let Some(t) = self.interval_t_prime {
            if !(t > 0.0 && t.is_finite()) {
                return bad("interval_t_prime must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub elapsed_s: f64,
}

/// Hooks into the training loop. Defaults do nothing.
pub trait TrainObserver {
    /// Called after the epoch's optimizer steps, before validation.
    fn after_updates(&mut self, _epoch: usize, _params: &mut ParamStore) {}

    fn on_epoch(&mut self, _record: &EpochRecord) {}
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CDiffModel,
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Largest number of events falling in any window `(a_i, a_i + t_prime]`
/// that starts at an event of a training sequence.
pub fn max_events_within(seqs: &[EventSequence], t_prime: f64) -> usize {
    let mut best = 0;
    for s in seqs {
        let a = s.arrival_times();
        let mut hi = 0;
        for i in 0..a.len() {
            hi = hi.max(i + 1);
            while hi < a.len() && a[hi] - a[i] <= t_prime {
                hi += 1;
            }
            best = best.max(hi - i - 1);
        }
    }
    best
}

fn build_examples(
    seqs: &[EventSequence],
    n: usize,
    codec: &TimeCodec,
    which: &str,
) -> Result<Vec<TrainingExample>> {
    if seqs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "the {which} split is empty"
        )));
    }
    seqs.iter()
        .enumerate()
        .map(|(i, s)| {
            let task = split_context_target(s, n).map_err(|e| Error::InvalidSequence {
                index: i,
                message: format!("{which} split: {e}"),
            })?;
            TrainingExample::new(&task, codec)
        })
        .collect()
}

fn validation_loss(
    model: &CDiffModel,
    examples: &[TrainingExample],
    noise: &[LossNoise],
) -> Result<f64> {
    let losses: Vec<f64> = examples
        .par_iter()
        .zip(noise)
        .map(|(ex, nz)| model.loss_value(ex, nz))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

pub fn train(data: &Dataset, cfg: &ModelConfig, tcfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(data, cfg, tcfg, &mut NoObserver)
}

pub fn train_with(
    data: &Dataset,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tcfg.validate()?;
    if data.num_types != cfg.num_types {
        return Err(Error::Shape(format!(
            "dataset has K={}, model expects {}",
            data.num_types, cfg.num_types
        )));
    }
    let train_seqs = data.split_vec(Split::Train);
    let val_seqs = data.split_vec(Split::Val);
    let n = cfg.horizon;
    if let Some(i) = train_seqs.iter().position(|s| s.len() <= n) {
        return Err(Error::InsufficientLength {
            len: train_seqs[i].len(),
            horizon: n,
        });
    }
    let deltas: Vec<f64> = train_seqs
        .iter()
        .flat_map(|s| s.deltas().to_vec())
        .collect();
    let codec = TimeCodec::fit(&deltas)?;
    let train_ex = build_examples(&train_seqs, n, &codec, "train")?;
    let val_ex = build_examples(&val_seqs, n, &codec, "validation")?;

    let mut model = CDiffModel::new(cfg.clone(), codec)?;
    if let Some(t) = tcfg.interval_t_prime {
        model.interval_n = max_events_within(&train_seqs, t).max(1);
    }
    let val_noise: Vec<LossNoise> = (0..val_ex.len())
        .map(|j| {
            let mut rng = stream_rng(tcfg.seed, stream_id(TAG_VALID, 0, j as u64));
            LossNoise::draw(n, &model.schedule, &mut rng)
        })
        .collect();

    let mut adam = Adam::new(
        &model.params,
        tcfg.lr,
        tcfg.beta1,
        tcfg.beta2,
        tcfg.adam_eps,
    );
    let mut best = (
        validation_loss(&model, &val_ex, &val_noise)?,
        0usize,
        model.params.clone(),
    );
    let mut history = Vec::new();
    let start = Instant::now();
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    let mut since_best = 0;

    for epoch in 1..=tcfg.epochs_max {
        order.sort_unstable();
        order.shuffle(&mut stream_rng(
            tcfg.seed,
            stream_id(TAG_SHUFFLE, epoch as u64, 0),
        ));
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(tcfg.batch).enumerate() {
            let results: Vec<(usize, Result<(f64, Gradients)>)> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng =
                        stream_rng(tcfg.seed, stream_id(TAG_TRAIN, epoch as u64, i as u64));
                    let windowed;
                    let ex = if tcfg.random_windows {
                        let s = &train_seqs[i];
                        let end = rng.random_range(n + 1..=s.len());
                        windowed = split_context_target(&s.slice(0, end), n)
                            .and_then(|task| TrainingExample::new(&task, &model.codec));
                        match &windowed {
                            Ok(ex) => ex,
                            Err(e) => return (0, Err(Error::InvalidArgument(e.to_string()))),
                        }
                    } else {
                        &train_ex[i]
                    };
                    let noise = LossNoise::draw(n, &model.schedule, &mut rng);
                    (noise.t, model.loss_and_grad(ex, &noise))
                })
                .collect();
            model.params.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for (t, r) in results {
                let (loss, grads) = r.map_err(|e| Error::TrainingAborted {
                    epoch,
                    batch: b,
                    t,
                    message: e.to_string(),
                })?;
                epoch_loss += loss;
                model.params.accumulate(&grads, scale);
            }
            let norm = clip_grad_norm(&mut model.params, tcfg.grad_clip);
            if !norm.is_finite() {
                return Err(Error::TrainingAborted {
                    epoch,
                    batch: b,
                    t: 0,
                    message: format!("gradient norm {norm}"),
                });
            }
            adam.step(&mut model.params);
        }
        observer.after_updates(epoch, &mut model.params);
        let val_loss = validation_loss(&model, &val_ex, &val_noise)?;
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / train_ex.len() as f64,
            val_loss,
            elapsed_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {:.5} val {:.5}",
            record.train_loss,
            record.val_loss
        );
        observer.on_epoch(&record);
        history.push(record);
        if val_loss < best.0 {
            best = (val_loss, epoch, model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tcfg.patience {
                log::info!("no validation improvement for {since_best} epochs, stopping");
                break;
            }
        }
    }

    model.params = best.2;
    let meta = TrainMeta {
        epoch: best.1,
        val_loss: best.0,
        seed: tcfg.seed,
        epochs_run: history.len(),
    };
    let checkpoint = Checkpoint::from_model(&model, meta);
    Ok(TrainOutcome {
        model,
        checkpoint,
        history,
    })
}

/// Training log as CSV: `epoch,train_loss,val_loss,elapsed_s`.
pub fn write_history_csv<W: Write>(history: &[EpochRecord], w: &mut W) -> std::io::Result<()> {
    writeln!(w, "epoch,train_loss,val_loss,elapsed_s")?;
    for r in history {
        writeln!(
            w,
            "{},{},{},{:.3}",
            r.epoch, r.train_loss, r.val_loss, r.elapsed_s
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hawkes::{generate_dataset, HawkesConfig};
    use crate::neural::DenoiseOrder;
    use rand::Rng;

    fn corpus(n_train: usize, seed: u64) -> Dataset {
        let cfg = HawkesConfig {
            num_types: 3,
            min_events: 8,
            max_events: 12,
            n_train,
            n_val: 4,
            n_test: 4,
            ..HawkesConfig::default()
        };
        generate_dataset(&cfg, seed).unwrap().0
    }

    fn small_model(order: DenoiseOrder) -> ModelConfig {
        ModelConfig {
            embed: 4,
            heads: 2,
            layers: 1,
            ff: 8,
            num_types: 3,
            horizon: 3,
            steps: 50,
            order,
            seed: 3,
        }
    }

    #[test]
    fn overfits_a_tiny_corpus() {
        let data = corpus(10, 1);
        let tcfg = TrainConfig {
            epochs_max: 200,
            batch: 10,
            lr: 0.01,
            patience: 1000,
            seed: 4,
            random_windows: false,
            ..TrainConfig::default()
        };
        let run = |model: &CDiffModel, seed: u64| {
            let seqs = data.split_vec(Split::Train);
            let ex = build_examples(&seqs, 3, &model.codec, "train").unwrap();
            let mut total = 0.0;
            for (i, e) in ex.iter().enumerate() {
                for r in 0..20 {
                    let mut rng = stream_rng(seed, stream_id(9, i as u64, r));
                    let noise = LossNoise::draw(3, &model.schedule, &mut rng);
                    total += model.loss_value(e, &noise).unwrap();
                }
            }
            total / (20 * ex.len()) as f64
        };
        let cfg = small_model(DenoiseOrder::TypeFirst);
        let mut last = ParamStore::new();
        let out = train_with(&data, &cfg, &tcfg, &mut Capture(&mut last)).unwrap();
        let initial = CDiffModel::new(cfg, out.model.codec).unwrap();
        let mut trained = initial.clone();
        trained.params = last;
        assert_eq!(out.history.len(), 200);
        let (before, after) = (run(&initial, 77), run(&trained, 77));
        assert!(after < 0.5 * before, "loss {before} -> {after}");
    }

    struct Capture<'a>(&'a mut ParamStore);

    impl TrainObserver for Capture<'_> {
        fn after_updates(&mut self, _epoch: usize, params: &mut ParamStore) {
            *self.0 = params.clone();
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = corpus(6, 2);
        let tcfg = TrainConfig {
            epochs_max: 3,
            batch: 4,
            seed: 9,
            ..TrainConfig::default()
        };
        let cfg = small_model(DenoiseOrder::TimeFirst);
        let a = train(&data, &cfg, &tcfg).unwrap();
        let b = train(&data, &cfg, &tcfg).unwrap();
        assert_eq!(
            a.checkpoint.to_json().unwrap(),
            b.checkpoint.to_json().unwrap()
        );
        let c = train(&data, &cfg, &TrainConfig { seed: 10, ..tcfg }).unwrap();
        assert_ne!(a.checkpoint.params, c.checkpoint.params);
    }

    struct Sabotage {
        from: usize,
        snapshots: Vec<ParamStore>,
        records: Vec<EpochRecord>,
    }

    impl TrainObserver for Sabotage {
        fn after_updates(&mut self, epoch: usize, params: &mut ParamStore) {
            if epoch >= self.from {
                let mut rng = stream_rng(epoch as u64, 0);
                for p in params.iter_mut() {
                    p.value.mapv_inplace(|v| v + rng.random_range(-3.0..3.0));
                }
            }
            self.snapshots.push(params.clone());
        }

        fn on_epoch(&mut self, record: &EpochRecord) {
            self.records.push(*record);
        }
    }

    #[test]
    fn keeps_the_best_validation_epoch() {
        let data = corpus(8, 5);
        let tcfg = TrainConfig {
            epochs_max: 8,
            batch: 4,
            lr: 0.01,
            seed: 1,
            ..TrainConfig::default()
        };
        let mut obs = Sabotage {
            from: 4,
            snapshots: Vec::new(),
            records: Vec::new(),
        };
        let out = train_with(
            &data,
            &small_model(DenoiseOrder::TypeFirst),
            &tcfg,
            &mut obs,
        )
        .unwrap();
        let meta = &out.checkpoint.meta;
        assert!(
            meta.epoch >= 1 && meta.epoch < 4,
            "best epoch {}",
            meta.epoch
        );
        assert_eq!(out.model.params, obs.snapshots[meta.epoch - 1]);
        assert!(obs.records.iter().all(|r| meta.val_loss <= r.val_loss));
        assert_eq!(meta.val_loss, obs.records[meta.epoch - 1].val_loss);
    }

    #[test]
    fn patience_stops_early() {
        let data = corpus(6, 3);
        let tcfg = TrainConfig {
            epochs_max: 50,
            batch: 6,
            lr: 1e-9,
            patience: 2,
            seed: 2,
            ..TrainConfig::default()
        };
        let mut obs = Sabotage {
            from: 1,
            snapshots: Vec::new(),
            records: Vec::new(),
        };
        let out = train_with(
            &data,
            &small_model(DenoiseOrder::TypeFirst),
            &tcfg,
            &mut obs,
        )
        .unwrap();
        assert!(out.history.len() < 50);
    }

    #[test]
    fn rejects_bad_inputs() {
        let data = corpus(4, 4);
        let mut cfg = small_model(DenoiseOrder::TypeFirst);
        cfg.horizon = 50;
        assert!(matches!(
            train(&data, &cfg, &TrainConfig::default()),
            Err(Error::InsufficientLength { .. })
        ));
        let bad = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(train(&data, &small_model(DenoiseOrder::TypeFirst), &bad).is_err());
        let mut wrong_k = small_model(DenoiseOrder::TypeFirst);
        wrong_k.num_types = 4;
        assert!(train(&data, &wrong_k, &TrainConfig::default()).is_err());
    }

    #[test]
    fn interval_events_from_training_windows() {
        let s = EventSequence::new(vec![1.0, 0.1, 0.1, 0.1, 5.0, 0.2], vec![0; 6], 1).unwrap();
        assert_eq!(max_events_within(std::slice::from_ref(&s), 0.35), 3);
        assert_eq!(max_events_within(std::slice::from_ref(&s), 0.05), 0);
        assert_eq!(max_events_within(&[s], 100.0), 5);
    }

    #[test]
    fn history_csv_layout() {
        let rec = EpochRecord {
            epoch: 1,
            train_loss: 2.5,
            val_loss: 3.0,
            elapsed_s: 0.25,
        };
        let mut buf = Vec::new();
        write_history_csv(&[rec], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,train_loss,val_loss,elapsed_s\n1,2.5,3,0.250\n"
        );
    }
}
