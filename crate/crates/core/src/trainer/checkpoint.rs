use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CDiffModel;
use crate::neural::{ModelConfig, ParamStore};
use crate::schedule::DiffusionSchedule;
use crate::transform::TimeCodec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainMeta {
    /// Epoch whose parameters were kept (1-based).
    pub epoch: usize,
    pub val_loss: f64,
    pub seed: u64,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major little-endian `f64` values, base64 encoded.
    pub data: String,
}

impl EncodedTensor {
    fn encode(name: &str, value: &Array2<f64>) -> Self {
        let bytes: Vec<u8> = value.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            name: name.to_string(),
            rows: value.nrows(),
            cols: value.ncols(),
            data: STANDARD.encode(bytes),
        }
    }

    fn decode(&self) -> Result<Array2<f64>> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Checkpoint(format!("parameter {}: {e}", self.name)))?;
        if bytes.len() != self.rows * self.cols * 8 {
            return Err(Error::Checkpoint(format!(
                "parameter {} holds {} bytes, expected {}x{} doubles",
                self.name,
                bytes.len(),
                self.rows,
                self.cols
            )));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Array2::from_shape_vec((self.rows, self.cols), values)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// Everything needed to rebuild a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub codec: TimeCodec,
    pub schedule: DiffusionSchedule,
    pub interval_n: usize,
    pub meta: TrainMeta,
    pub params: Vec<EncodedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &CDiffModel, meta: TrainMeta) -> Self {
        Self {
            config: model.config().clone(),
            codec: model.codec,
            schedule: model.schedule.clone(),
            interval_n: model.interval_n,
            meta,
            params: model
                .params
                .iter()
                .map(|p| EncodedTensor::encode(&p.name, &p.value))
                .collect(),
        }
    }

    pub fn to_model(&self) -> Result<CDiffModel> {
        let mut model = CDiffModel::new(self.config.clone(), self.codec)?;
        if self.schedule.steps() != self.config.steps {
            return Err(Error::Checkpoint(format!(
                "schedule has {} steps, config {}",
                self.schedule.steps(),
                self.config.steps
            )));
        }
        let mut stored = ParamStore::new();
        for t in &self.params {
            if stored.id(&t.name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter {}", t.name)));
            }
            stored.add(t.name.clone(), t.decode()?);
        }
        model
            .params
            .load_values(&stored)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        model.schedule = self.schedule.clone();
        model.interval_n = self.interval_n;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> CDiffModel {
        let cfg = ModelConfig {
            embed: 4,
            ff: 8,
            num_types: 3,
            horizon: 2,
            steps: 7,
            seed: 11,
            ..ModelConfig::default()
        };
        let codec = TimeCodec::fit(&[0.3, 1.1, 2.5, 0.05, 0.8]).unwrap();
        let mut m = CDiffModel::new(cfg, codec).unwrap();
        m.interval_n = 9;
        m
    }

    fn meta() -> TrainMeta {
        TrainMeta {
            epoch: 3,
            val_loss: 1.25,
            seed: 11,
            epochs_run: 5,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let ck = Checkpoint::from_model(&m, meta());
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        let rebuilt = back.to_model().unwrap();
        assert_eq!(rebuilt.params, m.params);
        assert_eq!(rebuilt.codec, m.codec);
        assert_eq!(rebuilt.schedule, m.schedule);
        assert_eq!(rebuilt.interval_n, 9);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let ck = Checkpoint::from_model(&model(), meta());
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(Checkpoint::load(dir.path().join("missing.json")).is_err());
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let mut ck = Checkpoint::from_model(&model(), meta());
        ck.params[0].rows += 1;
        assert!(ck.to_model().is_err());
        let mut ck = Checkpoint::from_model(&model(), meta());
        ck.params.pop();
        assert!(ck.to_model().is_err());
        let mut ck = Checkpoint::from_model(&model(), meta());
        ck.params[1].data = "@@".into();
        assert!(ck.to_model().is_err());
        let text = Checkpoint::from_model(&model(), meta()).to_json().unwrap();
        let extra = text.replacen('{', "{\"bogus\": 1,", 1);
        assert!(Checkpoint::from_json(&extra).is_err());
    }
}
