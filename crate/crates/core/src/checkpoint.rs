//! Single-file JSON checkpoints of every parameter group plus the training
//! configuration and step counter.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, PathoTuneModel};
use crate::params::ParamGroup;
use crate::trainer::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub group: ParamGroup,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub train: TrainConfig,
    pub model_seed: u64,
    pub step: u64,
    pub epoch: usize,
    /// Checksum of the frozen text encoder, which is rebuilt from `spec.text`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_encoder_checksum: Option<String>,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn capture(model: &PathoTuneModel, train: &TrainConfig, step: u64, epoch: usize) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            spec: model.spec.clone(),
            train: train.clone(),
            model_seed: model.seed,
            step,
            epoch,
            text_encoder_checksum: model.text_encoder().map(|e| e.checksum()),
            params: model
                .store
                .iter()
                .map(|(_, p)| ParamRecord {
                    name: p.name.clone(),
                    group: p.group,
                    rows: p.value.nrows(),
                    cols: p.value.ncols(),
                    data: p.value.iter().copied().collect(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(Error::Input(format!(
                "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Input(format!("checkpoint {} not found", path.display())));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Rebuilds the model and overwrites every parameter with the stored values.
    pub fn restore(&self) -> Result<PathoTuneModel> {
        let mut model = PathoTuneModel::new(&self.spec, self.train.mode, self.model_seed)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Input(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for (id, rec) in ids.into_iter().zip(&self.params) {
            let p = model.store.get(id);
            if p.name != rec.name || p.group != rec.group {
                return Err(Error::Input(format!(
                    "checkpoint parameter `{}` does not match model parameter `{}`",
                    rec.name, p.name
                )));
            }
            let value = Array2::from_shape_vec((rec.rows, rec.cols), rec.data.clone())
                .map_err(|e| Error::Input(format!("checkpoint parameter `{}`: {e}", rec.name)))?;
            if value.dim() != p.value.dim() {
                return Err(Error::shape(
                    format!("checkpoint parameter `{}`", rec.name),
                    format!("{:?}", p.value.dim()),
                    format!("{:?}", value.dim()),
                ));
            }
            *model.store.value_mut(id) = value;
        }
        let rebuilt = model.text_encoder().map(|e| e.checksum());
        if rebuilt != self.text_encoder_checksum {
            return Err(Error::Input("text encoder rebuilt from the checkpoint config differs from the saved one".into()));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TuningMode;

    #[test]
    fn save_load_is_byte_stable_and_restores_values() {
        let mut spec = ModelSpec::default();
        spec.model.layers = 1;
        spec.text.dim = 24;
        let mut model = PathoTuneModel::new(&spec, TuningMode::ALL_PROMPTS, 5).unwrap();
        let id = model.store.group_ids(ParamGroup::Tvp)[0];
        model.store.value_mut(id)[[0, 0]] = 0.1 + 0.2;
        let train = TrainConfig::default();
        let ckpt = Checkpoint::capture(&model, &train, 17, 2);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        ckpt.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        back.save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);

        let restored = back.restore().unwrap();
        for g in ParamGroup::ALL {
            assert_eq!(restored.store.checksum(g), model.store.checksum(g));
        }
        assert_eq!(restored.store.value(id)[[0, 0]], 0.1 + 0.2);
    }

    #[test]
    fn rejects_other_versions() {
        let model = PathoTuneModel::new(&ModelSpec::default(), TuningMode::LinearProbe, 0).unwrap();
        let mut ckpt = Checkpoint::capture(&model, &TrainConfig::default(), 0, 0);
        ckpt.format_version = 99;
        assert!(Checkpoint::from_json(&ckpt.to_json().unwrap()).is_err());
    }
}
