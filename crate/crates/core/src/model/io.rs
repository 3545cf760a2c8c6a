//! f32 model files.
//!
//! A model file is a [`ContainerFile`] whose entries are the parameters in
//! [`ModelConfig::parameter_shapes`] order, all with dtype f32, and whose
//! metadata block is a JSON [`ModelMeta`].

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, TransformerModel};
use crate::error::{bail, Result};
use crate::quant::{ContainerFile, Entry, Payload};

pub const KIND_F32: &str = "f32";
pub const KIND_INT8: &str = "int8";
pub const KIND_CHECKPOINT: &str = "checkpoint";

/// Metadata stored next to the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub kind: String,
    pub config: ModelConfig,
    /// Application data such as vocabularies or optimizer state.
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl ModelMeta {
    pub fn parse(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| crate::Error::Format(format!("bad model metadata: {e}")))
    }
}

impl TransformerModel<f32> {
    /// Container entries for every parameter, in layout order.
    pub fn entries(&self) -> Vec<Entry> {
        self.config
            .parameter_shapes()
            .into_iter()
            .map(|(name, _)| {
                let t = self.params[&name].clone();
                Entry { name, payload: Payload::F32(t) }
            })
            .collect()
    }

    pub fn to_container(&self, kind: &str, extra: serde_json::Value) -> Result<ContainerFile> {
        let meta = ModelMeta { kind: kind.to_string(), config: self.config.clone(), extra };
        Ok(ContainerFile { entries: self.entries(), metadata: serde_json::to_string(&meta)? })
    }

    /// Reads the model out of a container. Entries whose names start with
    /// `optim.` are skipped; anything else must match the stored config.
    pub fn from_container(file: &ContainerFile) -> Result<(Self, ModelMeta)> {
        let meta = ModelMeta::parse(&file.metadata)?;
        if meta.kind != KIND_F32 && meta.kind != KIND_CHECKPOINT {
            bail!(Format, "expected an f32 model file, found kind {:?}", meta.kind);
        }
        let mut params = BTreeMap::new();
        for e in file.entries.iter().filter(|e| !e.name.starts_with("optim.")) {
            match &e.payload {
                Payload::F32(t) => {
                    if params.insert(e.name.clone(), t.clone()).is_some() {
                        bail!(Format, "duplicate parameter {}", e.name);
                    }
                }
                Payload::Int8(_) => bail!(Format, "parameter {} is int8 in an f32 model file", e.name),
            }
        }
        let model = Self::from_params(meta.config.clone(), params).map_err(|e| match e {
            crate::Error::Format(m) => crate::Error::Format(m),
            other => crate::Error::Format(other.to_string()),
        })?;
        Ok((model, meta))
    }
}

pub fn save_params(model: &TransformerModel, path: &Path) -> Result<()> {
    model.to_container(KIND_F32, serde_json::Value::Null)?.save(path)
}

pub fn load_params(path: &Path) -> Result<TransformerModel> {
    Ok(TransformerModel::from_container(&ContainerFile::load(path)?)?.0)
}

/// Loads a model and checks that it was saved with `expected` as config.
pub fn load_params_for(path: &Path, expected: &ModelConfig) -> Result<TransformerModel> {
    let model = load_params(path)?;
    if model.config() != expected {
        bail!(
            Format,
            "model file has {}:{} layers (d_model {}), expected {}:{} (d_model {})",
            model.config().num_encoder_layers,
            model.config().num_decoder_layers,
            model.config().d_model,
            expected.num_encoder_layers,
            expected.num_decoder_layers,
            expected.d_model
        );
    }
    Ok(model)
}
