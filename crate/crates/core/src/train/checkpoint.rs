use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::OptimizerState;
use crate::error::{bail, Result};
use crate::model::{ModelConfig, ModelMeta, TransformerModel, KIND_CHECKPOINT};
use crate::quant::{ContainerFile, Entry, Payload};
use crate::tensor::{Scalar, Tensor};

/// Snapshot of model and optimizer at a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord<T: Scalar = f32> {
    pub index: usize,
    pub step: u64,
    pub params: BTreeMap<String, Tensor<T>>,
    pub optimizer: OptimizerState<T>,
    pub ppl: f64,
    /// Learning rate at save time.
    pub lr: f64,
}

/// The `k` records with the lowest perplexity, ties by lower index.
pub fn select_best<T: Scalar>(records: &[CheckpointRecord<T>], k: usize) -> Vec<&CheckpointRecord<T>> {
    let mut sorted: Vec<&CheckpointRecord<T>> = records.iter().collect();
    sorted.sort_by(|a, b| a.ppl.total_cmp(&b.ppl).then(a.index.cmp(&b.index)));
    sorted.truncate(k);
    sorted
}

/// Elementwise mean of the parameters of the `k` best records.
///
/// Sums run in f64 in checkpoint-index order, so the result does not
/// depend on the order of `records`.
pub fn average_checkpoints<T: Scalar>(records: &[CheckpointRecord<T>], k: usize) -> Result<BTreeMap<String, Tensor<T>>> {
    if records.is_empty() {
        bail!(Usage, "no checkpoints to average");
    }
    if k == 0 {
        bail!(Usage, "must average at least one checkpoint");
    }
    let mut chosen = select_best(records, k);
    chosen.sort_by_key(|r| r.index);
    let n = chosen.len() as f64;
    let mut out = BTreeMap::new();
    for (name, first) in &chosen[0].params {
        let mut acc = vec![0f64; first.numel()];
        for r in &chosen {
            let Some(t) = r.params.get(name).filter(|t| t.shape() == first.shape()) else {
                bail!(Shape, "checkpoint {} lacks a matching {name}", r.index);
            };
            for (a, &x) in acc.iter_mut().zip(t.data()) {
                *a += x.as_f64();
            }
        }
        let data = acc.into_iter().map(|a| T::of_f64(a / n)).collect();
        out.insert(name.clone(), Tensor::new(first.shape().to_vec(), data)?);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointInfo {
    index: usize,
    step: u64,
    ppl: f64,
    lr: f64,
    optimizer_step: u64,
    optimizer_lr: f64,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Writes a checkpoint: the parameters, then `optim.m.*` and `optim.v.*`
/// moment entries. The file is a valid f32 model file.
pub fn save_checkpoint(path: &Path, config: &ModelConfig, record: &CheckpointRecord, extra: serde_json::Value) -> Result<()> {
    let info = CheckpointInfo {
        index: record.index,
        step: record.step,
        ppl: record.ppl,
        lr: record.lr,
        optimizer_step: record.optimizer.step,
        optimizer_lr: record.optimizer.lr,
        extra,
    };
    let meta = ModelMeta { kind: KIND_CHECKPOINT.into(), config: config.clone(), extra: serde_json::to_value(info)? };
    let mut entries = Vec::new();
    for (name, _) in config.parameter_shapes() {
        let Some(t) = record.params.get(&name) else {
            bail!(State, "checkpoint is missing parameter {name}");
        };
        entries.push(Entry { name: name.clone(), payload: Payload::F32(t.clone()) });
        entries.push(Entry { name: format!("optim.m.{name}"), payload: Payload::F32(record.optimizer.m[&name].clone()) });
        entries.push(Entry { name: format!("optim.v.{name}"), payload: Payload::F32(record.optimizer.v[&name].clone()) });
    }
    ContainerFile { entries, metadata: serde_json::to_string(&meta)? }.save(path)
}

/// Reads a checkpoint written by [`save_checkpoint`]; returns the record,
/// the config and the application data stored with it.
pub fn load_checkpoint(path: &Path) -> Result<(CheckpointRecord, ModelConfig, serde_json::Value)> {
    let file = ContainerFile::load(path)?;
    let (model, meta) = TransformerModel::from_container(&file)?;
    if meta.kind != KIND_CHECKPOINT {
        bail!(Format, "{} is not a checkpoint", path.display());
    }
    let info: CheckpointInfo =
        serde_json::from_value(meta.extra).map_err(|e| crate::Error::Format(format!("bad checkpoint metadata: {e}")))?;
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for e in &file.entries {
        let Payload::F32(t) = &e.payload else { continue };
        if let Some(name) = e.name.strip_prefix("optim.m.") {
            m.insert(name.to_string(), t.clone());
        } else if let Some(name) = e.name.strip_prefix("optim.v.") {
            v.insert(name.to_string(), t.clone());
        }
    }
    for (name, p) in model.params() {
        for moments in [&m, &v] {
            if moments.get(name).map(Tensor::shape) != Some(p.shape()) {
                bail!(Format, "checkpoint optimizer state for {name} is missing or misshapen");
            }
        }
    }
    let config = model.config().clone();
    let record = CheckpointRecord {
        index: info.index,
        step: info.step,
        params: model.into_params(),
        optimizer: OptimizerState { m, v, step: info.optimizer_step, lr: info.optimizer_lr },
        ppl: info.ppl,
        lr: info.lr,
    };
    Ok((record, config, info.extra))
}
