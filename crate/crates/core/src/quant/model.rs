//! Int8 versions of a trained model.
//!
//! Every projection matrix (attention q/k/v/o, both feed-forward matrices)
//! and the output projection are quantized with one scale each. Norms and
//! biases stay f32; embedding tables stay f32 unless requested, since a
//! lookup is not a matrix product.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::path::Path;

use super::{quantize, ContainerFile, Entry, Payload, QMatrix, QuantizedTensor};
use crate::error::{bail, Result};
use crate::model::{Linear, ModelConfig, ModelMeta, OutputLayer, TransformerModel, Weights};
use crate::tensor::Tensor;

/// Name of the int8 copy of the (tied) target embedding used as the output
/// projection.
pub const OUTPUT_PROJECTION: &str = "output_projection";

/// Where the int8 weights came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Read from an int8 model file written ahead of time.
    Offline,
    /// Quantized in memory while loading an f32 model file.
    OnLoad,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct QuantizeOptions {
    /// Also store the embedding tables as int8 (dequantized for lookups).
    pub quantize_embeddings: bool,
}

fn is_projection(name: &str) -> bool {
    [".q", ".k", ".v", ".o", ".w1", ".w2"].iter().any(|s| name.ends_with(s))
}

fn is_embedding(name: &str) -> bool {
    name == "src_embed" || name == "tgt_embed" || name.starts_with("factor_embed.")
}

#[derive(Clone, Debug)]
pub struct QuantizedModel {
    config: ModelConfig,
    mode: QuantMode,
    /// Parameters used in floating point, including dequantized embeddings.
    floats: BTreeMap<String, Tensor>,
    /// Int8 tensors exactly as stored in the file.
    quantized: BTreeMap<String, QuantizedTensor>,
    packed: BTreeMap<String, QMatrix>,
}

impl QuantizedModel {
    fn assemble(
        config: ModelConfig,
        mode: QuantMode,
        mut floats: BTreeMap<String, Tensor>,
        quantized: BTreeMap<String, QuantizedTensor>,
    ) -> Result<Self> {
        let mut packed = BTreeMap::new();
        for (name, q) in &quantized {
            if name == OUTPUT_PROJECTION {
                packed.insert(name.clone(), QMatrix::from_rows(q)?);
            } else if is_projection(name) {
                packed.insert(name.clone(), QMatrix::from_weight(q)?);
            } else if is_embedding(name) {
                floats.insert(name.clone(), q.dequantize());
            } else {
                bail!(Format, "parameter {name} cannot be stored as int8");
            }
        }
        // Every parameter of the layout must be available one way or another.
        for (name, shape) in config.parameter_shapes() {
            let found = floats.get(&name).map(|t| t.shape().to_vec()).or_else(|| quantized.get(&name).map(|q| q.shape().to_vec()));
            match found {
                None => bail!(Format, "int8 model is missing parameter {name}"),
                Some(s) if s != shape => bail!(Format, "parameter {name} has shape {s:?}, config needs {shape:?}"),
                Some(_) => {}
            }
        }
        match quantized.get(OUTPUT_PROJECTION) {
            Some(q) if q.shape() == [config.tgt_vocab_size, config.d_model] => {}
            _ => bail!(Format, "int8 model lacks a valid {OUTPUT_PROJECTION}"),
        }
        Ok(Self { config, mode, floats, quantized, packed })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> QuantMode {
        self.mode
    }

    pub fn quantized(&self) -> &BTreeMap<String, QuantizedTensor> {
        &self.quantized
    }

    pub fn floats(&self) -> &BTreeMap<String, Tensor> {
        &self.floats
    }

    /// Entries for an int8 model file, in a stable order.
    pub fn entries(&self) -> Vec<Entry> {
        let mut out = Vec::new();
        for (name, _) in self.config.parameter_shapes() {
            let payload = match self.quantized.get(&name) {
                Some(q) => Payload::Int8(q.clone()),
                None => Payload::F32(self.floats[&name].clone()),
            };
            out.push(Entry { name, payload });
        }
        out.push(Entry { name: OUTPUT_PROJECTION.into(), payload: Payload::Int8(self.quantized[OUTPUT_PROJECTION].clone()) });
        out
    }

    pub fn to_container(&self, extra: serde_json::Value) -> Result<ContainerFile> {
        let meta = ModelMeta { kind: crate::model::KIND_INT8.into(), config: self.config.clone(), extra };
        Ok(ContainerFile { entries: self.entries(), metadata: serde_json::to_string(&meta)? })
    }

    /// Loads an int8 file as is, or quantizes an f32 file on load.
    pub fn from_container(file: &ContainerFile, opts: &QuantizeOptions) -> Result<(Self, ModelMeta)> {
        let meta = ModelMeta::parse(&file.metadata)?;
        if meta.kind != crate::model::KIND_INT8 {
            let (model, meta) = TransformerModel::from_container(file)?;
            return Ok((quantize_model(&model, opts)?, meta));
        }
        let mut floats = BTreeMap::new();
        let mut quantized = BTreeMap::new();
        for e in &file.entries {
            let dup = match &e.payload {
                Payload::F32(t) => floats.insert(e.name.clone(), t.clone()).is_some(),
                Payload::Int8(q) => quantized.insert(e.name.clone(), q.clone()).is_some(),
            };
            if dup {
                bail!(Format, "duplicate parameter {}", e.name);
            }
        }
        let expected = meta.config.parameter_shapes().len() + 1;
        if floats.len() + quantized.len() != expected {
            bail!(Format, "int8 model has {} entries, config needs {expected}", floats.len() + quantized.len());
        }
        Ok((Self::assemble(meta.config.clone(), QuantMode::Offline, floats, quantized)?, meta))
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        self.to_container(extra)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_container(&ContainerFile::load(path)?, &QuantizeOptions::default())?.0)
    }
}

/// Quantizes every projection matrix of `model` (on-load path).
pub fn quantize_model(model: &TransformerModel, opts: &QuantizeOptions) -> Result<QuantizedModel> {
    let (floats, quantized) = quantize_params(model.params(), opts)?;
    QuantizedModel::assemble(model.config().clone(), QuantMode::OnLoad, floats, quantized)
}

/// Splits parameters into those kept as f32 and their int8 counterparts.
pub fn quantize_params(
    params: &BTreeMap<String, Tensor>,
    opts: &QuantizeOptions,
) -> Result<(BTreeMap<String, Tensor>, BTreeMap<String, QuantizedTensor>)> {
    let mut floats = BTreeMap::new();
    let mut quantized = BTreeMap::new();
    for (name, t) in params {
        if is_projection(name) || (opts.quantize_embeddings && is_embedding(name)) {
            quantized.insert(name.clone(), quantize(t)?);
        } else {
            floats.insert(name.clone(), t.clone());
        }
    }
    match params.get("tgt_embed") {
        Some(e) => quantized.insert(OUTPUT_PROJECTION.to_string(), quantize(e)?),
        None => bail!(Format, "model has no tgt_embed to project with"),
    };
    Ok((floats, quantized))
}

impl Weights<f32> for QuantizedModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.floats.get(name) {
            Some(t) => Ok(t),
            None => bail!(Format, "int8 model has no f32 parameter {name}"),
        }
    }

    fn linear(&self, name: &str) -> Result<Linear<'_, f32>> {
        match self.packed.get(name) {
            Some(q) => Ok(Linear::Int8(q)),
            None => self.tensor(name).map(Linear::Float),
        }
    }

    fn output_layer(&self, ids: Option<&[usize]>) -> Result<OutputLayer<'_, f32>> {
        let full = &self.packed[OUTPUT_PROJECTION];
        Ok(OutputLayer::Int8(match ids {
            None => Cow::Borrowed(full),
            Some(ids) => Cow::Owned(full.select_outputs(ids)?),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DecoderState, SourceInput, BOS, EOS};

    fn model(d: usize) -> TransformerModel {
        let mut c = ModelConfig::desk(20, 18);
        c.d_model = d;
        c.d_ff = 2 * d;
        TransformerModel::new(c, 3).unwrap()
    }

    #[test]
    fn offline_file_equals_on_load_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let (f32_path, int8_path) = (dir.path().join("f.sqnt"), dir.path().join("q.sqnt"));
        let m = model(32);
        crate::model::save_params(&m, &f32_path).unwrap();
        quantize_model(&m, &QuantizeOptions::default()).unwrap().save(&int8_path, serde_json::Value::Null).unwrap();
        let offline = QuantizedModel::load(&int8_path).unwrap();
        let on_load = QuantizedModel::load(&f32_path).unwrap();
        assert_eq!(offline.mode(), QuantMode::Offline);
        assert_eq!(on_load.mode(), QuantMode::OnLoad);
        assert_eq!(offline.quantized(), on_load.quantized());
        assert_eq!(offline.floats(), on_load.floats());
        let small = std::fs::metadata(&int8_path).unwrap().len();
        assert!(small < std::fs::metadata(&f32_path).unwrap().len());
    }

    #[test]
    fn embeddings_can_be_quantized_too() {
        let m = model(32);
        let opts = QuantizeOptions { quantize_embeddings: true };
        let q = quantize_model(&m, &opts).unwrap();
        assert!(q.quantized().contains_key("src_embed"));
        let back = QuantizedModel::from_container(&q.to_container(serde_json::Value::Null).unwrap(), &opts).unwrap().0;
        assert_eq!(back.quantized(), q.quantized());
        assert_eq!(back.floats(), q.floats());
    }

    #[test]
    fn only_norms_biases_and_embeddings_stay_float() {
        let q = quantize_model(&model(32), &QuantizeOptions::default()).unwrap();
        for name in q.floats().keys() {
            assert!(name.ends_with(".gain") || name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") || name.contains("embed"), "{name}");
        }
    }

    #[test]
    fn int8_decoder_step_close_to_f32() {
        let m = model(64);
        let q = quantize_model(&m, &QuantizeOptions::default()).unwrap();
        let src = SourceInput::words(vec![5, 9, 12, 4, EOS]);
        let (mut sf, mut sq) = (DecoderState::new(&m, &src).unwrap(), DecoderState::new(&q, &src).unwrap());
        let (of, oq) = (m.output_layer(None).unwrap(), q.output_layer(None).unwrap());
        for tok in [BOS, 7, 8, 9] {
            let a = sf.step(&m, tok, &of).unwrap();
            let b = sq.step(&q, tok, &oq).unwrap();
            let worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
            assert!(worst < 0.1, "max logit difference {worst}");
        }
    }

    #[test]
    fn corrupt_int8_file_is_format_error() {
        let q = quantize_model(&model(32), &QuantizeOptions::default()).unwrap();
        let mut file = q.to_container(serde_json::Value::Null).unwrap();
        file.entries.retain(|e| e.name != "decoder.0.ffn.w1");
        assert!(matches!(QuantizedModel::from_container(&file, &QuantizeOptions::default()), Err(crate::Error::Format(_))));
    }
}
