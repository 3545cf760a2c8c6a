//! Depth-configurable transformer encoder-decoder.
//!
//! Layout: pre-norm residual blocks, sinusoidal positions added after the
//! source factors are combined with the word embedding, no bias on the
//! attention projections, and a target embedding tied to the output
//! projection. Parameter names are listed by
//! [`ModelConfig::parameter_shapes`].
//!
//! The same forward code runs for training (recording a [`Tape`]), for
//! `f64` gradient checks and for inference from f32 or int8 weights; the
//! weight source is abstracted by [`Weights`].

use std::borrow::Cow;
use std::collections::BTreeMap;

use rand::Rng as _;

use crate::error::{bail, Result};
use crate::quant::QMatrix;
use crate::rng::seeded;
use crate::tensor::{Scalar, Tensor};

mod config;
mod forward;
mod incremental;
mod io;

pub use config::{CombineMode, ModelConfig, SourceFactorConfig};
pub use forward::{positional_encoding, Packed, Session};
pub use incremental::DecoderState;
pub use io::{load_params, load_params_for, save_params, ModelMeta, KIND_CHECKPOINT, KIND_F32, KIND_INT8};

/// Reserved token ids shared by every vocabulary.
pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

/// Source side of one sentence: word ids and token-aligned factor streams,
/// end-of-sentence markers included.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct SourceInput {
    pub words: Vec<usize>,
    pub factors: Vec<Vec<usize>>,
}

impl SourceInput {
    pub fn words(words: Vec<usize>) -> Self {
        Self { words, factors: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// A training pair. `tgt` holds neither BOS nor EOS.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Example {
    pub src: SourceInput,
    pub tgt: Vec<usize>,
}

impl Example {
    /// Decoder input: BOS followed by the target.
    pub fn decoder_input(&self) -> Vec<usize> {
        std::iter::once(BOS).chain(self.tgt.iter().copied()).collect()
    }

    /// Labels: the target followed by EOS.
    pub fn labels(&self) -> Vec<usize> {
        self.tgt.iter().copied().chain(std::iter::once(EOS)).collect()
    }
}

/// A weight matrix used as `x · W`.
pub enum Linear<'a, T: Scalar> {
    /// `[in × out]`
    Float(&'a Tensor<T>),
    Int8(&'a QMatrix),
}

/// Output projection rows, optionally restricted to a shortlist.
#[derive(Clone, Debug)]
pub enum OutputLayer<'a, T: Scalar = f32> {
    /// `[outputs × d_model]`
    Float(Cow<'a, Tensor<T>>),
    Int8(Cow<'a, QMatrix>),
}

impl<T: Scalar> OutputLayer<'_, T> {
    pub fn outputs(&self) -> usize {
        match self {
            OutputLayer::Float(t) => t.shape()[0],
            OutputLayer::Int8(q) => q.outputs(),
        }
    }
}

/// Read access to model weights, f32 or quantized.
pub trait Weights<T: Scalar>: Sync {
    fn config(&self) -> &ModelConfig;

    /// A parameter kept in floating point (embeddings, norms, biases).
    fn tensor(&self, name: &str) -> Result<&Tensor<T>>;

    /// A projection matrix, possibly quantized.
    fn linear(&self, name: &str) -> Result<Linear<'_, T>>;

    /// The output projection, restricted to `ids` when given.
    fn output_layer(&self, ids: Option<&[usize]>) -> Result<OutputLayer<'_, T>>;
}

/// Transformer parameters plus their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel<T: Scalar = f32> {
    config: ModelConfig,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> TransformerModel<T> {
    /// Xavier-uniform initialization; norm gains 1, biases 0.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in config.parameter_shapes() {
            let t = if name.ends_with(".gain") {
                Tensor::ones(shape)
            } else if shape.len() == 1 {
                Tensor::zeros(shape)
            } else {
                let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let n = shape[0] * shape[1];
                let data = (0..n).map(|_| T::of_f64(rng.gen_range(-limit..limit))).collect();
                Tensor::new(shape, data)?
            };
            params.insert(name, t);
        }
        Ok(Self { config, params })
    }

    /// Builds a model from named tensors, which must match the config's
    /// layout exactly.
    pub fn from_params(config: ModelConfig, params: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let shapes = config.parameter_shapes();
        if shapes.len() != params.len() {
            bail!(Format, "expected {} parameters for this config, found {}", shapes.len(), params.len());
        }
        for (name, shape) in &shapes {
            match params.get(name) {
                None => bail!(Format, "missing parameter {name}"),
                Some(t) if t.shape() != shape.as_slice() => {
                    bail!(Format, "parameter {name} has shape {:?}, config needs {:?}", t.shape(), shape)
                }
                Some(_) => {}
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> TransformerModel<U> {
        TransformerModel {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Logits `[tgt_in.len() × tgt_vocab]` for one sentence, no dropout.
    ///
    /// `tgt_in` is the decoder input, normally BOS followed by the target.
    pub fn forward_teacher_forced(&self, src: &SourceInput, tgt_in: &[usize]) -> Result<Tensor<T>> {
        let mut s = Session::inference(self);
        let packed = Packed::single(src, tgt_in)?;
        let logits = s.forward(&packed)?;
        Ok(s.tape.value(logits).clone())
    }

    /// Encoder output `[T × d_model]` for one sentence.
    pub fn encode(&self, src: &SourceInput) -> Result<Tensor<T>> {
        let mut s = Session::inference(self);
        let packed = Packed::single(src, &[])?;
        let x = s.embed_source(&packed)?;
        let y = s.encode(x, &packed)?;
        Ok(s.tape.value(y).clone())
    }
}

impl<T: Scalar> Weights<T> for TransformerModel<T> {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        match self.params.get(name) {
            Some(t) => Ok(t),
            None => bail!(Format, "model has no parameter {name}"),
        }
    }

    fn linear(&self, name: &str) -> Result<Linear<'_, T>> {
        self.tensor(name).map(Linear::Float)
    }

    fn output_layer(&self, ids: Option<&[usize]>) -> Result<OutputLayer<'_, T>> {
        let table = self.tensor("tgt_embed")?;
        Ok(OutputLayer::Float(match ids {
            None => Cow::Borrowed(table),
            Some(ids) => Cow::Owned(crate::tensor::ops::embedding_lookup(table, ids)?),
        }))
    }
}
