use std::collections::HashMap;

use super::{Example, Linear, OutputLayer, SourceInput, Weights};
use crate::error::{bail, Result};
use crate::rng::{seeded, Rng};
use crate::tensor::ops::LAYER_NORM_EPS;
use crate::tensor::{Scalar, Segment, Tape, Tensor, Var};

/// Sinusoidal position encodings for the given positions, `[n × d]`.
pub fn positional_encoding<T: Scalar>(positions: &[usize], d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(positions.len() * d);
    for &pos in positions {
        for j in 0..d {
            let rate = 10000f64.powf((j - j % 2) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data.push(T::of_f64(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![positions.len(), d], data).expect("sizes agree")
}

/// Several sentences packed back to back along the row dimension.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Packed {
    pub src_words: Vec<usize>,
    /// One concatenated stream per factor.
    pub src_factors: Vec<Vec<usize>>,
    pub src_pos: Vec<usize>,
    /// `(start, len)` of each source sentence.
    pub src_spans: Vec<(usize, usize)>,
    pub tgt_in: Vec<usize>,
    pub tgt_pos: Vec<usize>,
    pub tgt_spans: Vec<(usize, usize)>,
    pub labels: Vec<usize>,
}

impl Packed {
    /// One sentence with decoder input `tgt_in` and no labels.
    pub fn single(src: &SourceInput, tgt_in: &[usize]) -> Result<Self> {
        let mut p = Self::default();
        p.push(src, tgt_in, &[])?;
        Ok(p)
    }

    /// Packs training examples with BOS-prefixed inputs and EOS-terminated
    /// labels.
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Result<Self> {
        let mut p = Self::default();
        for ex in examples {
            p.push(&ex.src, &ex.decoder_input(), &ex.labels())?;
        }
        Ok(p)
    }

    /// Appends one sentence; factor streams must be aligned with the words.
    pub fn push(&mut self, src: &SourceInput, tgt_in: &[usize], labels: &[usize]) -> Result<()> {
        if self.src_spans.is_empty() {
            self.src_factors = vec![Vec::new(); src.factors.len()];
        } else if src.factors.len() != self.src_factors.len() {
            bail!(Alignment, "sentence has {} factor streams, batch has {}", src.factors.len(), self.src_factors.len());
        }
        for (i, f) in src.factors.iter().enumerate() {
            if f.len() != src.words.len() {
                bail!(Alignment, "factor stream {i} has {} tokens for {} words", f.len(), src.words.len());
            }
        }
        let start = self.src_words.len();
        self.src_spans.push((start, src.words.len()));
        self.src_words.extend_from_slice(&src.words);
        self.src_pos.extend(0..src.words.len());
        for (stream, f) in self.src_factors.iter_mut().zip(&src.factors) {
            stream.extend_from_slice(f);
        }
        let t = self.tgt_in.len();
        self.tgt_spans.push((t, tgt_in.len()));
        self.tgt_in.extend_from_slice(tgt_in);
        self.tgt_pos.extend(0..tgt_in.len());
        self.labels.extend_from_slice(labels);
        Ok(())
    }

    pub fn check_alignment(&self) -> Result<()> {
        for (i, f) in self.src_factors.iter().enumerate() {
            if f.len() != self.src_words.len() {
                bail!(Alignment, "factor stream {i} has {} tokens for {} words", f.len(), self.src_words.len());
            }
        }
        Ok(())
    }

    /// Number of label tokens.
    pub fn target_tokens(&self) -> usize {
        self.labels.len()
    }
}

/// One forward computation over a set of weights.
///
/// Parameters are bound lazily onto the tape the first time a layer uses
/// them; [`Session::bound`] maps names to tape variables so that gradients
/// can be collected after the backward pass.
pub struct Session<'p, T: Scalar = f32> {
    pub tape: Tape<'p, T>,
    weights: &'p dyn Weights<T>,
    bound: HashMap<String, Var>,
    training: bool,
    dropout: f64,
    rng: Rng,
}

impl<'p, T: Scalar> Session<'p, T> {
    /// No gradients, no dropout.
    pub fn inference(weights: &'p dyn Weights<T>) -> Self {
        Self {
            tape: Tape::inference(),
            weights,
            bound: HashMap::new(),
            training: false,
            dropout: 0.0,
            rng: seeded(0),
        }
    }

    /// Records gradients; dropout uses the config rate and `seed`.
    pub fn training(weights: &'p dyn Weights<T>, seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            weights,
            bound: HashMap::new(),
            training: true,
            dropout: weights.config().dropout as f64,
            rng: seeded(seed),
        }
    }

    /// Records gradients but never drops anything; used by gradient checks.
    pub fn deterministic(weights: &'p dyn Weights<T>) -> Self {
        let mut s = Self::training(weights, 0);
        s.dropout = 0.0;
        s
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub(crate) fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.weights.tensor(name)?;
        let v = self.tape.param(t);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub(crate) fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        match self.weights.linear(name)? {
            Linear::Float(_) => {
                let w = self.param(name)?;
                self.tape.matmul(x, w)
            }
            Linear::Int8(q) => {
                let out = q.forward(&self.tape.value(x).cast())?;
                Ok(self.tape.constant(out.cast()))
            }
        }
    }

    pub(crate) fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gain"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.tape.layer_norm(x, g, b, T::of_f64(LAYER_NORM_EPS))
    }

    pub(crate) fn drop(&mut self, x: Var) -> Result<Var> {
        self.tape.dropout(x, self.dropout, self.training, &mut self.rng)
    }

    pub(crate) fn ffn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.w1"))?;
        let b1 = self.param(&format!("{prefix}.b1"))?;
        let h = self.tape.add(h, b1)?;
        let h = self.tape.relu(h);
        let o = self.linear(h, &format!("{prefix}.w2"))?;
        let b2 = self.param(&format!("{prefix}.b2"))?;
        self.tape.add(o, b2)
    }

    /// Multi-head attention block: projections, attention, output projection.
    pub(crate) fn attention_block(
        &mut self,
        xq: Var,
        xkv: Var,
        prefix: &str,
        segments: &[Segment],
        causal: bool,
    ) -> Result<Var> {
        let q = self.linear(xq, &format!("{prefix}.q"))?;
        let k = self.linear(xkv, &format!("{prefix}.k"))?;
        let v = self.linear(xkv, &format!("{prefix}.v"))?;
        let heads = self.weights.config().num_heads;
        let a = self.tape.attention(q, k, v, segments, heads, causal)?;
        self.linear(a, &format!("{prefix}.o"))
    }

    pub(crate) fn residual(&mut self, x: Var, sub: Var) -> Result<Var> {
        let sub = self.drop(sub)?;
        self.tape.add(x, sub)
    }

    fn check_lengths(&self, spans: &[(usize, usize)], side: &str) -> Result<()> {
        let max = self.weights.config().max_seq_len;
        if let Some(&(_, len)) = spans.iter().find(|(_, len)| *len > max) {
            bail!(Length, "{side} length {len} exceeds max_seq_len {max}");
        }
        Ok(())
    }

    /// Word and factor embeddings, combined, plus positions.
    pub fn embed_source(&mut self, p: &Packed) -> Result<Var> {
        let cfg = self.weights.config().clone();
        p.check_alignment()?;
        if p.src_factors.len() != cfg.factor_configs.len() {
            bail!(Alignment, "model expects {} factor streams, got {}", cfg.factor_configs.len(), p.src_factors.len());
        }
        self.check_lengths(&p.src_spans, "source")?;
        let table = self.param("src_embed")?;
        let mut parts = vec![self.tape.embedding(table, &p.src_words)?];
        for (i, fc) in cfg.factor_configs.iter().enumerate() {
            let t = if fc.share_with_word_embedding { table } else { self.param(&format!("factor_embed.{i}"))? };
            parts.push(self.tape.embedding(t, &p.src_factors[i])?);
        }
        let combined = match cfg.combine_mode() {
            None => parts[0],
            Some(super::CombineMode::Concat) => self.tape.concat_cols(&parts)?,
            Some(mode) => {
                let mut acc = parts[0];
                for &f in &parts[1..] {
                    acc = self.tape.add(acc, f)?;
                }
                if mode == super::CombineMode::Average {
                    acc = self.tape.scale(acc, T::one() / T::of_f64(parts.len() as f64));
                }
                acc
            }
        };
        let pe = self.tape.constant(positional_encoding(&p.src_pos, cfg.d_model));
        let x = self.tape.add(combined, pe)?;
        self.drop(x)
    }

    /// Encoder stack; the identity when there are no layers.
    pub fn encode(&mut self, mut x: Var, p: &Packed) -> Result<Var> {
        let layers = self.weights.config().num_encoder_layers;
        let segs: Vec<Segment> = p.src_spans.iter().map(|&(s, l)| Segment::square(s, l)).collect();
        for l in 0..layers {
            let h = self.norm(x, &format!("encoder.{l}.norm_attn"))?;
            let a = self.attention_block(h, h, &format!("encoder.{l}.self_attn"), &segs, false)?;
            x = self.residual(x, a)?;
            let h = self.norm(x, &format!("encoder.{l}.norm_ffn"))?;
            let f = self.ffn(h, &format!("encoder.{l}.ffn"))?;
            x = self.residual(x, f)?;
        }
        if layers > 0 {
            x = self.norm(x, "encoder.final_norm")?;
        }
        Ok(x)
    }

    /// Target embedding plus positions.
    pub(crate) fn embed_target(&mut self, ids: &[usize], positions: &[usize]) -> Result<Var> {
        let table = self.param("tgt_embed")?;
        let y = self.tape.embedding(table, ids)?;
        let pe = self.tape.constant(positional_encoding(positions, self.weights.config().d_model));
        let y = self.tape.add(y, pe)?;
        self.drop(y)
    }

    /// Causally masked decoder over full target prefixes; returns the final
    /// hidden states.
    pub fn decode(&mut self, memory: Var, p: &Packed) -> Result<Var> {
        self.check_lengths(&p.tgt_spans, "target")?;
        let layers = self.weights.config().num_decoder_layers;
        let self_segs: Vec<Segment> = p.tgt_spans.iter().map(|&(s, l)| Segment::square(s, l)).collect();
        let cross_segs: Vec<Segment> = p
            .tgt_spans
            .iter()
            .zip(&p.src_spans)
            .map(|(&(qs, ql), &(ks, kl))| Segment { q_start: qs, q_len: ql, k_start: ks, k_len: kl })
            .collect();
        let mut y = self.embed_target(&p.tgt_in, &p.tgt_pos)?;
        for l in 0..layers {
            let h = self.norm(y, &format!("decoder.{l}.norm_self"))?;
            let a = self.attention_block(h, h, &format!("decoder.{l}.self_attn"), &self_segs, true)?;
            y = self.residual(y, a)?;
            let h = self.norm(y, &format!("decoder.{l}.norm_cross"))?;
            let a = self.attention_block(h, memory, &format!("decoder.{l}.cross_attn"), &cross_segs, false)?;
            y = self.residual(y, a)?;
            let h = self.norm(y, &format!("decoder.{l}.norm_ffn"))?;
            let f = self.ffn(h, &format!("decoder.{l}.ffn"))?;
            y = self.residual(y, f)?;
        }
        if layers > 0 {
            y = self.norm(y, "decoder.final_norm")?;
        }
        Ok(y)
    }

    /// Output logits through the tied projection.
    pub fn logits(&mut self, h: Var) -> Result<Var> {
        match self.weights.output_layer(None)? {
            OutputLayer::Float(_) => {
                let e = self.param("tgt_embed")?;
                self.tape.matmul_nt(h, e)
            }
            OutputLayer::Int8(q) => {
                let out = q.forward(&self.tape.value(h).cast())?;
                Ok(self.tape.constant(out.cast()))
            }
        }
    }

    /// Teacher-forced logits `[target rows × tgt_vocab]`.
    pub fn forward(&mut self, p: &Packed) -> Result<Var> {
        let x = self.embed_source(p)?;
        let memory = self.encode(x, p)?;
        let h = self.decode(memory, p)?;
        self.logits(h)
    }

    /// Summed cross entropy over all label tokens and the token count.
    pub fn loss(&mut self, p: &Packed, label_smoothing: f64) -> Result<(Var, usize)> {
        if p.labels.len() != p.tgt_in.len() {
            bail!(Shape, "{} labels for {} decoder inputs", p.labels.len(), p.tgt_in.len());
        }
        let logits = self.forward(p)?;
        self.tape.cross_entropy(logits, &p.labels, T::of_f64(label_smoothing), Some(super::PAD))
    }
}
