use std::sync::Arc;

use super::{OutputLayer, Packed, Session, SourceInput, Weights};
use crate::error::{bail, Result};
use crate::tensor::{ops, Scalar, Segment, Tensor};

/// Per-sentence decoding state: projected encoder keys/values for every
/// cross-attention layer and the growing self-attention cache.
///
/// Cloning is cheap for the cross-attention part, which is shared.
#[derive(Clone, Debug)]
pub struct DecoderState<T: Scalar = f32> {
    cross: Arc<Vec<(Tensor<T>, Tensor<T>)>>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<T: Scalar> DecoderState<T> {
    /// Encodes `src` and prepares the cross-attention cache.
    pub fn new(weights: &dyn Weights<T>, src: &SourceInput) -> Result<Self> {
        let mut s = Session::inference(weights);
        let packed = Packed::single(src, &[])?;
        let x = s.embed_source(&packed)?;
        let memory = s.encode(x, &packed)?;
        let layers = weights.config().num_decoder_layers;
        let mut cross = Vec::with_capacity(layers);
        for l in 0..layers {
            let k = s.linear(memory, &format!("decoder.{l}.cross_attn.k"))?;
            let v = s.linear(memory, &format!("decoder.{l}.cross_attn.v"))?;
            cross.push((s.tape.value(k).clone(), s.tape.value(v).clone()));
        }
        Ok(Self { cross: Arc::new(cross), keys: vec![Vec::new(); layers], values: vec![Vec::new(); layers], len: 0 })
    }

    /// Number of target tokens consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feeds `prev` (BOS on the first call) and returns the logits for the
    /// next position, one per row of `output`.
    pub fn step(&mut self, weights: &dyn Weights<T>, prev: usize, output: &OutputLayer<'_, T>) -> Result<Vec<T>> {
        let cfg = weights.config();
        if self.len >= cfg.max_seq_len {
            bail!(Length, "decoding step {} exceeds max_seq_len {}", self.len + 1, cfg.max_seq_len);
        }
        let d = cfg.d_model;
        let cross = Arc::clone(&self.cross);
        let mut new_k = Vec::with_capacity(cross.len());
        let mut new_v = Vec::with_capacity(cross.len());
        let hidden = {
            let mut s = Session::inference(weights);
            let mut y = s.embed_target(&[prev], &[self.len])?;
            let heads = cfg.num_heads;
            let self_seg = [Segment { q_start: 0, q_len: 1, k_start: 0, k_len: self.len + 1 }];
            for (l, (ck, cv)) in cross.iter().enumerate() {
                let p = format!("decoder.{l}.self_attn");
                let h = s.norm(y, &format!("decoder.{l}.norm_self"))?;
                let q = s.linear(h, &format!("{p}.q"))?;
                let k = s.linear(h, &format!("{p}.k"))?;
                let v = s.linear(h, &format!("{p}.v"))?;
                let mut kd = self.keys[l].clone();
                kd.extend_from_slice(s.tape.value(k).data());
                let mut vd = self.values[l].clone();
                vd.extend_from_slice(s.tape.value(v).data());
                new_k.push(s.tape.value(k).data().to_vec());
                new_v.push(s.tape.value(v).data().to_vec());
                let kc = s.tape.constant(Tensor::matrix(self.len + 1, d, kd)?);
                let vc = s.tape.constant(Tensor::matrix(self.len + 1, d, vd)?);
                let a = s.tape.attention(q, kc, vc, &self_seg, heads, false)?;
                let a = s.linear(a, &format!("{p}.o"))?;
                y = s.residual(y, a)?;

                let p = format!("decoder.{l}.cross_attn");
                let h = s.norm(y, &format!("decoder.{l}.norm_cross"))?;
                let q = s.linear(h, &format!("{p}.q"))?;
                let kx = s.tape.frozen(ck);
                let vx = s.tape.frozen(cv);
                let seg = [Segment { q_start: 0, q_len: 1, k_start: 0, k_len: ck.rows() }];
                let a = s.tape.attention(q, kx, vx, &seg, heads, false)?;
                let a = s.linear(a, &format!("{p}.o"))?;
                y = s.residual(y, a)?;

                let h = s.norm(y, &format!("decoder.{l}.norm_ffn"))?;
                let f = s.ffn(h, &format!("decoder.{l}.ffn"))?;
                y = s.residual(y, f)?;
            }
            if !cross.is_empty() {
                y = s.norm(y, "decoder.final_norm")?;
            }
            s.tape.value(y).clone()
        };
        for (l, (k, v)) in new_k.into_iter().zip(new_v).enumerate() {
            self.keys[l].extend(k);
            self.values[l].extend(v);
        }
        self.len += 1;
        project(&hidden, output)
    }
}

/// Logits for a single hidden row.
pub(crate) fn project<T: Scalar>(hidden: &Tensor<T>, output: &OutputLayer<'_, T>) -> Result<Vec<T>> {
    Ok(match output {
        OutputLayer::Float(table) => ops::matmul_nt(hidden, table)?.into_data(),
        OutputLayer::Int8(q) => q.forward(&hidden.cast())?.cast().into_data(),
    })
}
