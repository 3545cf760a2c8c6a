use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// How factor embeddings are merged with the word embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    Concat,
    Sum,
    Average,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceFactorConfig {
    pub factor_vocab_size: usize,
    pub embed_dim: usize,
    pub combine: CombineMode,
    /// Look factor ids up in the source word table instead of a table of
    /// their own. Factor ids must then be source word ids.
    #[serde(default)]
    pub share_with_word_embedding: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub num_heads: usize,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    #[serde(default)]
    pub factor_configs: Vec<SourceFactorConfig>,
    /// Word embedding width in concat mode. Defaults to `d_model` minus the
    /// factor widths; ignored otherwise (sum and average use `d_model`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_embed_dim: Option<usize>,
    pub dropout: f32,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Desk-scale default: d_model 32, d_ff 128, 4 heads, 2:2 layers.
    pub fn desk(src_vocab_size: usize, tgt_vocab_size: usize) -> Self {
        Self {
            num_encoder_layers: 2,
            num_decoder_layers: 2,
            d_model: 32,
            d_ff: 128,
            num_heads: 4,
            src_vocab_size,
            tgt_vocab_size,
            factor_configs: Vec::new(),
            word_embed_dim: None,
            dropout: 0.1,
            max_seq_len: 64,
        }
    }

    /// The "base" transformer sizes: 6:6 layers, 512/2048, 8 heads.
    pub fn base(src_vocab_size: usize, tgt_vocab_size: usize) -> Self {
        Self {
            num_encoder_layers: 6,
            num_decoder_layers: 6,
            d_model: 512,
            d_ff: 2048,
            num_heads: 8,
            src_vocab_size,
            tgt_vocab_size,
            factor_configs: Vec::new(),
            word_embed_dim: None,
            dropout: 0.1,
            max_seq_len: 256,
        }
    }

    pub fn combine_mode(&self) -> Option<CombineMode> {
        self.factor_configs.first().map(|f| f.combine)
    }

    /// Width of the word embedding table.
    pub fn word_dim(&self) -> usize {
        match self.combine_mode() {
            Some(CombineMode::Concat) => self.word_embed_dim.unwrap_or_else(|| {
                let factors: usize = self.factor_configs.iter().map(|f| f.embed_dim).sum();
                self.d_model.saturating_sub(factors)
            }),
            _ => self.d_model,
        }
    }

    /// Checks the structural invariants; layer counts may be zero.
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_ff == 0 || self.num_heads == 0 {
            bail!(Usage, "d_model, d_ff and num_heads must be positive");
        }
        if self.d_model % self.num_heads != 0 {
            bail!(Usage, "d_model {} is not divisible by {} heads", self.d_model, self.num_heads);
        }
        if self.src_vocab_size == 0 || self.tgt_vocab_size == 0 || self.max_seq_len == 0 {
            bail!(Usage, "vocabulary sizes and max_seq_len must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Usage, "dropout must be in [0, 1), got {}", self.dropout);
        }
        let Some(mode) = self.combine_mode() else {
            return Ok(());
        };
        if self.factor_configs.iter().any(|f| f.combine != mode) {
            bail!(Usage, "all source factors must use the same combination mode");
        }
        let word = self.word_dim();
        for (i, f) in self.factor_configs.iter().enumerate() {
            if f.factor_vocab_size == 0 || f.embed_dim == 0 {
                bail!(Usage, "factor {i} needs a positive vocabulary size and embedding width");
            }
            if mode != CombineMode::Concat && f.embed_dim != word {
                bail!(Alignment, "factor {i} width {} must equal the word embedding width {word}", f.embed_dim);
            }
            if f.share_with_word_embedding {
                if f.embed_dim != word {
                    bail!(Alignment, "shared factor {i} width {} differs from word width {word}", f.embed_dim);
                }
                if f.factor_vocab_size > self.src_vocab_size {
                    bail!(Usage, "shared factor {i} vocabulary is larger than the word vocabulary");
                }
            }
        }
        if mode == CombineMode::Concat {
            let total = word + self.factor_configs.iter().map(|f| f.embed_dim).sum::<usize>();
            if word == 0 || total != self.d_model {
                bail!(Alignment, "concat widths sum to {total} (word {word}), d_model is {}", self.d_model);
            }
        }
        Ok(())
    }

    /// Like [`validate`](Self::validate) but also requires at least one
    /// layer on each side, as training and the CLI do.
    pub fn validate_for_training(&self) -> Result<()> {
        self.validate()?;
        if self.num_encoder_layers == 0 || self.num_decoder_layers == 0 {
            bail!(Usage, "encoder and decoder need at least one layer each");
        }
        Ok(())
    }

    /// Every parameter name with its shape, in a stable order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = vec![("src_embed".to_string(), vec![self.src_vocab_size, self.word_dim()])];
        for (i, fc) in self.factor_configs.iter().enumerate() {
            if !fc.share_with_word_embedding {
                out.push((format!("factor_embed.{i}"), vec![fc.factor_vocab_size, fc.embed_dim]));
            }
        }
        out.push(("tgt_embed".to_string(), vec![self.tgt_vocab_size, d]));
        let attn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            for m in ["q", "k", "v", "o"] {
                out.push((format!("{p}.{m}"), vec![d, d]));
            }
        };
        let norm = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}.gain"), vec![d]));
            out.push((format!("{p}.bias"), vec![d]));
        };
        let ffn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}.w1"), vec![d, f]));
            out.push((format!("{p}.b1"), vec![f]));
            out.push((format!("{p}.w2"), vec![f, d]));
            out.push((format!("{p}.b2"), vec![d]));
        };
        for l in 0..self.num_encoder_layers {
            norm(&mut out, &format!("encoder.{l}.norm_attn"));
            attn(&mut out, &format!("encoder.{l}.self_attn"));
            norm(&mut out, &format!("encoder.{l}.norm_ffn"));
            ffn(&mut out, &format!("encoder.{l}.ffn"));
        }
        if self.num_encoder_layers > 0 {
            norm(&mut out, "encoder.final_norm");
        }
        for l in 0..self.num_decoder_layers {
            norm(&mut out, &format!("decoder.{l}.norm_self"));
            attn(&mut out, &format!("decoder.{l}.self_attn"));
            norm(&mut out, &format!("decoder.{l}.norm_cross"));
            attn(&mut out, &format!("decoder.{l}.cross_attn"));
            norm(&mut out, &format!("decoder.{l}.norm_ffn"));
            ffn(&mut out, &format!("decoder.{l}.ffn"));
        }
        if self.num_decoder_layers > 0 {
            norm(&mut out, "decoder.final_norm");
        }
        out
    }

    /// Closed-form parameter count.
    ///
    /// With `d = d_model`, `f = d_ff`:
    /// encoder layer `4d² + 2df + f + 5d`, decoder layer `8d² + 2df + f + 7d`,
    /// plus `2d` per non-empty stack for its final norm, the embedding tables
    /// (`V_src·d_word`, `V_tgt·d`, and each unshared factor table) and no
    /// separate output projection (it is tied to the target embedding).
    pub fn parameter_count(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        let enc = 4 * d * d + 2 * d * f + f + 5 * d;
        let dec = 8 * d * d + 2 * d * f + f + 7 * d;
        let factors: usize = self
            .factor_configs
            .iter()
            .filter(|c| !c.share_with_word_embedding)
            .map(|c| c.factor_vocab_size * c.embed_dim)
            .sum();
        self.src_vocab_size * self.word_dim()
            + factors
            + self.tgt_vocab_size * d
            + self.num_encoder_layers * enc
            + self.num_decoder_layers * dec
            + 2 * d * (usize::from(self.num_encoder_layers > 0) + usize::from(self.num_decoder_layers > 0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn factor(embed_dim: usize, combine: CombineMode) -> SourceFactorConfig {
        SourceFactorConfig { factor_vocab_size: 8, embed_dim, combine, share_with_word_embedding: false }
    }

    #[test]
    fn concat_widths_must_add_up() {
        let mut c = ModelConfig::desk(20, 20);
        c.factor_configs = vec![factor(8, CombineMode::Concat)];
        c.word_embed_dim = Some(24);
        assert!(c.validate().is_ok());
        assert_eq!(c.word_dim(), 24);
        c.factor_configs[0].embed_dim = 4;
        assert!(matches!(c.validate(), Err(crate::Error::Alignment(_))));
        c.word_embed_dim = None;
        assert_eq!(c.word_dim(), 28);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn sum_needs_equal_widths() {
        let mut c = ModelConfig::desk(20, 20);
        c.factor_configs = vec![factor(16, CombineMode::Sum)];
        assert!(matches!(c.validate(), Err(crate::Error::Alignment(_))));
        c.factor_configs[0].embed_dim = 32;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn mixed_modes_rejected() {
        let mut c = ModelConfig::desk(20, 20);
        c.factor_configs = vec![factor(32, CombineMode::Sum), factor(32, CombineMode::Average)];
        assert!(c.validate().is_err());
    }

    #[test]
    fn heads_must_divide_width() {
        let mut c = ModelConfig::desk(20, 20);
        c.num_heads = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn count_matches_shapes() {
        let mut c = ModelConfig::desk(23, 19);
        for (e, d) in [(0, 0), (1, 1), (6, 2), (2, 6), (3, 0)] {
            c.num_encoder_layers = e;
            c.num_decoder_layers = d;
            let summed: usize = c.parameter_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum();
            assert_eq!(summed, c.parameter_count());
        }
        c.factor_configs = vec![
            SourceFactorConfig { factor_vocab_size: 5, embed_dim: 4, combine: CombineMode::Concat, share_with_word_embedding: false },
        ];
        let summed: usize = c.parameter_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        assert_eq!(summed, c.parameter_count());
    }

    #[test]
    fn base_preset_count_by_hand() {
        // 6 encoder layers of 4·512² + 2·512·2048 + 2048 + 5·512, 6 decoder
        // layers of 8·512² + 2·512·2048 + 2048 + 7·512, two final norms and
        // two 1000×512 tables.
        let c = ModelConfig::base(1000, 1000);
        let enc = 4 * 512 * 512 + 2 * 512 * 2048 + 2048 + 5 * 512;
        let dec = 8 * 512 * 512 + 2 * 512 * 2048 + 2048 + 7 * 512;
        assert_eq!(c.parameter_count(), 6 * enc + 6 * dec + 4 * 512 + 2 * 1000 * 512);
        assert_eq!(c.parameter_count(), 45_127_680);
    }

    #[test]
    fn config_json_rejects_unknown_fields() {
        let c = ModelConfig::desk(10, 10);
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&json).unwrap(), c);
        let bad = json.replace("\"dropout\"", "\"dropot\"");
        assert!(serde_json::from_str::<ModelConfig>(&bad).is_err());
    }
}
