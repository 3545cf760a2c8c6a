//! Corpora, vocabularies, batching, case handling and synthetic tasks.
//!
//! Tokenization is whitespace only. Corpus files hold one sentence per line
//! and parallel files are matched by line number.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::model::{CombineMode, Example, SourceFactorConfig, SourceInput, EOS};

mod batch;
pub mod case;
mod synth;
mod vocab;

pub use batch::{make_batches, Batch, Batches};
pub use case::{apply_case_factors, transform_test_set, CaseClass, CaseScheme, TestTransform};
pub use synth::{cipher_permutation, generate_task, synthetic_words, TaskKind, TaskSpec, CASE_WEIGHTS};
pub use vocab::{build_vocab, Vocabulary, RESERVED};

pub fn tokenize(line: &str) -> Vec<&str> {
    line.split_whitespace().collect()
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}

/// Aligned source and target sentences with optional source factor
/// streams (`factors[k][i]` is stream `k` of sentence `i`).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub factors: Vec<Vec<String>>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.src.len() != self.tgt.len() {
            bail!(Alignment, "{} source sentences but {} targets", self.src.len(), self.tgt.len());
        }
        for (k, stream) in self.factors.iter().enumerate() {
            if stream.len() != self.src.len() {
                bail!(Alignment, "factor stream {k} has {} lines for {} sentences", stream.len(), self.src.len());
            }
            for (i, (f, s)) in stream.iter().zip(&self.src).enumerate() {
                let (nf, ns) = (f.split_whitespace().count(), s.split_whitespace().count());
                if nf != ns {
                    bail!(Alignment, "line {}: factor stream {k} has {nf} tokens for {ns} words", i + 1);
                }
            }
        }
        Ok(())
    }

    /// The sentences at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let pick = |v: &Vec<String>| indices.iter().map(|&i| v[i].clone()).collect();
        Self { src: pick(&self.src), tgt: pick(&self.tgt), factors: self.factors.iter().map(pick).collect() }
    }

    /// Writes `<prefix>.src`, `<prefix>.tgt` and `<prefix>.f<k>` files.
    pub fn save(&self, dir: &Path, prefix: &str) -> Result<()> {
        write_lines(&dir.join(format!("{prefix}.src")), &self.src)?;
        write_lines(&dir.join(format!("{prefix}.tgt")), &self.tgt)?;
        for (k, f) in self.factors.iter().enumerate() {
            write_lines(&dir.join(format!("{prefix}.f{k}")), f)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, prefix: &str) -> Result<Self> {
        let src = read_lines(&dir.join(format!("{prefix}.src")))?;
        let tgt = read_lines(&dir.join(format!("{prefix}.tgt")))?;
        let mut factors = Vec::new();
        loop {
            let p = dir.join(format!("{prefix}.f{}", factors.len()));
            if !p.exists() {
                break;
            }
            factors.push(read_lines(&p)?);
        }
        let c = Self { src, tgt, factors };
        c.validate()?;
        Ok(c)
    }
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l.as_ref());
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Turns raw source lines into model input under a case scheme.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceEncoder {
    pub scheme: CaseScheme,
    pub words: Vocabulary,
    /// Factor vocabulary; `None` without factors or when the factor shares
    /// the word vocabulary.
    pub factor: Option<Vocabulary>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncoderJson {
    scheme: CaseScheme,
    words: serde_json::Value,
    factor: Option<serde_json::Value>,
}

impl SourceEncoder {
    /// Builds the vocabularies from training source lines.
    pub fn build<S: AsRef<str>>(lines: &[S], scheme: CaseScheme, max_size: usize, min_count: usize) -> Result<Self> {
        let mut words = Vec::with_capacity(lines.len());
        let mut factors = Vec::with_capacity(lines.len());
        for l in lines {
            let (w, f) = apply_case_factors(l.as_ref(), scheme);
            words.push(w.join(" "));
            factors.push(f.first().map(|f| f.join(" ")).unwrap_or_default());
        }
        Ok(match scheme {
            CaseScheme::None => Self { scheme, words: build_vocab(&words, max_size, min_count)?, factor: None },
            CaseScheme::SfCase => {
                let classes = CaseClass::ALL.map(CaseClass::as_str);
                Self { scheme, words: build_vocab(&words, max_size, min_count)?, factor: Some(Vocabulary::from_tokens(classes)?) }
            }
            CaseScheme::SfWord => Self {
                scheme,
                words: build_vocab(&words, max_size, min_count)?,
                factor: Some(build_vocab(&factors, max_size, min_count)?),
            },
            CaseScheme::SfWordShare => {
                words.extend(factors);
                Self { scheme, words: build_vocab(&words, max_size, min_count)?, factor: None }
            }
        })
    }

    /// Factor configurations matching this encoder. `factor_dim` is only
    /// used for concatenation; sum and average use `d_model`.
    pub fn factor_configs(&self, combine: CombineMode, d_model: usize, factor_dim: usize) -> Vec<SourceFactorConfig> {
        let share = self.scheme == CaseScheme::SfWordShare;
        let size = match (&self.factor, share) {
            (Some(f), _) => f.len(),
            (None, true) => self.words.len(),
            (None, false) => return Vec::new(),
        };
        let embed_dim = match combine {
            CombineMode::Concat => factor_dim,
            _ => d_model,
        };
        vec![SourceFactorConfig { factor_vocab_size: size, embed_dim, combine, share_with_word_embedding: share }]
    }

    /// Encodes a line, appending EOS to the words and every factor stream.
    pub fn encode(&self, line: &str) -> SourceInput {
        let (words, factors) = apply_case_factors(line, self.scheme);
        let with_eos = |v: &Vocabulary, toks: &[String]| {
            let mut ids = v.encode(toks.iter().map(String::as_str));
            ids.push(EOS);
            ids
        };
        let factor_vocab = self.factor.as_ref().unwrap_or(&self.words);
        SourceInput { words: with_eos(&self.words, &words), factors: factors.iter().map(|f| with_eos(factor_vocab, f)).collect() }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let j = EncoderJson { scheme: self.scheme, words: self.words.to_json(), factor: self.factor.as_ref().map(Vocabulary::to_json) };
        serde_json::to_value(j).expect("plain data")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let j: EncoderJson = serde_json::from_value(v.clone()).map_err(|e| crate::Error::Format(format!("bad source vocabulary: {e}")))?;
        let factor = j.factor.as_ref().map(Vocabulary::from_json).transpose()?;
        if j.scheme.has_factor() != (factor.is_some() || j.scheme == CaseScheme::SfWordShare) {
            bail!(Format, "factor vocabulary does not match case scheme {:?}", j.scheme);
        }
        Ok(Self { scheme: j.scheme, words: Vocabulary::from_json(&j.words)?, factor })
    }
}

/// Converts a corpus to training examples (EOS on the source, none on the
/// target).
pub fn encode_corpus(corpus: &ParallelCorpus, src: &SourceEncoder, tgt: &Vocabulary) -> Result<Vec<Example>> {
    corpus.validate()?;
    Ok(corpus
        .src
        .iter()
        .zip(&corpus.tgt)
        .map(|(s, t)| Example { src: src.encode(s), tgt: tgt.encode(tokenize(t)) })
        .collect())
}
