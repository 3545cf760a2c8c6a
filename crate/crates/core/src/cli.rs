//! The `nmt` command line.
//!
//! Every subcommand accepts `--config FILE`, a JSON object keyed by long
//! flag names (`{"encoder-layers": 6, "casing": true}`). Flags given on the
//! command line win over the file, which wins over the built-in defaults.

use std::ffi::OsString;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{
    build_vocab, encode_corpus, generate_task, read_lines, write_lines, CaseScheme, ParallelCorpus, SourceEncoder, TaskKind,
    TaskSpec, Vocabulary,
};
use crate::decode::{translate_corpus, BeamOptions, LatencyReport, ModelExec, MonotonicClock, ShortlistTable, Translator};
use crate::eval::{bleu, perplexity};
use crate::model::{CombineMode, Example, ModelConfig, ModelMeta, TransformerModel, KIND_CHECKPOINT, KIND_F32, KIND_INT8};
use crate::quant::{quantize_model, ContainerFile, QuantizeOptions, QuantizedModel};
use crate::rng::{derive_seed, seeded};
use crate::train::{train_loop, write_log, Schedule, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "nmt", version, about = "Train, quantize and run small transformer translation models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic parallel corpus split into train, dev and test.
    GenData(GenDataArgs),
    /// Train a model and write the averaged result, checkpoints and a log.
    Train(TrainArgs),
    /// Convert an f32 model file to int8.
    Quantize(QuantizeArgs),
    /// Translate a file line by line.
    Translate(TranslateArgs),
    /// Corpus BLEU of hypotheses against references, as JSON.
    Evaluate(EvaluateArgs),
    /// Translate a file repeatedly and report latency statistics.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum, default_value_t = TaskKind::Copy)]
    pub task: TaskKind,
    /// Number of distinct words.
    #[arg(long, default_value_t = 50)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 2000)]
    pub train: usize,
    #[arg(long, default_value_t = 200)]
    pub dev: usize,
    #[arg(long, default_value_t = 200)]
    pub test: usize,
    /// Shortest sentence, in words.
    #[arg(long, default_value_t = 2)]
    pub min_len: usize,
    /// Longest sentence, in words.
    #[arg(long, default_value_t = 10)]
    pub max_len: usize,
    /// Case source words at random; the case classes go to `*.f0`.
    #[arg(long)]
    pub casing: bool,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Write into an existing directory.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory with train.{src,tgt} and dev.{src,tgt}.
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub force: bool,
    #[arg(long, default_value_t = 2)]
    pub encoder_layers: usize,
    #[arg(long, default_value_t = 2)]
    pub decoder_layers: usize,
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 128)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f32,
    #[arg(long, default_value_t = 64)]
    pub max_seq_len: usize,
    /// Maximum vocabulary size per side, reserved tokens included.
    #[arg(long, default_value_t = 10_000)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
    #[arg(long, value_enum, default_value_t = CaseScheme::None)]
    pub factors_scheme: CaseScheme,
    #[arg(long, value_enum, default_value_t = CombineMode::Sum)]
    pub factor_combine: CombineMode,
    /// Factor embedding width when concatenating.
    #[arg(long, default_value_t = 8)]
    pub factor_dim: usize,
    #[arg(long, value_enum, default_value_t = Schedule::PlateauReduce)]
    pub scheduler: Schedule,
    #[arg(long, default_value_t = 0.003)]
    pub lr: f64,
    /// Scale the learning rate by the square root of this factor.
    #[arg(long, default_value_t = 1.0)]
    pub batch_multiplier: f64,
    #[arg(long, default_value_t = 100)]
    pub warmup_steps: u64,
    #[arg(long, default_value_t = 512)]
    pub effective_batch_tokens: usize,
    #[arg(long, default_value_t = 512)]
    pub micro_batch_tokens: usize,
    #[arg(long, default_value_t = 50)]
    pub checkpoint_interval: u64,
    #[arg(long, default_value_t = 0.9)]
    pub reduce_rate: f64,
    #[arg(long, default_value_t = 8)]
    pub reduce_patience: usize,
    #[arg(long, default_value_t = 60)]
    pub stop_patience: usize,
    #[arg(long, default_value_t = 8)]
    pub average_best: usize,
    #[arg(long, default_value_t = 3000)]
    pub max_steps: u64,
    /// Stop early once dev perplexity reaches this value.
    #[arg(long)]
    pub stop_at_ppl: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub label_smoothing: f64,
    /// Candidates kept per source word in the shortlist table.
    #[arg(long, default_value_t = 50)]
    pub shortlist_per_token: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Matrix multiplication workers.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl TrainArgs {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            schedule: self.scheduler,
            lr: self.lr,
            batch_multiplier: self.batch_multiplier,
            warmup_steps: self.warmup_steps,
            effective_batch_tokens: self.effective_batch_tokens,
            micro_batch_tokens: self.micro_batch_tokens,
            checkpoint_interval: self.checkpoint_interval,
            reduce_rate: self.reduce_rate,
            reduce_patience: self.reduce_patience,
            stop_patience: self.stop_patience,
            average_best: self.average_best,
            max_steps: self.max_steps,
            stop_at_ppl: self.stop_at_ppl,
            label_smoothing: self.label_smoothing,
            seed: self.seed,
        }
    }

    pub fn model_config(&self, src: &SourceEncoder, tgt: &Vocabulary) -> ModelConfig {
        ModelConfig {
            num_encoder_layers: self.encoder_layers,
            num_decoder_layers: self.decoder_layers,
            d_model: self.d_model,
            d_ff: self.d_ff,
            num_heads: self.heads,
            src_vocab_size: src.words.len(),
            tgt_vocab_size: tgt.len(),
            factor_configs: src.factor_configs(self.factor_combine, self.d_model, self.factor_dim),
            word_embed_dim: None,
            dropout: self.dropout,
            max_seq_len: self.max_seq_len,
        }
    }
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Store the embedding tables as int8 too.
    #[arg(long)]
    pub quantize_embeddings: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Source file; standard input when absent.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Run with int8 weights, quantizing an f32 file on load.
    #[arg(long)]
    pub int8: bool,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    /// Length penalty exponent.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Maximum output length, EOS included (capped by the model).
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    /// Shortlist size per sentence; 0 uses the full vocabulary.
    #[arg(long, default_value_t = 0)]
    pub shortlist: usize,
    /// Expected source case scheme; must match the model's.
    #[arg(long, value_enum)]
    pub case_scheme: Option<CaseScheme>,
    /// Parallel workers (matrix multiplication, or sentences with
    /// --parallel-sentences).
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Spread sentences over the workers instead of matrix rows.
    #[arg(long)]
    pub parallel_sentences: bool,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Write the latency report as JSON.
    #[arg(long)]
    pub latency: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub case_insensitive: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long, default_value_t = 3)]
    pub repeat: usize,
    /// Write the translations of the first repeat here.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Vocabularies and shortlist table, stored in the model file metadata.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelExtra {
    src: serde_json::Value,
    tgt: serde_json::Value,
    shortlist: ShortlistTable,
}

/// A model file with everything needed to translate.
pub struct LoadedModel {
    pub exec: ModelExec,
    pub src: SourceEncoder,
    pub tgt: Vocabulary,
    pub shortlist: ShortlistTable,
}

impl LoadedModel {
    /// Reads an f32, int8 or checkpoint file; `int8` quantizes f32 weights
    /// on load. Int8 files always run in int8.
    pub fn open(path: &Path, int8: bool) -> Result<Self> {
        let file = ContainerFile::load(path).with_context(|| format!("reading model {}", path.display()))?;
        let meta = ModelMeta::parse(&file.metadata)?;
        let extra = match meta.kind.as_str() {
            KIND_CHECKPOINT => meta.extra.get("extra").cloned().unwrap_or_default(),
            _ => meta.extra.clone(),
        };
        let parsed: ModelExtra = serde_json::from_value(extra)
            .with_context(|| format!("{} has no vocabularies; was it written by `nmt train`?", path.display()))?;
        let exec = if int8 || meta.kind == KIND_INT8 {
            ModelExec::Int8(QuantizedModel::from_container(&file, &QuantizeOptions::default())?.0)
        } else {
            ModelExec::F32(TransformerModel::from_container(&file)?.0)
        };
        Ok(Self {
            exec,
            src: SourceEncoder::from_json(&parsed.src)?,
            tgt: Vocabulary::from_json(&parsed.tgt)?,
            shortlist: parsed.shortlist,
        })
    }

    pub fn translator(&self, a: &DecodeArgs) -> Translator<'_> {
        Translator {
            weights: self.exec.weights(),
            src: &self.src,
            tgt: &self.tgt,
            beam: BeamOptions { beam_size: a.beam, max_len: a.max_len, alpha: a.alpha },
            shortlist: Some(&self.shortlist),
            shortlist_k: a.shortlist,
        }
    }
}

/// Turns a `--config` JSON object into command-line arguments.
fn config_args(path: &Path) -> Result<Vec<OsString>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let serde_json::Value::Object(map) = value else {
        bail!("config {} must be a JSON object", path.display());
    };
    let mut out = Vec::new();
    for (key, v) in map {
        if key == "config" {
            bail!("config files cannot include other config files");
        }
        let flag = format!("--{key}");
        match v {
            serde_json::Value::Bool(true) => out.push(flag.into()),
            serde_json::Value::Bool(false) | serde_json::Value::Null => {}
            serde_json::Value::String(s) => out.extend([flag.into(), s.into()]),
            serde_json::Value::Number(n) => out.extend([flag.into(), n.to_string().into()]),
            _ => bail!("config key {key:?} must be a string, number or boolean"),
        }
    }
    Ok(out)
}

fn command() -> clap::Command {
    Cli::command().mut_subcommands(|s| s.args_override_self(true))
}

/// Parses arguments, merging in the `--config` file if one is given.
pub fn parse<I, T>(args: I) -> Result<Cli>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let mut matches = command().try_get_matches_from(&args)?;
    if let Some((_, sub)) = matches.subcommand() {
        if let Some(path) = sub.get_one::<PathBuf>("config") {
            // no global options, so the subcommand is always args[1]
            let mut merged = args[..2].to_vec();
            merged.extend(config_args(path)?);
            merged.extend_from_slice(&args[2..]);
            matches = command().try_get_matches_from(merged)?;
        }
    }
    Ok(Cli::from_arg_matches(&matches)?)
}

/// Runs the command line and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match parse(args).and_then(run) {
        Ok(()) => 0,
        Err(e) => {
            if let Some(ce) = e.downcast_ref::<clap::Error>() {
                use clap::error::ErrorKind;
                if matches!(ce.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                    let _ = ce.print();
                    return 0;
                }
                if ce.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                    let _ = ce.print();
                    return 2;
                }
                let rendered = ce.render().to_string();
                eprintln!("{}", rendered.lines().next().unwrap_or("error: invalid arguments"));
                return 2;
            }
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Quantize(a) => cmd_quantize(&a),
        Command::Translate(a) => cmd_translate(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Benchmark(a) => cmd_benchmark(&a),
    }
}

fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && !force {
        return Err(crate::Error::Usage(format!("{} already exists (use --force to write into it)", dir.display())).into());
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let total = a.train + a.dev + a.test;
    let spec = TaskSpec { kind: a.task, vocab_size: a.vocab_size, sentences: total, lengths: a.min_len..=a.max_len, casing: a.casing, seed: a.seed };
    let corpus = generate_task(&spec)?;
    prepare_out_dir(&a.out_dir, a.force)?;
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut seeded(derive_seed(a.seed, "split")));
    let mut start = 0;
    for (name, n) in [("train", a.train), ("dev", a.dev), ("test", a.test)] {
        corpus.select(&order[start..start + n]).save(&a.out_dir, name)?;
        start += n;
    }
    Ok(())
}

fn fits(e: &Example, max_seq_len: usize) -> bool {
    e.src.len() <= max_seq_len && e.tgt.len() < max_seq_len
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    crate::tensor::parallel::set_workers(a.workers);
    let load = |name: &str| {
        ParallelCorpus::load(&a.data_dir, name).with_context(|| format!("loading {name} data from {}", a.data_dir.display()))
    };
    let (train, dev) = (load("train")?, load("dev")?);
    let src = SourceEncoder::build(&train.src, a.factors_scheme, a.vocab_size, a.min_count)?;
    let tgt = build_vocab(&train.tgt, a.vocab_size, a.min_count)?;
    let config = a.model_config(&src, &tgt);
    config.validate_for_training()?;
    let cfg = a.train_config();
    cfg.validate()?;
    prepare_out_dir(&a.out_dir, a.force)?;

    let examples = encode_corpus(&train, &src, &tgt)?;
    let dev_examples: Vec<Example> =
        encode_corpus(&dev, &src, &tgt)?.into_iter().filter(|e| fits(e, config.max_seq_len)).collect();
    let table = ShortlistTable::from_examples(&examples, src.words.len(), tgt.len(), a.shortlist_per_token);
    let extra = serde_json::to_value(ModelExtra { src: src.to_json(), tgt: tgt.to_json(), shortlist: table })?;

    let model = TransformerModel::new(config, derive_seed(a.seed, "init"))?;
    let checkpoints = a.out_dir.join("checkpoints");
    std::fs::create_dir_all(&checkpoints)?;
    let mut dev_ppl = |m: &TransformerModel| perplexity(m, &dev_examples);
    let outcome = train_loop(model, &examples, &mut dev_ppl, &cfg, Some(&checkpoints), extra.clone())?;

    outcome.model.to_container(KIND_F32, extra)?.save(&a.out_dir.join("model.sqnt"))?;
    write_log(&a.out_dir.join("train.log"), &outcome.log)?;
    let final_ppl = perplexity(&outcome.model, &dev_examples)?;
    let summary = serde_json::json!({ "steps": outcome.steps, "checkpoints": outcome.log.len(), "dev_ppl": final_ppl });
    println!("{summary}");
    Ok(())
}

pub fn cmd_quantize(a: &QuantizeArgs) -> Result<()> {
    let file = ContainerFile::load(&a.model).with_context(|| format!("reading model {}", a.model.display()))?;
    let (model, meta) = TransformerModel::from_container(&file)?;
    let extra = match meta.kind.as_str() {
        KIND_CHECKPOINT => meta.extra.get("extra").cloned().unwrap_or_default(),
        _ => meta.extra,
    };
    let q = quantize_model(&model, &QuantizeOptions { quantize_embeddings: a.quantize_embeddings })?;
    q.save(&a.out, extra).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn read_input(path: Option<&Path>) -> Result<Vec<String>> {
    match path {
        Some(p) => read_lines(p).with_context(|| format!("reading {}", p.display())),
        None => {
            let mut text = String::new();
            std::io::stdin().read_to_string(&mut text)?;
            Ok(text.lines().map(str::to_string).collect())
        }
    }
}

fn write_output(path: Option<&Path>, lines: &[String]) -> Result<()> {
    match path {
        Some(p) => write_lines(p, lines).with_context(|| format!("writing {}", p.display())),
        None => {
            for l in lines {
                println!("{l}");
            }
            Ok(())
        }
    }
}

/// Loads the model and input and sets the worker counts. Returns the
/// sentence-level worker count.
fn setup_decode(a: &DecodeArgs) -> Result<(LoadedModel, Vec<String>, usize)> {
    if a.beam == 0 {
        return Err(crate::Error::Usage("--beam must be at least 1".into()).into());
    }
    let loaded = LoadedModel::open(&a.model, a.int8)?;
    if let Some(s) = a.case_scheme {
        if s != loaded.src.scheme {
            return Err(crate::Error::Usage(format!("--case-scheme {s:?} but the model was trained with {:?}", loaded.src.scheme)).into());
        }
    }
    let lines = read_input(a.input.as_deref())?;
    let workers = a.workers.max(1);
    let (matmul, sentences) = if a.parallel_sentences { (1, workers) } else { (workers, 1) };
    crate::tensor::parallel::set_workers(matmul);
    Ok((loaded, lines, sentences))
}

pub fn cmd_translate(a: &TranslateArgs) -> Result<()> {
    let (loaded, lines, sentence_workers) = setup_decode(&a.decode)?;
    let (out, report) = translate_corpus(&loaded.translator(&a.decode), &lines, &mut MonotonicClock::default(), sentence_workers)?;
    write_output(a.output.as_deref(), &out)?;
    if let Some(p) = &a.latency {
        std::fs::write(p, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", p.display()))?;
    }
    log::info!("translated {} lines, {:.1} tokens/s", report.count, report.tokens_per_sec);
    Ok(())
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let hyp = read_lines(&a.hyp).with_context(|| format!("reading {}", a.hyp.display()))?;
    let refs = read_lines(&a.reference).with_context(|| format!("reading {}", a.reference.display()))?;
    println!("{}", serde_json::to_string(&bleu(&hyp, &refs, !a.case_insensitive)?)?);
    Ok(())
}

#[derive(Debug, Serialize)]
struct BenchmarkReport {
    repeats: Vec<LatencyReport>,
    aggregate: LatencyReport,
    /// Every repeat produced the same translations.
    identical: bool,
}

pub fn cmd_benchmark(a: &BenchmarkArgs) -> Result<()> {
    if a.repeat == 0 {
        return Err(crate::Error::Usage("--repeat must be at least 1".into()).into());
    }
    let (loaded, lines, sentence_workers) = setup_decode(&a.decode)?;
    let translator = loaded.translator(&a.decode);
    let mut clock = MonotonicClock::default();
    let mut repeats = Vec::with_capacity(a.repeat);
    let mut first: Option<Vec<String>> = None;
    let mut identical = true;
    for _ in 0..a.repeat {
        let (out, report) = translate_corpus(&translator, &lines, &mut clock, sentence_workers)?;
        match &first {
            Some(f) => identical &= *f == out,
            None => first = Some(out),
        }
        repeats.push(report);
    }
    let tokens = repeats.iter().map(|r| r.output_tokens).sum();
    let aggregate = if sentence_workers > 1 {
        LatencyReport::from_total(repeats.iter().map(|r| r.count).sum(), repeats.iter().map(|r| r.total_ms).sum(), tokens)
    } else {
        LatencyReport::from_durations(repeats.iter().flat_map(|r| r.durations_ms.iter().copied()).collect(), tokens)?
    };
    if let (Some(p), Some(out)) = (&a.output, &first) {
        write_lines(p, out).with_context(|| format!("writing {}", p.display()))?;
    }
    println!("{}", serde_json::to_string_pretty(&BenchmarkReport { repeats, aggregate, identical })?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn train_args(extra: &[&str]) -> Result<TrainArgs> {
        let mut args = vec!["nmt", "train", "--data-dir", "d", "--out-dir", "o"];
        args.extend_from_slice(extra);
        match parse(args)?.command {
            Command::Train(t) => Ok(t),
            other => panic!("parsed {other:?}"),
        }
    }

    #[test]
    fn train_defaults_are_the_desk_preset() {
        assert_eq!(train_args(&[]).unwrap().train_config(), TrainConfig::desk());
    }

    #[test]
    fn large_batch_preset_flags() {
        let t = train_args(&[
            "--scheduler",
            "plateau-reduce",
            "--reduce-rate",
            "0.9",
            "--reduce-patience",
            "8",
            "--stop-patience",
            "60",
            "--average-best",
            "8",
            "--encoder-layers",
            "20",
            "--decoder-layers",
            "2",
        ])
        .unwrap();
        let c = t.train_config();
        assert_eq!((c.schedule, c.reduce_rate, c.reduce_patience, c.stop_patience, c.average_best), (Schedule::PlateauReduce, 0.9, 8, 60, 8));
        assert_eq!((t.encoder_layers, t.decoder_layers), (20, 2));
    }

    #[test]
    fn config_file_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"encoder-layers": 6, "decoder-layers": 3, "scheduler": "inv-sqrt"}"#).unwrap();
        let p = path.to_str().unwrap();
        let t = train_args(&["--config", p, "--decoder-layers", "1"]).unwrap();
        assert_eq!((t.encoder_layers, t.decoder_layers, t.scheduler), (6, 1, Schedule::InvSqrt));
        assert_eq!(t.d_model, 32);

        std::fs::write(&path, r#"{"no-such-flag": 1}"#).unwrap();
        assert!(train_args(&["--config", p]).is_err());
    }

    #[test]
    fn unknown_flags_are_rejected() {
        assert!(train_args(&["--frobnicate"]).is_err());
        assert_eq!(main_with_args(["nmt", "translate", "--bogus"]), 2);
    }

    #[test]
    fn gen_data_refuses_existing_dir() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let err = parse(["nmt", "gen-data", "--out-dir", out, "--train", "5", "--dev", "2", "--test", "2"]).and_then(run).unwrap_err();
        assert!(matches!(err.downcast_ref::<crate::Error>(), Some(crate::Error::Usage(_))));
        parse(["nmt", "gen-data", "--out-dir", out, "--train", "5", "--dev", "2", "--test", "2", "--force", "--casing"]).and_then(run).unwrap();
        let c = ParallelCorpus::load(dir.path(), "train").unwrap();
        assert_eq!((c.len(), c.factors.len()), (5, 1));
    }
}
