use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::{average_checkpoints, save_checkpoint, select_best, CheckpointRecord};
use super::schedule::{inv_sqrt_lr, plateau_step, scaled_lr, Action, PlateauReduceState};
use super::{effective_batch_update, OptimizerState};
use crate::data::make_batches;
use crate::error::{bail, Result};
use crate::model::{Example, Packed, TransformerModel};
use crate::rng::{derive_seed, seeded};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    InvSqrt,
    PlateauReduce,
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: Schedule,
    /// Base learning rate, before √N scaling and warmup.
    pub lr: f64,
    /// Effective batch multiplier N used to scale the learning rate by √N.
    pub batch_multiplier: f64,
    pub warmup_steps: u64,
    /// Target tokens per update, accumulated over micro-batches.
    pub effective_batch_tokens: usize,
    pub micro_batch_tokens: usize,
    pub checkpoint_interval: u64,
    pub reduce_rate: f64,
    pub reduce_patience: usize,
    pub stop_patience: usize,
    pub average_best: usize,
    pub max_steps: u64,
    /// Also stop once dev perplexity is at or below this value.
    #[serde(default)]
    pub stop_at_ppl: Option<f64>,
    pub label_smoothing: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// The large-batch settings: 262,144-token updates, lr 0.00113 with
    /// 2000 warmup steps, checkpoints every 125 steps, reduce rate 0.9
    /// after 8 checkpoints, stop after 60, average the best 8.
    pub fn paper() -> Self {
        Self {
            schedule: Schedule::PlateauReduce,
            lr: 0.00113,
            batch_multiplier: 1.0,
            warmup_steps: 2000,
            effective_batch_tokens: 262_144,
            micro_batch_tokens: 4096,
            checkpoint_interval: 125,
            reduce_rate: 0.9,
            reduce_patience: 8,
            stop_patience: 60,
            average_best: 8,
            max_steps: 1_000_000,
            stop_at_ppl: None,
            label_smoothing: 0.1,
            seed: 1,
        }
    }

    /// Small batches and short intervals for synthetic tasks.
    pub fn desk() -> Self {
        Self {
            schedule: Schedule::PlateauReduce,
            lr: 0.003,
            batch_multiplier: 1.0,
            warmup_steps: 100,
            effective_batch_tokens: 512,
            micro_batch_tokens: 512,
            checkpoint_interval: 50,
            reduce_rate: 0.9,
            reduce_patience: 8,
            stop_patience: 60,
            average_best: 8,
            max_steps: 3000,
            stop_at_ppl: None,
            label_smoothing: 0.0,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.micro_batch_tokens == 0 || self.effective_batch_tokens < self.micro_batch_tokens {
            bail!(Usage, "need 0 < micro-batch tokens <= effective batch tokens");
        }
        if self.checkpoint_interval == 0 || self.average_best == 0 {
            bail!(Usage, "checkpoint interval and average-best must be positive");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            bail!(Usage, "label smoothing must be in [0, 1)");
        }
        if !(self.lr > 0.0) {
            bail!(Usage, "learning rate must be positive");
        }
        scaled_lr(self.lr, self.batch_multiplier)?;
        if self.schedule == Schedule::PlateauReduce {
            PlateauReduceState::new(self.lr, self.reduce_rate, self.reduce_patience, self.stop_patience)?;
        }
        Ok(())
    }

    /// Micro-batches accumulated per update.
    pub fn accumulation(&self) -> usize {
        self.effective_batch_tokens.div_ceil(self.micro_batch_tokens)
    }
}

/// Computes dev perplexity for the scheduler.
pub trait DevEvaluator {
    fn dev_ppl(&mut self, model: &TransformerModel) -> Result<f64>;
}

impl<F: FnMut(&TransformerModel) -> Result<f64>> DevEvaluator for F {
    fn dev_ppl(&mut self, model: &TransformerModel) -> Result<f64> {
        self(model)
    }
}

/// One row of the training log, written at every checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    /// Mean per-token training loss since the previous checkpoint.
    pub train_loss: f64,
    pub dev_ppl: f64,
    pub action: Action,
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut text = String::from("step\tlr\ttrain_loss\tdev_ppl\taction\n");
    for r in rows {
        text.push_str(&format!("{}\t{:e}\t{:.6}\t{:.6}\t{}\n", r.step, r.lr, r.train_loss, r.dev_ppl, r.action));
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Average of the best checkpoints, or the last model without any.
    pub model: TransformerModel,
    pub log: Vec<LogRow>,
    pub steps: u64,
    /// Retained checkpoints (best `average_best` plus the latest).
    pub checkpoints: Vec<CheckpointRecord>,
}

fn checkpoint_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("checkpoint-{index:05}.sqnt"))
}

/// Runs updates until the scheduler stops or `max_steps` is reached.
///
/// Every `checkpoint_interval` steps the dev perplexity is evaluated and a
/// checkpoint recorded (and written to `checkpoint_dir` before the
/// scheduler's decision is applied). The final model averages the
/// `average_best` checkpoints with the lowest perplexity.
pub fn train_loop(
    mut model: TransformerModel,
    train: &[Example],
    evaluator: &mut dyn DevEvaluator,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    checkpoint_extra: serde_json::Value,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let base_lr = scaled_lr(cfg.lr, cfg.batch_multiplier)?;
    let batches = make_batches(train, cfg.micro_batch_tokens, model.config().max_seq_len)?.batches;
    if batches.is_empty() {
        bail!(Usage, "no training examples fit within max_seq_len");
    }
    let packed: Vec<Packed> = batches.iter().map(|b| b.packed()).collect::<Result<_>>()?;
    let accumulation = cfg.accumulation();
    let mut order_rng = seeded(derive_seed(cfg.seed, "batch-order"));
    let mut order: Vec<usize> = Vec::new();

    let mut optimizer = OptimizerState::new(&model, base_lr);
    let mut plateau = match cfg.schedule {
        Schedule::PlateauReduce => Some(PlateauReduceState::new(base_lr, cfg.reduce_rate, cfg.reduce_patience, cfg.stop_patience)?),
        Schedule::InvSqrt => None,
    };
    let mut records: Vec<CheckpointRecord> = Vec::new();
    let mut log = Vec::new();
    let (mut loss_sum, mut tokens) = (0.0, 0usize);
    let mut next_index = 0;
    let mut updates = 0u64;

    while optimizer.step < cfg.max_steps {
        let mut micro = Vec::with_capacity(accumulation);
        while micro.len() < accumulation {
            if order.is_empty() {
                order = (0..packed.len()).collect();
                order.shuffle(&mut order_rng);
                order.reverse();
            }
            micro.push(packed[order.pop().expect("refilled")].clone());
        }
        let step = optimizer.step + 1;
        let lr = match &plateau {
            Some(p) => p.lr * (step as f64 / cfg.warmup_steps.max(1) as f64).min(1.0),
            None => inv_sqrt_lr(step, cfg.warmup_steps, base_lr),
        };
        let seed = derive_seed(cfg.seed, &format!("dropout/{updates}"));
        updates += 1;
        let stats = effective_batch_update(&mut model, &micro, &mut optimizer, lr, cfg.label_smoothing, Some(seed))?;
        loss_sum += stats.loss_sum;
        tokens += stats.tokens;

        if optimizer.step % cfg.checkpoint_interval != 0 {
            continue;
        }
        let ppl = evaluator.dev_ppl(&model)?;
        let index = next_index;
        next_index += 1;
        let record = CheckpointRecord {
            index,
            step: optimizer.step,
            params: model.params().clone(),
            optimizer: optimizer.clone(),
            ppl,
            lr,
        };
        if let Some(dir) = checkpoint_dir {
            save_checkpoint(&checkpoint_path(dir, index), model.config(), &record, checkpoint_extra.clone())?;
        }
        records.push(record);
        let mut action = match plateau.as_mut() {
            Some(p) => plateau_step(p, index, ppl),
            None => Action::Continue,
        };
        if action == Action::Continue && cfg.stop_at_ppl.is_some_and(|t| ppl <= t) {
            action = Action::Stop;
        }
        let train_loss = loss_sum / tokens.max(1) as f64;
        log::info!("step {} lr {lr:.3e} loss {train_loss:.4} dev ppl {ppl:.4} {action}", optimizer.step);
        log.push(LogRow { step: optimizer.step, lr, train_loss, dev_ppl: ppl, action: action.clone() });
        (loss_sum, tokens) = (0.0, 0);

        if let Action::ReduceAndRewind { to, lr: new_lr } = action {
            let Some(best) = records.iter().find(|r| r.index == to) else {
                bail!(State, "rewind target checkpoint {to} was not retained");
            };
            rewind(&mut model, &mut optimizer, best, new_lr)?;
        }
        retain(&mut records, cfg.average_best, checkpoint_dir)?;
        if action == Action::Stop {
            break;
        }
    }

    let final_model = if records.is_empty() {
        model
    } else {
        TransformerModel::from_params(model.config().clone(), average_checkpoints(&records, cfg.average_best)?)?
    };
    Ok(TrainOutcome { model: final_model, log, steps: optimizer.step, checkpoints: records })
}

/// Restores parameters, moments and step count from `record` and sets the
/// learning rate to `lr`.
pub fn rewind(model: &mut TransformerModel, optimizer: &mut OptimizerState, record: &CheckpointRecord, lr: f64) -> Result<()> {
    *model = TransformerModel::from_params(model.config().clone(), record.params.clone())?;
    *optimizer = record.optimizer.clone();
    optimizer.lr = lr;
    Ok(())
}

/// Keeps the `k` best records and the latest one, deleting pruned files.
fn retain(records: &mut Vec<CheckpointRecord>, k: usize, dir: Option<&Path>) -> Result<()> {
    let latest = records.iter().map(|r| r.index).max();
    let keep: Vec<usize> = select_best(records, k).iter().map(|r| r.index).chain(latest).collect();
    let mut pruned = Vec::new();
    records.retain(|r| {
        let kept = keep.contains(&r.index);
        if !kept {
            pruned.push(r.index);
        }
        kept
    });
    if let Some(dir) = dir {
        for i in pruned {
            let p = checkpoint_path(dir, i);
            if p.exists() {
                std::fs::remove_file(p)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, SourceInput, EOS};

    fn corpus() -> Vec<Example> {
        (0..40)
            .map(|i| {
                let tgt: Vec<usize> = (0..2 + i % 4).map(|j| 4 + (i * 7 + j * 3) % 12).collect();
                let mut src = tgt.clone();
                src.push(EOS);
                Example { src: SourceInput::words(src), tgt }
            })
            .collect()
    }

    fn tiny() -> TransformerModel {
        let mut c = ModelConfig::desk(16, 16);
        c.d_model = 16;
        c.d_ff = 32;
        c.num_encoder_layers = 1;
        c.num_decoder_layers = 1;
        TransformerModel::new(c, 2).unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            checkpoint_interval: 2,
            micro_batch_tokens: 40,
            effective_batch_tokens: 80,
            warmup_steps: 4,
            max_steps: 1000,
            reduce_patience: 2,
            stop_patience: 5,
            average_best: 2,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn scripted_trace() {
        let ppls = [9.0, 8.0, 8.5, 8.0, 7.0, 7.5, 7.5, 7.9, 7.2, 7.1];
        let mut calls = 0;
        let mut eval = |_: &TransformerModel| {
            calls += 1;
            Ok(ppls[calls - 1])
        };
        let out = train_loop(tiny(), &corpus(), &mut eval, &cfg(), None, serde_json::Value::Null).unwrap();
        let lr0 = 0.003;
        let expected = vec![
            Action::Continue,
            Action::Continue,
            Action::Continue,
            Action::ReduceAndRewind { to: 1, lr: lr0 * 0.9 },
            Action::Continue,
            Action::Continue,
            Action::ReduceAndRewind { to: 4, lr: lr0 * 0.9 * 0.9 },
            Action::Continue,
            Action::ReduceAndRewind { to: 4, lr: lr0 * 0.9 * 0.9 * 0.9 },
            Action::Stop,
        ];
        let got: Vec<Action> = out.log.iter().map(|r| r.action.clone()).collect();
        assert_eq!(got, expected);
        // rewinds restore the step count
        let steps: Vec<u64> = out.log.iter().map(|r| r.step).collect();
        assert_eq!(steps, [2, 4, 6, 8, 6, 8, 10, 8, 10, 8]);
    }

    #[test]
    fn rewind_restores_snapshot() {
        let mut seen = Vec::new();
        let ppls = [5.0, 6.0, 6.0, 6.0, 6.0];
        let mut eval = |m: &TransformerModel| {
            seen.push(m.clone());
            Ok(ppls[seen.len() - 1])
        };
        let c = TrainConfig { stop_patience: 4, ..cfg() };
        let out = train_loop(tiny(), &corpus(), &mut eval, &c, None, serde_json::Value::Null).unwrap();
        assert!(matches!(out.log[2].action, Action::ReduceAndRewind { to: 0, .. }));
        let steps: Vec<u64> = out.log.iter().map(|r| r.step).collect();
        assert_eq!(steps, [2, 4, 6, 4, 6]);

        let best = out.checkpoints.iter().find(|r| r.index == 0).unwrap();
        assert_eq!(best.params, *seen[0].params());
        let (mut model, mut opt) = (seen[2].clone(), OptimizerState::new(&seen[2], 1.0));
        rewind(&mut model, &mut opt, best, 0.5).unwrap();
        assert_eq!(model.params(), &best.params);
        assert_eq!((&opt.m, &opt.v, opt.step, opt.lr), (&best.optimizer.m, &best.optimizer.v, 2, 0.5));
    }

    #[test]
    fn retention_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut i = 0.0;
        let mut eval = |_: &TransformerModel| {
            i += 1.0;
            Ok(10.0 - i)
        };
        let c = TrainConfig { max_steps: 12, ..cfg() };
        let out = train_loop(tiny(), &corpus(), &mut eval, &c, Some(dir.path()), serde_json::Value::Null).unwrap();
        assert_eq!(out.log.len(), 6);
        let idx: Vec<usize> = out.checkpoints.iter().map(|r| r.index).collect();
        assert_eq!(idx, [4, 5]);
        let mut files: Vec<String> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        files.sort();
        assert_eq!(files, ["checkpoint-00004.sqnt", "checkpoint-00005.sqnt"]);
        let log = dir.path().join("log.tsv");
        write_log(&log, &out.log).unwrap();
        let text = std::fs::read_to_string(log).unwrap();
        assert!(text.starts_with("step\tlr\ttrain_loss\tdev_ppl\taction\n2\t"));
    }

    #[test]
    fn deterministic_given_seed() {
        let run = || {
            let mut eval = |m: &TransformerModel| crate::eval::perplexity(m, &corpus()[..5]);
            let c = TrainConfig { max_steps: 6, ..cfg() };
            train_loop(tiny(), &corpus(), &mut eval, &c, None, serde_json::Value::Null).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
    }
}
