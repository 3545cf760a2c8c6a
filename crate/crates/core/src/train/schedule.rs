use crate::error::{bail, Result};

/// Learning rate for an effective batch `n` times the base batch:
/// `base_lr · √n`.
pub fn scaled_lr(base_lr: f64, n: f64) -> Result<f64> {
    if !(n >= 1.0) {
        bail!(Usage, "batch multiplier must be at least 1, got {n}");
    }
    Ok(base_lr * n.sqrt())
}

/// Linear warmup to `base_lr` at `warmup`, then decay with 1/√step.
pub fn inv_sqrt_lr(step: u64, warmup: u64, base_lr: f64) -> f64 {
    let (s, w) = (step.max(1) as f64, warmup.max(1) as f64);
    base_lr * (s / w).min((w / s).sqrt())
}

/// What the plateau scheduler asks the trainer to do after a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Continue,
    /// Restore model and optimizer from checkpoint `to` and continue with
    /// learning rate `lr`.
    ReduceAndRewind { to: usize, lr: f64 },
    Stop,
}

impl std::fmt::Display for Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Action::Continue => write!(f, "continue"),
            Action::ReduceAndRewind { to, lr } => write!(f, "reduce_and_rewind(to={to},lr={lr:e})"),
            Action::Stop => write!(f, "stop"),
        }
    }
}

/// Plateau-reduce bookkeeping.
///
/// A checkpoint improves only with a strictly lower perplexity than the
/// best so far. The counter of checkpoints since the last improvement is
/// not reset by a rewind, so a persistent plateau still reaches
/// `stop_patience`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauReduceState {
    pub best_ppl: f64,
    pub best_index: Option<usize>,
    pub since_improvement: usize,
    pub reduce_patience: usize,
    pub stop_patience: usize,
    pub reduce_rate: f64,
    /// Learning rate in effect (before warmup scaling).
    pub lr: f64,
}

impl PlateauReduceState {
    pub fn new(lr: f64, reduce_rate: f64, reduce_patience: usize, stop_patience: usize) -> Result<Self> {
        if !(reduce_rate > 0.0 && reduce_rate < 1.0) {
            bail!(Usage, "reduce rate must be in (0, 1), got {reduce_rate}");
        }
        if reduce_patience == 0 || reduce_patience >= stop_patience {
            bail!(Usage, "need 0 < reduce patience ({reduce_patience}) < stop patience ({stop_patience})");
        }
        Ok(Self {
            best_ppl: f64::INFINITY,
            best_index: None,
            since_improvement: 0,
            reduce_patience,
            stop_patience,
            reduce_rate,
            lr,
        })
    }
}

/// Consumes the dev perplexity of checkpoint `index`.
pub fn plateau_step(state: &mut PlateauReduceState, index: usize, ppl: f64) -> Action {
    if ppl < state.best_ppl {
        state.best_ppl = ppl;
        state.best_index = Some(index);
        state.since_improvement = 0;
        return Action::Continue;
    }
    state.since_improvement += 1;
    let Some(best) = state.best_index else {
        // only NaN perplexities so far
        return if state.since_improvement >= state.stop_patience { Action::Stop } else { Action::Continue };
    };
    if state.since_improvement >= state.stop_patience {
        Action::Stop
    } else if state.since_improvement % state.reduce_patience == 0 {
        state.lr *= state.reduce_rate;
        Action::ReduceAndRewind { to: best, lr: state.lr }
    } else {
        Action::Continue
    }
}
