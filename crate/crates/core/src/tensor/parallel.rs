//! Worker-count configuration and row-parallel dispatch.
//!
//! Kernels split their *output* rows into contiguous chunks, one per worker.
//! Each output element is produced by exactly one worker with the same
//! accumulation order as the single-worker path, so results do not depend
//! on the worker count.

use std::sync::atomic::{AtomicUsize, Ordering};

static WORKERS: AtomicUsize = AtomicUsize::new(1);

/// Minimum multiply-adds per worker before a kernel bothers to fan out.
pub const MIN_WORK_PER_WORKER: usize = 1 << 15;

pub fn set_workers(n: usize) {
    WORKERS.store(n.max(1), Ordering::Relaxed);
}

pub fn workers() -> usize {
    WORKERS.load(Ordering::Relaxed)
}

/// Runs `f(first_row, chunk)` over disjoint row chunks of `out`.
///
/// `work_per_row` is the approximate number of multiply-adds needed to
/// produce one row; it decides how many workers are worth spawning.
pub fn for_each_row_chunk<T, F>(out: &mut [T], row_len: usize, work_per_row: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    if row_len == 0 || out.is_empty() {
        return;
    }
    let rows = out.len() / row_len;
    let total_work = rows.saturating_mul(work_per_row.max(1));
    let useful = (total_work / MIN_WORK_PER_WORKER).max(1);
    let n = workers().min(rows).min(useful);
    if n <= 1 {
        f(0, out);
        return;
    }
    let rows_per = rows.div_ceil(n);
    std::thread::scope(|s| {
        for (ci, chunk) in out.chunks_mut(rows_per * row_len).enumerate() {
            let f = &f;
            s.spawn(move || f(ci * rows_per, chunk));
        }
    });
}
