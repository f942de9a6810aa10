//! Fan-out over disjoint instance ranges.
//!
//! Work is always cut into the same fixed-size chunks regardless of the
//! worker count, and results come back in chunk order, so outputs never
//! depend on how many threads ran.

use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicUsize, Ordering};

/// Environment variable overriding the worker count.
pub const THREADS_ENV: &str = "VIB_THREADS";

/// `VIB_THREADS` if set to a positive integer, else available parallelism.
pub fn worker_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, NonZeroUsize::get))
}

/// Applies `f(start, end)` to consecutive ranges of `chunk` items covering
/// `0..n` and returns the results in range order.
pub fn map_chunks<R, F>(n: usize, chunk: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize, usize) -> R + Sync,
{
    let chunk = chunk.max(1);
    let ranges: Vec<(usize, usize)> = (0..n).step_by(chunk).map(|s| (s, (s + chunk).min(n))).collect();
    let workers = worker_count().min(ranges.len());
    if workers <= 1 {
        return ranges.iter().map(|&(s, e)| f(s, e)).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..ranges.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(&(s, e)) = ranges.get(i) else { break };
                        done.push((i, f(s, e)));
                    }
                    done
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every chunk ran")).collect()
}
