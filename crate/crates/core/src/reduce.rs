//! Deterministic parallel reductions.
//!
//! Partial sums are taken over fixed-size chunks and combined in chunk order,
//! so the result does not depend on how many worker threads rayon uses.

use rayon::prelude::*;

/// Chunk length used by every reduction in the crate.
pub const CHUNK: usize = 4096;

/// Sum of `f(i)` for `i in 0..n` with a fixed combination order.
pub fn sum_by<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    if n <= CHUNK {
        return (0..n).map(&f).sum();
    }
    let partials: Vec<f64> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            (lo..hi).map(&f).sum::<f64>()
        })
        .collect();
    partials.iter().sum()
}

pub fn sum(values: &[f64]) -> f64 {
    sum_by(values.len(), |i| values[i])
}

pub fn max(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn min(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::INFINITY, f64::min)
}
