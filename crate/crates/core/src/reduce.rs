//! Deterministic parallel folds.
//!
//! Work is cut into fixed-size chunks that do not depend on the thread
//! count, each chunk is folded sequentially, and the partial results are
//! merged by a fixed pairwise tree. The outcome is bit-identical for any
//! number of worker threads.

use rayon::prelude::*;

use crate::error::Result;

/// Number of items folded sequentially per task.
pub const CHUNK: usize = 256;

/// Merges `parts` pairwise, left to right within each level.
pub fn tree_reduce<A>(mut parts: Vec<A>, merge: impl Fn(A, A) -> A) -> Option<A> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(merge(a, b)),
                None => next.push(a),
            }
        }
        parts = next;
    }
    parts.pop()
}

/// Folds `items` chunk by chunk in parallel and tree-merges the chunk results.
pub fn chunked_fold<T, A>(
    items: &[T],
    init: impl Fn() -> A + Sync,
    fold: impl Fn(&mut A, &T) -> Result<()> + Sync,
    merge: impl Fn(A, A) -> A,
) -> Result<A>
where
    T: Sync,
    A: Send,
{
    let parts = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = init();
            for item in chunk {
                fold(&mut acc, item)?;
            }
            Ok(acc)
        })
        .collect::<Result<Vec<A>>>()?;
    Ok(tree_reduce(parts, merge).unwrap_or_else(init))
}

/// Deterministic parallel sum of `f` over `items`.
pub fn chunked_sum<T: Sync>(items: &[T], f: impl Fn(&T) -> Result<f64> + Sync) -> Result<f64> {
    chunked_fold(
        items,
        || 0.0,
        |acc, t| {
            *acc += f(t)?;
            Ok(())
        },
        |a, b| a + b,
    )
}
