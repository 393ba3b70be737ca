//! Block-parallel execution over the time axis.
//!
//! Work is split into fixed-size column blocks. Partial results are always
//! returned in block order so that callers reduce them in the same sequence
//! whether the blocks ran on the rayon pool or on the calling thread.

use std::ops::Range;

use serde::{Deserialize, Serialize};

/// Columns per work block.
pub const BLOCK_COLUMNS: usize = 4096;

/// Selects the execution strategy for the time-axis loops.
///
/// `Parallel` silently degrades to sequential execution when the crate is
/// built without the `parallel` feature.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

/// Splits `0..len` into consecutive ranges of at most `block` elements.
pub fn blocks(len: usize, block: usize) -> Vec<Range<usize>> {
    let block = block.max(1);
    (0..len.div_ceil(block))
        .map(|b| b * block..((b + 1) * block).min(len))
        .collect()
}

/// Applies `f` to every block of `0..len` and returns the results in block order.
pub fn map_blocks<R, F>(len: usize, block: usize, exec: Execution, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(Range<usize>) -> R + Sync + Send,
{
    let ranges = blocks(len, block);
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            ranges.into_par_iter().map(f).collect()
        }
        _ => ranges.into_iter().map(f).collect(),
    }
}

/// Maps `f` over `items`, preserving order.
pub fn map_items<T, R, F>(items: &[T], exec: Execution, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}
