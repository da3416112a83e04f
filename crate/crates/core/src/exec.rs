//! Execution strategy for the data-parallel inner loops.
//!
//! Every parallel path splits work into chunks whose boundaries depend only
//! on the input length, never on the thread count, and combines partial
//! results in chunk order. Sequential and parallel execution therefore give
//! bit-identical results.

/// Examples per chunk for batched loss and gradient evaluation.
pub const EXAMPLE_CHUNK: usize = 64;

/// Components per chunk for element-wise parameter loops.
pub const COMPONENT_CHUNK: usize = 4096;

/// How a data-parallel loop is executed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Execution {
    #[cfg_attr(not(feature = "parallel"), default)]
    Sequential,
    #[cfg(feature = "parallel")]
    #[default]
    Parallel,
}

impl Execution {
    /// Maps `f` over fixed-size chunks of `items`, returning results in chunk order.
    pub fn map_chunks<T, R, F>(self, items: &[T], chunk: usize, f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&[T]) -> R + Sync + Send,
    {
        match self {
            Execution::Sequential => items.chunks(chunk).map(f).collect(),
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                items.par_chunks(chunk).map(f).collect()
            }
        }
    }

    /// Calls `f` on fixed-size chunks of `out` together with the chunk's start offset.
    pub fn for_each_chunk_mut<T, F>(self, out: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        match self {
            Execution::Sequential => out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i * chunk, c)),
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i * chunk, c))
            }
        }
    }

    /// Maps `f` over `0..n`, preserving index order in the output.
    pub fn map_indices<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            Execution::Sequential => (0..n).map(f).collect(),
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
        }
    }
}
