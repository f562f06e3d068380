//! Execution policy for the data-parallel kernels.
//!
//! With the `parallel` feature the [`Execution::Parallel`] policy dispatches to
//! rayon; without it every policy runs sequentially. Both paths visit work in
//! the same fixed chunks and combine partial results in index order, so the
//! output is bit-identical whichever policy or thread count is used.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// Rows per chunk in the reduction kernels. Fixed so results do not depend on
/// the thread count.
pub const CHUNK: usize = 128;

impl Execution {
    /// Maps `f` over `0..len`, collecting results in index order.
    pub fn map<T, F>(self, len: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                (0..len).into_par_iter().map(f).collect()
            }
            _ => (0..len).map(f).collect(),
        }
    }

    /// Fills `out` in place, chunk by chunk. `f` receives the start offset of
    /// its chunk and the mutable chunk slice.
    pub fn fill_chunks<T, F>(self, out: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                out.par_chunks_mut(chunk)
                    .enumerate()
                    .for_each(|(c, s)| f(c * chunk, s));
            }
            _ => out
                .chunks_mut(chunk)
                .enumerate()
                .for_each(|(c, s)| f(c * chunk, s)),
        }
    }
}
