use rayon::prelude::*;

use quantfl_core::federation::Executor;

/// Runs a round's clients on the rayon thread pool. Results come back in
/// client order, so the aggregate is identical to a sequential run.
#[derive(Debug, Clone, Copy, Default)]
pub struct Parallel;

impl Executor for Parallel {
    fn map<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync,
    {
        let f = &f;
        (0..n).into_par_iter().map(f).collect()
    }
}
