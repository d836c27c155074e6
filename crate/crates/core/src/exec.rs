//! Execution policy for the data-parallel inner loops.
//!
//! Row-wise kernels (matmul, attention, scoring) and per-frame batch work
//! (redundancy sweeps, the fidelity oracle) go through [`Execution`]. With the
//! `parallel` feature the `Parallel` policy dispatches to rayon; without it
//! both policies run the same sequential loop.
//!
//! Every kernel computes each output row independently with a fixed
//! accumulation order, so results are bitwise identical under either policy.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many multiply-adds a kernel stays on the calling thread.
pub const PARALLEL_WORK_THRESHOLD: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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

impl Execution {
    /// True when this policy actually fans out to worker threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    /// Narrows `Parallel` to `Sequential` when the job is too small to split.
    pub fn for_work(self, work: usize) -> Self {
        if work < PARALLEL_WORK_THRESHOLD {
            Execution::Sequential
        } else {
            self
        }
    }

    /// Applies `f(row_index, row)` to each `row_len`-sized chunk of `data`.
    pub fn for_each_row<F>(self, data: &mut [f32], row_len: usize, f: F)
    where
        F: Fn(usize, &mut [f32]) + Sync + Send,
    {
        if row_len == 0 {
            return;
        }
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            data.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
        data.chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }

    /// Order-preserving map over a slice.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// Runs two closures, concurrently under the parallel policy.
    pub fn join<A, B, RA, RB>(self, a: A, b: B) -> (RA, RB)
    where
        A: FnOnce() -> RA + Send,
        B: FnOnce() -> RB + Send,
        RA: Send,
        RB: Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return rayon::join(a, b);
        }
        (a(), b())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_work_stays_sequential() {
        assert_eq!(
            Execution::Parallel.for_work(PARALLEL_WORK_THRESHOLD - 1),
            Execution::Sequential
        );
        assert_eq!(
            Execution::Parallel.for_work(PARALLEL_WORK_THRESHOLD),
            Execution::Parallel
        );
    }

    #[test]
    fn policies_agree() {
        let items: Vec<u64> = (0..1000).collect();
        let seq = Execution::Sequential.map(&items, |x| x * x);
        let par = Execution::Parallel.map(&items, |x| x * x);
        assert_eq!(seq, par);

        let mut a = vec![1.0f32; 40];
        let mut b = a.clone();
        Execution::Sequential
            .for_each_row(&mut a, 4, |i, r| r.iter_mut().for_each(|v| *v += i as f32));
        Execution::Parallel
            .for_each_row(&mut b, 4, |i, r| r.iter_mut().for_each(|v| *v += i as f32));
        assert_eq!(a, b);
        assert_eq!(Execution::Parallel.join(|| 1, || 2), (1, 2));
    }
}
