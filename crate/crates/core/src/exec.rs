//! Sequential / parallel execution switch for the data-parallel inner loops.
//!
//! Every parallel routine in this crate produces output in index order, so the
//! choice of [`Execution`] never changes results, only wall-clock time.

/// How a data-parallel loop is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Rayon work-stealing. Without the `parallel` feature this is sequential.
    #[default]
    Parallel,
    /// At most `n` concurrent workers (used for backend calls).
    Bounded(usize),
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && !matches!(self, Execution::Sequential | Execution::Bounded(0 | 1))
    }
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_indexed<T, F>(n: usize, exec: Execution, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_slice(&(0..n).collect::<Vec<_>>(), exec, |&i| f(i))
}

/// Maps `f` over a slice, returning results in slice order.
pub fn map_slice<I, T, F>(items: &[I], exec: Execution, f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    if !exec.is_parallel() {
        return items.iter().map(f).collect();
    }
    parallel::map_slice(items, exec, f)
}

#[cfg(feature = "parallel")]
mod parallel {
    use super::Execution;
    use rayon::prelude::*;

    pub(super) fn map_slice<I, T, F>(items: &[I], exec: Execution, f: F) -> Vec<T>
    where
        I: Sync,
        T: Send,
        F: Fn(&I) -> T + Sync + Send,
    {
        match exec {
            Execution::Bounded(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
                Err(_) => items.iter().map(f).collect(),
            },
            _ => items.par_iter().map(f).collect(),
        }
    }
}

#[cfg(not(feature = "parallel"))]
mod parallel {
    use super::Execution;

    pub(super) fn map_slice<I, T, F>(items: &[I], _exec: Execution, f: F) -> Vec<T>
    where
        F: Fn(&I) -> T,
    {
        items.iter().map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_for_every_mode() {
        let expect: Vec<usize> = (0..257).map(|i| i * i).collect();
        for exec in [Execution::Sequential, Execution::Parallel, Execution::Bounded(3)] {
            assert_eq!(map_indexed(257, exec, |i| i * i), expect);
        }
    }

    #[test]
    fn bounded_pool_caps_concurrency() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let live = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        map_indexed(64, Execution::Bounded(2), |_| {
            let now = live.fetch_add(1, Ordering::SeqCst) + 1;
            peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(std::time::Duration::from_millis(1));
            live.fetch_sub(1, Ordering::SeqCst);
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
