//! Data-parallel helpers.
//!
//! With the `parallel` feature (on by default) the helpers fan work out over
//! rayon's global pool; without it, or when deterministic mode is requested,
//! every call runs sequentially in input order. Output order always matches
//! input order, so reductions performed by callers over the returned vectors
//! are reproducible either way.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::Result;

static DETERMINISTIC: AtomicBool = AtomicBool::new(false);

/// Forces every helper in this module onto the sequential path.
pub fn set_deterministic(on: bool) {
    DETERMINISTIC.store(on, Ordering::SeqCst);
}

pub fn is_deterministic() -> bool {
    DETERMINISTIC.load(Ordering::SeqCst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Execution {
    /// The mode implied by the build features and the deterministic switch.
    pub fn current() -> Self {
        if cfg!(feature = "parallel") && !is_deterministic() {
            Self::Parallel
        } else {
            Self::Sequential
        }
    }
}

pub fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
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

pub fn try_map<T, R, F>(exec: Execution, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
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

pub fn map_range<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_paths_preserve_order() {
        let items: Vec<u64> = (0..1000).collect();
        let seq = map(Execution::Sequential, &items, |x| x * x);
        let par = map(Execution::Parallel, &items, |x| x * x);
        assert_eq!(seq, par);
        assert_eq!(map_range(Execution::Parallel, 5, |i| i + 1), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn try_map_surfaces_first_error() {
        let items = [1, 2, 3];
        let out = try_map(Execution::Sequential, &items, |&x| {
            if x == 2 {
                Err(crate::Error::validation("two"))
            } else {
                Ok(x)
            }
        });
        assert!(out.is_err());
    }
}
