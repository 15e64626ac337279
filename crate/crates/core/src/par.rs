//! Subject- and replicate-level data parallelism.
//!
//! Every fit routine fans its per-subject work out through [`map`] or
//! [`try_map`]. Results always come back in input order and all reductions
//! happen sequentially afterwards, so outputs are bitwise identical whether
//! the work ran on one thread or many.
//!
//! With the `parallel` feature disabled, [`Parallelism::Rayon`] silently
//! degrades to the sequential path.

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parallelism {
    Sequential,
    #[default]
    Rayon,
}

impl Parallelism {
    /// True when work will actually be spread over a thread pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Rayon
    }
}

pub fn map<T, R, F>(par: Parallelism, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if par == Parallelism::Rayon {
        use rayon::prelude::*;
        return items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let _ = par;
    items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

/// Like [`map`], stopping at the first error (lowest index wins).
pub fn try_map<T, R, F>(par: Parallelism, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R> + Sync + Send,
{
    map(par, items, f).into_iter().collect()
}

/// Parallel map over `0..n`.
pub fn map_range<R, F>(par: Parallelism, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if par == Parallelism::Rayon {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = par;
    (0..n).map(f).collect()
}

/// Runs `f` inside a dedicated pool of `threads` workers (0 = rayon default).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        if threads == 0 {
            return f();
        }
        match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order_in_both_modes() {
        let xs: Vec<u64> = (0..1000).collect();
        let a = map(Parallelism::Sequential, &xs, |i, x| x * 2 + i as u64);
        let b = map(Parallelism::Rayon, &xs, |i, x| x * 2 + i as u64);
        assert_eq!(a, b);
    }

    #[test]
    fn try_map_reports_first_error() {
        let xs: Vec<usize> = (0..50).collect();
        let r = try_map(Parallelism::Rayon, &xs, |_, &x| {
            if x >= 10 {
                Err(crate::AvemError::InvalidParameter(format!("{x}")))
            } else {
                Ok(x)
            }
        });
        assert_eq!(r, Err(crate::AvemError::InvalidParameter("10".into())));
    }
}
