//! Data-parallel helpers.
//!
//! With the `parallel` feature these fan out over rayon's pool; without it
//! they run on the calling thread. Results always come back in input order,
//! so any reduction done over them afterwards is deterministic.

#[cfg(feature = "parallel")]
mod actual {
    use rayon::prelude::*;

    pub fn map_collect<T, F, R>(items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        F: Fn(&T) -> R + Sync + Send,
        R: Send,
    {
        items.par_iter().map(f).collect()
    }

    pub fn map_range<F, R>(n: usize, f: F) -> Vec<R>
    where
        F: Fn(usize) -> R + Sync + Send,
        R: Send,
    {
        (0..n).into_par_iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
mod actual {
    pub fn map_collect<T, F, R>(items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        F: Fn(&T) -> R + Sync + Send,
        R: Send,
    {
        items.iter().map(f).collect()
    }

    pub fn map_range<F, R>(n: usize, f: F) -> Vec<R>
    where
        F: Fn(usize) -> R + Sync + Send,
        R: Send,
    {
        (0..n).map(f).collect()
    }
}

pub use actual::{map_collect, map_range};

/// Whether this build fans work out over a thread pool.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order() {
        let v: Vec<usize> = (0..1000).collect();
        let out = map_collect(&v, |x| x * 2);
        assert!(out.iter().enumerate().all(|(i, &x)| x == 2 * i));
        assert_eq!(map_range(5, |i| i), vec![0, 1, 2, 3, 4]);
    }
}
