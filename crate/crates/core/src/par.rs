//! Data-parallel helpers.
//!
//! With the `parallel` feature the helpers dispatch to rayon; without it, or
//! after [`set_mode`] selects [`Mode::Sequential`], they run as plain
//! iterators. Results always come back in input order, so every reduction
//! performed on them by callers is order-deterministic and the two modes are
//! bit-identical.

use std::sync::atomic::{AtomicU8, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Parallel,
    Sequential,
}

static MODE: AtomicU8 = AtomicU8::new(0);

/// Selects the execution mode for subsequent calls. `Parallel` is a no-op
/// request when the crate is built without the `parallel` feature.
pub fn set_mode(mode: Mode) {
    MODE.store(
        match mode {
            Mode::Parallel => 0,
            Mode::Sequential => 1,
        },
        Ordering::SeqCst,
    );
}

pub fn mode() -> Mode {
    if cfg!(feature = "parallel") && MODE.load(Ordering::SeqCst) == 0 {
        Mode::Parallel
    } else {
        Mode::Sequential
    }
}

/// Maps `f` over `items`, preserving order.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode() == Mode::Parallel {
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode() == Mode::Parallel {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Maps `f` over fixed-size chunks of `items`, preserving chunk order. The
/// chunking does not depend on the thread count.
pub fn map_chunks<T, R, F>(items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if mode() == Mode::Parallel {
        return items.par_chunks(chunk).map(f).collect();
    }
    items.chunks(chunk).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let xs: Vec<u32> = (0..1000).collect();
        let ys = map(&xs, |x| x * 2);
        assert_eq!(ys, xs.iter().map(|x| x * 2).collect::<Vec<_>>());
        let sums = map_chunks(&xs, 7, |c| c.iter().sum::<u32>());
        assert_eq!(sums.len(), 143);
        assert_eq!(sums.iter().sum::<u32>(), xs.iter().sum::<u32>());
        assert_eq!(map_range(5, |i| i), vec![0, 1, 2, 3, 4]);
    }
}
