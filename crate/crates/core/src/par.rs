//! Execution mode for the data-parallel loops. With the `rayon` feature the
//! parallel mode fans out over the global pool; without it every loop runs
//! sequentially. Results are always collected in index order and reduced by
//! the caller left to right, so both modes produce bit-identical output.

use std::cell::Cell;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

thread_local! {
    static MODE: Cell<Exec> = const { Cell::new(Exec::Parallel) };
}

/// Run `f` with the given mode on this thread. Nested parallel loops started from
/// rayon workers inherit the parallel default, which is harmless because all
/// library loops are order-preserving.
pub fn with_exec<T>(mode: Exec, f: impl FnOnce() -> T) -> T {
    let prev = MODE.with(|m| m.replace(mode));
    let out = f();
    MODE.with(|m| m.set(prev));
    out
}

pub fn current() -> Exec {
    MODE.with(Cell::get)
}

pub fn is_parallel_available() -> bool {
    cfg!(feature = "rayon")
}

/// `(0..n).map(f)` collected in order.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match current() {
        #[cfg(feature = "rayon")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// `items.iter().map(f)` collected in order.
pub fn map_slice<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    map_range(items.len(), |i| f(&items[i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let f = |i: usize| (i as f64).sqrt().sin();
        let a = with_exec(Exec::Sequential, || map_range(1000, f));
        let b = with_exec(Exec::Parallel, || map_range(1000, f));
        assert_eq!(a, b);
        assert_eq!(current(), Exec::Parallel);
    }
}
