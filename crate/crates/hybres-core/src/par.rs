//! Order-preserving sweep execution. With the `parallel` feature (default)
//! cells are mapped on the rayon global pool; without it the same API runs
//! sequentially. Results are index-ordered either way, so callers observe
//! identical output regardless of the execution mode.

/// Map `f` over `0..len`, preserving index order in the result.
#[cfg(feature = "parallel")]
pub fn map_cells<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..len).into_par_iter().map(f).collect()
}

/// Map `f` over `0..len`, preserving index order in the result.
#[cfg(not(feature = "parallel"))]
pub fn map_cells<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_cells_seq(len, f)
}

/// Sequential reference implementation, always available so the two
/// execution modes can be compared directly.
pub fn map_cells_seq<T, F>(len: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..len).map(f).collect()
}
