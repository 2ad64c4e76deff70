//! Thin wrappers that run on rayon with the `parallel` feature and fall back
//! to plain iterators without it. Output order always matches input order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..len`, collecting results in index order.
pub fn map_range<R, F>(len: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..len).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..len).map(f).collect()
    }
}

/// Apply `f` to every element of `items` together with its index, returning
/// the per-element results in order.
pub fn map_mut<T, R, F>(items: &mut [T], f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, &mut T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items
            .par_iter_mut()
            .enumerate()
            .map(|(i, x)| f(i, x))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter_mut().enumerate().map(|(i, x)| f(i, x)).collect()
    }
}

/// Map over a slice in order.
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Whether this build runs data-parallel loops.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Run `f(i, a_i, b_i, c_i)` over matching chunks of three buffers, where
/// chunk `i` of each buffer has the given length.
pub fn map_chunks3<A, B, C, R, F>(
    a: &mut [A],
    a_len: usize,
    b: &mut [B],
    b_len: usize,
    c: &mut [C],
    c_len: usize,
    f: F,
) -> Vec<R>
where
    A: Send,
    B: Send,
    C: Send,
    R: Send,
    F: Fn(usize, &mut [A], &mut [B], &mut [C]) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        a.par_chunks_mut(a_len)
            .zip(b.par_chunks_mut(b_len))
            .zip(c.par_chunks_mut(c_len))
            .enumerate()
            .map(|(i, ((x, y), z))| f(i, x, y, z))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        a.chunks_mut(a_len)
            .zip(b.chunks_mut(b_len))
            .zip(c.chunks_mut(c_len))
            .enumerate()
            .map(|(i, ((x, y), z))| f(i, x, y, z))
            .collect()
    }
}
