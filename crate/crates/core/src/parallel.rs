//! Data-parallel execution helpers.
//!
//! With the `parallel` feature (default) the helpers fan work out over the
//! rayon thread pool; without it they run sequentially. Both paths produce
//! bit-identical results: every task owns its PRNG substream, outputs are
//! collected in index order, and no floating-point reduction depends on
//! scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, collecting results in index order.
pub fn par_map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Map `f` over a slice, collecting results in input order.
pub fn par_map_slice<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
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

/// Run `fill` over row-chunks of `out` (each chunk `row_len` long), passing
/// the row index. Used by the matrix kernels: each output row is written by
/// exactly one task, so the result is independent of scheduling.
pub fn par_rows<F>(out: &mut [f64], row_len: usize, fill: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(row_len > 0 && out.len() % row_len == 0);
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| fill(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| fill(i, row));
    }
}

/// Whether this build executes the helpers on a thread pool.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Configure the global thread pool size (no-op without `parallel`).
/// Returns an error only if a pool was already initialised with a
/// different size.
pub fn configure_threads(n: usize) -> crate::Result<()> {
    #[cfg(feature = "parallel")]
    {
        if n > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| crate::Error::Config(format!("thread pool: {e}")))?;
        }
        Ok(())
    }
    #[cfg(not(feature = "parallel"))]
    {
        if n > 1 {
            log::warn!("built without the `parallel` feature; --jobs {n} ignored");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_indexed_preserves_order() {
        let v = par_map_indexed(1000, |i| i * i);
        for (i, x) in v.iter().enumerate() {
            assert_eq!(*x, i * i);
        }
    }

    #[test]
    fn map_slice_preserves_order() {
        let xs: Vec<f64> = (0..257).map(|i| i as f64).collect();
        let ys = par_map_slice(&xs, |x| x * 2.0);
        assert_eq!(ys.len(), xs.len());
        for (x, y) in xs.iter().zip(&ys) {
            assert_eq!(*y, x * 2.0);
        }
    }

    #[test]
    fn rows_fill_every_chunk_once() {
        let mut out = vec![0.0; 12 * 5];
        par_rows(&mut out, 5, |i, row| {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (i * 10 + j) as f64;
            }
        });
        assert_eq!(out[0], 0.0);
        assert_eq!(out[5], 10.0);
        assert_eq!(out[59], 114.0);
    }
}
