//! Row-parallel helpers.
//!
//! With the `parallel` feature these dispatch to rayon; without it they are
//! ordinary sequential loops. Every helper preserves output order and never
//! reorders floating-point reductions, so both builds produce identical bits.

/// Name of the active execution mode, used to label benchmarks.
#[cfg(feature = "parallel")]
pub const MODE: &str = "parallel";
#[cfg(not(feature = "parallel"))]
pub const MODE: &str = "sequential";

/// Number of worker threads the helpers will use.
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Sizes the global worker pool. Must run before any parallel work; a no-op
/// in sequential builds.
pub fn set_threads(n: usize) -> std::result::Result<(), String> {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        Ok(())
    }
}

/// Collects `f(i)` for `i in 0..n`, in order.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Splits `data` into consecutive rows of `width` elements and calls
/// `f(row_index, row)` on each.
pub fn for_each_row_mut<T, F>(data: &mut [T], width: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        // Batch rows so each task carries a meaningful amount of work.
        let rows = data.len() / width;
        let rows_per_task = (rows / (8 * threads()).max(1)).max(1);
        data.par_chunks_mut(width * rows_per_task)
            .enumerate()
            .for_each(|(chunk, block)| {
                for (k, row) in block.chunks_mut(width).enumerate() {
                    f(chunk * rows_per_task + k, row);
                }
            });
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, row) in data.chunks_mut(width).enumerate() {
            f(i, row);
        }
    }
}
