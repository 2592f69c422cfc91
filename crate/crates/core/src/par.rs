//! Internal data-parallel helpers.
//!
//! Every parallel site in the crate fills disjoint rows of a preallocated
//! buffer; rows are computed independently and reductions happen sequentially
//! afterwards, so results are bit-identical regardless of thread count. With
//! the `parallel` feature disabled this degrades to a plain sequential loop.

/// Total work below this many scalar ops is not worth a rayon dispatch:
/// waking idle workers and the final sync cost hundreds of microseconds on
/// small machines, so a burst has to carry enough flops to amortize them.
#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 4 << 20;

/// Calls `f(row_index, row)` for every `row_len` chunk of `data`.
pub(crate) fn fill_rows<T, F>(data: &mut [T], row_len: usize, work_per_row: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert!(row_len > 0 && data.len().is_multiple_of(row_len));
    #[cfg(feature = "parallel")]
    {
        let rows = data.len() / row_len;
        if rows > 1 && rows.saturating_mul(work_per_row) >= PAR_THRESHOLD {
            use rayon::prelude::*;
            data.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    let _ = work_per_row;
    for (i, row) in data.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}
