//! Deterministic data-parallel helpers.
//!
//! With the `parallel` feature (default) the helpers dispatch to rayon;
//! without it they fall back to plain sequential iteration. Reductions are
//! always performed in a fixed order — parallel map into an index-ordered
//! buffer, then a sequential fold — so results are bitwise identical across
//! thread counts and runs.

/// Chunk length used by [`det_sum`]. Fixed so the summation tree does not
/// depend on the number of worker threads.
const SUM_CHUNK: usize = 4096;

#[cfg(feature = "parallel")]
pub fn map_collect<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_collect<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    items.into_iter().map(f).collect()
}

/// Fill `out` by applying `f` to each chunk of `chunk` consecutive elements.
/// `f` receives the chunk index and the chunk slice.
#[cfg(feature = "parallel")]
pub fn fill_chunks<F>(out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    use rayon::prelude::*;
    out.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(idx, slab)| f(idx, slab));
}

#[cfg(not(feature = "parallel"))]
pub fn fill_chunks<F>(out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]),
{
    for (idx, slab) in out.chunks_mut(chunk).enumerate() {
        f(idx, slab);
    }
}

/// Deterministic sum of `f(i)` over `0..n`: chunks of fixed size are summed
/// sequentially (possibly on different threads), then folded in chunk order.
#[cfg(feature = "parallel")]
pub fn det_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    use rayon::prelude::*;
    let chunks = n.div_ceil(SUM_CHUNK);
    let partials: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * SUM_CHUNK;
            let hi = (lo + SUM_CHUNK).min(n);
            let mut acc = 0.0;
            for i in lo..hi {
                acc += f(i);
            }
            acc
        })
        .collect();
    partials.iter().sum()
}

#[cfg(not(feature = "parallel"))]
pub fn det_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64,
{
    let chunks = n.div_ceil(SUM_CHUNK);
    let mut total = 0.0;
    for c in 0..chunks {
        let lo = c * SUM_CHUNK;
        let hi = (lo + SUM_CHUNK).min(n);
        let mut acc = 0.0;
        for i in lo..hi {
            acc += f(i);
        }
        total += acc;
    }
    total
}

/// Deterministic sum over a slice.
pub fn det_sum_slice(values: &[f64]) -> f64 {
    det_sum(values.len(), |i| values[i])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn det_sum_matches_sequential_order() {
        let n = 10_000;
        let data: Vec<f64> = (0..n)
            .map(|i: u64| ((i * 2654435761) % 1000) as f64 * 1e-3)
            .collect();
        let a = det_sum_slice(&data);
        let b = det_sum_slice(&data);
        assert_eq!(a.to_bits(), b.to_bits());
        // chunked order differs from naive order in general, but the value
        // must agree to rounding
        let naive: f64 = data.iter().sum();
        assert!((a - naive).abs() < 1e-9);
    }

    #[test]
    fn fill_chunks_covers_all() {
        let mut out = vec![0.0; 1000];
        fill_chunks(&mut out, 7, |idx, slab| {
            for (k, v) in slab.iter_mut().enumerate() {
                *v = (idx * 7 + k) as f64;
            }
        });
        for (i, v) in out.iter().enumerate() {
            assert_eq!(*v, i as f64);
        }
    }
}
