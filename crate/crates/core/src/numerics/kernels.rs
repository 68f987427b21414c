//! Hot compute kernels with data-parallel and sequential variants.
//!
//! Every parallel variant splits work over independent output rows, so each
//! output element is produced by exactly the same sequence of floating-point
//! operations as the sequential variant. Results are bit-identical regardless
//! of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Rows below this stay sequential; chunking tiny matmuls costs more than it buys.
#[cfg(feature = "parallel")]
const PAR_MIN_ROWS: usize = 16;

/// out[m, n] = a[m, k] @ b[k, n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    #[cfg(feature = "parallel")]
    {
        if m >= PAR_MIN_ROWS && m * k * n >= 1 << 16 {
            out.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, row)| matmul_row(a, b, k, n, i, row));
            return;
        }
    }
    matmul_seq(a, b, m, k, n, out);
}

/// Sequential matmul, always available; the benchmark baseline.
pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (i, row) in out.chunks_mut(n).enumerate() {
        matmul_row(a, b, k, n, i, row);
    }
}

/// Parallel matmul without the size heuristic, for benchmarking.
#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, row)| matmul_row(a, b, k, n, i, row));
}

#[inline]
fn matmul_row(a: &[f64], b: &[f64], k: usize, n: usize, i: usize, row: &mut [f64]) {
    let a_row = &a[i * k..(i + 1) * k];
    row.fill(0.0);
    for (p, &a_ip) in a_row.iter().enumerate() {
        let b_row = &b[p * n..(p + 1) * n];
        for (out_ij, &b_pj) in row.iter_mut().zip(b_row) {
            *out_ij += a_ip * b_pj;
        }
    }
}

/// Valid (no padding) strided 1-D convolution over time-major input.
///
/// x: [t_in, c_in], w: [c_out, c_in, kernel], bias: [c_out], out: [t_out, c_out]
/// with t_out = (t_in - kernel) / stride + 1.
#[allow(clippy::too_many_arguments)]
pub fn conv1d(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    t_in: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    out: &mut [f64],
) {
    let t_out = (t_in - kernel) / stride + 1;
    debug_assert_eq!(out.len(), t_out * c_out);
    let frame = |t: usize, row: &mut [f64]| {
        let start = t * stride;
        for (o, out_to) in row.iter_mut().enumerate() {
            let mut acc = bias[o];
            let w_o = &w[o * c_in * kernel..(o + 1) * c_in * kernel];
            for c in 0..c_in {
                for kk in 0..kernel {
                    acc += x[(start + kk) * c_in + c] * w_o[c * kernel + kk];
                }
            }
            *out_to = acc;
        }
    };
    #[cfg(feature = "parallel")]
    {
        if t_out >= PAR_MIN_ROWS && t_out * c_out * c_in * kernel >= 1 << 16 {
            out.par_chunks_mut(c_out)
                .enumerate()
                .for_each(|(t, row)| frame(t, row));
            return;
        }
    }
    for (t, row) in out.chunks_mut(c_out).enumerate() {
        frame(t, row);
    }
}

/// Depthwise 1-D convolution, stride 1, valid. x: [t_in, c], w: [c, kernel].
pub fn depthwise_conv1d(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    t_in: usize,
    c: usize,
    kernel: usize,
    out: &mut [f64],
) {
    let t_out = t_in - kernel + 1;
    debug_assert_eq!(out.len(), t_out * c);
    for (t, row) in out.chunks_mut(c).enumerate() {
        for (ch, out_tc) in row.iter_mut().enumerate() {
            let mut acc = bias[ch];
            for kk in 0..kernel {
                acc += x[(t + kk) * c + ch] * w[ch * kernel + kk];
            }
            *out_tc = acc;
        }
    }
}

/// log(sum(exp(xs))) with the shift-by-max trick.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Cap the data-parallel worker count for this process. Call before any
/// parallel work; later calls fail once the pool exists. A no-op without the
/// `parallel` feature. Results never depend on the worker count.
pub fn set_parallelism(threads: usize) -> crate::Result<()> {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| crate::Error::State(format!("thread pool already initialized: {e}")))
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        Ok(())
    }
}

/// Map each index to a value, preserving index order in the output.
///
/// `f` must depend only on its index; used for batch members and grid cells.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
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
