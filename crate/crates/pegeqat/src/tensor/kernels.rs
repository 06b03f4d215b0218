//! Dense CPU kernels. Heavy kernels split work over disjoint output rows;
//! each output element is always reduced in the same sequential order, so
//! results are bitwise identical for any thread count.

use crate::scalar::Scalar;
use rayon::prelude::*;
use std::sync::OnceLock;

/// Kernel thread cap: PEGE_THREADS if set, else available parallelism.
pub fn kernel_threads() -> usize {
    match std::env::var("PEGE_THREADS") {
        Ok(v) => v.trim().parse::<usize>().unwrap_or(1).max(1),
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    }
}

// Below this many scalar ops a kernel runs serially; pool dispatch is not free.
const PAR_MIN_WORK: usize = 1_000_000;

fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(std::thread::available_parallelism().map_or(1, |n| n.get()))
            .build()
            .expect("kernel thread pool")
    })
}

/// Run `f(first_row, chunk)` over row-aligned chunks of `out`. Splits into
/// at most `kernel_threads()` chunks when `work` (estimated scalar ops) is
/// large enough to amortize dispatch. Each row is produced by exactly one
/// invocation, so results never depend on the split.
pub fn par_row_chunks<T: Send, F>(out: &mut [T], row_len: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(row_len > 0 && out.len().is_multiple_of(row_len));
    let rows = out.len() / row_len;
    let threads = kernel_threads().min(rows.max(1));
    if threads <= 1 || work < PAR_MIN_WORK {
        f(0, out);
        return;
    }
    let rows_per = rows.div_ceil(threads);
    let chunk_len = rows_per * row_len;
    pool().install(|| {
        out.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(ci, chunk)| f(ci * rows_per, chunk));
    });
}

/// c[M,N] = a[M,K] * b[K,N]
pub fn gemm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![T::zero(); m * n];
    par_row_chunks(&mut c, n, 2 * m * k * n, |row0, chunk| {
        for (di, crow) in chunk.chunks_mut(n).enumerate() {
            let i = row0 + di;
            gemm_nn_row(&a[i * k..(i + 1) * k], b, n, crow);
        }
    });
    c
}

#[inline]
fn gemm_nn_row<T: Scalar>(arow: &[T], b: &[T], n: usize, crow: &mut [T]) {
    for (kk, &aik) in arow.iter().enumerate() {
        let brow = &b[kk * n..kk * n + n];
        for j in 0..n {
            crow[j] = crow[j] + aik * brow[j];
        }
    }
}

/// c[M,N] = a[M,K] * b[N,K]^T  (dot-product form)
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![T::zero(); m * n];
    par_row_chunks(&mut c, n, 2 * m * k * n, |row0, chunk| {
        for (di, crow) in chunk.chunks_mut(n).enumerate() {
            let i = row0 + di;
            let arow = &a[i * k..(i + 1) * k];
            for (j, cj) in crow.iter_mut().enumerate() {
                *cj = dot(arow, &b[j * k..(j + 1) * k]);
            }
        }
    });
    c
}

/// c[K,N] = a[M,K]^T * b[M,N]
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut c = vec![T::zero(); k * n];
    par_row_chunks(&mut c, n, 2 * m * k * n, |row0, chunk| {
        for (di, crow) in chunk.chunks_mut(n).enumerate() {
            let kk = row0 + di;
            for i in 0..m {
                let aik = a[i * k + kk];
                let brow = &b[i * n..i * n + n];
                for j in 0..n {
                    crow[j] = crow[j] + aik * brow[j];
                }
            }
        }
    });
    c
}

/// Dot product with a fixed 16-lane accumulator layout (vectorizes well and
/// keeps the reduction order independent of everything but the length).
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    const LANES: usize = 16;
    let mut acc = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let i = c * LANES;
        for l in 0..LANES {
            acc[l] = acc[l] + a[i + l] * b[i + l];
        }
    }
    let mut s = T::zero();
    for &lane in acc.iter() {
        s = s + lane;
    }
    for i in chunks * LANES..a.len() {
        s = s + a[i] * b[i];
    }
    s
}

/// Shape bookkeeping for a conv2d call.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn ckk(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    pub fn out_hw(&self) -> usize {
        self.oh * self.ow
    }
}

/// Lower one sample into column form: cols[(c,ki,kj), (oh,ow)].
fn im2col_sample<T: Scalar>(x: &[T], d: &ConvDims, cols: &mut [T]) {
    let (h, w) = (d.h, d.w);
    let hw_out = d.out_hw();
    let mut r = 0usize;
    for c in 0..d.c_in {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let dst = &mut cols[r * hw_out..(r + 1) * hw_out];
                let mut o = 0usize;
                for oi in 0..d.oh {
                    let yi = (oi * d.stride + ki) as isize - d.pad as isize;
                    for oj in 0..d.ow {
                        let xj = (oj * d.stride + kj) as isize - d.pad as isize;
                        dst[o] = if yi >= 0 && yi < h as isize && xj >= 0 && xj < w as isize {
                            plane[yi as usize * w + xj as usize]
                        } else {
                            T::zero()
                        };
                        o += 1;
                    }
                }
                r += 1;
            }
        }
    }
}

/// Scatter column-form gradients back onto an input sample (accumulating).
fn col2im_sample<T: Scalar>(dcols: &[T], d: &ConvDims, dx: &mut [T]) {
    let (h, w) = (d.h, d.w);
    let hw_out = d.out_hw();
    let mut r = 0usize;
    for c in 0..d.c_in {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let src = &dcols[r * hw_out..(r + 1) * hw_out];
                let mut o = 0usize;
                for oi in 0..d.oh {
                    let yi = (oi * d.stride + ki) as isize - d.pad as isize;
                    for oj in 0..d.ow {
                        let xj = (oj * d.stride + kj) as isize - d.pad as isize;
                        if yi >= 0 && yi < h as isize && xj >= 0 && xj < w as isize {
                            let p = yi as usize * w + xj as usize;
                            plane[p] = plane[p] + src[o];
                        }
                        o += 1;
                    }
                }
                r += 1;
            }
        }
    }
}

/// Forward conv. Returns (output[N,F,OH,OW], cols[N][CKK*OHW]) — the column
/// buffer is reused by the backward pass.
pub fn conv2d_forward<T: Scalar>(x: &[T], wmat: &[T], d: &ConvDims) -> (Vec<T>, Vec<T>) {
    let ckk = d.ckk();
    let hw_out = d.out_hw();
    let mut cols = vec![T::zero(); d.batch * ckk * hw_out];
    let mut out = vec![T::zero(); d.batch * d.c_out * hw_out];
    let in_sz = d.c_in * d.h * d.w;
    let out_sz = d.c_out * hw_out;

    // im2col, parallel over samples
    par_row_chunks(&mut cols, ckk * hw_out, 2 * d.batch * ckk * hw_out, |n0, chunk| {
        for (dn, ccols) in chunk.chunks_mut(ckk * hw_out).enumerate() {
            let n = n0 + dn;
            im2col_sample(&x[n * in_sz..(n + 1) * in_sz], d, ccols);
        }
    });
    // per-sample GEMM, parallel over samples
    par_row_chunks(&mut out, out_sz, 2 * d.batch * d.c_out * ckk * hw_out, |n0, chunk| {
        for (dn, osamp) in chunk.chunks_mut(out_sz).enumerate() {
            let n = n0 + dn;
            let ccols = &cols[n * ckk * hw_out..(n + 1) * ckk * hw_out];
            for f in 0..d.c_out {
                gemm_nn_row(
                    &wmat[f * ckk..(f + 1) * ckk],
                    ccols,
                    hw_out,
                    &mut osamp[f * hw_out..(f + 1) * hw_out],
                );
            }
        }
    });
    (out, cols)
}

/// dW[F,CKK]: summed over samples in fixed order; parallel over filter rows.
pub fn conv2d_backward_w<T: Scalar>(g: &[T], cols: &[T], d: &ConvDims) -> Vec<T> {
    let ckk = d.ckk();
    let hw_out = d.out_hw();
    let mut dw = vec![T::zero(); d.c_out * ckk];
    par_row_chunks(&mut dw, ckk, 2 * d.batch * d.c_out * ckk * hw_out, |f0, chunk| {
        for (df, dwrow) in chunk.chunks_mut(ckk).enumerate() {
            let f = f0 + df;
            for n in 0..d.batch {
                let grow = &g[(n * d.c_out + f) * hw_out..(n * d.c_out + f + 1) * hw_out];
                let ccols = &cols[n * ckk * hw_out..(n + 1) * ckk * hw_out];
                for r in 0..ckk {
                    dwrow[r] = dwrow[r] + dot(grow, &ccols[r * hw_out..(r + 1) * hw_out]);
                }
            }
        }
    });
    dw
}

/// dX[N,C,H,W]; parallel over samples.
pub fn conv2d_backward_x<T: Scalar>(g: &[T], wmat: &[T], d: &ConvDims) -> Vec<T> {
    let ckk = d.ckk();
    let hw_out = d.out_hw();
    let in_sz = d.c_in * d.h * d.w;
    let mut dx = vec![T::zero(); d.batch * in_sz];
    par_row_chunks(&mut dx, in_sz, 2 * d.batch * d.c_out * ckk * hw_out, |n0, chunk| {
        let mut dcols = vec![T::zero(); ckk * hw_out];
        for (dn, dxs) in chunk.chunks_mut(in_sz).enumerate() {
            let n = n0 + dn;
            let gs = &g[n * d.c_out * hw_out..(n + 1) * d.c_out * hw_out];
            // dcols = wmat^T [CKK,F] * g_n [F,HW]
            for v in dcols.iter_mut() {
                *v = T::zero();
            }
            for f in 0..d.c_out {
                let grow = &gs[f * hw_out..(f + 1) * hw_out];
                for r in 0..ckk {
                    let wfr = wmat[f * ckk + r];
                    let drow = &mut dcols[r * hw_out..(r + 1) * hw_out];
                    for j in 0..hw_out {
                        drow[j] = drow[j] + wfr * grow[j];
                    }
                }
            }
            col2im_sample(&dcols, d, dxs);
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_nn_small() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let c = gemm_nn::<f64>(&[1., 2., 3., 4.], &[5., 6., 7., 8.], 2, 2, 2);
        assert_eq!(c, vec![19., 22., 43., 50.]);
    }

    #[test]
    fn gemm_variants_agree() {
        let m = 7;
        let k = 5;
        let n = 9;
        let a: Vec<f64> = (0..m * k).map(|i| crate::rng::normal(1, &[i as u64])).collect();
        let b: Vec<f64> = (0..k * n).map(|i| crate::rng::normal(2, &[i as u64])).collect();
        let c = gemm_nn(&a, &b, m, k, n);
        // b transposed -> gemm_nt
        let mut bt = vec![0.0; n * k];
        for i in 0..k {
            for j in 0..n {
                bt[j * k + i] = b[i * n + j];
            }
        }
        let c2 = gemm_nt(&a, &bt, m, k, n);
        // a transposed -> gemm_tn
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a[i * k + j];
            }
        }
        let c3 = gemm_tn(&at, &b, k, m, n);
        for i in 0..m * n {
            assert!((c[i] - c2[i]).abs() < 1e-12);
            assert!((c[i] - c3[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let m = 33;
        let k = 17;
        let n = 29;
        let a: Vec<f32> = (0..m * k)
            .map(|i| crate::rng::normal(3, &[i as u64]) as f32)
            .collect();
        let b: Vec<f32> = (0..k * n)
            .map(|i| crate::rng::normal(4, &[i as u64]) as f32)
            .collect();
        std::env::set_var("PEGE_THREADS", "1");
        let c1 = gemm_nn(&a, &b, m, k, n);
        std::env::set_var("PEGE_THREADS", "4");
        let c4 = gemm_nn(&a, &b, m, k, n);
        std::env::remove_var("PEGE_THREADS");
        assert_eq!(c1, c4);
    }
}
