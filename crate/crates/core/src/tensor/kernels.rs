//! Raw compute kernels. Everything here is deterministic for a fixed input:
//! parallel paths split disjoint output row ranges and each element is
//! produced by the same serial summation order regardless of thread count.

use super::Scalar;
use std::sync::OnceLock;

/// Kernel parallelism bound: `UDI_THREADS` env var, else available cores
/// capped at 8. A single training step stays deterministic for any value.
pub fn kernel_threads() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        std::env::var("UDI_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or_else(|| {
                std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(8)
            })
    })
}

/// Run `work` over row chunks `[start, end)` of `rows`, possibly on multiple
/// threads. `flops` gates spawning so small kernels stay serial.
fn par_rows<F: Fn(usize, usize) + Sync>(rows: usize, flops: usize, work: F) {
    let threads = kernel_threads().min(rows.max(1));
    if threads <= 1 || flops < 4_000_000 {
        work(0, rows);
        return;
    }
    let chunk = rows.div_ceil(threads);
    std::thread::scope(|s| {
        let work = &work;
        for t in 0..threads {
            let lo = t * chunk;
            let hi = ((t + 1) * chunk).min(rows);
            if lo >= hi {
                break;
            }
            s.spawn(move || work(lo, hi));
        }
    });
}

// ── matmul family ────────────────────────────────────────────────────

/// C[m,n] += A[m,k] · B[k,n]. i-k-j order with the k loop unrolled by four:
/// the inner j loop runs contiguous fused multiply-adds over B rows and the
/// output row is loaded/stored once per four k steps.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let out_ptr = SendPtr(out.as_mut_ptr());
    par_rows(m, m * k * n, |lo, hi| {
        let out = unsafe { std::slice::from_raw_parts_mut(out_ptr.get().add(lo * n), (hi - lo) * n) };
        let mut i = lo;
        while i + 2 <= hi {
            let (arow0, arow1) = (&a[i * k..(i + 1) * k], &a[(i + 1) * k..(i + 2) * k]);
            let (c0, c1) = out[(i - lo) * n..(i - lo + 2) * n].split_at_mut(n);
            let mut p = 0;
            while p + 4 <= k {
                let (x0, x1, x2, x3) = (arow0[p], arow0[p + 1], arow0[p + 2], arow0[p + 3]);
                let (y0, y1, y2, y3) = (arow1[p], arow1[p + 1], arow1[p + 2], arow1[p + 3]);
                let b0 = &b[p * n..(p + 1) * n];
                let b1 = &b[(p + 1) * n..(p + 2) * n];
                let b2 = &b[(p + 2) * n..(p + 3) * n];
                let b3 = &b[(p + 3) * n..(p + 4) * n];
                for j in 0..n {
                    let (v0, v1, v2, v3) = (b0[j], b1[j], b2[j], b3[j]);
                    let acc = x0.mul_add_v(v0, c0[j]);
                    let acc = x1.mul_add_v(v1, acc);
                    let acc = x2.mul_add_v(v2, acc);
                    c0[j] = x3.mul_add_v(v3, acc);
                    let acc = y0.mul_add_v(v0, c1[j]);
                    let acc = y1.mul_add_v(v1, acc);
                    let acc = y2.mul_add_v(v2, acc);
                    c1[j] = y3.mul_add_v(v3, acc);
                }
                p += 4;
            }
            while p < k {
                let (x, y) = (arow0[p], arow1[p]);
                let brow = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    c0[j] = x.mul_add_v(brow[j], c0[j]);
                    c1[j] = y.mul_add_v(brow[j], c1[j]);
                }
                p += 1;
            }
            i += 2;
        }
        while i < hi {
            let arow = &a[i * k..(i + 1) * k];
            let crow = &mut out[(i - lo) * n..(i - lo + 1) * n];
            let mut p = 0;
            while p + 4 <= k {
                let (a0, a1, a2, a3) = (arow[p], arow[p + 1], arow[p + 2], arow[p + 3]);
                let b0 = &b[p * n..(p + 1) * n];
                let b1 = &b[(p + 1) * n..(p + 2) * n];
                let b2 = &b[(p + 2) * n..(p + 3) * n];
                let b3 = &b[(p + 3) * n..(p + 4) * n];
                for j in 0..n {
                    let acc = a0.mul_add_v(b0[j], crow[j]);
                    let acc = a1.mul_add_v(b1[j], acc);
                    let acc = a2.mul_add_v(b2[j], acc);
                    crow[j] = a3.mul_add_v(b3[j], acc);
                }
                p += 4;
            }
            while p < k {
                let apk = arow[p];
                let brow = &b[p * n..(p + 1) * n];
                for (c, &bv) in crow.iter_mut().zip(brow) {
                    *c = apk.mul_add_v(bv, *c);
                }
                p += 1;
            }
            i += 1;
        }
    });
}

pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    matmul_acc(a, b, m, k, n, &mut out);
    out
}

/// C[k,n] += Aᵀ[k,m] · B[m,n] computed without materializing Aᵀ. The m loop
/// is unrolled by four so each output row is touched once per four samples.
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let out_ptr = SendPtr(out.as_mut_ptr());
    // parallel over output rows (the k axis); every thread scans all of a/b
    par_rows(k, m * k * n, |lo, hi| {
        let out =
            unsafe { std::slice::from_raw_parts_mut(out_ptr.get().add(lo * n), (hi - lo) * n) };
        let mut i = 0;
        while i + 4 <= m {
            let b0 = &b[i * n..(i + 1) * n];
            let b1 = &b[(i + 1) * n..(i + 2) * n];
            let b2 = &b[(i + 2) * n..(i + 3) * n];
            let b3 = &b[(i + 3) * n..(i + 4) * n];
            for p in lo..hi {
                let a0 = a[i * k + p];
                let a1 = a[(i + 1) * k + p];
                let a2 = a[(i + 2) * k + p];
                let a3 = a[(i + 3) * k + p];
                let crow = &mut out[(p - lo) * n..(p - lo + 1) * n];
                for j in 0..n {
                    let acc = a0.mul_add_v(b0[j], crow[j]);
                    let acc = a1.mul_add_v(b1[j], acc);
                    let acc = a2.mul_add_v(b2[j], acc);
                    crow[j] = a3.mul_add_v(b3[j], acc);
                }
            }
            i += 4;
        }
        while i < m {
            let brow = &b[i * n..(i + 1) * n];
            for p in lo..hi {
                let apk = a[i * k + p];
                let crow = &mut out[(p - lo) * n..(p - lo + 1) * n];
                for (c, &bv) in crow.iter_mut().zip(brow) {
                    *c = apk.mul_add_v(bv, *c);
                }
            }
            i += 1;
        }
    });
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ via an explicit transpose of B; B is typically a
/// small weight matrix so the copy is cheap and the hot loop stays i-k-j.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let bt = transpose(b, n, k);
    matmul(a, &bt, m, k, n)
}

pub fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// Batched C[p] = A[p] · B[p]ᵀ with A:[P,m,k], B:[P,n,k] → C:[P,m,n].
pub fn bmm_nt<T: Scalar>(a: &[T], b: &[T], p: usize, m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; p * m * n];
    for s in 0..p {
        let asl = &a[s * m * k..(s + 1) * m * k];
        let bsl = &b[s * n * k..(s + 1) * n * k];
        let osl = &mut out[s * m * n..(s + 1) * m * n];
        // row-dot form: out[i,j] = a[i,:]·b[j,:]
        for i in 0..m {
            let ar = &asl[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &bsl[j * k..(j + 1) * k];
                let mut acc = T::ZERO;
                for (&x, &y) in ar.iter().zip(br) {
                    acc = x.mul_add_v(y, acc);
                }
                osl[i * n + j] = acc;
            }
        }
    }
    out
}

/// Batched C[p] = A[p] · B[p] with A:[P,m,k], B:[P,k,n] → C:[P,m,n].
pub fn bmm_nn<T: Scalar>(a: &[T], b: &[T], p: usize, m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; p * m * n];
    for s in 0..p {
        matmul_acc(
            &a[s * m * k..(s + 1) * m * k],
            &b[s * k * n..(s + 1) * k * n],
            m,
            k,
            n,
            &mut out[s * m * n..(s + 1) * m * n],
        );
    }
    out
}

/// Batched C[p] += A[p]ᵀ · B[p] with A:[P,m,k], B:[P,m,n] → C:[P,k,n].
pub fn bmm_tn_acc<T: Scalar>(
    a: &[T],
    b: &[T],
    p: usize,
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
) {
    for s in 0..p {
        matmul_tn_acc(
            &a[s * m * k..(s + 1) * m * k],
            &b[s * m * n..(s + 1) * m * n],
            m,
            k,
            n,
            &mut out[s * k * n..(s + 1) * k * n],
        );
    }
}

struct SendPtr<T>(*mut T);
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}
impl<T> SendPtr<T> {
    fn get(&self) -> *mut T {
        self.0
    }
}

// ── elementwise helpers ──────────────────────────────────────────────

#[inline]
pub fn add_into<T: Scalar>(acc: &mut [T], x: &[T]) {
    debug_assert_eq!(acc.len(), x.len());
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

#[inline]
pub fn axpy<T: Scalar>(acc: &mut [T], scale: T, x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a = scale.mul_add_v(b, *a);
    }
}

/// Σ x·y in f64 regardless of T, for stable reductions.
#[inline]
pub fn dot_f64<T: Scalar>(x: &[T], y: &[T]) -> f64 {
    let mut acc = 0.0f64;
    for (&a, &b) in x.iter().zip(y) {
        acc += a.to_f64() * b.to_f64();
    }
    acc
}

#[inline]
pub fn sum_f64<T: Scalar>(x: &[T]) -> f64 {
    x.iter().map(|v| v.to_f64()).sum()
}

/// Softmax of one row with temperature, max-subtracted; the normalizer is
/// accumulated in f64 so row sums stay tight even in f32.
pub fn softmax_row<T: Scalar>(row: &[T], temperature: T, out: &mut [T]) {
    let inv_t = T::ONE / temperature;
    let mut mx = row[0];
    for &v in row.iter() {
        if v > mx {
            mx = v;
        }
    }
    let mut denom = 0.0f64;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = ((v - mx) * inv_t).fast_exp();
        denom += e.to_f64();
        *o = e;
    }
    let inv = T::from_f64(1.0 / denom);
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Entropy −Σ p ln p of a probability row, in nats.
pub fn entropy_row<T: Scalar>(p: &[T]) -> f64 {
    let mut h = 0.0f64;
    for &v in p {
        let v = v.to_f64();
        if v > 0.0 {
            h -= v * v.ln();
        }
    }
    h
}

// ── fast transcendentals (f32) ───────────────────────────────────────
// Classic single-precision range-reduction + polynomial forms. Relative
// error ~1e-7; branch-free bodies so the compiler can vectorize call sites.

#[inline(always)]
pub fn exp_f32(x: f32) -> f32 {
    const EXP_HI: f32 = 88.376_26;
    const EXP_LO: f32 = -87.336_54;
    const LOG2EF: f32 = std::f32::consts::LOG2_E;
    const C1: f32 = 0.693_359_4;
    const C2: f32 = -2.121_944_4e-4;
    let x = x.min(EXP_HI).max(EXP_LO);
    let fx = (x * LOG2EF + 0.5).floor();
    let x = x - fx * C1 - fx * C2;
    let z = x * x;
    let mut y = 1.987_569_1e-4f32;
    y = y * x + 1.398_199_9e-3;
    y = y * x + 8.333_452e-3;
    y = y * x + 4.166_579_6e-2;
    y = y * x + 1.666_666_5e-1;
    y = y * x + 5.000_000_2e-1;
    y = y * z + x + 1.0;
    let pow2n = f32::from_bits(((fx as i32 + 127) as u32) << 23);
    y * pow2n
}

#[inline(always)]
pub fn ln_f32(x: f32) -> f32 {
    if x <= 0.0 {
        return f32::NEG_INFINITY;
    }
    const SQRTHF: f32 = std::f32::consts::FRAC_1_SQRT_2;
    let bits = x.to_bits();
    let mut e = ((bits >> 23) as i32) - 126;
    let mut m = f32::from_bits((bits & 0x007f_ffff) | 0x3f00_0000); // [0.5, 1)
    if m < SQRTHF {
        e -= 1;
        m = m + m - 1.0;
    } else {
        m -= 1.0;
    }
    let z = m * m;
    let mut y = 7.037_683_6e-2f32;
    y = y * m - 1.151_461e-1;
    y = y * m + 1.167_699_9e-1;
    y = y * m - 1.242_014_1e-1;
    y = y * m + 1.424_932_3e-1;
    y = y * m - 1.666_805_7e-1;
    y = y * m + 2.000_071_5e-1;
    y = y * m - 2.499_999_4e-1;
    y = y * m + 3.333_333e-1;
    let y = y * m * z;
    let fe = e as f32;
    let y = y + fe * -2.121_944_4e-4 - 0.5 * z;
    m + y + fe * 0.693_359_4
}

#[inline(always)]
pub fn tanh_f32(x: f32) -> f32 {
    if x > 9.0 {
        return 1.0;
    }
    if x < -9.0 {
        return -1.0;
    }
    let e = exp_f32(2.0 * x);
    (e - 1.0) / (e + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_hand_case() {
        // I₃ × M = M
        let eye = vec![1.0f64, 0., 0., 0., 1., 0., 0., 0., 1.];
        let m = vec![3.0f64, 1., 4., 1., 5., 9., 2., 6., 5.];
        assert_eq!(matmul(&eye, &m, 3, 3, 3), m);
        // [[1,2],[3,4]] × [[1],[1]] = [[3],[7]]
        let a = vec![1.0f64, 2., 3., 4.];
        let b = vec![1.0f64, 1.];
        assert_eq!(matmul(&a, &b, 2, 2, 1), vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_tn_matches_explicit_transpose() {
        let a: Vec<f64> = (0..12).map(|i| (i as f64) * 0.3 - 1.0).collect(); // 4x3
        let b: Vec<f64> = (0..8).map(|i| (i as f64) * 0.7 - 2.0).collect(); // 4x2
        let mut got = vec![0.0; 6];
        matmul_tn_acc(&a, &b, 4, 3, 2, &mut got);
        let at = transpose(&a, 4, 3);
        let want = matmul(&at, &b, 3, 4, 2);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn bmm_nt_matches_per_slice() {
        let a: Vec<f64> = (0..2 * 3 * 4).map(|i| i as f64 * 0.1).collect();
        let b: Vec<f64> = (0..2 * 5 * 4).map(|i| i as f64 * 0.05 - 1.0).collect();
        let c = bmm_nt(&a, &b, 2, 3, 4, 5);
        for s in 0..2 {
            let bt = transpose(&b[s * 20..(s + 1) * 20], 5, 4);
            let want = matmul(&a[s * 12..(s + 1) * 12], &bt, 3, 4, 5);
            assert_eq!(&c[s * 15..(s + 1) * 15], &want[..]);
        }
    }

    #[test]
    fn softmax_row_stable_and_normalized() {
        let mut out = vec![0.0f32; 2];
        softmax_row(&[1000.0f32, 0.0], 1.0, &mut out);
        assert!((out[0] - 1.0).abs() < 1e-6 && out[1] >= 0.0 && out[1] < 1e-6);
        let row: Vec<f64> = (0..512).map(|i| ((i * 2654435761usize) % 1000) as f64 * 0.01).collect();
        let mut out = vec![0.0f64; 512];
        softmax_row(&row, 0.07, &mut out);
        let s: f64 = out.iter().sum();
        assert!((s - 1.0).abs() < 1e-9, "sum {s}");
    }
}
