//! Hot inner kernels for the f32 training path.
//!
//! Runtime-dispatched AVX2+FMA variants with a portable scalar fallback.
//! Both paths use a fixed accumulation order, so results are deterministic
//! per machine and per dispatch decision.

use std::sync::OnceLock;

#[cfg(target_arch = "x86_64")]
fn fast_path() -> bool {
    static FAST: OnceLock<bool> = OnceLock::new();
    *FAST.get_or_init(|| {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    })
}

#[cfg(not(target_arch = "x86_64"))]
fn fast_path() -> bool {
    false
}

/// dst += a * src
pub fn axpy_f32(dst: &mut [f32], a: f32, src: &[f32]) {
    debug_assert_eq!(dst.len(), src.len());
    #[cfg(target_arch = "x86_64")]
    if fast_path() {
        unsafe { axpy_f32_avx2(dst, a, src) };
        return;
    }
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * *s;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn axpy_f32_avx2(dst: &mut [f32], a: f32, src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = s.mul_add(a, *d);
    }
}

/// Dot product with eight-lane accumulation.
pub fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    #[cfg(target_arch = "x86_64")]
    if fast_path() {
        return unsafe { dot_f32_avx2(a, b) };
    }
    dot_f32_lanes(a, b)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn dot_f32_avx2(a: &[f32], b: &[f32]) -> f32 {
    dot_f32_lanes(a, b)
}

#[inline(always)]
fn dot_f32_lanes(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let ra = ca.remainder();
    let rb = cb.remainder();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] = x[i].mul_add(y[i], acc[i]);
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail = x.mul_add(*y, tail);
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// C[m,n] += A[m,k] * B[k,n], all row-major. Register-tiled on the fast
/// path so the output stays in accumulators across the k loop.
pub fn gemm_f32(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    #[cfg(target_arch = "x86_64")]
    if fast_path() {
        unsafe { gemm_f32_avx2(m, k, n, a, b, c) };
        return;
    }
    gemm_f32_scalar(m, k, n, a, b, c);
}

fn gemm_f32_scalar(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av != 0.0 {
                let brow = &b[kk * n..(kk + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * *bv;
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn gemm_f32_avx2(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    use std::arch::x86_64::*;
    const MR: usize = 4; // output rows per tile
    const NR: usize = 32; // output columns per tile (4 ymm lanes)
    let mut i0 = 0;
    while i0 < m {
        let mr = MR.min(m - i0);
        let mut j0 = 0;
        while j0 < n {
            let nr = NR.min(n - j0);
            if mr == MR && nr == NR {
                unsafe {
                    let mut acc = [[_mm256_setzero_ps(); 4]; MR];
                    for (r, row) in acc.iter_mut().enumerate() {
                        for (q, lane) in row.iter_mut().enumerate() {
                            *lane = _mm256_loadu_ps(c.as_ptr().add((i0 + r) * n + j0 + q * 8));
                        }
                    }
                    for kk in 0..k {
                        let brow = b.as_ptr().add(kk * n + j0);
                        let b0 = _mm256_loadu_ps(brow);
                        let b1 = _mm256_loadu_ps(brow.add(8));
                        let b2 = _mm256_loadu_ps(brow.add(16));
                        let b3 = _mm256_loadu_ps(brow.add(24));
                        for (r, row) in acc.iter_mut().enumerate() {
                            let av = _mm256_set1_ps(*a.get_unchecked((i0 + r) * k + kk));
                            row[0] = _mm256_fmadd_ps(av, b0, row[0]);
                            row[1] = _mm256_fmadd_ps(av, b1, row[1]);
                            row[2] = _mm256_fmadd_ps(av, b2, row[2]);
                            row[3] = _mm256_fmadd_ps(av, b3, row[3]);
                        }
                    }
                    for (r, row) in acc.iter().enumerate() {
                        for (q, lane) in row.iter().enumerate() {
                            _mm256_storeu_ps(c.as_mut_ptr().add((i0 + r) * n + j0 + q * 8), *lane);
                        }
                    }
                }
            } else {
                // edge tile: plain loops (still inside the fma feature scope)
                for r in 0..mr {
                    for kk in 0..k {
                        let av = a[(i0 + r) * k + kk];
                        if av != 0.0 {
                            for jq in 0..nr {
                                c[(i0 + r) * n + j0 + jq] +=
                                    av * b[kk * n + j0 + jq];
                            }
                        }
                    }
                }
            }
            j0 += NR;
        }
        i0 += MR;
    }
}
