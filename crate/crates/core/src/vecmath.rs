//! Hot inner loops. Eight independent accumulators let the compiler
//! vectorize without `-ffast-math`; the summation order is fixed, so results
//! are reproducible across runs and threads.

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { dot_avx2(a, b) };
    }
    dot_lanes(a, b)
}

/// Same arithmetic as [`dot_lanes`], compiled so the eight lanes fill one AVX
/// register. No FMA, so the result is bitwise identical to the portable path.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dot_avx2(a: &[f32], b: &[f32]) -> f32 {
    dot_lanes(a, b)
}

#[inline(always)]
fn dot_lanes(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (xa, ya) = (a.chunks_exact(8), b.chunks_exact(8));
    let (xr, yr) = (xa.remainder(), ya.remainder());
    for (x, y) in xa.zip(ya) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in xr.iter().zip(yr) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Row-major `out = m · v` for an `n × n` matrix.
pub(crate) fn matvec(m: &[f32], n: usize, v: &[f32], out: &mut [f32]) {
    for (r, o) in out.iter_mut().enumerate().take(n) {
        *o = dot(&m[r * n..(r + 1) * n], v);
    }
}

/// Row-major `out = mᵀ · v` for an `n × n` matrix.
pub(crate) fn matvec_t(m: &[f32], n: usize, v: &[f32], out: &mut [f32]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for r in 0..n {
        axpy(v[r], &m[r * n..(r + 1) * n], out);
    }
}
