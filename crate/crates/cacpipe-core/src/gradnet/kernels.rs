//! Inner loops shared by the forward and backward passes.
//!
//! Everything here accumulates in f64 with a fixed association order so runs
//! are bit-reproducible: wide loops keep eight independent partial sums that
//! are folded as ((s0+s1)+(s2+s3)) + ((s4+s5)+(s6+s7)), and the scalar tail is
//! added last. Slices are pre-split with `chunks_exact` so the hot loops carry
//! no bounds checks. The stencil and tap-dot paths use fused multiply-adds;
//! fma rounds once by definition, so it is just as reproducible as the split
//! form.

use crate::real::Real;

const LANES: usize = 8;

/// a*b + acc with a single rounding. The std intrinsic and the libm fallback
/// produce identical bits.
#[inline(always)]
fn fma64(a: f64, b: f64, acc: f64) -> f64 {
    #[cfg(feature = "std")]
    {
        a.mul_add(b, acc)
    }
    #[cfg(not(feature = "std"))]
    {
        libm::fma(a, b, acc)
    }
}

/// Fused three-tap row stencil with zero padding at both ends:
/// dst[i] += w0*src[i-1] + w1*src[i] + w2*src[i+1], src read as f64.
///
/// Every output element is independent, so auto-vectorization cannot change
/// the result.
#[inline(always)]
pub(super) fn stencil3_into_f64<R: Real>(dst: &mut [f64], src: &[R], w0: f64, w1: f64, w2: f64) {
    debug_assert_eq!(dst.len(), src.len());
    let n = dst.len();
    if n == 0 {
        return;
    }
    if n == 1 {
        dst[0] += w1 * src[0].to_f64();
        return;
    }
    dst[0] += w1 * src[0].to_f64() + w2 * src[1].to_f64();
    dst[n - 1] += w0 * src[n - 2].to_f64() + w1 * src[n - 1].to_f64();
    let m = n - 2;
    let d = &mut dst[1..1 + m];
    let s0 = &src[..m];
    let s1 = &src[1..1 + m];
    let s2 = &src[2..2 + m];
    for i in 0..m {
        d[i] = fma64(
            w2,
            s2[i].to_f64(),
            fma64(w1, s1[i].to_f64(), fma64(w0, s0[i].to_f64(), d[i])),
        );
    }
}

/// dst[i] += w * src[i] with a storage-typed source.
#[inline(always)]
pub(super) fn axpy_into_f64<R: Real>(dst: &mut [f64], w: f64, src: &[R]) {
    debug_assert_eq!(dst.len(), src.len());
    let mut d = dst.chunks_exact_mut(LANES);
    let mut s = src.chunks_exact(LANES);
    for (dc, sc) in (&mut d).zip(&mut s) {
        for i in 0..LANES {
            dc[i] += w * sc[i].to_f64();
        }
    }
    for (dv, sv) in d.into_remainder().iter_mut().zip(s.remainder()) {
        *dv += w * sv.to_f64();
    }
}

/// Deterministic dot product of two storage rows.
#[inline(always)]
pub(super) fn dot_rr<R: Real>(a: &[R], b: &[R]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; LANES];
    let mut ac = a.chunks_exact(LANES);
    let mut bc = b.chunks_exact(LANES);
    for (av, bv) in (&mut ac).zip(&mut bc) {
        for i in 0..LANES {
            lanes[i] += av[i].to_f64() * bv[i].to_f64();
        }
    }
    let mut acc = fold_lanes(&lanes);
    for (av, bv) in ac.remainder().iter().zip(bc.remainder()) {
        acc += av.to_f64() * bv.to_f64();
    }
    acc
}

/// The three kernel-tap dot products of one gradient row against one source
/// row, fused into a single pass:
/// d0 = sum_i g[i+1]*s[i], d1 = sum_i g[i]*s[i], d2 = sum_i g[i]*s[i+1].
#[inline(always)]
pub(super) fn dot3_mixed<R: Real>(g: &[f64], s: &[R]) -> (f64, f64, f64) {
    debug_assert_eq!(g.len(), s.len());
    let n = g.len();
    if n == 0 {
        return (0.0, 0.0, 0.0);
    }
    let m = n - 1;
    let g0 = &g[..m];
    let g1 = &g[1..1 + m];
    let s0 = &s[..m];
    let s1 = &s[1..1 + m];
    let mut l0 = [0.0f64; LANES];
    let mut l1 = [0.0f64; LANES];
    let mut l2 = [0.0f64; LANES];
    let chunks = m / LANES;
    for c in 0..chunks {
        let b = c * LANES;
        for i in 0..LANES {
            let x0 = s0[b + i].to_f64();
            l0[i] = fma64(g1[b + i], x0, l0[i]);
            l1[i] = fma64(g0[b + i], x0, l1[i]);
            l2[i] = fma64(g0[b + i], s1[b + i].to_f64(), l2[i]);
        }
    }
    let mut d0 = fold_lanes(&l0);
    let mut d1 = fold_lanes(&l1);
    let mut d2 = fold_lanes(&l2);
    for i in chunks * LANES..m {
        let x0 = s0[i].to_f64();
        d0 += g1[i] * x0;
        d1 += g0[i] * x0;
        d2 += g0[i] * s1[i].to_f64();
    }
    d1 += g[n - 1] * s[n - 1].to_f64();
    (d0, d1, d2)
}

/// Deterministic sum of a storage slice.
#[inline(always)]
pub(super) fn sum_mixed<R: Real>(xs: &[R]) -> f64 {
    let mut lanes = [0.0f64; LANES];
    let mut c = xs.chunks_exact(LANES);
    for ch in &mut c {
        for i in 0..LANES {
            lanes[i] += ch[i].to_f64();
        }
    }
    let mut acc = fold_lanes(&lanes);
    for v in c.remainder() {
        acc += v.to_f64();
    }
    acc
}

/// Deterministic sum of squared deviations from `m`.
#[inline(always)]
pub(super) fn sumsq_dev_mixed<R: Real>(xs: &[R], m: f64) -> f64 {
    let mut lanes = [0.0f64; LANES];
    let mut c = xs.chunks_exact(LANES);
    for ch in &mut c {
        for i in 0..LANES {
            let d = ch[i].to_f64() - m;
            lanes[i] += d * d;
        }
    }
    let mut acc = fold_lanes(&lanes);
    for v in c.remainder() {
        let d = v.to_f64() - m;
        acc += d * d;
    }
    acc
}

/// Deterministic sum of an f64 slice.
#[inline(always)]
pub(super) fn sum_f64(xs: &[f64]) -> f64 {
    let mut lanes = [0.0f64; LANES];
    let mut c = xs.chunks_exact(LANES);
    for ch in &mut c {
        for i in 0..LANES {
            lanes[i] += ch[i];
        }
    }
    let mut acc = fold_lanes(&lanes);
    for v in c.remainder() {
        acc += *v;
    }
    acc
}

/// sum(g) and sum(g*(x-m)) in one pass, for batchnorm reductions.
#[inline(always)]
pub(super) fn sum_and_cdot_mixed<R: Real>(g: &[f64], xs: &[R], m: f64) -> (f64, f64) {
    debug_assert_eq!(g.len(), xs.len());
    let mut ls = [0.0f64; LANES];
    let mut ld = [0.0f64; LANES];
    let mut gc = g.chunks_exact(LANES);
    let mut xc = xs.chunks_exact(LANES);
    for (gv, xv) in (&mut gc).zip(&mut xc) {
        for i in 0..LANES {
            ls[i] += gv[i];
            ld[i] += gv[i] * (xv[i].to_f64() - m);
        }
    }
    let mut s = fold_lanes(&ls);
    let mut d = fold_lanes(&ld);
    for (gv, xv) in gc.remainder().iter().zip(xc.remainder()) {
        s += gv;
        d += gv * (xv.to_f64() - m);
    }
    (s, d)
}

#[inline(always)]
fn fold_lanes(l: &[f64; LANES]) -> f64 {
    ((l[0] + l[1]) + (l[2] + l[3])) + ((l[4] + l[5]) + (l[6] + l[7]))
}
