//! AVX2/FMA inner loops behind runtime feature detection.
//!
//! Lane structure mirrors the portable kernels: dots accumulate into 8 lanes
//! (lane `l` sums elements `l, l+8, ...`), the lanes combine through the same
//! scalar tree, and the tail adds last. Axpy updates are elementwise, so
//! vector width never reorders an element's accumulation. The fused
//! multiply-adds round once where the portable path rounds twice; a process
//! uses one path exclusively, so cached-decode and full-forward passes stay
//! bit-identical to each other either way.

#![cfg(target_arch = "x86_64")]

use core::arch::x86_64::*;
use std::sync::OnceLock;

#[inline]
pub fn have_avx2_fma() -> bool {
    static FLAG: OnceLock<bool> = OnceLock::new();
    *FLAG.get_or_init(|| {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    })
}

/// # Safety
/// Requires AVX2 and FMA (checked by the caller via [`have_avx2_fma`]).
/// `b` must be at least as long as `out`.
#[target_feature(enable = "avx2,fma")]
pub unsafe fn axpy_f32(s: f32, b: &[f32], out: &mut [f32]) {
    let n = out.len();
    let sv = _mm256_set1_ps(s);
    let mut j = 0;
    while j + 8 <= n {
        let bv = _mm256_loadu_ps(b.as_ptr().add(j));
        let ov = _mm256_loadu_ps(out.as_ptr().add(j));
        _mm256_storeu_ps(out.as_mut_ptr().add(j), _mm256_fmadd_ps(sv, bv, ov));
        j += 8;
    }
    while j < n {
        *out.get_unchecked_mut(j) = s.mul_add(*b.get_unchecked(j), *out.get_unchecked(j));
        j += 1;
    }
}

/// # Safety
/// Requires AVX2 and FMA. All four `out` rows and `b` share one length.
#[target_feature(enable = "avx2,fma")]
pub unsafe fn axpy4_f32(s: [f32; 4], b: &[f32], out: [&mut [f32]; 4]) {
    let n = b.len();
    let [o0, o1, o2, o3] = out;
    let s0 = _mm256_set1_ps(s[0]);
    let s1 = _mm256_set1_ps(s[1]);
    let s2 = _mm256_set1_ps(s[2]);
    let s3 = _mm256_set1_ps(s[3]);
    let mut j = 0;
    while j + 8 <= n {
        let bv = _mm256_loadu_ps(b.as_ptr().add(j));
        let v0 = _mm256_fmadd_ps(s0, bv, _mm256_loadu_ps(o0.as_ptr().add(j)));
        let v1 = _mm256_fmadd_ps(s1, bv, _mm256_loadu_ps(o1.as_ptr().add(j)));
        let v2 = _mm256_fmadd_ps(s2, bv, _mm256_loadu_ps(o2.as_ptr().add(j)));
        let v3 = _mm256_fmadd_ps(s3, bv, _mm256_loadu_ps(o3.as_ptr().add(j)));
        _mm256_storeu_ps(o0.as_mut_ptr().add(j), v0);
        _mm256_storeu_ps(o1.as_mut_ptr().add(j), v1);
        _mm256_storeu_ps(o2.as_mut_ptr().add(j), v2);
        _mm256_storeu_ps(o3.as_mut_ptr().add(j), v3);
        j += 8;
    }
    while j < n {
        let bv = *b.get_unchecked(j);
        *o0.get_unchecked_mut(j) = s[0].mul_add(bv, *o0.get_unchecked(j));
        *o1.get_unchecked_mut(j) = s[1].mul_add(bv, *o1.get_unchecked(j));
        *o2.get_unchecked_mut(j) = s[2].mul_add(bv, *o2.get_unchecked(j));
        *o3.get_unchecked_mut(j) = s[3].mul_add(bv, *o3.get_unchecked(j));
        j += 1;
    }
}

#[inline]
#[target_feature(enable = "avx2,fma")]
unsafe fn combine_lanes(acc: __m256, a: &[f32], b: &[f32], from: usize) -> f32 {
    let mut lanes = [0f32; 8];
    _mm256_storeu_ps(lanes.as_mut_ptr(), acc);
    let mut s = ((lanes[0] + lanes[4]) + (lanes[2] + lanes[6]))
        + ((lanes[1] + lanes[5]) + (lanes[3] + lanes[7]));
    for j in from..a.len() {
        s = a.get_unchecked(j).mul_add(*b.get_unchecked(j), s);
    }
    s
}

/// # Safety
/// Requires AVX2 and FMA. `a` and `b` share one length.
#[target_feature(enable = "avx2,fma")]
pub unsafe fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    let n = a.len();
    let mut acc = _mm256_setzero_ps();
    let mut j = 0;
    while j + 8 <= n {
        acc = _mm256_fmadd_ps(
            _mm256_loadu_ps(a.as_ptr().add(j)),
            _mm256_loadu_ps(b.as_ptr().add(j)),
            acc,
        );
        j += 8;
    }
    combine_lanes(acc, a, b, j)
}

/// Four dots of one `a` row against four `b` rows, each dot following the
/// exact operation sequence of [`dot_f32`].
///
/// # Safety
/// Requires AVX2 and FMA. Every row shares `a`'s length.
#[target_feature(enable = "avx2,fma")]
pub unsafe fn dot4_f32(a: &[f32], b: [&[f32]; 4]) -> [f32; 4] {
    let n = a.len();
    let [b0, b1, b2, b3] = b;
    let mut acc0 = _mm256_setzero_ps();
    let mut acc1 = _mm256_setzero_ps();
    let mut acc2 = _mm256_setzero_ps();
    let mut acc3 = _mm256_setzero_ps();
    let mut j = 0;
    while j + 8 <= n {
        let av = _mm256_loadu_ps(a.as_ptr().add(j));
        acc0 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b0.as_ptr().add(j)), acc0);
        acc1 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b1.as_ptr().add(j)), acc1);
        acc2 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b2.as_ptr().add(j)), acc2);
        acc3 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b3.as_ptr().add(j)), acc3);
        j += 8;
    }
    [
        combine_lanes(acc0, a, b0, j),
        combine_lanes(acc1, a, b1, j),
        combine_lanes(acc2, a, b2, j),
        combine_lanes(acc3, a, b3, j),
    ]
}
