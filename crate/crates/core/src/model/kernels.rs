//! Inner loops of the recurrent steps: a vector-matrix product and the gate
//! nonlinearities over whole rows.
//!
//! The product runs over column blocks so the partial sums stay in registers.
//! On x86-64 with AVX2 and FMA the same code is compiled a second time with
//! those features enabled and chosen at runtime. Products are accumulated
//! with `mul_add`, which is exactly rounded on both paths, so the results
//! are identical.

const BLOCK: usize = 32;

#[cfg(target_arch = "x86_64")]
fn has_avx2_fma() -> bool {
    std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
}

#[inline(always)]
fn vec_mat_acc_generic(v: &[f64], m: &[f64], out: &mut [f64]) {
    let n = out.len();
    debug_assert_eq!(m.len(), v.len() * n);
    let mut start = 0;
    while start + BLOCK <= n {
        let mut acc = [0.0f64; BLOCK];
        acc.copy_from_slice(&out[start..start + BLOCK]);
        for (&x, row) in v.iter().zip(m.chunks_exact(n)) {
            let row: &[f64; BLOCK] = row[start..start + BLOCK].try_into().expect("block width");
            for i in 0..BLOCK {
                acc[i] = x.mul_add(row[i], acc[i]);
            }
        }
        out[start..start + BLOCK].copy_from_slice(&acc);
        start += BLOCK;
    }
    if start < n {
        for (k, &x) in v.iter().enumerate() {
            let row = &m[k * n + start..(k + 1) * n];
            for (o, &w) in out[start..].iter_mut().zip(row) {
                *o = x.mul_add(w, *o);
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn vec_mat_acc_avx2(v: &[f64], m: &[f64], out: &mut [f64]) {
    vec_mat_acc_generic(v, m, out)
}

/// `out += v * m`, with `m` row-major of shape `v.len() x out.len()`.
pub(crate) fn vec_mat_acc(v: &[f64], m: &[f64], out: &mut [f64]) {
    assert_eq!(m.len(), v.len() * out.len(), "vec_mat_acc shape mismatch");
    #[cfg(target_arch = "x86_64")]
    if has_avx2_fma() {
        // SAFETY: the required CPU feature was detected at runtime.
        return unsafe { vec_mat_acc_avx2(v, m, out) };
    }
    vec_mat_acc_generic(v, m, out)
}

const LOG2E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
// 1.5 * 2^52: adding it rounds to an integer held in the low mantissa bits
const SHIFT: f64 = 6_755_399_441_055_744.0;

/// `exp` by range reduction to |r| <= ln2/2 and a degree-12 Taylor polynomial.
/// Relative error stays within a few ulp; inputs are clamped to +-708.
#[inline(always)]
fn exp_poly(x: f64) -> f64 {
    let x = x.clamp(-708.0, 708.0);
    let t = x * LOG2E + SHIFT;
    let kf = t - SHIFT;
    let k = t.to_bits().wrapping_sub(SHIFT.to_bits());
    let r = (x - kf * LN2_HI) - kf * LN2_LO;
    let mut p: f64 = 1.0 / 479_001_600.0;
    for c in [
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p.mul_add(r, c);
    }
    p * f64::from_bits(k.wrapping_add(1023) << 52)
}

#[inline(always)]
fn sigmoid_generic(xs: &mut [f64]) {
    for x in xs {
        *x = 1.0 / (1.0 + exp_poly(-*x));
    }
}

#[inline(always)]
fn tanh_generic(xs: &mut [f64]) {
    for x in xs {
        *x = 2.0 / (1.0 + exp_poly(-2.0 * *x)) - 1.0;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn sigmoid_avx2(xs: &mut [f64]) {
    sigmoid_generic(xs)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn tanh_avx2(xs: &mut [f64]) {
    tanh_generic(xs)
}

/// Logistic function, in place.
pub(crate) fn sigmoid_inplace(xs: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2_fma() {
        // SAFETY: the required CPU feature was detected at runtime.
        return unsafe { sigmoid_avx2(xs) };
    }
    sigmoid_generic(xs)
}

/// Hyperbolic tangent, in place.
pub(crate) fn tanh_inplace(xs: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2_fma() {
        // SAFETY: the required CPU feature was detected at runtime.
        return unsafe { tanh_avx2(xs) };
    }
    tanh_generic(xs)
}
