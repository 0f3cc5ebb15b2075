//! Numeric kernels behind the tape operations.

use crate::par;
use crate::real::Real;

/// Logical layout of a GEMM operand stored row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Layout {
    Normal,
    Transposed,
}

struct SendPtr<T>(*mut T);
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}

/// `c[m×n] (+)= a[m×k] · b[k×n]`, where each operand may be stored transposed.
///
/// Large products are split over column blocks of `c`; every output element
/// is still reduced over `k` by one kernel call, so the result does not
/// depend on the split.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    a_layout: Layout,
    b: &[F],
    b_layout: Layout,
    c: &mut [F],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = F::zero());
        }
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    let beta = if accumulate { F::one() } else { F::zero() };

    let block = column_block(m, k, n);
    let blocks: Vec<(usize, usize)> = (0..n)
        .step_by(block)
        .map(|j0| (j0, block.min(n - j0)))
        .collect();
    let c_ptr = SendPtr(c.as_mut_ptr());
    let run = |&(j0, width): &(usize, usize)| {
        let c_ptr = &c_ptr;
        // SAFETY: blocks cover disjoint column ranges of `c`, and all offsets
        // stay inside the asserted operand lengths.
        unsafe {
            F::gemm_raw(
                m,
                k,
                width,
                F::one(),
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr().offset(j0 as isize * csb),
                rsb,
                csb,
                beta,
                c_ptr.0.add(j0),
                n as isize,
                1,
            );
        }
    };
    if blocks.len() == 1 {
        run(&blocks[0]);
    } else {
        par::map(&blocks, run);
    }
}

fn column_block(m: usize, k: usize, n: usize) -> usize {
    if !par::enabled() || m * k * n < (1 << 20) {
        return n;
    }
    // Multiples of 64 keep the kernel's packed panels whole.
    let threads = rayon_threads().max(1);
    let per = n.div_ceil(threads);
    per.div_ceil(64).max(1) * 64
}

#[cfg(feature = "parallel")]
fn rayon_threads() -> usize {
    rayon::current_num_threads()
}

#[cfg(not(feature = "parallel"))]
fn rayon_threads() -> usize {
    1
}

/// Exact GELU, `x·Φ(x)`.
pub(crate) fn gelu<F: Real>(x: F) -> F {
    x * normal_cdf(x)
}

pub(crate) fn gelu_grad<F: Real>(x: F) -> F {
    let pdf = (-(x * x) * F::lit(0.5)).exp() * F::lit(0.398_942_280_401_432_7);
    normal_cdf(x) + x * pdf
}

pub(crate) fn normal_cdf<F: Real>(x: F) -> F {
    F::lit(0.5) * (F::one() + (x * F::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Logistic function, kept strictly inside (0, 1) even where it saturates.
pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    let s = if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    };
    s.max(F::min_positive_value()).min(F::one() - F::epsilon() / F::lit(2.0))
}
