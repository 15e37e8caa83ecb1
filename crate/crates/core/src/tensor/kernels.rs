use super::element::vectorized;
use super::{strides_of, Element};

/// Row-major GEMM: `c (+)= op(a) · op(b)` where `op` optionally transposes.
///
/// `a` is stored `[m×k]` (or `[k×m]` when `trans_a`), `b` is stored `[k×n]`
/// (or `[n×k]` when `trans_b`), `c` is `[m×n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(T::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the length assertion above covers every index the strides reach.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const LANES: usize = 8;

/// Sum with eight interleaved accumulators, combined in a fixed order.
#[inline(always)]
pub(crate) fn lane_sum<T: Element>(xs: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let mut chunks = xs.chunks_exact(LANES);
    for c in &mut chunks {
        for (a, &x) in acc.iter_mut().zip(c) {
            *a = *a + x;
        }
    }
    let tail = chunks.remainder().iter().fold(T::zero(), |s, &x| s + x);
    combine(acc, T::zero(), |a, b| a + b) + tail
}

#[inline(always)]
pub(crate) fn lane_dot<T: Element>(xs: &[T], ys: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let mut cx = xs.chunks_exact(LANES);
    let mut cy = ys.chunks_exact(LANES);
    for (a, b) in (&mut cx).zip(&mut cy) {
        for i in 0..LANES {
            acc[i] = acc[i] + a[i] * b[i];
        }
    }
    let tail = cx
        .remainder()
        .iter()
        .zip(cy.remainder())
        .fold(T::zero(), |s, (&a, &b)| s + a * b);
    combine(acc, T::zero(), |a, b| a + b) + tail
}

/// Largest entry; NaN-free inputs assumed.
#[inline(always)]
pub(crate) fn lane_max<T: Element>(xs: &[T]) -> T {
    let pick = |a: T, b: T| if b > a { b } else { a };
    let mut acc = [T::neg_infinity(); LANES];
    let mut chunks = xs.chunks_exact(LANES);
    for c in &mut chunks {
        for (a, &x) in acc.iter_mut().zip(c) {
            *a = pick(*a, x);
        }
    }
    let tail = chunks
        .remainder()
        .iter()
        .fold(T::neg_infinity(), |m, &x| pick(m, x));
    pick(combine(acc, T::neg_infinity(), pick), tail)
}

#[inline(always)]
fn combine<T: Copy>(acc: [T; LANES], init: T, f: impl Fn(T, T) -> T) -> T {
    acc.iter().fold(init, |s, &a| f(s, a))
}

/// Numerically stable softmax of one contiguous row, in place.
pub(crate) fn softmax_row<T: Element>(row: &mut [T]) {
    if row.is_empty() {
        return;
    }
    vectorized(
        #[inline(always)]
        || {
            let max = lane_max(row);
            for x in row.iter_mut() {
                *x = *x - max;
            }
            T::exp_in_place(row);
            let inv = T::one() / lane_sum(row);
            for x in row.iter_mut() {
                *x = *x * inv;
            }
        },
    )
}

pub(crate) fn permute<T: Element>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let src_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    // source stride for each output axis
    let walk: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let numel = data.len();
    let mut out = Vec::with_capacity(numel);
    if numel == 0 {
        return out;
    }
    if rank == 0 {
        out.push(data[0]);
        return out;
    }
    let inner = out_shape[rank - 1];
    let inner_stride = walk[rank - 1];
    let mut index = vec![0usize; rank];
    let mut base = 0usize;
    let outer = numel / inner;
    for _ in 0..outer {
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.extend((0..inner).map(|i| data[base + i * inner_stride]));
        }
        for axis in (0..rank - 1).rev() {
            index[axis] += 1;
            base += walk[axis];
            if index[axis] < out_shape[axis] {
                break;
            }
            base -= walk[axis] * out_shape[axis];
            index[axis] = 0;
        }
    }
    out
}

/// Inverse of a permutation.
pub(crate) fn invert(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Standard normal CDF and density used by GELU.
const BLOCK: usize = 256;

/// `x·Φ(x)` with the exact Gaussian CDF.
pub(crate) fn gelu<T: Element>(xs: &[T]) -> Vec<T> {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    vectorized(
        #[inline(always)]
        || {
            let mut out: Vec<T> = xs.iter().map(|&x| x * inv_sqrt2).collect();
            for (chunk, xs) in out.chunks_mut(BLOCK).zip(xs.chunks(BLOCK)) {
                T::erf_in_place(chunk);
                for (o, &x) in chunk.iter_mut().zip(xs) {
                    *o = x * half * (T::one() + *o);
                }
            }
            out
        },
    )
}

/// Accumulates `grad · d/dx[x·Φ(x)] = grad · (Φ(x) + x·φ(x))` into `acc`.
pub(crate) fn gelu_backward<T: Element>(xs: &[T], grad: &[T], acc: &mut [T]) {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let norm = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let mut cdf = [T::zero(); BLOCK];
    let mut pdf = [T::zero(); BLOCK];
    vectorized(
        #[inline(always)]
        || {
            for ((xs, grad), acc) in xs
                .chunks(BLOCK)
                .zip(grad.chunks(BLOCK))
                .zip(acc.chunks_mut(BLOCK))
            {
                let n = xs.len();
                for i in 0..n {
                    cdf[i] = xs[i] * inv_sqrt2;
                    pdf[i] = -(xs[i] * xs[i]) * half;
                }
                T::erf_in_place(&mut cdf[..n]);
                T::exp_in_place(&mut pdf[..n]);
                for i in 0..n {
                    let dydx = half * (T::one() + cdf[i]) + xs[i] * norm * pdf[i];
                    acc[i] = acc[i] + grad[i] * dydx;
                }
            }
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lane_reductions_match_plain_folds() {
        for n in [0usize, 1, 7, 8, 9, 31, 641] {
            let xs: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
            let ys: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
            assert!((lane_sum(&xs) - xs.iter().sum::<f64>()).abs() < 1e-12);
            assert!(
                (lane_dot(&xs, &ys) - xs.iter().zip(&ys).map(|(a, b)| a * b).sum::<f64>()).abs()
                    < 1e-12
            );
            let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(lane_max(&xs), m);
        }
        let mut row = vec![1.0f64, 2.0, 3.0];
        softmax_row(&mut row);
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        assert!((row[2] - 3f64.exp() / z).abs() < 1e-15);
    }

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn gemm_transpose_flags_agree_with_naive() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, aa, ta, bb, tb, &mut c, false);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_accumulates() {
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32, 6.0, 7.0, 8.0];
        let mut c = [1.0f32; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, true);
        assert_eq!(c, [20.0, 23.0, 44.0, 51.0]);
    }

    #[test]
    fn invert_roundtrips() {
        let axes = [2, 0, 3, 1];
        let inv = invert(&axes);
        for i in 0..4 {
            assert_eq!(inv[axes[i]], i);
        }
    }
}
