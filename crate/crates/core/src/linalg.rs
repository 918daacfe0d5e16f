//! Small dense helpers for the low-dimensional targets. Matrices are
//! row-major `d × d` slices.

use crate::Scalar;

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm_sq<T: Scalar>(a: &[T]) -> T {
    dot(a, a)
}

pub fn norm<T: Scalar>(a: &[T]) -> T {
    norm_sq(a).sqrt()
}

pub fn sub<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

pub fn all_finite<T: Scalar>(a: &[T]) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// Lower Cholesky factor of a symmetric matrix, or `None` if it is not
/// positive-definite (or not symmetric to a relative 1e-10).
pub fn cholesky<T: Scalar>(m: &[T], d: usize) -> Option<Vec<T>> {
    debug_assert_eq!(m.len(), d * d);
    let tol = T::lit(1e-10);
    for i in 0..d {
        for j in 0..i {
            let (a, b) = (m[i * d + j], m[j * d + i]);
            if (a - b).abs() > tol * (T::one() + a.abs().max(b.abs())) {
                return None;
            }
        }
    }
    let mut l = vec![T::zero(); d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = m[i * d + j];
            for k in 0..j {
                s = s - l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s > T::zero()) || !s.is_finite() {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// `out = L z` for a lower-triangular `L`.
pub fn lower_mul<T: Scalar>(l: &[T], z: &[T], out: &mut [T]) {
    let d = z.len();
    for i in 0..d {
        let mut s = T::zero();
        for k in 0..=i {
            s = s + l[i * d + k] * z[k];
        }
        out[i] = s;
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(values, vectors)` where column `k` of the row-major `vectors`
/// is the eigenvector for `values[k]`.
pub fn symmetric_eigen<T: Scalar>(m: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let mut a = m.to_vec();
    let mut v = vec![T::zero(); d * d];
    for i in 0..d {
        v[i * d + i] = T::one();
    }
    let two = T::lit(2.0);
    for _sweep in 0..100 {
        let mut off = T::zero();
        let mut diag = T::zero();
        for i in 0..d {
            diag = diag + a[i * d + i] * a[i * d + i];
            for j in (i + 1)..d {
                off = off + a[i * d + j] * a[i * d + j];
            }
        }
        if off <= T::epsilon() * T::epsilon() * diag || off == T::zero() {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq == T::zero() {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (two * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let values = (0..d).map(|i| a[i * d + i]).collect();
    (values, v)
}
