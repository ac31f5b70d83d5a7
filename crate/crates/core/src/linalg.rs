//! Small vector helpers on `ndarray` views.

use ndarray::{Array1, ArrayView1};

use crate::scalar::Scalar;

#[inline]
pub fn dot<T: Scalar>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> T {
    a.dot(&b)
}

#[inline]
pub fn norm<T: Scalar>(a: ArrayView1<'_, T>) -> T {
    a.dot(&a).sqrt()
}

/// Returns `a / ‖a‖₂`. A zero vector is returned unchanged.
pub fn normalize<T: Scalar>(a: ArrayView1<'_, T>) -> Array1<T> {
    let n = norm(a);
    if n > T::zero() {
        a.mapv(|v| v / n)
    } else {
        a.to_owned()
    }
}

/// Backward pass of `y = x / ‖x‖`: given `y`, `‖x‖` and `dL/dy`, returns `dL/dx`.
pub fn normalize_backward<T: Scalar>(
    y: ArrayView1<'_, T>,
    x_norm: T,
    grad_y: ArrayView1<'_, T>,
) -> Array1<T> {
    if x_norm <= T::zero() {
        return Array1::zeros(y.len());
    }
    let proj = y.dot(&grad_y);
    (&grad_y - &y.mapv(|v| v * proj)).mapv(|v| v / x_norm)
}

pub fn euclidean<T: Scalar>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> T {
    a.iter()
        .zip(b.iter())
        .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
        .sqrt()
}

/// Arithmetic mean of equally sized vectors. Panics on an empty slice.
pub fn mean<T: Scalar>(vs: &[Array1<T>]) -> Array1<T> {
    let mut acc = Array1::<T>::zeros(vs[0].len());
    for v in vs {
        acc += v;
    }
    let n = T::from_len(vs.len());
    acc.mapv_inplace(|x| x / n);
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let x = array![0.3f64, -1.2, 0.7];
        let g = array![0.5f64, 0.1, -0.4];
        let n = norm(x.view());
        let y = normalize(x.view());
        let analytic = normalize_backward(y.view(), n, g.view());
        let h = 1e-6;
        for i in 0..3 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fp = normalize(xp.view()).dot(&g);
            let fm = normalize(xm.view()).dot(&g);
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-8, "{fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn zero_vector_survives_normalize() {
        let z = Array1::<f32>::zeros(4);
        assert_eq!(normalize(z.view()), z);
    }
}
