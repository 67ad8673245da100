//! Small dense linear-algebra kernels: the symmetric tridiagonal eigensolver
//! behind Krylov-chain propagation, and a Householder least-squares solver
//! for the baseline fits.

use ndarray::{Array1, Array2};

use crate::scalar::Scalar;

/// Eigen-decomposition of a real symmetric tridiagonal matrix.
///
/// `eigenvectors[[i, k]]` is component `i` of the eigenvector belonging to
/// `eigenvalues[k]`. Eigenvalues are sorted ascending.
#[derive(Clone, Debug)]
pub struct TridiagonalEigen<T> {
    pub eigenvalues: Array1<T>,
    pub eigenvectors: Array2<T>,
}

/// Implicit QL with Wilkinson-style shifts (the EISPACK `tql2` scheme)
/// applied to a matrix given by its diagonal and sub-diagonal.
///
/// `offdiag[i]` couples rows `i` and `i + 1`, so `offdiag.len() == diag.len() - 1`.
pub fn symmetric_tridiagonal_eigen<T: Scalar>(diag: &[T], offdiag: &[T]) -> TridiagonalEigen<T> {
    let n = diag.len();
    assert!(n > 0, "empty matrix");
    assert_eq!(offdiag.len() + 1, n, "sub-diagonal length must be n - 1");

    let mut d = diag.to_vec();
    // e[i] couples i and i + 1; e[n - 1] = 0 terminates the deflation scan.
    let mut e = vec![T::zero(); n];
    e[..n - 1].copy_from_slice(offdiag);
    let mut v = Array2::<T>::eye(n);

    let eps = T::epsilon();
    let two = T::lit(2.0);
    let mut f = T::zero();
    let mut tst1 = T::zero();
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 && e[m].abs() > eps * tst1 {
            m += 1;
        }
        if m > l {
            let mut iterations = 0usize;
            loop {
                iterations += 1;
                // Convergence is quadratic; the cap only guards against NaN input.
                if iterations > 60 * n {
                    break;
                }
                let g = d[l];
                let mut p = (d[l + 1] - g) / (two * e[l]);
                let mut r = p.hypot(T::one());
                if p < T::zero() {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = T::one();
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = T::zero();
                let mut s2 = T::zero();
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let g = c * e[i];
                    let h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        let h = v[[k, i + 1]];
                        v[[k, i + 1]] = s * v[[k, i]] + c * h;
                        v[[k, i]] = c * v[[k, i]] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = T::zero();
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap_or(std::cmp::Ordering::Equal));
    let eigenvalues = Array1::from_iter(order.iter().map(|&k| d[k]));
    let eigenvectors = Array2::from_shape_fn((n, n), |(i, k)| v[[i, order[k]]]);
    TridiagonalEigen {
        eigenvalues,
        eigenvectors,
    }
}

/// Outcome of a least-squares solve.
#[derive(Clone, Debug, PartialEq)]
pub struct LeastSquares<T> {
    pub coefficients: Vec<T>,
    /// Sum of squared residuals.
    pub residual: T,
}

/// Solves `min ||A x - y||` by Householder QR. Returns `None` when a column
/// is (numerically) a combination of the others or there are fewer rows than
/// columns.
pub fn least_squares<T: Scalar>(design: &Array2<T>, target: &[T]) -> Option<LeastSquares<T>> {
    let (rows, cols) = design.dim();
    assert_eq!(rows, target.len(), "design/target row mismatch");
    if rows < cols || cols == 0 {
        return None;
    }
    let mut a = design.clone();
    let mut y = target.to_vec();
    let scale = a.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()));
    if scale == T::zero() {
        return None;
    }
    let tol = T::lit(1e-12) * scale * T::from_usize_lossy(rows).sqrt();

    for k in 0..cols {
        let norm = (k..rows).map(|i| a[[i, k]] * a[[i, k]]).sum::<T>().sqrt();
        if norm <= tol {
            return None;
        }
        let alpha = if a[[k, k]] > T::zero() { -norm } else { norm };
        // v = x - alpha e_k, stored in column k below the diagonal.
        let mut v: Vec<T> = (k..rows).map(|i| a[[i, k]]).collect();
        v[0] -= alpha;
        let vnorm2: T = v.iter().map(|&x| x * x).sum();
        if vnorm2 == T::zero() {
            continue;
        }
        let two = T::lit(2.0);
        for j in k..cols {
            let dot: T = (k..rows).map(|i| v[i - k] * a[[i, j]]).sum();
            let factor = two * dot / vnorm2;
            for i in k..rows {
                a[[i, j]] -= factor * v[i - k];
            }
        }
        let dot: T = (k..rows).map(|i| v[i - k] * y[i]).sum();
        let factor = two * dot / vnorm2;
        for i in k..rows {
            y[i] -= factor * v[i - k];
        }
    }

    let mut x = vec![T::zero(); cols];
    for k in (0..cols).rev() {
        let mut acc = y[k];
        for j in k + 1..cols {
            acc -= a[[k, j]] * x[j];
        }
        if a[[k, k]].abs() <= tol {
            return None;
        }
        x[k] = acc / a[[k, k]];
    }
    let residual = y[cols..].iter().map(|&r| r * r).sum();
    Some(LeastSquares {
        coefficients: x,
        residual,
    })
}
