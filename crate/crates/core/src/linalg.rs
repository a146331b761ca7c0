//! Symmetric eigendecomposition via cyclic Jacobi rotations.
//!
//! Small dense problems only (feature-channel covariances, d <= a few dozen),
//! where Jacobi is accurate to near machine precision and fully deterministic.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

const MAX_SWEEPS: usize = 64;

/// Eigendecomposition of a symmetric matrix.
///
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// rows of a `[n, n]` tensor. The input must be symmetric to about 1e-9
/// relative; asymmetry is a contract violation (covariances are symmetric by
/// construction, so asymmetry means the caller built the wrong matrix).
pub fn eigh_symmetric<F: Scalar>(m: &TensorBase<F>) -> Result<(Vec<F>, TensorBase<F>)> {
    let (n, n2) = m.dims2()?;
    if n != n2 {
        return Err(Error::shape(format!("eigh_symmetric: matrix shape {:?} is not square", m.shape())));
    }
    if n == 0 {
        return Err(Error::contract("eigh_symmetric: empty matrix"));
    }
    let mut scale = F::zero();
    for &v in m.data() {
        scale = scale.max(v.abs());
    }
    let sym_tol = F::from_f64_c(1e-9) * scale.max(F::one());
    for i in 0..n {
        for j in i + 1..n {
            if (m.get2(i, j) - m.get2(j, i)).abs() > sym_tol {
                return Err(Error::contract(format!(
                    "eigh_symmetric: matrix not symmetric at ({i},{j}): {} vs {}",
                    m.get2(i, j).to_f64_c(),
                    m.get2(j, i).to_f64_c()
                )));
            }
        }
    }

    let mut a: Vec<F> = m.data().to_vec();
    // Eigenvector accumulator, column-major meaning: v[i*n+j] = component i of
    // eigenvector j.
    let mut v = vec![F::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = F::one();
    }

    let off_norm = |a: &[F]| {
        let mut s = F::zero();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s = s + a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };
    let conv_tol = F::from_f64_c(1e-14) * scale.max(F::one());

    for _ in 0..MAX_SWEEPS {
        if off_norm(&a) <= conv_tol {
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= conv_tol * F::from_f64_c(1e-2) {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (F::from_f64_c(2.0) * apq);
                let t = {
                    let sign = if theta >= F::zero() { F::one() } else { -F::one() };
                    sign / (theta.abs() + (theta * theta + F::one()).sqrt())
                };
                let c = F::one() / (t * t + F::one()).sqrt();
                let s = t * c;
                // Rotate rows/columns p and q of A.
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[j * n + j].partial_cmp(&a[i * n + i]).unwrap_or(std::cmp::Ordering::Equal)
    });
    let eigvals: Vec<F> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut rows = Vec::with_capacity(n * n);
    for &col in &order {
        for i in 0..n {
            rows.push(v[i * n + col]);
        }
    }
    Ok((eigvals, TensorBase::new(vec![n, n], rows)?))
}
