use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const SYMMETRY_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    /// Column `i` is the unit eigenvector for `values[i]`.
    pub vectors: DMatrix<f64>,
}

/// Cyclic Jacobi rotations until the off-diagonal Frobenius norm drops below `1e-12·‖S‖_F`.
pub fn symmetric_eigensolver(s: &DMatrix<f64>) -> Result<SymmetricEigen> {
    if !s.is_square() {
        return Err(Error::DimensionMismatch(format!("{}x{} is not square", s.nrows(), s.ncols())));
    }
    let n = s.nrows();
    let scale = s.norm().max(f64::MIN_POSITIVE);
    let asym = (s - s.transpose()).amax();
    if asym > SYMMETRY_TOL * scale.max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    let mut a = (s + s.transpose()) * 0.5;
    let mut v = DMatrix::<f64>::identity(n, n);
    let target = 1e-12 * scale;

    for _ in 0..MAX_SWEEPS {
        if off_norm(&a) <= target {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                rotate(&mut a, &mut v, p, q, c, sn);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let cols: Vec<DVector<f64>> = order.iter().map(|&i| v.column(i).into_owned()).collect();
    Ok(SymmetricEigen {
        values,
        vectors: if n == 0 { DMatrix::zeros(0, 0) } else { DMatrix::from_columns(&cols) },
    })
}

fn off_norm(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Applies `Jᵀ A J` and `V J` for the rotation in the `(p, q)` plane.
fn rotate(a: &mut DMatrix<f64>, v: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    let n = a.nrows();
    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_spectrum() {
        let e = symmetric_eigensolver(&DMatrix::identity(5, 5)).unwrap();
        assert!(e.values.iter().all(|v| (*v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn diagonal_sorted() {
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0, 2.0]));
        let e = symmetric_eigensolver(&s).unwrap();
        assert_eq!(e.values, vec![1.0, 2.0, 3.0]);
        assert_eq!(e.vectors.column(0)[1].abs(), 1.0);
    }

    #[test]
    fn rejects_asymmetric() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(symmetric_eigensolver(&s), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn two_by_two_closed_form() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let e = symmetric_eigensolver(&s).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-14);
        assert!((e.values[1] - 3.0).abs() < 1e-14);
    }
}
