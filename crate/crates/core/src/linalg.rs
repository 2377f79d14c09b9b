//! Small dense helpers shared by the model, filter and Poincaré modules.

use nalgebra::{DMatrix, DVector};

/// Matrix exponential by scaling and squaring with a truncated Taylor series.
///
/// Intended for the small generators handled here (d ≤ 64); the series is
/// summed until the next term drops below machine precision relative to the sum.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(m.is_square(), "expm needs a square matrix");
    let n = m.nrows();
    let norm = m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs())) * n as f64;
    let mut squarings = 0u32;
    if norm > 0.5 {
        squarings = (norm / 0.5).log2().ceil() as u32;
    }
    let scaled = m / 2f64.powi(squarings as i32);

    let mut sum = DMatrix::<f64>::identity(n, n);
    let mut term = DMatrix::<f64>::identity(n, n);
    for k in 1..40 {
        term = &term * &scaled / k as f64;
        sum += &term;
        if term.amax() <= f64::EPSILON * sum.amax() {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Orthogonalizes `v` against the orthonormal columns in `basis` (two passes of
/// modified Gram-Schmidt) and returns the residual.
pub fn orthogonalize(v: &DVector<f64>, basis: &[DVector<f64>]) -> DVector<f64> {
    let mut r = v.clone();
    for _ in 0..2 {
        for q in basis {
            let c = q.dot(&r);
            r.axpy(-c, q, 1.0);
        }
    }
    r
}

/// Orthonormal basis of the complement of `w` in ℝ^n (n − 1 columns).
pub fn complement_basis(w: &DVector<f64>) -> DMatrix<f64> {
    let n = w.len();
    let mut basis: Vec<DVector<f64>> = vec![w.normalize()];
    for i in 0..n {
        if basis.len() == n {
            break;
        }
        let e = DVector::from_fn(n, |j, _| if j == i { 1.0 } else { 0.0 });
        let r = orthogonalize(&e, &basis);
        let nr = r.norm();
        if nr > 1e-8 {
            basis.push(r / nr);
        }
    }
    DMatrix::from_columns(&basis[1..])
}

/// Pairwise summation; the result depends only on the order of `xs`.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expm_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 0.0, 2.5]));
        let e = expm(&m);
        assert!((e[(0, 0)] - (-1.0f64).exp()).abs() < 1e-14);
        assert!((e[(1, 1)] - 1.0).abs() < 1e-14);
        assert!((e[(2, 2)] - 2.5f64.exp()).abs() < 1e-12);
        assert!(e[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn expm_two_state_generator_matches_closed_form() {
        // P(t) = Π + e^{-(a+b)t}(I - Π) with Π rows (b, a)/(a+b).
        let (a, b, t) = (1.0, 2.0, 0.7);
        let g = DMatrix::from_row_slice(2, 2, &[-a, a, b, -b]) * t;
        let e = expm(&g);
        let s = a + b;
        let decay = (-s * t).exp();
        let p11 = b / s + decay * a / s;
        let p21 = b / s - decay * b / s;
        assert!((e[(0, 0)] - p11).abs() < 1e-13);
        assert!((e[(1, 0)] - p21).abs() < 1e-13);
    }

    #[test]
    fn complement_basis_is_orthonormal() {
        let w = DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
        let b = complement_basis(&w);
        assert_eq!(b.ncols(), 3);
        let g = b.transpose() * &b;
        assert!((g - DMatrix::identity(3, 3)).amax() < 1e-12);
        assert!((b.transpose() * w).amax() < 1e-12);
    }

    #[test]
    fn pairwise_sum_matches_naive() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64 * 0.5).collect();
        assert_eq!(pairwise_sum(&xs), 249_750.0);
    }
}
