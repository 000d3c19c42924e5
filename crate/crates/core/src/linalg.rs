//! Dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Solves `A u = η B u` for symmetric `A` and symmetric positive-definite `B`
/// by Cholesky reduction to a standard symmetric problem. Eigenvalues come
/// back ascending; eigenvector columns satisfy `uᵀ B u = 1`.
pub fn generalized_eigen(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || b.ncols() != n {
        return Err(Error::Numerical("generalized eigenproblem needs square matrices of one size".into()));
    }
    if a.iter().chain(b.iter()).any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite entry in eigenproblem".into()));
    }
    let chol = symmetrize(b)
        .cholesky()
        .ok_or_else(|| Error::Numerical("constraint matrix is not positive definite".into()))?;
    let l = chol.l();
    // C = L⁻¹ A L⁻ᵀ
    let left = l
        .solve_lower_triangular(a)
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    let c = l
        .solve_lower_triangular(&left.transpose())
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    let eig = symmetrize(&c).symmetric_eigen();
    if eig.eigenvalues.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("eigen solver produced non-finite values".into()));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let q = DMatrix::from_columns(&order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect::<Vec<_>>());
    let u = l
        .transpose()
        .solve_upper_triangular(&q)
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    Ok((values, u))
}

/// Flips each column so its first entry of largest magnitude is positive.
pub fn fix_column_signs(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let mut pivot = 0.0f64;
        for &x in col.iter() {
            if x.abs() > pivot.abs() {
                pivot = x;
            }
        }
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
}

/// Block-diagonal matrix from square blocks.
pub fn block_diagonal(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut at = 0;
    for b in blocks {
        out.view_mut((at, at), (b.nrows(), b.ncols())).copy_from(b);
        at += b.nrows();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(n: usize, m: usize, r: &mut rng::Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(r))
    }

    #[test]
    fn solves_random_pencils() {
        let mut r = rng::seeded(1);
        for n in [1, 3, 7] {
            let a = symmetrize(&random(n, n, &mut r));
            let g = random(n, n, &mut r);
            let b = &g * g.transpose() + DMatrix::identity(n, n);
            let (vals, u) = generalized_eigen(&a, &b).unwrap();
            for w in vals.as_slice().windows(2) {
                assert!(w[0] <= w[1]);
            }
            let gram = u.transpose() * &b * &u;
            assert!((gram - DMatrix::identity(n, n)).norm() < 1e-10);
            let residual = &a * &u - &b * &u * DMatrix::from_diagonal(&vals);
            assert!(residual.norm() < 1e-9);
        }
    }

    #[test]
    fn rejects_indefinite_constraint() {
        let a = DMatrix::identity(2, 2);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(generalized_eigen(&a, &b), Err(Error::Numerical(_))));
    }

    #[test]
    fn sign_convention() {
        let mut m = DMatrix::from_row_slice(2, 2, &[0.1, 3.0, -2.0, -3.0]);
        fix_column_signs(&mut m);
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[-0.1, 3.0, 2.0, -3.0]));
    }
}
