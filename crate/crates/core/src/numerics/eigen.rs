use nalgebra::{DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};

use super::{axpy, dot, norm, DetRng, Matrix};
use crate::error::{Error, Result};

/// Operators up to this size are materialized and eigendecomposed densely.
pub const DENSE_EIGEN_LIMIT: usize = 200;

const LANCZOS_MAX_DIM: usize = 2000;

/// Materializes a linear operator column by column.
pub fn dense_from_operator<F>(mut apply: F, dim: usize) -> Result<Matrix>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut m = Matrix::zeros(dim, dim);
    let mut e = vec![0.0; dim];
    for j in 0..dim {
        e[j] = 1.0;
        let col = apply(&e)?;
        if col.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: col.len(),
                line: None,
            });
        }
        m.set_column(j, &DVector::from_vec(col));
        e[j] = 0.0;
    }
    Ok(m)
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn symmetric_eigenvalues(m: &Matrix) -> Vec<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let mut ev: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Spectral norm of the symmetric part of `m` (largest |eigenvalue|).
pub fn spectral_norm_symmetric(m: &Matrix) -> f64 {
    symmetric_eigenvalues(m)
        .into_iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Smallest eigenvalue of a symmetric operator.
///
/// Dense decomposition for `dim <= 200`, Lanczos with full
/// reorthogonalization above that.
pub fn smallest_eigenvalue<F>(mut apply: F, dim: usize) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if dim == 0 {
        return Err(Error::Precondition("operator dimension must be >= 1".into()));
    }
    if dim <= DENSE_EIGEN_LIMIT {
        let m = dense_from_operator(&mut apply, dim)?;
        return Ok(symmetric_eigenvalues(&m)[0]);
    }
    if dim > LANCZOS_MAX_DIM {
        return Err(Error::DimensionTooLarge {
            dim,
            max: LANCZOS_MAX_DIM,
        });
    }
    lanczos_smallest(apply, dim)
}

fn lanczos_smallest<F>(mut apply: F, dim: usize) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut rng = DetRng::new(0x01a2_c205);
    let mut q: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n0 = norm(&q);
    q.iter_mut().for_each(|v| *v /= n0);

    let mut basis: Vec<Vec<f64>> = vec![q];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut last = f64::NAN;
    for k in 0..dim {
        let mut w = apply(&basis[k])?;
        let alpha = dot(&w, &basis[k]);
        alphas.push(alpha);
        // Full reorthogonalization, twice for stability.
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&w, b);
                axpy(-c, b, &mut w);
            }
        }
        let beta = norm(&w);

        let t = tridiagonal(&alphas, &betas);
        let eig = SymmetricEigen::new(t);
        let (imin, &theta) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty");
        let ritz_residual = (beta * eig.eigenvectors[(k, imin)]).abs();
        let scale = eig.eigenvalues.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
        if ritz_residual <= 1e-10 * scale || beta <= 1e-14 * scale || k + 1 == dim {
            return Ok(theta);
        }
        if (theta - last).abs() <= 1e-13 * scale && k > 50 {
            return Ok(theta);
        }
        last = theta;
        betas.push(beta);
        basis.push(w.into_iter().map(|v| v / beta).collect());
    }
    Err(Error::NoConvergence {
        iterations: dim,
        residual: f64::NAN,
    })
}

fn tridiagonal(alphas: &[f64], betas: &[f64]) -> Matrix {
    let k = alphas.len();
    let mut t = Matrix::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alphas[i];
        if i + 1 < k {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn op(m: &Matrix) -> impl FnMut(&[f64]) -> Result<Vec<f64>> + '_ {
        move |v| Ok((m * DVector::from_column_slice(v)).as_slice().to_vec())
    }

    fn random_symmetric(n: usize, seed: u64) -> Matrix {
        let mut rng = DetRng::new(seed);
        let g = Matrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
        (&g + g.transpose()) * 0.5
    }

    #[test]
    fn diagonal_and_identity() {
        let d = Matrix::from_diagonal(&DVector::from_vec(vec![1.0, 5.0, 9.0]));
        assert!((smallest_eigenvalue(op(&d), 3).unwrap() - 1.0).abs() < 1e-14);
        let i = Matrix::identity(7, 7);
        assert!((smallest_eigenvalue(op(&i), 7).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn random_symmetric_matches_dense_oracle() {
        let m = random_symmetric(20, 4);
        let got = smallest_eigenvalue(op(&m), 20).unwrap();
        let oracle = SymmetricEigen::new(m.clone()).eigenvalues.min();
        assert!((got - oracle).abs() <= 1e-6 * oracle.abs());
    }

    #[test]
    fn lanczos_path_matches_dense() {
        let n = 240;
        let m = random_symmetric(n, 9);
        let got = smallest_eigenvalue(op(&m), n).unwrap();
        let oracle = SymmetricEigen::new(m.clone()).eigenvalues.min();
        assert!((got - oracle).abs() <= 1e-6 * oracle.abs(), "{got} vs {oracle}");
    }

    #[test]
    fn spectral_norm_takes_largest_magnitude() {
        let d = Matrix::from_diagonal(&DVector::from_vec(vec![-4.0, 1.0, 3.0]));
        assert_eq!(spectral_norm_symmetric(&d), 4.0);
    }
}
