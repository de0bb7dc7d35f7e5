//! Small dense linear-algebra helpers shared by the solvers and diagnostics.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative pivot floor below which a Cholesky factor is treated as singular.
const PIVOT_FLOOR: f64 = 1e-14;

pub fn outer(a: &Vector, b: &Vector) -> Matrix {
    a * b.transpose()
}

pub fn max_asymmetry(m: &Matrix) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn ensure_square(m: &Matrix, context: &'static str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            context,
            expected: m.nrows(),
            found: m.ncols(),
        });
    }
    Ok(())
}

pub fn ensure_len(v: &Vector, len: usize, context: &'static str) -> Result<()> {
    if v.len() != len {
        return Err(Error::DimensionMismatch {
            context,
            expected: len,
            found: v.len(),
        });
    }
    Ok(())
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// descending order. Columns of `vectors` are the matching unit eigenvectors.
#[derive(Debug, Clone)]
pub struct SortedEigen {
    pub values: Vector,
    pub vectors: Matrix,
}

pub fn sym_eigen(m: &Matrix) -> SortedEigen {
    let eig = SymmetricEigen::new(m.clone());
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = Vector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    SortedEigen { values, vectors }
}

/// Same as [`sym_eigen`] with eigenvalues clamped at zero, for matrices that
/// are PSD up to roundoff.
pub fn psd_eigen(m: &Matrix) -> SortedEigen {
    let mut e = sym_eigen(m);
    e.values.apply(|v| *v = v.max(0.0));
    e
}

pub fn sym_extremes(m: &Matrix) -> (f64, f64) {
    let e = SymmetricEigen::new(m.clone());
    (e.eigenvalues.min(), e.eigenvalues.max())
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(m: &Matrix) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    if m.nrows() == 1 || m.ncols() == 1 {
        return m.norm();
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
}

impl SpdFactor {
    pub fn new(m: &Matrix, context: &str) -> Result<Self> {
        let scale = m.diagonal().amax().max(f64::MIN_POSITIVE);
        let chol = Cholesky::new(m.clone()).ok_or_else(|| {
            Error::SingularGeometry(format!("{context}: matrix is not positive definite"))
        })?;
        let min_pivot = chol
            .l_dirty()
            .diagonal()
            .iter()
            .fold(f64::INFINITY, |a, &b| a.min(b * b));
        if min_pivot <= PIVOT_FLOOR * scale {
            return Err(Error::SingularGeometry(format!(
                "{context}: pivot {min_pivot:e} below floor relative to scale {scale:e}"
            )));
        }
        Ok(Self { chol })
    }

    pub fn solve(&self, b: &Vector) -> Vector {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> Matrix {
        let inv = self.chol.inverse();
        symmetrize(&inv)
    }
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Haar-distributed orthogonal matrix via QR of a Gaussian matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Matrix {
    let g = Matrix::from_fn(d, d, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn gaussian_vector<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vector {
    Vector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn unit_vector<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vector {
    loop {
        let v = gaussian_vector(d, rng);
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Random symmetric PSD matrix `X Xᵀ / cols` plus `shift·I`.
pub fn random_psd<R: Rng + ?Sized>(d: usize, cols: usize, shift: f64, rng: &mut R) -> Matrix {
    let x = gaussian_matrix(d, cols, rng);
    let mut c = &x * x.transpose() / cols.max(1) as f64;
    for i in 0..d {
        c[(i, i)] += shift;
    }
    symmetrize(&c)
}

pub fn softmax(z: &Vector) -> Vector {
    let m = z.max();
    let e = z.map(|x| (x - m).exp());
    let s = e.sum();
    e / s
}

pub fn log_softmax(z: &Vector) -> Vector {
    let m = z.max();
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    z.map(|x| x - lse)
}

pub fn argmax(z: &Vector) -> usize {
    z.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

pub fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

pub fn rows_to_matrix(rows: &[Vec<f64>], context: &'static str) -> Result<Matrix> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    for r in rows {
        if r.len() != m {
            return Err(Error::DimensionMismatch {
                context,
                expected: m,
                found: r.len(),
            });
        }
    }
    Ok(Matrix::from_fn(n, m, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eigen_is_sorted_descending() {
        let m = Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 9.0, 0.5]));
        let e = sym_eigen(&m);
        assert_eq!(e.values.as_slice(), &[9.0, 2.0, 0.5]);
        assert!((e.vectors[(1, 0)].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_orthogonal(12, &mut rng);
        let err = (&q.transpose() * &q - Matrix::identity(12, 12)).norm();
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn singular_factor_rejected() {
        let m = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 0.0]));
        assert!(matches!(
            SpdFactor::new(&m, "t"),
            Err(Error::SingularGeometry(_))
        ));
    }

    #[test]
    fn log_softmax_is_stable() {
        let z = Vector::from_vec(vec![1000.0, 0.0]);
        let l = log_softmax(&z);
        assert!(l[0].abs() < 1e-12);
        assert!((l[1] + 1000.0).abs() < 1e-9);
    }
}
