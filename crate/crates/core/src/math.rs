//! Orthogonality and sparsity penalties, orthogonal initialization and SVD.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

fn require_square(m: &Matrix, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::InvalidArgument(format!(
            "{} requires a square matrix, got {}x{}",
            what,
            m.rows(),
            m.cols()
        )));
    }
    Ok(())
}

/// `MᵀM − 𝕀`.
fn gram_minus_identity(m: &Matrix) -> Matrix {
    let mut g = m.tr_matmul(m).expect("square");
    for i in 0..g.rows() {
        g[(i, i)] -= 1.0;
    }
    g
}

/// `MMᵀ − 𝕀`.
fn outer_gram_minus_identity(m: &Matrix) -> Matrix {
    gram_minus_identity(&m.transpose())
}

/// Seeded random rotation: QR of a standard Gaussian matrix with the
/// triangular factor's diagonal made positive.
pub fn random_orthogonal(dim: usize, seed: u64) -> Result<Matrix> {
    if dim == 0 {
        return Err(Error::InvalidArgument("dim must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussian = DMatrix::<f64>::from_fn(dim, dim, |_, _| StandardNormal.sample(&mut rng));
    let qr = gaussian.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(from_nalgebra(&q))
}

/// Double soft orthogonality: `‖VᵀV − 𝕀‖²_F + ‖VVᵀ − 𝕀‖²_F`.
pub fn dso_penalty(v: &Matrix) -> Result<f64> {
    require_square(v, "DSO")?;
    Ok(gram_minus_identity(v).frobenius_norm_sq() + outer_gram_minus_identity(v).frobenius_norm_sq())
}

/// Soft orthogonality: `‖VᵀV − 𝕀‖²_F`.
pub fn so_penalty(v: &Matrix) -> Result<f64> {
    require_square(v, "SO")?;
    Ok(gram_minus_identity(v).frobenius_norm_sq())
}

/// Gradient of [`dso_penalty`] with respect to `V`:
/// `4·V(VᵀV − 𝕀) + 4·(VVᵀ − 𝕀)V`.
pub fn dso_gradient(v: &Matrix) -> Result<Matrix> {
    require_square(v, "DSO")?;
    let a = v.matmul(&gram_minus_identity(v))?;
    let b = outer_gram_minus_identity(v).matmul(v)?;
    Ok(a.add(&b)?.scale(4.0))
}

pub fn l1_penalty(d: &[f64]) -> f64 {
    d.iter().map(|x| x.abs()).sum()
}

/// Subgradient of the L1 norm, 0 at the kink.
pub fn l1_subgradient(d: &[f64]) -> Vec<f64> {
    d.iter()
        .map(|&x| if x == 0.0 { 0.0 } else { x.signum() })
        .collect()
}

/// `‖VᵀV − 𝕀‖_F`, the un-squared deviation used for monitoring.
pub fn orthogonality_deviation(v: &Matrix) -> Result<f64> {
    require_square(v, "orthogonality deviation")?;
    Ok(gram_minus_identity(v).frobenius_norm())
}

/// Result of [`svd_decompose`]: `B = U · diag(s) · Vᵀ`.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
}

/// Singular value decomposition of a square matrix, singular values sorted
/// in descending order.
pub fn svd_decompose(b: &Matrix) -> Result<Svd> {
    require_square(b, "SVD")?;
    if !b.is_finite() {
        return Err(Error::InvalidArgument(
            "SVD input contains non-finite entries".into(),
        ));
    }
    let n = b.rows();
    let m = DMatrix::from_row_slice(n, n, b.data());
    let svd = m.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let s = svd.singular_values;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));

    let mut u_out = Matrix::zeros(n, n);
    let mut v_out = Matrix::zeros(n, n);
    let mut s_out = Vec::with_capacity(n);
    for (k, &src) in order.iter().enumerate() {
        s_out.push(s[src]);
        for i in 0..n {
            u_out[(i, k)] = u[(i, src)];
            v_out[(i, k)] = v_t[(src, i)];
        }
    }
    Ok(Svd {
        u: u_out,
        singular_values: s_out,
        v: v_out,
    })
}

fn from_nalgebra(m: &DMatrix<f64>) -> Matrix {
    let mut out = Matrix::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out[(i, j)] = m[(i, j)];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn random_orthogonal_examples() {
        let one = random_orthogonal(1, 3).unwrap();
        assert_eq!(one.data()[0].abs(), 1.0);

        let q = random_orthogonal(4, 7).unwrap();
        assert!(orthogonality_deviation(&q).unwrap() < 1e-8);

        let a = random_orthogonal(8, 7).unwrap();
        let b = random_orthogonal(8, 7).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), random_orthogonal(8, 8).unwrap().data());

        assert!(random_orthogonal(0, 1).is_err());
    }

    #[test]
    fn dso_examples() {
        assert_eq!(dso_penalty(&Matrix::identity(4)).unwrap(), 0.0);
        assert_eq!(dso_penalty(&Matrix::zeros(4, 4)).unwrap(), 8.0);
        let d = Matrix::from_diagonal(&[2.0, 1.0, 1.0]);
        assert!((dso_penalty(&d).unwrap() - 18.0).abs() < 1e-12);
        assert!(dso_penalty(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn so_examples() {
        assert_eq!(so_penalty(&Matrix::identity(4)).unwrap(), 0.0);
        assert_eq!(so_penalty(&Matrix::zeros(4, 4)).unwrap(), 4.0);
        let d = Matrix::from_diagonal(&[2.0, 1.0, 1.0]);
        assert!((so_penalty(&d).unwrap() - 9.0).abs() < 1e-12);
        assert!(so_penalty(&Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_penalty(&[0.0, 0.0, 0.0]), 0.0);
        assert_eq!(l1_penalty(&[1.0, -2.0, 3.0]), 6.0);
        assert_eq!(l1_penalty(&[0.5; 1024]), 512.0);
        assert_eq!(l1_subgradient(&[-2.0, 0.0, 0.1]), vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn deviation_examples() {
        assert_eq!(orthogonality_deviation(&Matrix::identity(5)).unwrap(), 0.0);
        let m = Matrix::identity(2).scale(2.0);
        assert!((orthogonality_deviation(&m).unwrap() - 18f64.sqrt()).abs() < 1e-12);
        assert!(orthogonality_deviation(&random_orthogonal(16, 11).unwrap()).unwrap() < 1e-8);
        assert!(orthogonality_deviation(&Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn svd_examples() {
        let s = svd_decompose(&Matrix::identity(3)).unwrap();
        for v in &s.singular_values {
            assert!((v - 1.0).abs() < 1e-14);
        }
        let s = svd_decompose(&Matrix::from_diagonal(&[1.0, 3.0, 2.0])).unwrap();
        for (v, e) in s.singular_values.iter().zip([3.0, 2.0, 1.0]) {
            assert!((v - e).abs() < 1e-14);
        }
        let mut bad = Matrix::identity(2);
        bad[(0, 1)] = f64::NAN;
        assert!(svd_decompose(&bad).is_err());
    }

    #[test]
    fn svd_reconstructs_random_matrix() {
        let b = random_matrix(8, 8, 42);
        let svd = svd_decompose(&b).unwrap();
        let rebuilt = svd
            .u
            .matmul(&Matrix::from_diagonal(&svd.singular_values))
            .unwrap()
            .matmul(&svd.v.transpose())
            .unwrap();
        assert!(rebuilt.sub(&b).unwrap().frobenius_norm() / b.frobenius_norm() < 1e-10);
        assert!(orthogonality_deviation(&svd.u).unwrap() < 1e-10);
        assert!(orthogonality_deviation(&svd.v).unwrap() < 1e-10);
        assert!(svd.singular_values.windows(2).all(|w| w[0] >= w[1]));
        assert!(svd.singular_values.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn dso_gradient_vanishes_at_identity() {
        let g = dso_gradient(&Matrix::identity(6)).unwrap();
        assert_eq!(g.frobenius_norm(), 0.0);
    }

    #[test]
    fn dso_gradient_matches_finite_differences() {
        let v = random_matrix(5, 5, 9);
        let g = dso_gradient(&v).unwrap();
        let h = 1e-6;
        for idx in 0..25 {
            let mut plus = v.clone();
            plus.data_mut()[idx] += h;
            let mut minus = v.clone();
            minus.data_mut()[idx] -= h;
            let fd = (dso_penalty(&plus).unwrap() - dso_penalty(&minus).unwrap()) / (2.0 * h);
            let an = g.data()[idx];
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "{idx}: {fd} vs {an}");
        }
    }

    proptest! {
        #[test]
        fn dso_splits_into_two_so_terms(dim in 1usize..12, seed in any::<u64>()) {
            let v = random_matrix(dim, dim, seed);
            let dso = dso_penalty(&v).unwrap();
            let split = so_penalty(&v).unwrap() + so_penalty(&v.transpose()).unwrap();
            prop_assert!((dso - split).abs() <= 1e-10 * dso.max(1.0));
        }

        #[test]
        fn dso_zero_iff_orthogonal(dim in 1usize..=16, seed in any::<u64>()) {
            let q = random_orthogonal(dim, seed).unwrap();
            prop_assert!(dso_penalty(&q).unwrap() < 1e-12);
            prop_assert!(orthogonality_deviation(&q).unwrap() < 1e-8);
            let v = random_matrix(dim, dim, seed);
            prop_assert!(dso_penalty(&v).unwrap() > 1e-12);
            prop_assert!(orthogonality_deviation(&v).unwrap() > 1e-12);
        }

        #[test]
        fn rotations_preserve_norms(dim in 1usize..=24, seed in any::<u64>()) {
            let q = random_orthogonal(dim, seed).unwrap();
            let x = random_matrix(1, dim, seed ^ 0xabc).into_vec();
            let qx = q.mul_vec(&x);
            let n0: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let n1: f64 = qx.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n0 - n1).abs() <= 1e-10 * n0.max(1e-300));
        }

        #[test]
        fn svd_reconstruction_property(dim in 1usize..=16, seed in any::<u64>()) {
            let b = random_matrix(dim, dim, seed);
            let svd = svd_decompose(&b).unwrap();
            let rebuilt = svd.u
                .matmul(&Matrix::from_diagonal(&svd.singular_values)).unwrap()
                .matmul(&svd.v.transpose()).unwrap();
            prop_assert!(rebuilt.sub(&b).unwrap().frobenius_norm() <= 1e-10 * b.frobenius_norm());
        }
    }
}
