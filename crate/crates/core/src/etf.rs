//! Simple equiangular tight frames used as a fixed classifier geometry.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, reduced_qr, Matrix, RngStream};

/// A `d×K` matrix whose unit columns have pairwise inner product `-1/(K-1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtfMatrix {
    z: Matrix,
    /// Columns of `z`, stored contiguously (`K×d`).
    vectors: Matrix,
}

impl EtfMatrix {
    /// Wraps an existing `d×K` frame matrix. No geometric check is made; use
    /// [`EtfMatrix::verify`] for that.
    pub fn from_matrix(z: Matrix) -> Result<Self> {
        if z.rows() <= z.cols() || z.cols() < 2 {
            return Err(Error::EtfCondition {
                dim: z.rows(),
                classes: z.cols(),
            });
        }
        let vectors = z.transpose();
        Ok(Self { z, vectors })
    }

    pub fn dim(&self) -> usize {
        self.z.rows()
    }

    pub fn classes(&self) -> usize {
        self.z.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.z
    }

    /// Column `z_c` as a contiguous slice.
    pub fn vector(&self, class: usize) -> &[f64] {
        self.vectors.row(class)
    }

    /// Gram matrix `ZᵀZ`.
    pub fn gram(&self) -> Matrix {
        let k = self.classes();
        Matrix::from_fn(k, k, |i, j| dot(self.vector(i), self.vector(j)))
    }

    pub fn verify(&self, tol: f64) -> EtfReport {
        verify_frame(&self.z, tol)
    }
}

/// Builds `Z = sqrt(K/(K-1)) · Q · (I_K - 11ᵀ/K)` where `Q` is the reduced QR
/// factor of a `d×K` standard normal matrix drawn from `rng`.
pub fn build_etf(dim: usize, classes: usize, rng: &mut RngStream) -> Result<EtfMatrix> {
    if dim <= classes || classes < 2 {
        return Err(Error::EtfCondition { dim, classes });
    }
    let a = Matrix::standard_normal(dim, classes, rng);
    let (q, _) = reduced_qr(&a)?;
    let k = classes as f64;
    let scale = libm::sqrt(k / (k - 1.0));
    // Q(I - 11ᵀ/K) subtracts each row's mean from that row.
    let z = Matrix::from_fn(dim, classes, |i, j| {
        let row = q.row(i);
        let mean = row.iter().sum::<f64>() / k;
        scale * (row[j] - mean)
    });
    EtfMatrix::from_matrix(z)
}

/// Maximum deviations of a candidate frame from the simple ETF geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtfReport {
    /// `max_i |‖z_i‖ - 1|`
    pub max_norm_err: f64,
    /// `max_{i≠j} |z_iᵀz_j + 1/(K-1)|`
    pub max_angle_err: f64,
    pub tol: f64,
}

impl EtfReport {
    pub fn passed(&self) -> bool {
        self.max_norm_err < self.tol && self.max_angle_err < self.tol
    }
}

/// Checks column norms and pairwise angles of a `d×K` matrix.
pub fn verify_frame(z: &Matrix, tol: f64) -> EtfReport {
    let k = z.cols();
    let cols: Vec<Vec<f64>> = (0..k).map(|j| z.column(j)).collect();
    let target = if k > 1 { -1.0 / (k as f64 - 1.0) } else { 0.0 };
    let mut max_norm_err = 0.0_f64;
    let mut max_angle_err = 0.0_f64;
    for i in 0..k {
        let norm = libm::sqrt(dot(&cols[i], &cols[i]));
        max_norm_err = max_norm_err.max((norm - 1.0).abs());
        for j in i + 1..k {
            max_angle_err = max_angle_err.max((dot(&cols[i], &cols[j]) - target).abs());
        }
    }
    EtfReport {
        max_norm_err,
        max_angle_err,
        tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn etf(d: usize, k: usize, seed: u64) -> EtfMatrix {
        build_etf(d, k, &mut RngStream::new(seed, 0)).unwrap()
    }

    #[test]
    fn two_classes_are_antipodal() {
        let e = etf(3, 2, 1);
        assert!((dot(e.vector(0), e.vector(1)) + 1.0).abs() < 1e-12);
        assert!(e.verify(1e-8).passed());
    }

    #[test]
    fn ten_classes_in_fifty_dims() {
        let e = etf(50, 10, 2);
        let gram = e.gram();
        for i in 0..10 {
            for j in 0..10 {
                let want = if i == j { 1.0 } else { -1.0 / 9.0 };
                assert!((gram.get(i, j) - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn rejects_dim_not_above_classes() {
        assert_eq!(
            build_etf(5, 10, &mut RngStream::new(0, 0)),
            Err(Error::EtfCondition { dim: 5, classes: 10 })
        );
        assert!(build_etf(10, 10, &mut RngStream::new(0, 0)).is_err());
        assert!(build_etf(4, 1, &mut RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn scaled_column_gives_unit_norm_error() {
        let e = etf(20, 5, 3);
        let z = e.matrix();
        let scaled = Matrix::from_fn(20, 5, |i, j| if j == 2 { 2.0 * z.get(i, j) } else { z.get(i, j) });
        let report = verify_frame(&scaled, 1e-8);
        assert!((report.max_norm_err - 1.0).abs() < 1e-10);
        assert!(!report.passed());
    }

    #[test]
    fn duplicated_column_gives_angle_error() {
        let k = 6;
        let e = etf(20, k, 4);
        let z = e.matrix();
        let dup = Matrix::from_fn(20, k, |i, j| if j == 1 { z.get(i, 0) } else { z.get(i, j) });
        let report = verify_frame(&dup, 1e-8);
        // the duplicated pair has dot product 1 instead of -1/(K-1)
        let want = 1.0 + 1.0 / (k as f64 - 1.0);
        assert!((report.max_angle_err - want).abs() < 1e-10);
        assert!(report.max_norm_err < 1e-8);
    }

    #[test]
    fn same_seed_same_frame_different_seed_same_gram() {
        assert_eq!(etf(30, 7, 9), etf(30, 7, 9));
        let (a, b) = (etf(30, 7, 9), etf(30, 7, 10));
        assert_ne!(a.matrix(), b.matrix());
        let diff = a.gram().sub(&b.gram()).unwrap().frobenius_norm();
        assert!(diff < 1e-8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(30))]

        #[test]
        fn gram_matches_closed_form(seed in any::<u64>(), k in 2usize..20, extra in 1usize..30) {
            let e = etf(k + extra, k, seed);
            let gram = e.gram();
            let kf = k as f64;
            for i in 0..k {
                for j in 0..k {
                    let want = if i == j { kf / (kf - 1.0) } else { 0.0 } - 1.0 / (kf - 1.0);
                    prop_assert!((gram.get(i, j) - want).abs() < 1e-8);
                }
            }
        }
    }
}
