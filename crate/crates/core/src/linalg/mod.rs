pub mod dense;
pub mod sparse;
pub mod svd;

pub use dense::DenseMatrix;
pub use sparse::SparseMatrix;
pub use svd::{truncated_svd, SvdResult};

use crate::error::{Error, Result};

/// ‖A − P Qᵀ‖_F without materializing P Qᵀ, via the expansion
/// ‖A‖²_F − 2⟨A, PQᵀ⟩ + trace((PᵀP)(QᵀQ)). The squared distance is
/// clamped at 0 before the root; cancellation can leave a tiny negative
/// when the factorization is near exact.
pub fn frobenius_distance(a: &SparseMatrix, p: &DenseMatrix, q: &DenseMatrix) -> Result<f64> {
    if p.rows() != a.rows() || q.rows() != a.cols() || p.cols() != q.cols() {
        return Err(Error::Shape(format!(
            "frobenius_distance: A {}x{}, P {}x{}, Q {}x{}",
            a.rows(),
            a.cols(),
            p.rows(),
            p.cols(),
            q.rows(),
            q.cols()
        )));
    }
    // One dense residual row at a time: exact near zero residual, unlike
    // the ‖A‖² − 2⟨A,PQᵀ⟩ + ‖PQᵀ‖² expansion, which cancels catastrophically
    // there. O(m·n·k) work but only O(n) extra memory.
    let n = a.cols();
    let mut row = vec![0.0; n];
    let mut total = 0.0;
    for u in 0..a.rows() {
        let pu = p.row(u);
        for (v, slot) in row.iter_mut().enumerate() {
            *slot = -dense::dot(q.row(v), pu);
        }
        for (c, value) in a.row_entries(u) {
            row[c as usize] += value;
        }
        total += dense::dot(&row, &row);
    }
    Ok(total.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn fixture() -> (SparseMatrix, DenseMatrix, DenseMatrix) {
        let a = SparseMatrix::from_triplets(
            6,
            5,
            vec![
                (0, 1, 0.8),
                (1, 0, -0.4),
                (1, 3, 1.2),
                (2, 2, 0.5),
                (3, 4, -0.9),
                (4, 0, 0.3),
                (5, 3, 0.7),
            ],
        )
        .unwrap();
        let p = DenseMatrix::from_fn(6, 2, |i, j| ((i * 2 + j) as f64 * 0.43).sin());
        let q = DenseMatrix::from_fn(5, 2, |i, j| ((i + 3 * j) as f64 * 0.29).cos());
        (a, p, q)
    }

    #[test]
    fn zero_factors_give_norm_of_a() {
        let (a, _, _) = fixture();
        let p = DenseMatrix::zeros(6, 2);
        let q = DenseMatrix::zeros(5, 2);
        let d = frobenius_distance(&a, &p, &q).unwrap();
        assert_abs_diff_eq!(d, a.frobenius_norm(), epsilon = 1e-12);
    }

    #[test]
    fn exact_factorization_gives_zero() {
        // A dense rank-2 matrix expressed sparsely, factored exactly.
        let p = DenseMatrix::from_fn(4, 2, |i, j| (i + j + 1) as f64 * 0.5);
        let q = DenseMatrix::from_fn(3, 2, |i, j| (2 * i + j + 1) as f64 * 0.25);
        let prod = p.matmul_nt(&q).unwrap();
        let mut t = Vec::new();
        for i in 0..4u32 {
            for j in 0..3u32 {
                t.push((i, j, prod.get(i as usize, j as usize)));
            }
        }
        let a = SparseMatrix::from_triplets(4, 3, t).unwrap();
        let d = frobenius_distance(&a, &p, &q).unwrap();
        assert!(d <= 1e-9, "distance {d} not ~0");
    }

    #[test]
    fn matches_densified_oracle() {
        let (a, p, q) = fixture();
        let fast = frobenius_distance(&a, &p, &q).unwrap();
        let mut dense = a.to_dense();
        dense.axpy(-1.0, &p.matmul_nt(&q).unwrap()).unwrap();
        assert_abs_diff_eq!(fast, dense.frobenius_norm(), epsilon = 1e-9);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (a, p, _) = fixture();
        let q = DenseMatrix::zeros(4, 2);
        assert!(frobenius_distance(&a, &p, &q).is_err());
    }
}
