use crate::error::{Error, Result};
use crate::linalg::dense::DenseMatrix;

/// Compressed sparse row f64 matrix. Column indices are strictly
/// increasing within each row and all stored values are finite and
/// nonzero, so iteration order (row-ascending, then column-ascending)
/// is canonical and every kernel below is bit-reproducible.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Build from (row, col, value) triplets. Triplets are sorted into
    /// canonical order; duplicates, non-finite or zero values, and
    /// out-of-range indices are rejected.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        mut triplets: Vec<(u32, u32, f64)>,
    ) -> Result<Self> {
        if cols > u32::MAX as usize || rows > u32::MAX as usize {
            return Err(Error::Shape("matrix dimensions exceed u32 range".into()));
        }
        for &(r, c, v) in &triplets {
            if r as usize >= rows || c as usize >= cols {
                return Err(Error::Shape(format!(
                    "triplet ({r},{c}) outside {rows}x{cols}"
                )));
            }
            if !v.is_finite() || v == 0.0 {
                return Err(Error::Numerical(format!(
                    "sparse entry ({r},{c}) has invalid value {v}"
                )));
            }
        }
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        for w in triplets.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(Error::Shape(format!(
                    "duplicate sparse entry at ({},{})",
                    w[0].0, w[0].1
                )));
            }
        }
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_ptr.push(0);
        let mut next = 0usize;
        for &(r, c, v) in &triplets {
            while next < r as usize {
                row_ptr.push(col_idx.len());
                next += 1;
            }
            col_idx.push(c);
            values.push(v);
        }
        while next < rows {
            row_ptr.push(col_idx.len());
            next += 1;
        }
        Ok(SparseMatrix {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// (column, value) pairs of one row, column-ascending.
    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (u32, f64)> + '_ {
        let lo = self.row_ptr[r];
        let hi = self.row_ptr[r + 1];
        self.col_idx[lo..hi]
            .iter()
            .zip(&self.values[lo..hi])
            .map(|(&c, &v)| (c, v))
    }

    /// All (row, col, value) entries in canonical order.
    pub fn iter_entries(&self) -> impl Iterator<Item = (u32, u32, f64)> + '_ {
        (0..self.rows).flat_map(move |r| self.row_entries(r).map(move |(c, v)| (r as u32, c, v)))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// C = A · B (sparse × dense). Each output row accumulates scaled
    /// rows of B in column-ascending order.
    pub fn spmm(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != b.rows() {
            return Err(Error::Shape(format!(
                "spmm {}x{} · {}x{}",
                self.rows,
                self.cols,
                b.rows(),
                b.cols()
            )));
        }
        let d = b.cols();
        let mut out = DenseMatrix::zeros(self.rows, d);
        for r in 0..self.rows {
            let lo = self.row_ptr[r];
            let hi = self.row_ptr[r + 1];
            let c_row = &mut out.values_mut()[r * d..(r + 1) * d];
            for e in lo..hi {
                let v = self.values[e];
                let b_row = b.row(self.col_idx[e] as usize);
                for (c, &x) in c_row.iter_mut().zip(b_row) {
                    *c += v * x;
                }
            }
        }
        Ok(out)
    }

    /// C = Aᵀ · B without materializing the transpose. Rows are visited
    /// ascending and columns ascending within each row, fixing the
    /// accumulation order into every output row.
    pub fn spmm_t(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != b.rows() {
            return Err(Error::Shape(format!(
                "spmm_t ({}x{})ᵀ · {}x{}",
                self.rows,
                self.cols,
                b.rows(),
                b.cols()
            )));
        }
        let d = b.cols();
        let mut out = DenseMatrix::zeros(self.cols, d);
        for r in 0..self.rows {
            let lo = self.row_ptr[r];
            let hi = self.row_ptr[r + 1];
            let b_row = b.row(r);
            for e in lo..hi {
                let v = self.values[e];
                let c = self.col_idx[e] as usize;
                let c_row = &mut out.values_mut()[c * d..(c + 1) * d];
                for (o, &x) in c_row.iter_mut().zip(b_row) {
                    *o += v * x;
                }
            }
        }
        Ok(out)
    }

    /// Explicit transpose (test oracle for spmm_t).
    pub fn transpose(&self) -> SparseMatrix {
        let triplets = self
            .iter_entries()
            .map(|(r, c, v)| (c, r, v))
            .collect::<Vec<_>>();
        SparseMatrix::from_triplets(self.cols, self.rows, triplets)
            .expect("transpose of a valid matrix is valid")
    }

    /// Densify (test oracle; avoid on large inputs).
    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for (r, c, v) in self.iter_entries() {
            out.set(r as usize, c as usize, v);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random_sparse(rows: usize, cols: usize, density: f64, seed: u64) -> SparseMatrix {
        let mut rng = crate::rng::seeded(seed, crate::rng::Stream::Init);
        let mut triplets = Vec::new();
        for r in 0..rows as u32 {
            for c in 0..cols as u32 {
                if rng.random::<f64>() < density {
                    triplets.push((r, c, rng.random::<f64>() * 2.0 - 1.0));
                }
            }
        }
        if triplets.is_empty() {
            triplets.push((0, 0, 1.0));
        }
        SparseMatrix::from_triplets(rows, cols, triplets).unwrap()
    }

    #[test]
    fn from_triplets_rejects_duplicates() {
        let t = vec![(0, 0, 1.0), (0, 0, 2.0)];
        assert!(SparseMatrix::from_triplets(2, 2, t).is_err());
    }

    #[test]
    fn from_triplets_rejects_out_of_range() {
        assert!(SparseMatrix::from_triplets(2, 2, vec![(2, 0, 1.0)]).is_err());
    }

    #[test]
    fn from_triplets_rejects_nonfinite() {
        assert!(SparseMatrix::from_triplets(1, 1, vec![(0, 0, f64::NAN)]).is_err());
        assert!(SparseMatrix::from_triplets(1, 1, vec![(0, 0, 0.0)]).is_err());
    }

    #[test]
    fn canonical_order_independent_of_input_order() {
        let a = SparseMatrix::from_triplets(2, 2, vec![(1, 1, 3.0), (0, 0, 1.0)]).unwrap();
        let b = SparseMatrix::from_triplets(2, 2, vec![(0, 0, 1.0), (1, 1, 3.0)]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spmm_identity_returns_b() {
        let eye =
            SparseMatrix::from_triplets(3, 3, vec![(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0)]).unwrap();
        let b = DenseMatrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64);
        assert_eq!(eye.spmm(&b).unwrap(), b);
        assert_eq!(eye.spmm_t(&b).unwrap(), b);
    }

    #[test]
    fn spmm_zero_row_yields_zero_output_row() {
        let a = SparseMatrix::from_triplets(2, 2, vec![(1, 0, 2.0)]).unwrap();
        let b = DenseMatrix::from_fn(2, 2, |i, j| (i + j + 1) as f64);
        let c = a.spmm(&b).unwrap();
        assert_eq!(c.row(0), &[0.0, 0.0]);
        assert_eq!(c.row(1), &[2.0, 4.0]);
    }

    #[test]
    fn spmm_matches_dense_oracle() {
        let a = random_sparse(5, 4, 0.5, 11);
        let b = DenseMatrix::from_fn(4, 3, |i, j| (i as f64 - j as f64) * 0.7);
        let fast = a.spmm(&b).unwrap();
        let oracle = a.to_dense().matmul(&b).unwrap();
        for (x, y) in fast.values().iter().zip(oracle.values()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn spmm_t_matches_explicit_transpose() {
        let a = random_sparse(6, 5, 0.4, 12);
        let b = DenseMatrix::from_fn(6, 3, |i, j| (2 * i + j) as f64 * 0.1 - 0.5);
        let fast = a.spmm_t(&b).unwrap();
        let oracle = a.transpose().spmm(&b).unwrap();
        for (x, y) in fast.values().iter().zip(oracle.values()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn spmm_t_one_by_one() {
        let a = SparseMatrix::from_triplets(1, 1, vec![(0, 0, 2.0)]).unwrap();
        let b = DenseMatrix::from_vec(1, 1, vec![3.0]).unwrap();
        assert_eq!(a.spmm_t(&b).unwrap().values(), &[6.0]);
    }

    #[test]
    fn spmm_shape_errors() {
        let a = random_sparse(3, 4, 0.5, 13);
        let b = DenseMatrix::zeros(3, 2);
        assert!(a.spmm(&b).is_err());
        let c = DenseMatrix::zeros(4, 2);
        assert!(a.spmm_t(&c).is_err());
    }

    #[test]
    fn spmm_linearity() {
        let a = random_sparse(5, 5, 0.5, 14);
        let b = DenseMatrix::from_fn(5, 2, |i, j| (i + j) as f64 * 0.3);
        let c = DenseMatrix::from_fn(5, 2, |i, j| (i as f64 - 2.0 * j as f64) * 0.2);
        let alpha = 1.7;
        let mut combo = b.clone();
        combo.scale(alpha);
        combo.axpy(1.0, &c).unwrap();
        let lhs = a.spmm(&combo).unwrap();
        let mut rhs = a.spmm(&b).unwrap();
        rhs.scale(alpha);
        rhs.axpy(1.0, &a.spmm(&c).unwrap()).unwrap();
        for (x, y) in lhs.values().iter().zip(rhs.values()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-10);
        }
    }
}
