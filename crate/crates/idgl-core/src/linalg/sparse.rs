use crate::error::{IdglError, Result};
use crate::linalg::dense::Dense;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Compressed sparse row f64 matrix with sorted, duplicate-free column
/// indices in every row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrSparse {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrSparse {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CsrSparse {
            rows,
            cols,
            row_ptr: vec![0; rows + 1],
            col_idx: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        CsrSparse {
            rows: n,
            cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            vals: vec![1.0; n],
        }
    }

    /// Builds from `(row, col, value)` triplets. Triplets may arrive in any
    /// order; duplicates, out-of-range indices and non-finite values are
    /// rejected. Exact zeros are kept out of the structure.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        for (r, c, v) in triplets {
            if r >= rows || c >= cols {
                return Err(IdglError::InvalidInput(format!(
                    "triplet ({r}, {c}) out of range for {rows}x{cols}"
                )));
            }
            if !v.is_finite() {
                return Err(IdglError::NonFinite("sparse triplet"));
            }
            if v != 0.0 {
                entries.push((r, c, v));
            }
        }
        entries.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(IdglError::InvalidInput(format!(
                    "duplicate triplet at ({}, {})",
                    w[0].0, w[0].1
                )));
            }
        }
        let mut row_ptr = vec![0usize; rows + 1];
        for &(r, _, _) in &entries {
            row_ptr[r + 1] += 1;
        }
        for i in 0..rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        let (col_idx, vals) = entries.iter().map(|&(_, c, v)| (c, v)).unzip();
        Ok(CsrSparse {
            rows,
            cols,
            row_ptr,
            col_idx,
            vals,
        })
    }

    pub fn from_dense(m: &Dense) -> Self {
        let triplets = (0..m.rows()).flat_map(|i| {
            m.row(i)
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(move |(j, &v)| (i, j, v))
                .collect::<Vec<_>>()
        });
        // Dense input cannot produce duplicates or out-of-range indices.
        CsrSparse::from_triplets(m.rows(), m.cols(), triplets).expect("valid by construction")
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Column indices and values of row `i`.
    #[inline]
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[span.clone()], &self.vals[span])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(pos) => vals[pos],
            Err(_) => 0.0,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).map(move |(&c, &v)| (i, c, v))
        })
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> CsrSparse {
        CsrSparse {
            vals: self.vals.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn to_dense(&self) -> Dense {
        let mut out = Dense::zeros(self.rows, self.cols);
        for (i, j, v) in self.iter() {
            out[(i, j)] = v;
        }
        out
    }

    pub fn transpose(&self) -> CsrSparse {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.col_idx {
            counts[c + 1] += 1;
        }
        for i in 0..self.cols {
            counts[i + 1] += counts[i];
        }
        let row_ptr = counts.clone();
        let mut col_idx = vec![0usize; self.nnz()];
        let mut vals = vec![0.0; self.nnz()];
        let mut cursor = counts;
        for (i, j, v) in self.iter() {
            let pos = cursor[j];
            col_idx[pos] = i;
            vals[pos] = v;
            cursor[j] += 1;
        }
        CsrSparse {
            rows: self.cols,
            cols: self.rows,
            row_ptr,
            col_idx,
            vals,
        }
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols && self.transpose() == *self
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.row(i).1.iter().sum())
            .collect()
    }

    /// `C = S * B` with a dense right operand.
    pub fn spmm(&self, b: &Dense) -> Result<Dense> {
        if self.cols != b.rows() {
            return Err(IdglError::dims("spmm", self.shape(), b.shape()));
        }
        let n = b.cols();
        let mut c = Dense::zeros(self.rows, n);
        if n == 0 || self.nnz() == 0 {
            return Ok(c);
        }
        let do_row = |i: usize, out: &mut [f64]| {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                for (o, &x) in out.iter_mut().zip(b.row(j)) {
                    *o += v * x;
                }
            }
        };
        #[cfg(feature = "parallel")]
        {
            c.as_mut_slice()
                .par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, out)| do_row(i, out));
        }
        #[cfg(not(feature = "parallel"))]
        {
            for i in 0..self.rows {
                do_row(i, c.row_mut(i));
            }
        }
        Ok(c)
    }

    /// Sequential reference spmm, kept for the kernel benchmarks.
    pub fn spmm_seq(&self, b: &Dense) -> Result<Dense> {
        if self.cols != b.rows() {
            return Err(IdglError::dims("spmm", self.shape(), b.shape()));
        }
        let n = b.cols();
        let mut c = Dense::zeros(self.rows, n);
        for i in 0..self.rows {
            let (cols, vals) = self.row(i);
            let out = c.row_mut(i);
            for (&j, &v) in cols.iter().zip(vals) {
                for (o, &x) in out.iter_mut().zip(b.row(j)) {
                    *o += v * x;
                }
            }
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CsrSparse {
        CsrSparse::from_triplets(3, 4, vec![(0, 1, 2.0), (2, 0, -1.0), (0, 3, 4.0), (1, 2, 5.0)])
            .unwrap()
    }

    #[test]
    fn triplets_round_trip() {
        let s = sample();
        assert_eq!(s.nnz(), 4);
        assert_eq!(s.get(0, 1), 2.0);
        assert_eq!(s.get(0, 2), 0.0);
        assert_eq!(s.get(2, 0), -1.0);
        let d = s.to_dense();
        assert_eq!(CsrSparse::from_dense(&d), s);
    }

    #[test]
    fn rejects_bad_triplets() {
        assert!(CsrSparse::from_triplets(2, 2, vec![(2, 0, 1.0)]).is_err());
        assert!(CsrSparse::from_triplets(2, 2, vec![(0, 0, 1.0), (0, 0, 2.0)]).is_err());
        assert!(CsrSparse::from_triplets(2, 2, vec![(0, 0, f64::NAN)]).is_err());
    }

    #[test]
    fn drops_explicit_zeros() {
        let s = CsrSparse::from_triplets(2, 2, vec![(0, 0, 0.0), (1, 1, 3.0)]).unwrap();
        assert_eq!(s.nnz(), 1);
    }

    #[test]
    fn transpose_involution() {
        let s = sample();
        let t = s.transpose();
        assert_eq!(t.shape(), (4, 3));
        assert_eq!(t.get(1, 0), 2.0);
        assert_eq!(t.transpose(), s);
    }

    #[test]
    fn symmetry_check() {
        let sym =
            CsrSparse::from_triplets(2, 2, vec![(0, 1, 3.0), (1, 0, 3.0), (1, 1, 1.0)]).unwrap();
        assert!(sym.is_symmetric());
        let asym = CsrSparse::from_triplets(2, 2, vec![(0, 1, 3.0)]).unwrap();
        assert!(!asym.is_symmetric());
    }

    #[test]
    fn spmm_matches_dense() {
        let s = sample();
        let b = Dense::from_vec(4, 2, vec![1.0, 0.0, 0.5, -1.0, 2.0, 2.0, 0.0, 1.0]).unwrap();
        let expect = crate::linalg::kernels::matmul(&s.to_dense(), &b).unwrap();
        let got = s.spmm(&b).unwrap();
        assert!(got.max_abs_diff(&expect).unwrap() < 1e-12);
        assert_eq!(
            s.spmm_seq(&b).unwrap().as_slice(),
            got.as_slice()
        );
    }

    #[test]
    fn identity_spmm_is_noop() {
        let b = Dense::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let got = CsrSparse::identity(3).spmm(&b).unwrap();
        assert_eq!(got.as_slice(), b.as_slice());
    }
}
