use std::cell::Cell;
use std::fmt;

use crate::error::{IdglError, Result};

thread_local! {
    static ALLOC_HIGH_WATER: Cell<usize> = const { Cell::new(0) };
}

/// Resets the per-thread high-water mark for dense allocations.
pub fn reset_alloc_high_water() {
    ALLOC_HIGH_WATER.with(|hw| hw.set(0));
}

/// Largest single dense matrix (in f64 cells) allocated on this thread since
/// the last reset. Used by scaling tests to assert that the anchor pipeline
/// never materializes an n x n buffer.
pub fn alloc_high_water() -> usize {
    ALLOC_HIGH_WATER.with(|hw| hw.get())
}

fn note_alloc(cells: usize) {
    ALLOC_HIGH_WATER.with(|hw| {
        if cells > hw.get() {
            hw.set(cells);
        }
    });
}

/// Dense row-major f64 matrix.
#[derive(Clone, PartialEq)]
pub struct Dense {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Dense {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Dense({}x{})", self.rows, self.cols)?;
        if self.rows * self.cols <= 64 {
            for i in 0..self.rows {
                write!(f, "\n  {:?}", self.row(i))?;
            }
        }
        Ok(())
    }
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        note_alloc(rows * cols);
        Dense {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(IdglError::InvalidInput(format!(
                "expected {} values for a {}x{} matrix, got {}",
                rows * cols,
                rows,
                cols,
                data.len()
            )));
        }
        note_alloc(rows * cols);
        Ok(Dense { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(IdglError::InvalidInput("ragged rows".into()));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Dense::from_vec(r, c, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Dense::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        note_alloc(rows * cols);
        Dense {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Dense {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Two disjoint mutable row views; panics if `i == j`.
    pub fn rows_mut2(&mut self, i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
        assert_ne!(i, j);
        let c = self.cols;
        if i < j {
            let (lo, hi) = self.data.split_at_mut(j * c);
            (&mut lo[i * c..(i + 1) * c], &mut hi[..c])
        } else {
            let (lo, hi) = self.data.split_at_mut(i * c);
            let (a, b) = (&mut hi[..c], &mut lo[j * c..(j + 1) * c]);
            (a, b)
        }
    }

    pub fn transpose(&self) -> Dense {
        let mut out = Dense::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Dense {
        note_alloc(self.rows * self.cols);
        Dense {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Dense, f: impl Fn(f64, f64) -> f64) -> Result<Dense> {
        if self.shape() != other.shape() {
            return Err(IdglError::dims("zip_map", self.shape(), other.shape()));
        }
        note_alloc(self.rows * self.cols);
        Ok(Dense {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        })
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for x in &mut self.data {
            *x *= c;
        }
    }

    /// self += c * other
    pub fn add_scaled_in_place(&mut self, other: &Dense, c: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(IdglError::dims("add_scaled", self.shape(), other.shape()));
        }
        for (x, &y) in self.data.iter_mut().zip(&other.data) {
            *x += c * y;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frob_sq(&self) -> f64 {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// max_ij |self - other| without allocating.
    pub fn max_abs_diff(&self, other: &Dense) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(IdglError::dims("max_abs_diff", self.shape(), other.shape()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (&x, &y)| m.max((x - y).abs())))
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (acc, &x) in out.iter_mut().zip(self.row(i)) {
                *acc += x;
            }
        }
        out
    }

    /// Fraction of exactly-zero entries.
    pub fn zero_fraction(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let zeros = self.data.iter().filter(|&&x| x == 0.0).count();
        zeros as f64 / self.data.len() as f64
    }
}

impl std::ops::Index<(usize, usize)> for Dense {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Dense {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}
