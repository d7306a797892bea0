//! A minimal row-major feature matrix shared by training, debiasing, and
//! regression code. Missing values are represented as `NaN`.

use serde::{Deserialize, Serialize};

/// Dense row-major matrix of `f64` feature values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    data: Vec<f64>,
    n_cols: usize,
}

impl Matrix {
    pub fn new(n_cols: usize) -> Self {
        Matrix { data: Vec::new(), n_cols }
    }

    /// Build from row slices; every row must have `n_cols` entries.
    pub fn from_rows(rows: &[Vec<f64>], n_cols: usize) -> Self {
        let mut m = Matrix::new(n_cols);
        for row in rows {
            m.push_row(row);
        }
        m
    }

    /// Build from column vectors of equal length.
    pub fn from_columns(cols: &[Vec<f64>]) -> Self {
        let n_cols = cols.len();
        let n_rows = cols.first().map_or(0, Vec::len);
        assert!(cols.iter().all(|c| c.len() == n_rows), "ragged columns");
        let mut m = Matrix::new(n_cols);
        for i in 0..n_rows {
            let row: Vec<f64> = cols.iter().map(|c| c[i]).collect();
            m.push_row(&row);
        }
        m
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.n_cols, "row width mismatch");
        self.data.extend_from_slice(row);
    }

    pub fn n_rows(&self) -> usize {
        if self.n_cols == 0 {
            0
        } else {
            self.data.len() / self.n_cols
        }
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n_cols + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|i| self.get(i, j)).collect()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.n_cols.max(1))
    }

    /// New matrix containing the selected rows in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut m = Matrix::new(self.n_cols);
        for &i in indices {
            m.push_row(self.row(i));
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_rows_and_columns() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]], 2);
        assert_eq!(m.n_rows(), 3);
        assert_eq!(m.row(1), &[3.0, 4.0]);
        assert_eq!(m.column(1), vec![2.0, 4.0, 6.0]);
        let sel = m.select_rows(&[2, 0]);
        assert_eq!(sel.row(0), &[5.0, 6.0]);
        assert_eq!(sel.row(1), &[1.0, 2.0]);
    }

    #[test]
    fn from_columns_matches_from_rows() {
        let a = Matrix::from_columns(&[vec![1.0, 3.0], vec![2.0, 4.0]]);
        let b = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]], 2);
        assert_eq!(a, b);
    }
}
