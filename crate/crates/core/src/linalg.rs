//! Minimal row-major dense matrices: products, Cholesky factorization and
//! SPD solves. Sizes here are at most a few hundred.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * selfᵀ`, exactly symmetric.
    pub fn gram(&self) -> Mat {
        let n = self.rows;
        let mut g = Mat::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v: f64 = self.row(i).iter().zip(self.row(j)).map(|(a, b)| a * b).sum();
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        g
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    pub l: Mat,
}

impl Cholesky {
    /// Fails when a pivot drops to `rel_tol * max diag` or below.
    pub fn new(a: &Mat, rel_tol: f64) -> Option<Self> {
        let n = a.rows;
        if a.cols != n {
            return None;
        }
        let scale = (0..n).fold(0.0f64, |m, i| m.max(a[(i, i)].abs()));
        if !(scale > 0.0) {
            return None;
        }
        let mut l = Mat::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > rel_tol * scale) {
                return None;
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut v = a[(i, j)];
                for k in 0..j {
                    v -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = v / djj;
            }
        }
        Some(Self { l })
    }

    /// Solves `A X = B` column by column.
    pub fn solve(&self, b: &Mat) -> Mat {
        let n = self.l.rows;
        let mut x = b.clone();
        for c in 0..b.cols {
            for i in 0..n {
                let mut v = x[(i, c)];
                for k in 0..i {
                    v -= self.l[(i, k)] * x[(k, c)];
                }
                x[(i, c)] = v / self.l[(i, i)];
            }
            for i in (0..n).rev() {
                let mut v = x[(i, c)];
                for k in (i + 1)..n {
                    v -= self.l[(k, i)] * x[(k, c)];
                }
                x[(i, c)] = v / self.l[(i, i)];
            }
        }
        x
    }

    /// `L z` for a vector `z`.
    pub fn mul_lower(&self, z: &[f64]) -> Vec<f64> {
        let n = self.l.rows;
        (0..n)
            .map(|i| (0..=i).map(|k| self.l[(i, k)] * z[k]).sum())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solves_spd() {
        let a = Mat::from_rows(3, 3, vec![4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0]).unwrap();
        let b = Mat::from_rows(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let x = Cholesky::new(&a, 1e-14).unwrap().solve(&b);
        let r = a.matmul(&x).unwrap();
        for i in 0..3 {
            assert!((r[(i, 0)] - b[(i, 0)]).abs() < 1e-14);
        }
    }

    #[test]
    fn cholesky_rejects_singular() {
        let a = Mat::from_rows(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(Cholesky::new(&a, 1e-14).is_none());
    }
}
