//! Dense complex matrices, row-major. Sizes in this workspace are tiny
//! (at most N_t x N_t), so everything is straightforward O(n^3) dense
//! algebra with a fixed accumulation order.

use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CMat {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl CMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMat {
            rows,
            cols,
            data: vec![Complex64::ZERO; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "cmat from_vec",
                left: vec![rows, cols],
                right: vec![data.len()],
            });
        }
        Ok(CMat { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = CMat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex64::ONE;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[Complex64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<Complex64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn set_col(&mut self, c: usize, v: &[Complex64]) {
        for (r, &x) in v.iter().enumerate() {
            self[(r, c)] = x;
        }
    }

    pub fn hermitian(&self) -> CMat {
        let mut out = CMat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[(c, r)] = self[(r, c)].conj();
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &CMat) -> Result<CMat> {
        if self.cols != rhs.rows {
            return Err(Error::Shape {
                op: "cmat matmul",
                left: vec![self.rows, self.cols],
                right: vec![rhs.rows, rhs.cols],
            });
        }
        let mut out = CMat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for p in 0..self.cols {
                let a = self[(i, p)];
                if a == Complex64::ZERO {
                    continue;
                }
                for j in 0..rhs.cols {
                    out[(i, j)] += a * rhs[(p, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn scale(&self, s: Complex64) -> CMat {
        let data = self.data.iter().map(|v| v * s).collect();
        CMat {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn add(&self, rhs: &CMat) -> Result<CMat> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::Shape {
                op: "cmat add",
                left: vec![self.rows, self.cols],
                right: vec![rhs.rows, rhs.cols],
            });
        }
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect();
        Ok(CMat {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, rhs: &CMat) -> Result<CMat> {
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect();
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::Shape {
                op: "cmat sub",
                left: vec![self.rows, self.cols],
                right: vec![rhs.rows, rhs.cols],
            });
        }
        Ok(CMat {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn frob_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn frob_norm(&self) -> f64 {
        self.frob_norm_sq().sqrt()
    }

    /// Inverse by Gauss-Jordan with partial pivoting (largest modulus).
    pub fn inverse(&self) -> Result<CMat> {
        if self.rows != self.cols {
            return Err(Error::Shape {
                op: "cmat inverse",
                left: vec![self.rows, self.cols],
                right: vec![self.cols, self.cols],
            });
        }
        let n = self.rows;
        let mut m = self.data.clone();
        let mut inv = CMat::identity(n).data;
        for col in 0..n {
            let mut pivot = col;
            let mut best = m[col * n + col].norm_sqr();
            for r in col + 1..n {
                let v = m[r * n + col].norm_sqr();
                if v > best {
                    best = v;
                    pivot = r;
                }
            }
            if best < 1e-300 {
                return Err(Error::Numerical("singular complex matrix".into()));
            }
            if pivot != col {
                for j in 0..n {
                    m.swap(col * n + j, pivot * n + j);
                    inv.swap(col * n + j, pivot * n + j);
                }
            }
            let d = m[col * n + col];
            for j in 0..n {
                m[col * n + j] /= d;
                inv[col * n + j] /= d;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let f = m[r * n + col];
                if f == Complex64::ZERO {
                    continue;
                }
                for j in 0..n {
                    let mj = m[col * n + j];
                    let ij = inv[col * n + j];
                    m[r * n + j] -= f * mj;
                    inv[r * n + j] -= f * ij;
                }
            }
        }
        Ok(CMat {
            rows: n,
            cols: n,
            data: inv,
        })
    }
}

impl std::ops::Index<(usize, usize)> for CMat {
    type Output = Complex64;
    fn index(&self, (r, c): (usize, usize)) -> &Complex64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for CMat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut Complex64 {
        let cols = self.cols;
        &mut self.data[r * cols + c]
    }
}
