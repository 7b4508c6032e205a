use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    /// Matrix whose columns are the given vectors.
    pub fn from_columns(cols: &[Vec<f64>]) -> Self {
        let rows = cols.first().map_or(0, Vec::len);
        Self::from_fn(rows, cols.len(), |i, j| cols[j][i])
    }

    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                axis: "matrix data length",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec dimension");
        (0..self.rows).map(|i| super::tensor::dot(self.row(i), v)).collect()
    }

    /// `AᵀA` as an exactly symmetric matrix.
    pub fn gram(&self) -> SymMatrix {
        SymMatrix::from_fn(self.cols, |i, j| {
            (0..self.rows).fold(0.0, |s, r| s + self.get(r, i) * self.get(r, j))
        })
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Symmetric matrix stored as its upper triangle, so symmetry holds by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    upper: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            upper: vec![0.0; dim * (dim + 1) / 2],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_fn(dim, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn diag(values: &[f64]) -> Self {
        Self::from_fn(values.len(), |i, j| if i == j { values[i] } else { 0.0 })
    }

    /// `f` is evaluated only for `i <= j`.
    pub fn from_fn(dim: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut upper = Vec::with_capacity(dim * (dim + 1) / 2);
        for i in 0..dim {
            for j in i..dim {
                upper.push(f(i, j));
            }
        }
        Self { dim, upper }
    }

    /// Reads the upper triangle of a square dense matrix.
    pub fn from_upper(m: &Matrix) -> Self {
        assert_eq!(m.rows(), m.cols(), "square matrix required");
        Self::from_fn(m.rows(), |i, j| m.get(i, j))
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        a * self.dim - a * (a + 1) / 2 + b
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.upper[self.idx(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.upper[k] = v;
    }

    pub fn to_dense(&self) -> Matrix {
        Matrix::from_fn(self.dim, self.dim, |i, j| self.get(i, j))
    }

    pub fn scale(&self, a: f64) -> SymMatrix {
        SymMatrix {
            dim: self.dim,
            upper: self.upper.iter().map(|v| a * v).collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn submatrix(&self, idx: &[usize]) -> SymMatrix {
        SymMatrix::from_fn(idx.len(), |a, b| self.get(idx[a], idx[b]))
    }

    /// Block-diagonal `diag(self, other)`.
    pub fn block_diag(&self, other: &SymMatrix) -> SymMatrix {
        let n = self.dim;
        SymMatrix::from_fn(n + other.dim, |i, j| {
            if j < n {
                self.get(i, j)
            } else if i >= n {
                other.get(i - n, j - n)
            } else {
                0.0
            }
        })
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }
}

#[derive(Clone, Debug)]
pub struct Eigen {
    /// Descending.
    pub values: Vec<f64>,
    /// Column `i` pairs with `values[i]`.
    pub vectors: Matrix,
}

/// Cyclic Jacobi eigendecomposition.
pub fn sym_eigen(m: &SymMatrix) -> Eigen {
    let n = m.dim();
    let mut a = m.to_dense();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a.get(i, j) * a.get(i, j);
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)).then(i.cmp(&j)));
    Eigen {
        values: order.iter().map(|&i| a.get(i, i)).collect(),
        vectors: Matrix::from_fn(n, n, |r, c| v.get(r, order[c])),
    }
}

/// Lower Cholesky factor; fails on a non-positive pivot.
pub fn cholesky(m: &SymMatrix) -> Result<Matrix> {
    let n = m.dim();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = m.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { index: j, pivot: d });
        }
        let djj = d.sqrt();
        l.set(j, j, djj);
        for i in j + 1..n {
            let mut s = m.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / djj);
        }
    }
    Ok(l)
}

/// Sum of the logs of the squared Cholesky pivots.
pub fn logdet_psd(m: &SymMatrix) -> Result<f64> {
    let l = cholesky(m)?;
    Ok((0..m.dim()).map(|i| 2.0 * l.get(i, i).ln()).sum())
}

/// Columns form an orthonormal basis of `c`'s orthogonal complement (Householder).
pub fn orthonormal_complement(c: &[f64]) -> Result<Matrix> {
    let n = c.len();
    let norm = super::tensor::dot(c, c).sqrt();
    if norm == 0.0 || n < 2 {
        return Err(Error::Degenerate("orthonormal complement needs a nonzero vector of dim ≥ 2".into()));
    }
    // H = I − 2uuᵀ/uᵀu maps e₀ to ±ĉ; its remaining columns span ĉ⊥.
    let mut u: Vec<f64> = c.iter().map(|v| v / norm).collect();
    let sign = if u[0] >= 0.0 { 1.0 } else { -1.0 };
    u[0] += sign;
    let uu = super::tensor::dot(&u, &u);
    Ok(Matrix::from_fn(n, n - 1, |i, j| {
        let col = j + 1;
        let e = if i == col { 1.0 } else { 0.0 };
        e - 2.0 * u[i] * u[col] / uu
    }))
}

/// Haar-ish random orthogonal matrix via Gram–Schmidt on a Gaussian draw.
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Matrix {
    let g = Matrix::random_normal(n, n, rng);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut v = g.column(j);
        for _ in 0..2 {
            for q in &cols {
                let d = super::tensor::dot(q, &v);
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi -= d * qi;
                }
            }
        }
        let nv = super::tensor::dot(&v, &v).sqrt();
        cols.push(v.into_iter().map(|x| x / nv).collect());
    }
    Matrix::from_columns(&cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_sym(n: usize, rng: &mut ChaCha8Rng) -> SymMatrix {
        let a = Matrix::random_normal(n, n, rng);
        SymMatrix::from_fn(n, |i, j| a.get(i, j) + a.get(j, i))
    }

    #[test]
    fn eigen_small_cases() {
        let e = sym_eigen(&SymMatrix::diag(&[1.0, 3.0]));
        assert_eq!(e.values, vec![3.0, 1.0]);
        assert!((e.vectors.get(1, 0).abs() - 1.0).abs() < 1e-15);
        let e = sym_eigen(&SymMatrix::from_fn(2, |i, j| if i == j { 2.0 } else { 1.0 }));
        assert!((e.values[0] - 3.0).abs() < 1e-14 && (e.values[1] - 1.0).abs() < 1e-14);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((e.vectors.get(0, 0).abs() - r).abs() < 1e-14);
        assert!((e.vectors.get(0, 0) - e.vectors.get(1, 0)).abs() < 1e-14);
        assert!((e.vectors.get(0, 1) + e.vectors.get(1, 1)).abs() < 1e-14);
    }

    #[test]
    fn eigen_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_sym(8, &mut rng);
        let e = sym_eigen(&m);
        let v = &e.vectors;
        let lam = Matrix::from_fn(8, 8, |i, j| if i == j { e.values[i] } else { 0.0 });
        let rec = v.matmul(&lam).matmul(&v.transpose());
        let mut err: f64 = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                err = err.max((rec.get(i, j) - m.get(i, j)).abs());
            }
        }
        assert!(err <= 1e-9 * m.to_dense().frobenius());
        let vtv = v.transpose().matmul(v);
        for i in 0..8 {
            for j in 0..8 {
                let t = if i == j { 1.0 } else { 0.0 };
                assert!((vtv.get(i, j) - t).abs() < 1e-12);
            }
        }
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn logdet_cases() {
        assert_eq!(logdet_psd(&SymMatrix::identity(4)).unwrap(), 0.0);
        assert!((logdet_psd(&SymMatrix::diag(&[2.0, 3.0])).unwrap() - 6f64.ln()).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Matrix::random_normal(9, 6, &mut rng);
        let m = a.gram();
        let by_eig: f64 = sym_eigen(&m).values.iter().map(|v| v.ln()).sum();
        assert!((logdet_psd(&m).unwrap() - by_eig).abs() < 1e-10);
        assert!(matches!(
            logdet_psd(&SymMatrix::diag(&[1.0, 0.0])),
            Err(Error::NotPositiveDefinite { index: 1, .. })
        ));
    }

    #[test]
    fn complement_cases() {
        let u = orthonormal_complement(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!((u.rows(), u.cols()), (3, 2));
        for j in 0..2 {
            assert!(u.get(0, j).abs() < 1e-15);
        }
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let u = orthonormal_complement(&[r, r]).unwrap();
        assert!((u.get(0, 0).abs() - r).abs() < 1e-15);
        assert!((u.get(0, 0) + u.get(1, 0)).abs() < 1e-15);
        assert!(orthonormal_complement(&[0.0, 0.0]).is_err());
    }
}
