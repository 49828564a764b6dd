//! Small dense linear algebra: row-major matrices, LU with partial pivoting,
//! and a cyclic Jacobi eigensolver for symmetric matrices.

use std::ops::{Index, IndexMut};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Clone + Default> Dense<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::default(); rows * cols],
        }
    }
}

impl<T> Dense<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "dense matrix data length");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }
}

impl<T> Index<(usize, usize)> for Dense<T> {
    type Output = T;

    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Dense<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

impl Dense<f64> {
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows == self.cols
            && (0..self.rows)
                .all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("matrix is singular (pivot {pivot:e} at column {column})")]
pub struct SingularMatrix {
    pub column: usize,
    pub pivot: f64,
}

/// Solves `a * x = b` by Gaussian elimination with partial pivoting.
///
/// A pivot smaller than `1e-14 * max|a|` is treated as singular.
pub fn lu_solve(a: &Dense<f64>, b: &[f64]) -> Result<Vec<f64>, SingularMatrix> {
    let n = a.rows();
    assert_eq!(a.cols(), n, "lu_solve needs a square matrix");
    assert_eq!(b.len(), n, "lu_solve right-hand side length");

    let mut m = a.data.clone();
    let mut x = b.to_vec();
    let scale = m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let threshold = 1e-14 * scale.max(f64::MIN_POSITIVE);

    for k in 0..n {
        let (p, pivot) = (k..n)
            .map(|i| (i, m[i * n + k].abs()))
            .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if !(pivot > threshold) {
            return Err(SingularMatrix {
                column: k,
                pivot: if pivot < 0.0 { 0.0 } else { pivot },
            });
        }
        if p != k {
            for j in 0..n {
                m.swap(k * n + j, p * n + j);
            }
            x.swap(k, p);
        }
        let inv = 1.0 / m[k * n + k];
        for i in (k + 1)..n {
            let f = m[i * n + k] * inv;
            if f == 0.0 {
                continue;
            }
            m[i * n + k] = 0.0;
            for j in (k + 1)..n {
                m[i * n + j] -= f * m[k * n + j];
            }
            x[i] -= f * x[k];
        }
    }
    for k in (0..n).rev() {
        let mut s = x[k];
        for j in (k + 1)..n {
            s -= m[k * n + j] * x[j];
        }
        x[k] = s / m[k * n + k];
    }
    Ok(x)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, sorted
/// ascending.
///
/// Sweeps until the off-diagonal Frobenius norm drops below
/// `1e-15 * ||a||_F` or 100 sweeps have run.
pub fn symmetric_eigenvalues(a: &Dense<f64>) -> Vec<f64> {
    let n = a.rows();
    assert_eq!(a.cols(), n, "eigenvalues need a square matrix");
    let mut m = a.clone();
    let total: f64 = m.data.iter().map(|v| v * v).sum::<f64>().sqrt();
    let target = 1e-15 * total.max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= target {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let t = if tau == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = m[(k, p)];
                    let akq = m[(k, q)];
                    m[(k, p)] = c * akp - s * akq;
                    m[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[(p, k)];
                    let aqk = m[(q, k)];
                    m[(p, k)] = c * apk - s * aqk;
                    m[(q, k)] = s * apk + c * aqk;
                }
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    eig.sort_by(f64::total_cmp);
    eig
}

#[cfg(test)]
mod tests {
    use super::*;

    fn complete_graph_normalized_laplacian(n: usize) -> Dense<f64> {
        let mut l = Dense::identity(n);
        let off = -1.0 / (n as f64 - 1.0);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    l[(i, j)] = off;
                }
            }
        }
        l
    }

    #[test]
    fn lu_solves_pivoting_system() {
        let a = Dense::from_vec(3, 3, vec![0.0, 2.0, 1.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let x = lu_solve(&a, &[7.0, 6.0, 13.0]).unwrap();
        for (got, want) in x.iter().zip([1.0, 2.0, 3.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn lu_reports_singular() {
        let a = Dense::from_vec(2, 2, vec![1.0, 2.0, 2.0, 4.0]);
        assert!(lu_solve(&a, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn complete_graph_spectrum() {
        for n in 2..9 {
            let eig = symmetric_eigenvalues(&complete_graph_normalized_laplacian(n));
            assert!(eig[0].abs() < 1e-9);
            let expected = n as f64 / (n as f64 - 1.0);
            for e in &eig[1..] {
                assert!((e - expected).abs() < 1e-9, "K{n}: {e} vs {expected}");
            }
        }
    }

    #[test]
    fn path_graph_combinatorial_spectrum() {
        // Laplacian of P_n has eigenvalues 2 - 2cos(pi k / n).
        for n in 2..12 {
            let mut l = Dense::zeros(n, n);
            for i in 0..n - 1 {
                l[(i, i)] += 1.0;
                l[(i + 1, i + 1)] += 1.0;
                l[(i, i + 1)] = -1.0;
                l[(i + 1, i)] = -1.0;
            }
            let eig = symmetric_eigenvalues(&l);
            let mut expected: Vec<f64> = (0..n)
                .map(|k| 2.0 - 2.0 * (std::f64::consts::PI * k as f64 / n as f64).cos())
                .collect();
            expected.sort_by(f64::total_cmp);
            for (g, w) in eig.iter().zip(&expected) {
                assert!((g - w).abs() < 1e-9, "P{n}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn diagonal_matrix_is_fixed_point() {
        let mut d = Dense::zeros(3, 3);
        d[(0, 0)] = 3.0;
        d[(1, 1)] = -1.0;
        d[(2, 2)] = 2.0;
        assert_eq!(symmetric_eigenvalues(&d), vec![-1.0, 2.0, 3.0]);
    }
}
