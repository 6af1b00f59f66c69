//! Input autocorrelation estimation and symmetric eigendecomposition.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::gemm;
use crate::tensor::UnrolledInput;

/// Dense symmetric matrix, row-major. Symmetrized on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    /// Builds from a row-major `n × n` buffer, replacing it with `(A + Aᵀ)/2`.
    pub fn from_rows(n: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Shape(format!("{n}x{n} matrix needs {} entries, got {}", n * n, data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("matrix has non-finite entries".into()));
        }
        for i in 0..n {
            for j in i + 1..n {
                let avg = 0.5 * (data[i * n + j] + data[j * n + i]);
                data[i * n + j] = avg;
                data[j * n + i] = avg;
            }
        }
        Ok(SymMatrix { n, data })
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let n = d.len();
        let mut data = vec![0.0; n * n];
        for (i, v) in d.iter().enumerate() {
            data[i * n + i] = *v;
        }
        SymMatrix { n, data }
    }

    pub fn order(&self) -> usize {
        self.n
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        self.data.chunks(self.n).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    /// Solves `A x = b` by Cholesky factorization; `None` if `A` is not positive definite.
    pub fn cholesky_solve(&self, b: &[f64]) -> Option<Vec<f64>> {
        let n = self.n;
        assert_eq!(b.len(), n);
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = self.get(j, j);
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > 0.0) {
                return None;
            }
            let djj = d.sqrt();
            l[j * n + j] = djj;
            for i in j + 1..n {
                let mut s = self.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / djj;
            }
        }
        let mut y = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                y[i] -= l[i * n + k] * y[k];
            }
            y[i] /= l[i * n + i];
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                y[i] -= l[k * n + i] * y[k];
            }
            y[i] /= l[i * n + i];
        }
        Some(y)
    }
}

/// Eigenvalues in ascending order with orthonormal eigenvectors as columns of `Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    /// Row-major `n × n`; column `k` pairs with `eigenvalues[k]`.
    pub eigenvectors: Vec<f64>,
    pub sweeps: usize,
}

impl EigenDecomposition {
    pub fn order(&self) -> usize {
        self.eigenvalues.len()
    }
    pub fn lambda_min(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }
    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0)
    }

    pub fn eigenvector(&self, k: usize) -> Vec<f64> {
        let n = self.order();
        (0..n).map(|i| self.eigenvectors[i * n + k]).collect()
    }

    /// `Qᵀ v`: coordinates of `v` in the eigenbasis.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let n = self.order();
        let mut out = vec![0.0; n];
        for i in 0..n {
            for k in 0..n {
                out[k] += self.eigenvectors[i * n + k] * v[i];
            }
        }
        out
    }

    /// `Q diag(λ) Qᵀ`, row-major.
    pub fn reconstruct(&self) -> Vec<f64> {
        let n = self.order();
        let mut scaled = self.eigenvectors.clone();
        for i in 0..n {
            for k in 0..n {
                scaled[i * n + k] *= self.eigenvalues[k];
            }
        }
        let mut out = vec![0.0; n * n];
        gemm::matmul_bt(n, n, n, 1.0, &scaled, &self.eigenvectors, 0.0, &mut out);
        out
    }
}

/// Mean-removed autocorrelation `R = (1/N) Σ (x − x̄)(x − x̄)ᵀ` over all `N`
/// columns of the unrolled input (every stride of every sample).
pub fn autocorrelation(u: &UnrolledInput) -> Result<SymMatrix> {
    let (k, n) = (u.rows(), u.cols());
    if n < 2 {
        return Err(Error::Invalid(format!("autocorrelation needs at least 2 columns, got {n}")));
    }
    let mut centered = u.data().to_vec();
    for row in centered.chunks_mut(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        for v in row.iter_mut() {
            *v -= mean;
        }
    }
    let mut r = vec![0.0; k * k];
    gemm::matmul_bt(k, n, k, 1.0 / n as f64, &centered, &centered, 0.0, &mut r);
    SymMatrix::from_rows(k, r)
}

const MAX_SWEEPS: usize = 50;

/// Cyclic-by-row Jacobi eigendecomposition.
///
/// Sweeps until the largest off-diagonal magnitude is at most
/// `1e-12·‖A‖_F`; failing that within 50 sweeps is an error.
pub fn sym_eig(m: &SymMatrix) -> Result<EigenDecomposition> {
    let n = m.order();
    let mut a = m.data.clone();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let tol = 1e-12 * m.frobenius_norm();
    let max_off = |a: &[f64]| {
        let mut off: f64 = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off = off.max(a[p * n + q].abs());
            }
        }
        off
    };

    let mut sweeps = 0;
    loop {
        let off = max_off(&a);
        if off <= tol {
            break;
        }
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence { sweeps, residual: off });
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..n {
                    let (arp, arq) = (a[r * n + p], a[r * n + q]);
                    a[r * n + p] = c * arp - s * arq;
                    a[r * n + q] = s * arp + c * arq;
                }
                for col in 0..n {
                    let (apc, aqc) = (a[p * n + col], a[q * n + col]);
                    a[p * n + col] = c * apc - s * aqc;
                    a[q * n + col] = s * apc + c * aqc;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for r in 0..n {
                    let (vrp, vrq) = (v[r * n + p], v[r * n + q]);
                    v[r * n + p] = c * vrp - s * vrq;
                    v[r * n + q] = s * vrp + c * vrq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]));
    let eigenvalues = order.iter().map(|&i| a[i * n + i]).collect();
    let mut eigenvectors = vec![0.0; n * n];
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            eigenvectors[r * n + dst] = v[r * n + src];
        }
    }
    Ok(EigenDecomposition { eigenvalues, eigenvectors, sweeps })
}

/// Share of squared Frobenius norm held by the diagonal blocks.
///
/// `blocks` must partition `[0, n)`. A zero matrix counts as perfectly
/// block-diagonal.
pub fn block_energy_ratio(r: &SymMatrix, blocks: &[Range<usize>]) -> Result<f64> {
    let n = r.order();
    let mut owner = vec![usize::MAX; n];
    for (b, range) in blocks.iter().enumerate() {
        if range.end > n {
            return Err(Error::Invalid(format!("block {range:?} exceeds order {n}")));
        }
        for i in range.clone() {
            if owner[i] != usize::MAX {
                return Err(Error::Invalid(format!("row {i} belongs to more than one block")));
            }
            owner[i] = b;
        }
    }
    if owner.contains(&usize::MAX) {
        return Err(Error::Invalid("blocks do not cover every row".into()));
    }
    let total: f64 = r.data.iter().map(|v| v * v).sum();
    if total == 0.0 {
        return Ok(1.0);
    }
    let mut diag = 0.0;
    for i in 0..n {
        for j in 0..n {
            if owner[i] == owner[j] {
                diag += r.get(i, j).powi(2);
            }
        }
    }
    Ok(diag / total)
}
