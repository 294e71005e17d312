//! Symmetric sparse storage and the two SPD solvers: banded Cholesky for
//! desk-scale systems and Jacobi-preconditioned conjugate gradients above.

use crate::{Result, RtoError};

/// Symmetric positive definite matrix in CSR form (full symmetric storage).
#[derive(Debug, Clone)]
pub struct SparseSpdMatrix {
    pub dim: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub vals: Vec<f64>,
}

impl SparseSpdMatrix {
    /// Builds CSR from (row, col, value) triplets, summing duplicates.
    /// Triplets are sorted first, so assembly order cannot affect the result.
    pub fn from_triplets(dim: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = Vec::with_capacity(dim + 1);
        let mut col_idx: Vec<usize> = Vec::new();
        let mut vals: Vec<f64> = Vec::new();
        row_ptr.push(0);
        let mut current_row = 0usize;
        for (r, c, v) in triplets {
            while current_row < r {
                row_ptr.push(vals.len());
                current_row += 1;
            }
            if vals.len() > *row_ptr.last().unwrap() && *col_idx.last().unwrap() == c {
                *vals.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                vals.push(v);
            }
        }
        while current_row < dim {
            row_ptr.push(vals.len());
            current_row += 1;
        }
        SparseSpdMatrix { dim, row_ptr, col_idx, vals }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for r in 0..self.dim {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.col_idx[k]];
            }
            y[r] = acc;
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        for k in self.row_ptr[r]..self.row_ptr[r + 1] {
            if self.col_idx[k] == c {
                return self.vals[k];
            }
        }
        0.0
    }

    pub fn half_bandwidth(&self) -> usize {
        let mut bw = 0;
        for r in 0..self.dim {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[k];
                bw = bw.max(r.abs_diff(c));
            }
        }
        bw
    }

    /// Relative residual ‖Kx − F‖ / ‖F‖ (absolute residual when F = 0).
    pub fn relative_residual(&self, x: &[f64], f: &[f64]) -> f64 {
        let mut kx = vec![0.0; self.dim];
        self.matvec(x, &mut kx);
        let num: f64 = kx.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let den: f64 = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        if den > 0.0 {
            num / den
        } else {
            num
        }
    }
}

/// Lower-band Cholesky factor of a banded SPD matrix.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    dim: usize,
    bw: usize,
    /// Row-major band storage; entry (i, j) with i-bw <= j <= i lives at
    /// band[i * (bw + 1) + (j - i + bw)].
    band: Vec<f64>,
}

impl BandedCholesky {
    pub fn factor(matrix: &SparseSpdMatrix) -> Result<Self> {
        let dim = matrix.dim;
        let bw = matrix.half_bandwidth();
        let w = bw + 1;
        let mut band = vec![0.0; dim * w];
        for r in 0..dim {
            for k in matrix.row_ptr[r]..matrix.row_ptr[r + 1] {
                let c = matrix.col_idx[k];
                if c <= r {
                    band[r * w + (c + bw - r)] = matrix.vals[k];
                }
            }
        }
        for i in 0..dim {
            let kmin = i.saturating_sub(bw);
            for j in kmin..=i {
                let mut sum = band[i * w + (j + bw - i)];
                for k in kmin.max(j.saturating_sub(bw))..j {
                    sum -= band[i * w + (k + bw - i)] * band[j * w + (k + bw - j)];
                }
                if j < i {
                    band[i * w + (j + bw - i)] = sum / band[j * w + bw];
                } else {
                    if sum <= 0.0 {
                        return Err(RtoError::NotPositiveDefinite { row: i, pivot: sum });
                    }
                    band[i * w + bw] = sum.sqrt();
                }
            }
        }
        Ok(BandedCholesky { dim, bw, band })
    }

    /// Solves L Lᵀ x = f.
    pub fn solve(&self, f: &[f64]) -> Vec<f64> {
        let (bw, w) = (self.bw, self.bw + 1);
        let mut x = f.to_vec();
        for i in 0..self.dim {
            let kmin = i.saturating_sub(bw);
            let mut sum = x[i];
            for k in kmin..i {
                sum -= self.band[i * w + (k + bw - i)] * x[k];
            }
            x[i] = sum / self.band[i * w + bw];
        }
        for i in (0..self.dim).rev() {
            let kmax = (i + bw).min(self.dim - 1);
            let mut sum = x[i];
            for k in (i + 1)..=kmax {
                sum -= self.band[k * w + (i + bw - k)] * x[k];
            }
            x[i] = sum / self.band[i * w + bw];
        }
        x
    }
}

/// Jacobi-preconditioned conjugate gradients.
///
/// Returns (solution, iterations, relative residual).
pub fn pcg_jacobi(
    matrix: &SparseSpdMatrix,
    f: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<(Vec<f64>, usize, f64)> {
    let n = matrix.dim;
    let fnorm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    if fnorm == 0.0 {
        return Ok((vec![0.0; n], 0, 0.0));
    }
    let inv_diag: Vec<f64> = (0..n)
        .map(|i| {
            let d = matrix.get(i, i);
            if d > 0.0 {
                1.0 / d
            } else {
                1.0
            }
        })
        .collect();

    let mut x = vec![0.0; n];
    let mut r = f.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut kp = vec![0.0; n];
    for iter in 1..=max_iters {
        matrix.matvec(&p, &mut kp);
        let pkp: f64 = p.iter().zip(&kp).map(|(a, b)| a * b).sum();
        let alpha = rz / pkp;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * kp[i];
        }
        let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rnorm / fnorm <= tol {
            return Ok((x, iter, rnorm / fnorm));
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    Err(RtoError::SolverDiverged { iterations: max_iters, residual: rnorm / fnorm })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_spd() -> SparseSpdMatrix {
        // [[4,1,0],[1,3,1],[0,1,2]]
        SparseSpdMatrix::from_triplets(
            3,
            vec![
                (0, 0, 4.0),
                (0, 1, 1.0),
                (1, 0, 1.0),
                (1, 1, 3.0),
                (1, 2, 1.0),
                (2, 1, 1.0),
                (2, 2, 2.0),
            ],
        )
    }

    #[test]
    fn from_triplets_sums_duplicates() {
        let m = SparseSpdMatrix::from_triplets(2, vec![(0, 0, 1.0), (0, 0, 2.0), (1, 1, 5.0)]);
        assert_eq!(m.get(0, 0), 3.0);
        assert_eq!(m.get(1, 1), 5.0);
        assert_eq!(m.get(0, 1), 0.0);
    }

    #[test]
    fn cholesky_solves_toy_system() {
        let m = toy_spd();
        let f = vec![1.0, 2.0, 3.0];
        let chol = BandedCholesky::factor(&m).unwrap();
        let x = chol.solve(&f);
        assert!(m.relative_residual(&x, &f) < 1e-12);
    }

    #[test]
    fn pcg_matches_cholesky() {
        let m = toy_spd();
        let f = vec![1.0, 2.0, 3.0];
        let chol = BandedCholesky::factor(&m).unwrap();
        let xd = chol.solve(&f);
        let (xi, _, res) = pcg_jacobi(&m, &f, 1e-12, 100).unwrap();
        assert!(res <= 1e-12);
        for (a, b) in xd.iter().zip(&xi) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn indefinite_matrix_rejected() {
        let m = SparseSpdMatrix::from_triplets(2, vec![(0, 0, 1.0), (1, 1, -1.0)]);
        assert!(matches!(BandedCholesky::factor(&m), Err(RtoError::NotPositiveDefinite { .. })));
    }
}
