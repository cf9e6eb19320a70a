//! Normal equations `AᵀA δ = Aᵀb` in block-profile (skyline) storage.
//!
//! Each scalar row stores the lower triangle from the first column block it
//! couples to through some factor up to the diagonal. Cholesky fill never
//! leaves this envelope, so with the time-major ordering the factorization is
//! linear in the trajectory length.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::graph::{LinearSystem, VarKey, STATE_DIM};

/// Relative pivot threshold below which a variable is treated as unconstrained.
const PIVOT_REL_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct NormalEquations {
    first: Vec<usize>,
    rows: Vec<Vec<f64>>,
    rhs: DVector<f64>,
    keys: Vec<VarKey>,
}

impl NormalEquations {
    pub fn from_system(sys: &LinearSystem) -> Self {
        let n_blocks = sys.ordering.len();
        let n = n_blocks * STATE_DIM;

        let mut first_block: Vec<usize> = (0..n_blocks).collect();
        for band in &sys.bands {
            if let Some(lo) = band.blocks.iter().map(|(c, _)| *c).min() {
                for (c, _) in &band.blocks {
                    first_block[*c] = first_block[*c].min(lo);
                }
            }
        }
        let first: Vec<usize> = (0..n)
            .map(|i| first_block[i / STATE_DIM] * STATE_DIM)
            .collect();
        let mut rows: Vec<Vec<f64>> = (0..n).map(|i| vec![0.0; i - first[i] + 1]).collect();

        for band in &sys.bands {
            for (ci, bi) in &band.blocks {
                for (cj, bj) in &band.blocks {
                    if cj > ci {
                        continue;
                    }
                    let prod = bi.transpose() * bj;
                    for r in 0..STATE_DIM {
                        let row = ci * STATE_DIM + r;
                        for s in 0..STATE_DIM {
                            let col = cj * STATE_DIM + s;
                            if col > row {
                                continue;
                            }
                            rows[row][col - first[row]] += prod[(r, s)];
                        }
                    }
                }
            }
        }

        Self {
            first,
            rows,
            rhs: sys.gradient(),
            keys: sys.ordering.keys().to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    /// `Aᵀb`.
    pub fn rhs(&self) -> &DVector<f64> {
        &self.rhs
    }

    pub fn diagonal(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.rows.iter().map(|r| *r.last().unwrap()))
    }

    /// Entry `(i, j)` of `AᵀA`; zero outside the stored profile.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        if j < self.first[i] {
            0.0
        } else {
            self.rows[i][j - self.first[i]]
        }
    }

    /// Number of stored lower-triangle entries.
    pub fn profile_size(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Solves `(AᵀA + λ·diag(AᵀA)) δ = Aᵀb`.
    pub fn solve(&self, damping: f64) -> Result<DVector<f64>> {
        let n = self.dim();
        let mut l = self.rows.clone();
        if damping > 0.0 {
            for row in l.iter_mut() {
                let d = row.last_mut().unwrap();
                *d += damping * d.max(1e-12);
            }
        }

        let mut dead = vec![false; n];
        for i in 0..n {
            let fi = self.first[i];
            for j in fi..=i {
                let fj = self.first[j];
                let kstart = fi.max(fj);
                let mut s = l[i][j - fi];
                for k in kstart..j {
                    s -= l[i][k - fi] * l[j][k - fj];
                }
                if j < i {
                    l[i][j - fi] = if dead[j] { 0.0 } else { s / l[j][j - fj] };
                } else {
                    let orig = self.rows[i][i - fi];
                    if !(s.is_finite() && s > PIVOT_REL_TOL * orig && orig > 0.0) {
                        dead[i] = true;
                        l[i][i - fi] = 1.0;
                    } else {
                        l[i][i - fi] = s.sqrt();
                    }
                }
            }
        }

        if dead.iter().any(|d| *d) {
            let mut keys: Vec<VarKey> = dead
                .iter()
                .enumerate()
                .filter(|(_, d)| **d)
                .map(|(i, _)| self.keys[i / STATE_DIM])
                .collect();
            keys.dedup();
            return Err(Error::RankDeficient { keys });
        }

        // L y = g
        let mut y = self.rhs.clone();
        for i in 0..n {
            let fi = self.first[i];
            let mut s = y[i];
            for k in fi..i {
                s -= l[i][k - fi] * y[k];
            }
            y[i] = s / l[i][i - fi];
        }
        // Lᵀ x = y
        for i in (0..n).rev() {
            let fi = self.first[i];
            let xi = y[i] / l[i][i - fi];
            y[i] = xi;
            for k in fi..i {
                y[k] -= l[i][k - fi] * xi;
            }
        }
        Ok(y)
    }
}
