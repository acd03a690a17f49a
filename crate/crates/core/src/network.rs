//! Doubly stochastic mixing matrices over the agent communication graph.

use nalgebra::DMatrix;
use thiserror::Error;

const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("invalid topology: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, TopologyError> {
    Err(TopologyError::Invalid(msg.into()))
}

/// Symmetric doubly stochastic matrix `P` with cached second singular value.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    p: DMatrix<f64>,
    beta: f64,
}

impl MixingMatrix {
    /// Circulant graph where agent `i` links to the `neighbors_per_side`
    /// nearest agents on each side.
    pub fn build_cycle(m: usize, neighbors_per_side: usize, self_weight: f64) -> Result<Self, TopologyError> {
        if m < 3 {
            return invalid(format!("cycle needs m >= 3, got {m}"));
        }
        if neighbors_per_side == 0 || 2 * neighbors_per_side >= m {
            return invalid(format!("need 1 <= neighbors_per_side and 2 * neighbors_per_side < m, got {neighbors_per_side} with m = {m}"));
        }
        if !(self_weight > 0.0 && self_weight < 1.0) {
            return invalid(format!("self weight must lie in (0, 1), got {self_weight}"));
        }
        let w = (1.0 - self_weight) / (2 * neighbors_per_side) as f64;
        let mut p = DMatrix::zeros(m, m);
        for i in 0..m {
            p[(i, i)] = self_weight;
            for s in 1..=neighbors_per_side {
                p[(i, (i + s) % m)] = w;
                p[(i, (i + m - s) % m)] = w;
            }
        }
        Self::from_matrix(p)
    }

    /// Uniform averaging `P = 11^T / m`.
    pub fn build_complete(m: usize) -> Result<Self, TopologyError> {
        if m < 2 {
            return invalid(format!("complete graph needs m >= 2, got {m}"));
        }
        Ok(Self { p: DMatrix::from_element(m, m, 1.0 / m as f64), beta: 0.0 })
    }

    /// Trivial single-agent network.
    pub fn single() -> Self {
        Self { p: DMatrix::from_element(1, 1, 1.0), beta: 0.0 }
    }

    /// Validates an explicit weight matrix.
    pub fn from_matrix(p: DMatrix<f64>) -> Result<Self, TopologyError> {
        let m = p.nrows();
        if m == 0 || p.ncols() != m {
            return invalid(format!("P must be square and non-empty, got {}x{}", p.nrows(), p.ncols()));
        }
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return invalid("P entries must be finite and nonnegative");
        }
        for i in 0..m {
            if p[(i, i)] <= 0.0 {
                return invalid(format!("diagonal entry {i} must be positive"));
            }
            let row: f64 = p.row(i).sum();
            let col: f64 = p.column(i).sum();
            if (row - 1.0).abs() > STOCHASTIC_TOL || (col - 1.0).abs() > STOCHASTIC_TOL {
                return invalid(format!("row/column {i} sums to {row}/{col}, not 1"));
            }
            for j in 0..i {
                if (p[(i, j)] - p[(j, i)]).abs() > STOCHASTIC_TOL {
                    return invalid(format!("P is not symmetric at ({i}, {j})"));
                }
            }
        }
        let p = (&p + p.transpose()) * 0.5;
        let beta = if m == 1 { 0.0 } else { second_singular_value_of(&p) };
        if m > 1 && beta >= 1.0 - STOCHASTIC_TOL {
            return invalid(format!("graph is disconnected (beta = {beta})"));
        }
        Ok(Self { p, beta })
    }

    pub fn m(&self) -> usize {
        self.p.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn weight(&self, j: usize, i: usize) -> f64 {
        self.p[(j, i)]
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `(I + P) / 2`.
    pub fn lazy(&self) -> DMatrix<f64> {
        (DMatrix::identity(self.m(), self.m()) + &self.p) * 0.5
    }

    /// Relabels agents by `perm` (agent `i` becomes `perm[i]`).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, TopologyError> {
        let m = self.m();
        let mut seen = vec![false; m];
        if perm.len() != m || perm.iter().any(|&k| k >= m || std::mem::replace(&mut seen[k], true)) {
            return invalid("not a permutation");
        }
        let mut q = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                q[(perm[i], perm[j])] = self.p[(i, j)];
            }
        }
        Ok(Self { p: q, beta: self.beta })
    }
}

fn second_singular_value_of(p: &DMatrix<f64>) -> f64 {
    let mut s: Vec<f64> = p.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s.get(1).copied().unwrap_or(0.0).max(0.0)
}

/// `sigma_2(P)`.
pub fn second_singular_value(p: &MixingMatrix) -> f64 {
    p.beta
}

/// `max_i sum_j |[P^k]_{ji} - 1/m|`.
pub fn mixing_error(p: &MixingMatrix, k: u32) -> f64 {
    let m = p.m();
    let mut pk = DMatrix::<f64>::identity(m, m);
    for _ in 0..k {
        pk = &pk * p.matrix();
    }
    let inv = 1.0 / m as f64;
    (0..m)
        .map(|i| (0..m).map(|j| (pk[(j, i)] - inv).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}
