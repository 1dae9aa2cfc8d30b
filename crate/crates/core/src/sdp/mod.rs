//! Standard-form semidefinite programs and a dense primal-dual
//! interior-point solver.
//!
//! Primal form used throughout:
//!
//! ```text
//! minimize    c_f . x + Σ_b <C_b, X_b>
//! subject to  a_i . x + Σ_b <A_ib, X_b> = b_i     (i = 1..m)
//!             X_b ⪰ 0 (PSD blocks) or X_b >= 0 elementwise (diagonal blocks)
//!             x free
//! ```
//!
//! with dual
//!
//! ```text
//! maximize    b . y
//! subject to  Σ_i y_i a_i = c_f
//!             S_b = C_b - Σ_i y_i A_ib ⪰ 0
//! ```

mod chol;
mod sdpa;
mod solver;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use sdpa::{export_sdpa, import_sdpa, SdpaError};
pub use solver::{solve, SolverOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Psd,
    /// Nonnegative orthant, stored as the diagonal of a matrix block.
    Diag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub label: String,
    pub dim: usize,
    pub kind: BlockKind,
}

/// Entry of a symmetric block matrix; `i <= j`, and the entry stands for
/// both `(i, j)` and `(j, i)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub block: usize,
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

impl BlockEntry {
    pub fn new(block: usize, i: usize, j: usize, value: f64) -> Self {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        BlockEntry { block, i, j, value }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EqConstraint {
    /// `(free variable, coefficient)`
    pub free: Vec<(usize, f64)>,
    pub entries: Vec<BlockEntry>,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SdpInstance {
    pub n_free: usize,
    pub blocks: Vec<BlockSpec>,
    pub constraints: Vec<EqConstraint>,
    pub c_free: Vec<f64>,
    pub c_blocks: Vec<BlockEntry>,
}

/// `<A, X>` for a symmetric `A` given by upper-triangle entries.
pub fn inner_entries(entries: &[BlockEntry], blocks: &[DMatrix<f64>]) -> f64 {
    entries
        .iter()
        .map(|e| {
            let x = blocks[e.block][(e.i, e.j)];
            if e.i == e.j {
                e.value * x
            } else {
                2.0 * e.value * x
            }
        })
        .sum()
}

impl SdpInstance {
    pub fn n_constraints(&self) -> usize {
        self.constraints.len()
    }

    /// Number of scalar unknowns in the vectorised primal (free variables
    /// plus upper triangles of the blocks).
    pub fn n_scalar_vars(&self) -> usize {
        self.n_free
            + self
                .blocks
                .iter()
                .map(|b| match b.kind {
                    BlockKind::Psd => b.dim * (b.dim + 1) / 2,
                    BlockKind::Diag => b.dim,
                })
                .sum::<usize>()
    }

    pub fn primal_objective(&self, free: &[f64], blocks: &[DMatrix<f64>]) -> f64 {
        let lin: f64 = self.c_free.iter().zip(free).map(|(c, x)| c * x).sum();
        lin + inner_entries(&self.c_blocks, blocks)
    }

    /// `A(x, X) - b` for every constraint.
    pub fn equality_residuals(&self, free: &[f64], blocks: &[DMatrix<f64>]) -> Vec<f64> {
        self.constraints
            .iter()
            .map(|c| {
                let lin: f64 = c.free.iter().map(|&(k, a)| a * free[k]).sum();
                lin + inner_entries(&c.entries, blocks) - c.rhs
            })
            .collect()
    }

    /// Structural checks: indices in range, `i <= j`, diagonal blocks only
    /// use diagonal entries, finite data.
    pub fn validate(&self) -> Result<(), String> {
        if self.c_free.len() != self.n_free {
            return Err(format!(
                "objective has {} free coefficients, expected {}",
                self.c_free.len(),
                self.n_free
            ));
        }
        let check = |e: &BlockEntry, what: &str| -> Result<(), String> {
            let b = self
                .blocks
                .get(e.block)
                .ok_or_else(|| format!("{what}: block {} out of range", e.block))?;
            if e.i > e.j || e.j >= b.dim {
                return Err(format!("{what}: entry ({}, {}) invalid for block of dim {}", e.i, e.j, b.dim));
            }
            if b.kind == BlockKind::Diag && e.i != e.j {
                return Err(format!("{what}: off-diagonal entry in diagonal block {}", e.block));
            }
            if !e.value.is_finite() {
                return Err(format!("{what}: non-finite value"));
            }
            Ok(())
        };
        for e in &self.c_blocks {
            check(e, "objective")?;
        }
        for (r, c) in self.constraints.iter().enumerate() {
            for e in &c.entries {
                check(e, &format!("constraint {r}"))?;
            }
            for &(k, a) in &c.free {
                if k >= self.n_free || !a.is_finite() {
                    return Err(format!("constraint {r}: bad free variable entry {k}"));
                }
            }
            if !c.rhs.is_finite() {
                return Err(format!("constraint {r}: non-finite right-hand side"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdpStatus {
    Optimal,
    PrimalInfeasible,
    DualInfeasible,
    MaxIters,
    NumericalFailure,
}

/// One line of the solver log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterLog {
    pub iter: usize,
    pub mu: f64,
    pub primal_res: f64,
    pub dual_res: f64,
    pub rel_gap: f64,
    pub primal_obj: f64,
    pub dual_obj: f64,
    pub step_primal: f64,
    pub step_dual: f64,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub status: SdpStatus,
    pub free: Vec<f64>,
    /// Primal blocks; diagonal blocks are stored as diagonal matrices.
    pub blocks: Vec<DMatrix<f64>>,
    pub y: Vec<f64>,
    pub dual_blocks: Vec<DMatrix<f64>>,
    pub primal_obj: f64,
    pub dual_obj: f64,
    /// `||A(x,X) - b||_inf`
    pub primal_res: f64,
    /// Dual residual, relative to `1 + ||C||_max`
    pub dual_res: f64,
    /// `(<X, S> / n) / (1 + |p|)` where `n` is the total block dimension
    pub rel_gap: f64,
    pub iterations: usize,
    pub history: Vec<IterLog>,
}

impl SdpSolution {
    /// Minimum eigenvalue per primal block.
    pub fn min_eigenvalues(&self) -> Vec<f64> {
        self.blocks.iter().map(min_eigenvalue).collect()
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone()
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// `min x s.t. [[x, 1], [1, x]] ⪰ 0` written in the primal standard form
    /// as `min 2 X_12 s.t. tr X = 1`; the analytic optimum has dual `y = -1`,
    /// i.e. `x* = -y* = 1`.
    pub fn two_by_two() -> SdpInstance {
        SdpInstance {
            n_free: 0,
            blocks: vec![BlockSpec {
                label: "X".into(),
                dim: 2,
                kind: BlockKind::Psd,
            }],
            constraints: vec![EqConstraint {
                free: vec![],
                entries: vec![BlockEntry::new(0, 0, 0, 1.0), BlockEntry::new(0, 1, 1, 1.0)],
                rhs: 1.0,
            }],
            c_free: vec![],
            c_blocks: vec![BlockEntry::new(0, 0, 1, 1.0)],
        }
    }
}
