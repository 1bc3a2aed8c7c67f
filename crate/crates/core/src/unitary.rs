//! Mode-space propagators shared by the PE and random-matrix paths.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::C64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Projected from parabolic-equation runs.
    Pe,
    /// Product of random building blocks.
    Rmt,
}

/// Block structure of an RMT propagator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub block_range: f64,
    pub blocks: usize,
}

/// `U_mn(r; k)`: amplitude carried from mode n into mode m over range `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitaryPropagator {
    pub u: DMatrix<C64>,
    pub r: f64,
    pub k: f64,
    pub provenance: Provenance,
    pub blocks: Option<BlockInfo>,
    /// Seeds that produced the matrix (internal-wave realization or block draws).
    pub seeds: Vec<u64>,
}

impl UnitaryPropagator {
    pub fn mode_count(&self) -> usize {
        self.u.nrows()
    }

    pub fn unitarity_defect(&self) -> f64 {
        unitarity_defect(&self.u)
    }

    /// Errors when the defect exceeds `tol`.
    pub fn check_unitary(&self, tol: f64) -> Result<()> {
        let defect = self.unitarity_defect();
        if defect > tol || !defect.is_finite() {
            return Err(Error::UnitarityDefect { defect, tol });
        }
        Ok(())
    }

    /// `c = U a`.
    pub fn apply(&self, a: &[C64]) -> Result<Vec<C64>> {
        let m = self.mode_count();
        if a.len() != m {
            return Err(Error::GridMismatch {
                expected: m,
                found: a.len(),
            });
        }
        Ok((0..m)
            .map(|row| (0..m).map(|col| self.u[(row, col)] * a[col]).sum())
            .collect())
    }
}

/// `max |(U U^dagger - I)_ij|`.
pub fn unitarity_defect(u: &DMatrix<C64>) -> f64 {
    let g = u * u.adjoint();
    let mut worst: f64 = 0.0;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - C64::new(target, 0.0)).norm());
        }
    }
    worst
}

/// `diag(exp(-i k E_m r))`.
pub fn free_propagator(k: f64, energies: &[f64], r: f64) -> DMatrix<C64> {
    let mut u = DMatrix::zeros(energies.len(), energies.len());
    for (m, e) in energies.iter().enumerate() {
        u[(m, m)] = C64::from_polar(1.0, -k * e * r);
    }
    u
}
