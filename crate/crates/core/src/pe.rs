//! Split-step Fourier parabolic equation in range.
//!
//! `(i/k) d psi/dr = [-1/(2k^2) d^2/dz^2 + V0(z) + eps V1(z, r)] psi` is
//! advanced by Strang splitting: half potential phase, kinetic phase in the
//! vertical wavenumber domain, half potential phase, with the perturbation
//! frozen at the midpoint of the step. By default three Strang substeps are
//! composed into a fourth-order step; plain Strang at 25 m leaves phase
//! errors near 2e-4 on the upper trapped modes over 50 km.

use std::sync::Arc;

use log::warn;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::depth::DepthGrid;
use crate::env::{PerturbationField, WaveguideParams};
use crate::error::{invalid, Error, Result};
use crate::modes::ModeBasis;
use crate::unitary::{Provenance, UnitaryPropagator};
use crate::C64;

/// Kinetic operator used in the vertical wavenumber domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KineticSymbol {
    /// `(1 - cos(p dz)) / dz^2`, the symbol of the second difference the
    /// mode solver uses, so unperturbed modes are exact eigenvectors.
    #[default]
    FiniteDifference,
    /// `p^2 / 2`.
    Spectral,
}

/// Splitting scheme for one range step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplitOrder {
    /// Potential, kinetic, potential: second order in `dr`.
    Strang,
    /// Triple-jump composition of three Strang steps: fourth order in `dr`
    /// at three times the cost. The sponge is applied once per full step.
    #[default]
    Fourth,
}

impl SplitOrder {
    /// Substep fractions of one full step.
    fn fractions(self) -> Vec<f64> {
        match self {
            SplitOrder::Strang => vec![1.0],
            SplitOrder::Fourth => {
                let w1 = 1.0 / (2.0 - 2f64.cbrt());
                vec![w1, 1.0 - 2.0 * w1, w1]
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeConfig {
    /// Range step (km); the last step is never partial, see [`PeSolver::propagate`].
    pub dr: f64,
    /// Sponge width (km) at each edge of the depth window.
    pub absorber_width: f64,
    /// Damping rate (1/km) reached at the window edges; quadratic ramp inside the sponge.
    pub absorber_rate: f64,
    pub kinetic: KineticSymbol,
    pub order: SplitOrder,
    /// Accepted `max |U U^dagger - I|` for extracted propagators.
    pub unitarity_tol: f64,
}

impl Default for PeConfig {
    fn default() -> Self {
        PeConfig {
            dr: 0.05,
            absorber_width: 1.5,
            absorber_rate: 2.0,
            kinetic: KineticSymbol::FiniteDifference,
            order: SplitOrder::Fourth,
            unitarity_tol: 1e-6,
        }
    }
}

impl PeConfig {
    pub fn validate(&self, guide: &WaveguideParams, grid: &DepthGrid) -> Result<()> {
        if !(self.dr > 0.0) {
            return Err(invalid("pe.dr", "must be positive"));
        }
        if !(self.absorber_width >= 0.0) || !(self.absorber_rate >= 0.0) {
            return Err(invalid("pe.absorber", "width and rate must be non-negative"));
        }
        if grid.z_min + self.absorber_width > -0.5
            || grid.z_max - self.absorber_width < guide.ocean_depth + 1.0
        {
            return Err(invalid(
                "pe.absorber_width",
                format!(
                    "sponge must stay outside [-0.5, {}] km",
                    guide.ocean_depth + 1.0
                ),
            ));
        }
        if !(self.unitarity_tol > 0.0) {
            return Err(invalid("pe.unitarity_tol", "must be positive"));
        }
        Ok(())
    }
}

/// Outcome of one propagation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationReport {
    pub steps: usize,
    pub step: f64,
    /// Largest fractional energy loss over the propagated columns.
    pub absorbed_fraction: f64,
}

/// Precomputed split-step propagator on one depth grid.
pub struct PeSolver<'a> {
    grid: DepthGrid,
    cfg: PeConfig,
    background: Vec<f64>,
    /// Sponge damping rate per sample (1/km).
    sponge: Vec<f64>,
    perturbation: Option<&'a PerturbationField>,
    /// Kinetic symbol per FFT bin, before division by k.
    symbol: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl<'a> PeSolver<'a> {
    /// `perturbation = None` propagates through the background profile alone.
    pub fn new(
        guide: &WaveguideParams,
        grid: &DepthGrid,
        cfg: PeConfig,
        perturbation: Option<&'a PerturbationField>,
    ) -> Result<Self> {
        grid.validate()?;
        cfg.validate(guide, grid)?;
        if let Some(p) = perturbation {
            if p.len() != grid.len {
                return Err(Error::GridMismatch {
                    expected: grid.len,
                    found: p.len(),
                });
            }
        }
        let n = grid.len;
        let dz = grid.dz();
        let z = grid.points();
        let background = z.iter().map(|&zi| guide.munk_potential(zi)).collect();
        let w = cfg.absorber_width;
        let sponge = z
            .iter()
            .map(|&zi| {
                let depth_in = (grid.z_min + w - zi).max(zi - (grid.z_max - w)).max(0.0);
                if w > 0.0 {
                    cfg.absorber_rate * (depth_in / w).powi(2)
                } else {
                    0.0
                }
            })
            .collect();
        let symbol = (0..n)
            .map(|j| {
                let jj = if j <= n / 2 { j as f64 } else { j as f64 - n as f64 };
                let p = 2.0 * std::f64::consts::PI * jj / (n as f64 * dz);
                match cfg.kinetic {
                    KineticSymbol::FiniteDifference => (1.0 - (p * dz).cos()) / (dz * dz),
                    KineticSymbol::Spectral => 0.5 * p * p,
                }
            })
            .collect();
        let mut planner = FftPlanner::new();
        Ok(PeSolver {
            grid: *grid,
            cfg,
            background,
            sponge,
            perturbation,
            symbol,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        })
    }

    pub fn grid(&self) -> &DepthGrid {
        &self.grid
    }

    pub fn config(&self) -> &PeConfig {
        &self.cfg
    }

    /// Total potential `V0 + eps V1(z, r)` on the grid.
    pub fn potential(&self, r: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.grid.len];
        self.potential_into(r, &mut v);
        v
    }

    fn potential_into(&self, r: f64, out: &mut [f64]) {
        match self.perturbation {
            Some(p) => {
                p.profile_into(r, out);
                out.iter_mut().zip(&self.background).for_each(|(o, b)| *o += b);
            }
            None => out.copy_from_slice(&self.background),
        }
    }

    /// One step of length `cfg.dr` from range `r`.
    pub fn pe_step(&self, field: &mut [C64], k: f64, r: f64) -> Result<()> {
        self.check_field(field)?;
        let mut cols = [field.to_vec()];
        self.advance(&[k], &[0], &mut cols, r, self.cfg.dr, 1)?;
        field.copy_from_slice(&cols[0]);
        Ok(())
    }

    /// Propagates `field` from `r0` over `range` km in `round(range / dr)` equal steps.
    pub fn propagate(&self, field: &mut [C64], k: f64, r0: f64, range: f64) -> Result<PropagationReport> {
        self.check_field(field)?;
        let mut cols = [field.to_vec()];
        let report = self.propagate_batch(&[k], &[0], &mut cols, r0, range)?;
        field.copy_from_slice(&cols[0]);
        Ok(report)
    }

    /// Propagates several fields in lockstep; `fields[c]` evolves at
    /// wavenumber `ks[k_of[c]]`. Every column follows exactly the arithmetic
    /// of a lone [`propagate`](Self::propagate); the potential profile is
    /// simply evaluated once per step for all of them.
    pub fn propagate_batch(
        &self,
        ks: &[f64],
        k_of: &[usize],
        fields: &mut [Vec<C64>],
        r0: f64,
        range: f64,
    ) -> Result<PropagationReport> {
        if !(range >= 0.0) {
            return Err(invalid("range", "must be non-negative"));
        }
        let steps = (range / self.cfg.dr).round().max(1.0) as usize;
        let step = range / steps as f64;
        if range == 0.0 {
            return Ok(PropagationReport {
                steps: 0,
                step: 0.0,
                absorbed_fraction: 0.0,
            });
        }
        self.advance(ks, k_of, fields, r0, step, steps)
    }

    fn check_field(&self, field: &[C64]) -> Result<()> {
        if field.len() != self.grid.len {
            return Err(Error::GridMismatch {
                expected: self.grid.len,
                found: field.len(),
            });
        }
        Ok(())
    }

    fn advance(
        &self,
        ks: &[f64],
        k_of: &[usize],
        fields: &mut [Vec<C64>],
        r0: f64,
        step: f64,
        steps: usize,
    ) -> Result<PropagationReport> {
        if k_of.len() != fields.len() {
            return Err(Error::Dimension(format!(
                "{} wavenumber indices for {} fields",
                k_of.len(),
                fields.len()
            )));
        }
        if let Some(&bad) = k_of.iter().find(|&&i| i >= ks.len()) {
            return Err(Error::Dimension(format!("wavenumber index {bad} out of {}", ks.len())));
        }
        if let Some(&k) = ks.iter().find(|&&k| !(k > 0.0)) {
            return Err(invalid("k", format!("wavenumber must be positive, got {k}")));
        }
        for f in fields.iter() {
            self.check_field(f)?;
        }

        let n = self.grid.len;
        let norm = 1.0 / n as f64;
        let fractions = self.cfg.order.fractions();
        let composite = fractions.len() > 1;
        // kinetic[f][q]: phase for substep fraction f at wavenumber ks[q].
        let kinetic: Vec<Vec<Vec<C64>>> = fractions
            .iter()
            .map(|&c| {
                ks.iter()
                    .map(|&k| {
                        self.symbol
                            .iter()
                            .map(|s| C64::from_polar(norm, -s * c * step / k))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        // A backward substep must not amplify inside the sponge, so composite
        // schemes damp once per full step instead of inside the half phases.
        let damping: Vec<Vec<f64>> = fractions
            .iter()
            .map(|&c| {
                self.sponge
                    .iter()
                    .map(|s| if composite { 1.0 } else { (-0.5 * s * c * step).exp() })
                    .collect()
            })
            .collect();
        let full_damping: Vec<f64> = self.sponge.iter().map(|s| (-s * step).exp()).collect();
        let sponge_on = composite && self.sponge.iter().any(|&s| s > 0.0);
        let before: Vec<f64> = fields.iter().map(|f| energy(f)).collect();

        let mut v = vec![0.0; n];
        let mut half = vec![vec![C64::new(0.0, 0.0); n]; ks.len()];
        let scratch_len = self
            .fwd
            .get_inplace_scratch_len()
            .max(self.inv.get_inplace_scratch_len());
        for s in 0..steps {
            let mut r = r0 + s as f64 * step;
            for (f, &c) in fractions.iter().enumerate() {
                let h = c * step;
                self.potential_into(r + 0.5 * h, &mut v);
                half_phases(ks, &v, &damping[f], h, &mut half);
                let kin = &kinetic[f];
                let last = sponge_on && f + 1 == fractions.len();
                fields
                    .par_iter_mut()
                    .zip(k_of.par_iter())
                    .for_each_init(
                        || vec![C64::new(0.0, 0.0); scratch_len],
                        |scratch, (col, &ki)| {
                            let hp = &half[ki];
                            col.iter_mut().zip(hp).for_each(|(a, b)| *a *= b);
                            self.fwd.process_with_scratch(col, scratch);
                            col.iter_mut().zip(&kin[ki]).for_each(|(a, b)| *a *= b);
                            self.inv.process_with_scratch(col, scratch);
                            col.iter_mut().zip(hp).for_each(|(a, b)| *a *= b);
                            if last {
                                col.iter_mut().zip(&full_damping).for_each(|(a, d)| *a *= d);
                            }
                        },
                    );
                r += h;
            }
        }

        let absorbed_fraction = fields
            .iter()
            .zip(&before)
            .filter(|(_, &b)| b > 0.0)
            .map(|(f, &b)| 1.0 - energy(f) / b)
            .fold(0.0f64, f64::max);
        if absorbed_fraction > 0.01 {
            warn!(
                "{:.2}% of the field energy reached the sponge; energy is leaking to untrapped angles",
                100.0 * absorbed_fraction
            );
        }
        Ok(PropagationReport {
            steps,
            step,
            absorbed_fraction,
        })
    }
}

/// `damping(z) exp(-i k V(z) step / 2)` for every wavenumber. A uniformly
/// spaced set of wavenumbers is filled by a phasor recurrence, re-anchored
/// every few entries to keep rounding drift below 1e-14.
fn half_phases(ks: &[f64], v: &[f64], damping: &[f64], step: f64, out: &mut [Vec<C64>]) {
    const ANCHOR: usize = 16;
    let dk = if ks.len() > 1 { ks[1] - ks[0] } else { 0.0 };
    let uniform = ks.len() > 2
        && ks
            .windows(2)
            .all(|w| ((w[1] - w[0]) - dk).abs() <= 1e-12 * ks[ks.len() - 1].abs());
    for (i, (&vi, &d)) in v.iter().zip(damping).enumerate() {
        let theta = -0.5 * vi * step;
        if uniform {
            let inc = C64::from_polar(1.0, theta * dk);
            let mut cur = C64::new(0.0, 0.0);
            for (q, &k) in ks.iter().enumerate() {
                cur = if q % ANCHOR == 0 {
                    C64::from_polar(d, theta * k)
                } else {
                    cur * inc
                };
                out[q][i] = cur;
            }
        } else {
            for (q, &k) in ks.iter().enumerate() {
                out[q][i] = C64::from_polar(d, theta * k);
            }
        }
    }
}

fn energy(f: &[C64]) -> f64 {
    f.iter().map(|c| c.norm_sqr()).sum()
}

/// Column n is the projection of the PE-propagated mode n onto every mode,
/// without any unitarity check.
pub fn pe_unitary(
    basis: &ModeBasis,
    solver: &PeSolver<'_>,
    r0: f64,
    range: f64,
    seeds: Vec<u64>,
) -> Result<(UnitaryPropagator, PropagationReport)> {
    if basis.grid != solver.grid {
        return Err(Error::GridMismatch {
            expected: solver.grid.len,
            found: basis.grid.len,
        });
    }
    let m = basis.mode_count();
    let mut cols: Vec<Vec<C64>> = (0..m)
        .map(|c| basis.mode(c).iter().map(|&x| C64::new(x, 0.0)).collect())
        .collect();
    let report = solver.propagate_batch(&[basis.k], &vec![0; m], &mut cols, r0, range)?;
    let mut u = nalgebra::DMatrix::zeros(m, m);
    for (n, col) in cols.iter().enumerate() {
        for (row, a) in basis.project(col)?.into_iter().enumerate() {
            u[(row, n)] = a;
        }
    }
    Ok((
        UnitaryPropagator {
            u,
            r: range,
            k: basis.k,
            provenance: Provenance::Pe,
            blocks: None,
            seeds,
        },
        report,
    ))
}

/// [`pe_unitary`] followed by the unitarity check at `cfg.unitarity_tol`.
pub fn extract_unitary(
    basis: &ModeBasis,
    solver: &PeSolver<'_>,
    r0: f64,
    range: f64,
    seeds: Vec<u64>,
) -> Result<UnitaryPropagator> {
    let (u, _) = pe_unitary(basis, solver, r0, range, seeds)?;
    u.check_unitary(solver.cfg.unitarity_tol)?;
    Ok(u)
}
