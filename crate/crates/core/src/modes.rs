//! Acoustic normal modes of the Munk waveguide at fixed wavenumber.
//!
//! The depth operator `-1/2 d^2/dz^2 + k^2 V0(z)` is discretised with second
//! order central differences on the shared [`DepthGrid`]; its lowest
//! eigenpairs give `k^2 E_m` and `psi_m(z; k)`. The parabolic-equation
//! propagator uses the Fourier symbol of the same difference operator, so
//! these modes are exact eigenvectors of its unperturbed generator.

use std::sync::OnceLock;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::depth::DepthGrid;
use crate::env::{Environment, WaveguideParams};
use crate::error::{invalid, Error, Result};
use crate::tridiag::SymTridiagonal;
use crate::C64;

/// How many modes to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModeCount {
    /// Every mode with `E_m < V0(0)`: trapped below the sea surface.
    #[default]
    Trapped,
    Fixed(usize),
}

#[derive(Debug, Clone)]
pub struct ModeBasis {
    pub k: f64,
    pub grid: DepthGrid,
    /// Eigenvalues `E_m`, ascending.
    pub energies: Vec<f64>,
    /// Column-major `len x M`; column m is `psi_m`.
    psi: Vec<f64>,
    /// Half-open sample range outside which every mode is below 1e-15 of its peak.
    support: (usize, usize),
}

/// Discrete depth operator `-1/2 D2 + k^2 V0`, Dirichlet at the window edges.
pub fn depth_operator(k: f64, guide: &WaveguideParams, grid: &DepthGrid) -> SymTridiagonal {
    let dz = grid.dz();
    let kin = 1.0 / (dz * dz);
    let diag = (0..grid.len)
        .map(|i| kin + k * k * guide.munk_potential(grid.z(i)))
        .collect();
    let off = vec![-0.5 * kin; grid.len - 1];
    SymTridiagonal::new(diag, off)
}

/// Number of modes with `E < V0(0)`.
pub fn trapped_mode_count(k: f64, guide: &WaveguideParams, grid: &DepthGrid) -> usize {
    depth_operator(k, guide, grid).count_below(k * k * guide.munk_potential(0.0))
}

pub fn solve_modes(
    k: f64,
    guide: &WaveguideParams,
    grid: &DepthGrid,
    count: ModeCount,
) -> Result<ModeBasis> {
    if !(k > 0.0) {
        return Err(invalid("k", format!("wavenumber must be positive, got {k}")));
    }
    grid.validate()?;
    let op = depth_operator(k, guide, grid);
    let k2 = k * k;
    let edge = guide
        .munk_potential(grid.z_min)
        .min(guide.munk_potential(grid.z_max));
    let (m, ceiling) = match count {
        ModeCount::Trapped => {
            let v = guide.munk_potential(0.0);
            (op.count_below(k2 * v), k2 * v)
        }
        ModeCount::Fixed(m) => {
            let available = op.count_below(k2 * edge);
            if m > available {
                return Err(Error::TooFewTrappedModes {
                    requested: m,
                    available,
                    k,
                });
            }
            (m, k2 * edge)
        }
    };
    // Low wavenumbers at the edge of a broadband window trap nothing; an
    // empty basis carries no energy and is valid there.
    if m == 0 {
        return Ok(ModeBasis {
            k,
            grid: *grid,
            energies: Vec::new(),
            psi: Vec::new(),
            support: (0, 0),
        });
    }

    // Coarse bisection is enough to seed inverse iteration; the Rayleigh
    // quotient of the converged vector restores full precision.
    let lambdas = op.lowest_eigenvalues_below(m, ceiling, 1e-9);
    let dz = grid.dz();
    let n = grid.len;
    let mut psi = Vec::with_capacity(n * m);
    let mut energies = Vec::with_capacity(m);
    for &lam in &lambdas {
        let mut v = op.eigenvector(lam);
        let lam = op.rayleigh(&v);
        fix_sign(&mut v);
        let scale = 1.0 / dz.sqrt();
        psi.extend(v.iter().map(|x| x * scale));
        energies.push(lam / k2);
    }

    // Shortest vertical wavelength belongs to the top mode on the axis.
    let v_min = guide.munk_potential(guide.axis_depth);
    let kz = k * (2.0 * (energies[m - 1] - v_min)).max(0.0).sqrt();
    if kz > 0.0 && 2.0 * std::f64::consts::PI / kz < 8.0 * dz {
        return Err(invalid(
            "depth_grid.len",
            format!("dz = {dz:.3e} km gives fewer than 8 points per wavelength of mode {}", m - 1),
        ));
    }

    let support = support_range(&psi, n, m);
    Ok(ModeBasis {
        k,
        grid: *grid,
        energies,
        psi,
        support,
    })
}

/// Positive on the shallowest lobe: the first sample whose magnitude reaches
/// a tenth of the peak sits inside the first interior extremum's lobe.
fn fix_sign(v: &mut [f64]) {
    let peak = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if let Some(first) = v.iter().find(|x| x.abs() >= 0.1 * peak) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

fn support_range(psi: &[f64], n: usize, m: usize) -> (usize, usize) {
    let mut lo = n;
    let mut hi = 0;
    for col in psi.chunks(n).take(m) {
        let peak = col.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        let thresh = 1e-15 * peak;
        if let Some(i) = col.iter().position(|x| x.abs() > thresh) {
            lo = lo.min(i);
        }
        if let Some(i) = col.iter().rposition(|x| x.abs() > thresh) {
            hi = hi.max(i + 1);
        }
    }
    (lo.min(hi), hi)
}

impl ModeBasis {
    pub fn mode_count(&self) -> usize {
        self.energies.len()
    }

    pub fn mode(&self, m: usize) -> &[f64] {
        &self.psi[m * self.grid.len..(m + 1) * self.grid.len]
    }

    pub fn support(&self) -> (usize, usize) {
        self.support
    }

    /// Trapezoid weights on the basis grid.
    pub fn quadrature_weights(&self) -> Vec<f64> {
        trapezoid_weights(self.grid.len, self.grid.dz())
    }

    /// `a_m = int field(z) psi_m(z) dz` (trapezoid rule).
    pub fn project(&self, field: &[C64]) -> Result<Vec<C64>> {
        if field.len() != self.grid.len {
            return Err(Error::GridMismatch {
                expected: self.grid.len,
                found: field.len(),
            });
        }
        let w = self.quadrature_weights();
        let (lo, hi) = self.support;
        Ok((0..self.mode_count())
            .map(|m| {
                let psi = self.mode(m);
                (lo..hi).map(|i| field[i] * (psi[i] * w[i])).sum()
            })
            .collect())
    }

    /// `sum_m c_m psi_m(z)` on the full grid.
    pub fn synthesize(&self, coefs: &[C64]) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); self.grid.len];
        let (lo, hi) = self.support;
        for (m, c) in coefs.iter().enumerate().take(self.mode_count()) {
            let psi = self.mode(m);
            for i in lo..hi {
                out[i] += c * psi[i];
            }
        }
        out
    }

    /// `int psi_m psi_n dz` for all pairs.
    pub fn overlap(&self) -> DMatrix<f64> {
        let w = self.quadrature_weights();
        let m = self.mode_count();
        DMatrix::from_fn(m, m, |a, b| {
            self.mode(a)
                .iter()
                .zip(self.mode(b))
                .zip(&w)
                .map(|((x, y), wi)| x * y * wi)
                .sum()
        })
    }

    /// `|| -1/2 D2 psi + k^2 V0 psi - k^2 E psi || / || k^2 E psi ||`.
    pub fn eigen_residual(&self, guide: &WaveguideParams, m: usize) -> f64 {
        let op = depth_operator(self.k, guide, &self.grid);
        let psi = self.mode(m);
        let mut t = vec![0.0; psi.len()];
        op.apply(psi, &mut t);
        let lam = self.k * self.k * self.energies[m];
        let num: f64 = t.iter().zip(psi).map(|(a, b)| (a - lam * b).powi(2)).sum();
        let den: f64 = psi.iter().map(|b| (lam * b).powi(2)).sum();
        (num / den).sqrt()
    }
}

pub fn project(field: &[C64], basis: &ModeBasis) -> Result<Vec<C64>> {
    basis.project(field)
}

pub(crate) fn trapezoid_weights(n: usize, dz: f64) -> Vec<f64> {
    let mut w = vec![dz; n];
    w[0] = 0.5 * dz;
    w[n - 1] = 0.5 * dz;
    w
}

/// Internal-wave coupling elements `V^{j,l}_{mn} = int V_j(z; k_l) psi_m psi_n dz`.
///
/// `V_j(z; k_l)` factors into a depth shape times a scalar weight `w_jl`, so
/// the tensor is stored as one symmetric `M x M` shape matrix per vertical
/// mode j, built on first use. Entries are `w_jl * G^j_mn`.
pub struct CouplingTensor<'a> {
    basis: &'a ModeBasis,
    env: &'a Environment,
    weights: Vec<f64>,
    shapes: Vec<OnceLock<DMatrix<f64>>>,
}

impl<'a> CouplingTensor<'a> {
    pub fn new(basis: &'a ModeBasis, env: &'a Environment) -> Self {
        CouplingTensor {
            basis,
            env,
            weights: env.spectral_weights(),
            shapes: (0..env.waves.j_max).map(|_| OnceLock::new()).collect(),
        }
    }

    pub fn k(&self) -> f64 {
        self.basis.k
    }

    pub fn j_max(&self) -> usize {
        self.env.waves.j_max
    }

    pub fn l_max(&self) -> usize {
        self.env.waves.kl_count
    }

    /// Horizontal wavenumber `k_l` (rad/km).
    pub fn kl(&self, l: usize) -> f64 {
        self.env.waves.kl(l)
    }

    /// `w_jl`, j 1-based.
    pub fn weight(&self, j: usize, l: usize) -> f64 {
        self.weights[(j - 1) * self.env.waves.kl_count + l]
    }

    /// `G^j_mn = int amplitude exp(-3z/2B) sin(j pi xi) psi_m psi_n dz`.
    pub fn shape_matrix(&self, j: usize) -> Result<&DMatrix<f64>> {
        if j == 0 || j > self.j_max() {
            return Err(Error::ModeIndex {
                j,
                j_max: self.j_max(),
            });
        }
        Ok(self.shapes[j - 1].get_or_init(|| self.build_shape(j)))
    }

    fn build_shape(&self, j: usize) -> DMatrix<f64> {
        let basis = self.basis;
        let (lo, hi) = basis.support;
        let rows = hi - lo;
        let m = basis.mode_count();
        let w = basis.quadrature_weights();
        let psi = DMatrix::from_fn(rows, m, |i, c| basis.mode(c)[lo + i]);
        let weighted = DMatrix::from_fn(rows, m, |i, c| {
            let z = basis.grid.z(lo + i);
            psi[(i, c)] * w[lo + i] * self.env.mode_shape(j, z)
        });
        let g = psi.transpose() * weighted;
        // exact symmetry
        DMatrix::from_fn(m, m, |a, b| 0.5 * (g[(a, b)] + g[(b, a)]))
    }

    pub fn element(&self, j: usize, l: usize, m: usize, n: usize) -> Result<f64> {
        let mc = self.basis.mode_count();
        if l >= self.l_max() || m >= mc || n >= mc {
            return Err(Error::Dimension(format!(
                "coupling index (l={l}, m={m}, n={n}) out of range (l_max={}, M={mc})",
                self.l_max()
            )));
        }
        Ok(self.weight(j, l) * self.shape_matrix(j)?[(m, n)])
    }

    /// Coupling elements for a rectangular block of mode pairs.
    pub fn coupling_elements(
        &self,
        j: usize,
        l: usize,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> Result<DMatrix<f64>> {
        let mc = self.basis.mode_count();
        if rows.end > mc || cols.end > mc || l >= self.l_max() {
            return Err(Error::Dimension(format!(
                "block {rows:?} x {cols:?} at l={l} exceeds M={mc}, l_max={}",
                self.l_max()
            )));
        }
        let g = self.shape_matrix(j)?;
        let w = self.weight(j, l);
        Ok(DMatrix::from_fn(rows.len(), cols.len(), |a, b| {
            w * g[(rows.start + a, cols.start + b)]
        }))
    }
}

pub fn coupling_elements(
    tensor: &CouplingTensor<'_>,
    j: usize,
    l: usize,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> Result<DMatrix<f64>> {
    tensor.coupling_elements(j, l, rows, cols)
}
