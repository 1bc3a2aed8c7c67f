//! Per-member runs shared by the command line and the acceptance suite.

use log::{info, warn};
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::env::{sample_iw_realization, PerturbationField};
use crate::error::Result;
use crate::modes::{solve_modes, CouplingTensor, ModeBasis};
use crate::pe::{pe_unitary, PeSolver, PropagationReport};
use crate::rmt::{apply_member, draw_member, variance_profile, VarianceProfile};
use crate::timefront::{
    project_source, synthesize_fields, synthesize_modal, KGrid, ModeSamples, TimefrontGrid,
};
use crate::unitary::UnitaryPropagator;
use crate::C64;

/// What [`prepare`] keeps besides sampled modes and source weights.
#[derive(Debug, Clone, Copy, Default)]
pub struct Needs {
    pub profiles: bool,
    /// Full-grid launch fields `sum_n a_n psi_n` for PE runs.
    pub launch_fields: bool,
}

/// Everything a run needs at one wavenumber; full mode shapes are dropped.
#[derive(Debug, Clone)]
pub struct KSlice {
    pub samples: ModeSamples,
    pub a: Vec<C64>,
    pub spillover: f64,
    pub profile: Option<VarianceProfile>,
    pub launch: Option<Vec<C64>>,
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub k_grid: KGrid,
    /// Kept depth sample indices.
    pub indices: Vec<usize>,
    pub slices: Vec<KSlice>,
}

impl Prepared {
    pub fn samples(&self) -> Vec<ModeSamples> {
        self.slices.iter().map(|s| s.samples.clone()).collect()
    }

    pub fn weights(&self) -> Vec<Vec<C64>> {
        self.slices.iter().map(|s| s.a.clone()).collect()
    }

    /// Variance profiles; empty unless prepared with `Needs::profiles`.
    pub fn profiles(&self) -> Vec<VarianceProfile> {
        self.slices.iter().filter_map(|s| s.profile.clone()).collect()
    }
}

pub fn basis_at(cfg: &ExperimentConfig, k: f64) -> Result<ModeBasis> {
    solve_modes(k, &cfg.environment.guide, &cfg.numerics.depth_grid, cfg.numerics.modes)
}

pub fn profile_for(cfg: &ExperimentConfig, basis: &ModeBasis) -> Result<VarianceProfile> {
    let coupling = CouplingTensor::new(basis, &cfg.environment);
    variance_profile(&coupling, &basis.energies, cfg.ensemble.block_range, cfg.ensemble.strength)
}

pub fn prepare(cfg: &ExperimentConfig, kg: &KGrid, needs: Needs) -> Result<Prepared> {
    let indices = cfg.numerics.depths.indices(&cfg.numerics.depth_grid)?;
    let slices = kg
        .points()
        .par_iter()
        .map(|&k| {
            let basis = basis_at(cfg, k)?;
            let w = project_source(&cfg.source.profile(&basis.grid), &basis)?;
            let profile = needs.profiles.then(|| profile_for(cfg, &basis)).transpose()?;
            let launch = needs.launch_fields.then(|| basis.synthesize(&w.a));
            Ok(KSlice {
                samples: ModeSamples::new(&basis, &indices),
                a: w.a,
                spillover: w.spillover,
                profile,
                launch,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    report_spillover(kg, &slices);
    Ok(Prepared {
        k_grid: *kg,
        indices,
        slices,
    })
}

/// One log line for the grid: edge wavenumbers trap few modes, so only the
/// spectrum-weighted spillover says whether the source is badly matched.
fn report_spillover(kg: &KGrid, slices: &[KSlice]) {
    let g2: Vec<f64> = kg.points().iter().map(|&k| kg.spectrum(k).powi(2)).collect();
    let weighted = slices.iter().zip(&g2).map(|(s, g)| s.spillover * g).sum::<f64>() / g2.iter().sum::<f64>();
    let over = slices.iter().filter(|s| s.spillover > 0.01).count();
    if weighted > 0.01 {
        warn!(
            "source leaves {:.2}% of its spectrum-weighted energy outside the trapped modes",
            100.0 * weighted
        );
    } else if over > 0 {
        info!(
            "spillover above 1% at {over} of {} wavenumbers; spectrum-weighted spillover {:.2e}",
            kg.count, weighted
        );
    }
}

/// Internal-wave-free timefront at `range`.
pub fn unperturbed_timefront(cfg: &ExperimentConfig, prep: &Prepared, range: f64) -> Result<TimefrontGrid> {
    let coefs: Vec<Vec<C64>> = prep
        .slices
        .iter()
        .map(|s| {
            s.a.iter()
                .zip(&s.samples.energies)
                .map(|(a, e)| a * C64::from_polar(1.0, -s.samples.k * e * range))
                .collect()
        })
        .collect();
    synthesize_modal(
        &coefs,
        &prep.samples(),
        &prep.k_grid,
        cfg.environment.guide.c0,
        range,
        &cfg.source,
    )
}

/// Timefront of random-matrix member `member` at the ensemble range.
pub fn rmt_timefront(cfg: &ExperimentConfig, prep: &Prepared, member: u64) -> Result<TimefrontGrid> {
    let coefs = apply_member(&cfg.ensemble, member, &prep.profiles(), &prep.weights())?;
    synthesize_modal(
        &coefs,
        &prep.samples(),
        &prep.k_grid,
        cfg.environment.guide.c0,
        cfg.range(),
        &cfg.source,
    )
}

fn perturbation(cfg: &ExperimentConfig, member: u64) -> PerturbationField {
    let rz = sample_iw_realization(cfg.iw_seed(member), &cfg.environment);
    PerturbationField::new(
        &cfg.environment,
        &rz,
        &cfg.numerics.depth_grid,
        cfg.ensemble.strength,
    )
}

/// Timefront of PE member `member`: the trapped-mode launch field marched
/// through its own internal-wave realization at every wavenumber.
pub fn pe_timefront(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    member: u64,
) -> Result<(TimefrontGrid, PropagationReport)> {
    let field = perturbation(cfg, member);
    let solver = PeSolver::new(
        &cfg.environment.guide,
        &cfg.numerics.depth_grid,
        cfg.numerics.pe,
        Some(&field),
    )?;
    let ks = prep.k_grid.points();
    let mut fields: Vec<Vec<C64>> = prep
        .slices
        .iter()
        .map(|s| {
            s.launch.clone().ok_or_else(|| {
                crate::error::Error::Dimension("prepared without launch fields".into())
            })
        })
        .collect::<Result<_>>()?;
    let k_of: Vec<usize> = (0..ks.len()).collect();
    let report = solver.propagate_batch(&ks, &k_of, &mut fields, 0.0, cfg.range())?;
    let kept: Vec<Vec<C64>> = fields
        .iter()
        .map(|f| prep.indices.iter().map(|&i| f[i]).collect())
        .collect();
    let depths: Vec<f64> = prep
        .indices
        .iter()
        .map(|&i| cfg.numerics.depth_grid.z(i))
        .collect();
    let tf = synthesize_fields(
        &kept,
        &depths,
        &prep.k_grid,
        cfg.environment.guide.c0,
        cfg.range(),
        &cfg.source,
    )?;
    Ok((tf, report))
}

/// PE-extracted propagator of member `member` over the ensemble range
/// (unitarity not enforced; callers check the defect).
pub fn pe_unitary_member(
    cfg: &ExperimentConfig,
    basis: &ModeBasis,
    member: u64,
) -> Result<(UnitaryPropagator, PropagationReport)> {
    let field = perturbation(cfg, member);
    let solver = PeSolver::new(
        &cfg.environment.guide,
        &cfg.numerics.depth_grid,
        cfg.numerics.pe,
        Some(&field),
    )?;
    pe_unitary(basis, &solver, 0.0, cfg.range(), vec![cfg.iw_seed(member)])
}

/// Random-matrix propagator of member `member` at a single wavenumber.
pub fn rmt_unitary_member(
    cfg: &ExperimentConfig,
    profile: &VarianceProfile,
    member: u64,
) -> Result<UnitaryPropagator> {
    Ok(draw_member(&cfg.ensemble, member, std::slice::from_ref(profile))?.remove(0))
}
