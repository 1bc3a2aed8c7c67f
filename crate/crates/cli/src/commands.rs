use std::time::Instant;

use log::{info, warn};
use serde::Serialize;
use tfrmt_core::analysis::{
    compare_timefronts, depth_profiles_csv, mixing_depth_profile, traces, traces_csv, variance_table,
    ComparisonReport, MemberSet, TraceComparison,
};
use tfrmt_core::config::ExperimentConfig;
use tfrmt_core::env::{sample_iw_realization, PerturbationField};
use tfrmt_core::experiment::{
    basis_at, pe_timefront, pe_unitary_member, prepare, profile_for, rmt_timefront, rmt_unitary_member,
    unperturbed_timefront, Needs, Prepared,
};
use tfrmt_core::io::{
    intensity_from_grid, intensity_to_grid, db_csv, read_grid, timefront_to_grid, unitary_to_grid, GridHeader,
};
use tfrmt_core::timefront::{mixing_front_sampled, IntensityAccumulator, IntensityGrid, TimefrontGrid};
use tfrmt_core::{Error, Result};

use crate::output::Outputs;
use crate::{Command, PathKind};

pub fn run(cmd: &Command, cfg: &ExperimentConfig, name: &str) -> Result<()> {
    let mut out = Outputs::new(cfg, name)?;
    match cmd {
        Command::Modes { k } => modes(cfg, &mut out, *k)?,
        Command::IwField { member, samples } => iw_field(cfg, &mut out, *member, *samples)?,
        Command::PeUnitary => pe_unitaries(cfg, &mut out)?,
        Command::RmtEnsemble => rmt_ensemble(cfg, &mut out)?,
        Command::Timefront { path, member } => timefront(cfg, &mut out, *path, *member)?,
        Command::Average { path } => average(cfg, &mut out, *path)?,
        Command::MixingFront { pe_average } => mixing(cfg, &mut out, pe_average.as_deref())?,
        Command::Compare { skip_variance } => compare(cfg, &mut out, *skip_variance)?,
    }
    let manifest = out.finish()?;
    info!("wrote {}", manifest.display());
    Ok(())
}

fn k_center(cfg: &ExperimentConfig) -> f64 {
    cfg.source.k0(cfg.environment.guide.c0)
}

fn member_ids(cfg: &ExperimentConfig) -> std::ops::Range<u64> {
    0..cfg.ensemble.members as u64
}

fn modes(cfg: &ExperimentConfig, out: &mut Outputs, k: Option<f64>) -> Result<()> {
    let k = k.unwrap_or_else(|| k_center(cfg));
    let basis = basis_at(cfg, k)?;
    let idx = cfg.numerics.depths.indices(&cfg.numerics.depth_grid)?;
    let m = basis.mode_count();
    let payload: Vec<f64> = (0..m).flat_map(|j| idx.iter().map(move |&i| (j, i))).map(|(j, i)| basis.mode(j)[i]).collect();
    let mut h = GridHeader::new("modes", vec![m, idx.len()], false)
        .with_meta("k", k)?
        .with_meta("energies", &basis.energies)?;
    h.axes
        .insert("depth_km".into(), idx.iter().map(|&i| basis.grid.z(i)).collect());
    out.grid("modes.tfg", h, &payload)?;
    let mut csv = String::from("mode,energy,horizontal_wavenumber\n");
    for (j, e) in basis.energies.iter().enumerate() {
        csv.push_str(&format!("{j},{e:.15e},{:.12e}\n", k * (1.0 - e)));
    }
    out.bytes("modes_energies.csv", csv.as_bytes())?;
    info!("{m} trapped modes at k = {k:.3} rad/km");
    Ok(())
}

fn iw_field(cfg: &ExperimentConfig, out: &mut Outputs, member: u64, samples: usize) -> Result<()> {
    if samples < 2 {
        return Err(Error::InvalidParameter {
            field: "--samples".into(),
            reason: "need at least 2 range samples".into(),
        });
    }
    let seed = cfg.iw_seed(member);
    let rz = sample_iw_realization(seed, &cfg.environment);
    let grid = &cfg.numerics.depth_grid;
    let field = PerturbationField::new(&cfg.environment, &rz, grid, cfg.ensemble.strength);
    let idx = cfg.numerics.depths.indices(grid)?;
    let ranges: Vec<f64> = (0..samples)
        .map(|j| cfg.range() * j as f64 / (samples - 1) as f64)
        .collect();
    let payload: Vec<f64> = ranges
        .iter()
        .flat_map(|&r| {
            let p = field.profile(r);
            idx.iter().map(|&i| p[i]).collect::<Vec<_>>()
        })
        .collect();
    let mut h = GridHeader::new("iw_field", vec![samples, idx.len()], false)
        .with_meta("quantity", "relative sound-speed perturbation")?
        .with_meta("member", member)?
        .with_meta("iw_seed", seed)?;
    h.axes.insert("range_km".into(), ranges);
    h.axes.insert("depth_km".into(), idx.iter().map(|&i| grid.z(i)).collect());
    out.add_seeds([seed]);
    out.grid("iw_field.tfg", h, &payload)?;
    Ok(())
}

#[derive(Serialize)]
struct UnitarySummary {
    member: u64,
    seed: u64,
    unitarity_defect: f64,
    absorbed_fraction: Option<f64>,
}

fn pe_unitaries(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let basis = basis_at(cfg, k_center(cfg))?;
    let tol = cfg.numerics.pe.unitarity_tol;
    let mut summary = Vec::new();
    for member in member_ids(cfg) {
        let (u, report) = pe_unitary_member(cfg, &basis, member)?;
        let defect = u.unitarity_defect();
        if defect > tol {
            warn!("member {member}: unitarity defect {defect:.3e} exceeds {tol:.1e}");
        }
        let (h, p) = unitary_to_grid(&u)?;
        out.grid(&format!("pe_unitary_{member:04}.tfg"), h, &p)?;
        out.add_seeds([cfg.iw_seed(member)]);
        summary.push(UnitarySummary {
            member,
            seed: cfg.iw_seed(member),
            unitarity_defect: defect,
            absorbed_fraction: Some(report.absorbed_fraction),
        });
        info!("PE member {member}: defect {defect:.3e}");
    }
    out.json("pe_unitary_summary.json", &summary)?;
    Ok(())
}

fn rmt_ensemble(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let basis = basis_at(cfg, k_center(cfg))?;
    let profile = profile_for(cfg, &basis)?;
    let m = profile.mode_count();
    let four_s2: Vec<f64> = (0..m)
        .flat_map(|r| (0..m).map(move |c| (r, c)))
        .map(|ix| 4.0 * profile.values[ix].powi(2))
        .collect();
    let h = GridHeader::new("element_variance", vec![m, m], false)
        .with_meta("k", profile.k)?
        .with_meta("block_range_km", profile.block_range)?
        .with_meta("strength", profile.strength)?;
    out.grid("rmt_variance_4s2.tfg", h, &four_s2)?;
    let mut summary = Vec::new();
    for member in member_ids(cfg) {
        let u = rmt_unitary_member(cfg, &profile, member)?;
        let (h, p) = unitary_to_grid(&u)?;
        out.grid(&format!("rmt_unitary_{member:04}.tfg"), h, &p)?;
        summary.push(UnitarySummary {
            member,
            seed: member,
            unitarity_defect: u.unitarity_defect(),
            absorbed_fraction: None,
        });
    }
    out.json("rmt_unitary_summary.json", &summary)?;
    Ok(())
}

fn prepare_for(cfg: &ExperimentConfig, path: PathKind) -> Result<Prepared> {
    let (kg, needs) = match path {
        PathKind::Rmt => (
            cfg.k_grid_rmt()?,
            Needs {
                profiles: true,
                launch_fields: false,
            },
        ),
        PathKind::Pe => (
            cfg.k_grid_pe()?,
            Needs {
                profiles: false,
                launch_fields: true,
            },
        ),
    };
    let t = Instant::now();
    let prep = prepare(cfg, &kg, needs)?;
    info!(
        "prepared {} wavenumbers in {:.1} s",
        kg.count,
        t.elapsed().as_secs_f64()
    );
    Ok(prep)
}

fn member_timefront(cfg: &ExperimentConfig, prep: &Prepared, path: PathKind, member: u64) -> Result<TimefrontGrid> {
    match path {
        PathKind::Rmt => rmt_timefront(cfg, prep, member),
        PathKind::Pe => {
            let (tf, report) = pe_timefront(cfg, prep, member)?;
            if report.absorbed_fraction > 0.01 {
                warn!("member {member}: sponge absorbed {:.2}%", 100.0 * report.absorbed_fraction);
            }
            Ok(tf)
        }
    }
}

fn write_intensity(cfg: &ExperimentConfig, out: &mut Outputs, stem: &str, g: &IntensityGrid) -> Result<()> {
    let (h, p) = intensity_to_grid(g)?;
    out.grid(&format!("{stem}.tfg"), h, &p)?;
    let tr = traces(g, &cfg.output.trace_depths)?;
    out.bytes(&format!("{stem}_traces.csv"), &traces_csv(&g.times, &tr, cfg.output.db_floor)?)?;
    if cfg.output.db_csv {
        out.bytes(&format!("{stem}_db.csv"), &db_csv(g, cfg.output.db_floor)?)?;
    }
    Ok(())
}

fn timefront(cfg: &ExperimentConfig, out: &mut Outputs, path: PathKind, member: u64) -> Result<()> {
    let prep = prepare_for(cfg, path)?;
    let tf = member_timefront(cfg, &prep, path, member)?;
    if path == PathKind::Pe {
        out.add_seeds([cfg.iw_seed(member)]);
    }
    let stem = format!("timefront_{}", path.name());
    let (h, p) = timefront_to_grid(&tf)?;
    let h = h.with_meta("provenance", path.name())?.with_meta("member", member)?;
    out.grid(&format!("{stem}.tfg"), h, &p)?;
    write_intensity(cfg, out, &format!("{stem}_intensity"), &tf.intensity())
}

fn average(cfg: &ExperimentConfig, out: &mut Outputs, path: PathKind) -> Result<()> {
    let prep = prepare_for(cfg, path)?;
    let mut acc: Option<IntensityAccumulator> = None;
    for member in member_ids(cfg) {
        let t = Instant::now();
        let tf = member_timefront(cfg, &prep, path, member)?;
        let acc = acc.get_or_insert_with(|| IntensityAccumulator::new(tf.depths.clone(), tf.times.clone()));
        acc.add(&tf)?;
        if path == PathKind::Pe {
            out.add_seeds([cfg.iw_seed(member)]);
        }
        info!("{} member {member} in {:.1} s", path.name(), t.elapsed().as_secs_f64());
    }
    let acc = acc.expect("at least one member");
    let mean = acc.mean();
    let stem = format!("average_{}", path.name());
    write_intensity(cfg, out, &stem, &mean)?;
    let se = IntensityGrid {
        values: acc.standard_error(),
        ..mean
    };
    let (h, p) = intensity_to_grid(&se)?;
    out.grid(&format!("{stem}_stderr.tfg"), h.with_meta("quantity", "standard error of the mean")?, &p)
        .map(|_| ())
}

/// Depth window below the axis used for decay fits.
fn below_axis(cfg: &ExperimentConfig) -> (f64, f64) {
    let za = cfg.environment.guide.axis_depth;
    (za + 0.25, za + 2.0)
}

#[derive(Serialize)]
struct NamedFit {
    name: String,
    slope_per_km: f64,
    r2: f64,
}

fn mixing(cfg: &ExperimentConfig, out: &mut Outputs, pe_average: Option<&std::path::Path>) -> Result<()> {
    if cfg.ensemble.blocks != 1 {
        return Err(Error::InvalidParameter {
            field: "range".into(),
            reason: format!(
                "the mixing front is a single-block prediction; use --range {}",
                cfg.ensemble.block_range
            ),
        });
    }
    let pe = pe_average
        .map(|p| -> Result<IntensityGrid> {
            let (h, payload) = read_grid(p)?;
            intensity_from_grid(&h, &payload)
        })
        .transpose()?;
    let prep = prepare_for(cfg, PathKind::Rmt)?;
    let c0 = cfg.environment.guide.c0;
    let delta = mixing_front_sampled(&prep.profiles(), &prep.samples(), &prep.weights(), &prep.k_grid, c0)?;
    let free = unperturbed_timefront(cfg, &prep, cfg.ensemble.block_range)?.intensity();
    let predicted = IntensityGrid {
        values: free.values.iter().zip(&delta.values).map(|(a, b)| a + b).collect(),
        members: 0,
        ..free.clone()
    };
    write_intensity(cfg, out, "mixing_front", &delta)?;
    write_intensity(cfg, out, "unperturbed", &free)?;
    let (lo, hi) = below_axis(cfg);
    let mut grids: Vec<(&str, &IntensityGrid)> = vec![("unperturbed", &free), ("ensemble_prediction", &predicted)];
    if let Some(pe) = &pe {
        grids.push(("pe_average", pe));
    }
    let profiles = mixing_depth_profile(&grids, lo, hi)?;
    out.bytes("mixing_depth_profile.csv", &depth_profiles_csv(&profiles)?)?;
    let fits: Vec<NamedFit> = profiles
        .names
        .iter()
        .zip(&profiles.fits)
        .map(|(n, f)| NamedFit {
            name: n.clone(),
            slope_per_km: f.slope,
            r2: f.r2,
        })
        .collect();
    out.json("mixing_depth_fits.json", &fits)?;
    Ok(())
}

#[derive(Serialize)]
struct Timings {
    pe_member_seconds: f64,
    rmt_member_seconds: f64,
    pe_over_rmt: f64,
    pe_unitary_seconds: Option<f64>,
    rmt_unitary_seconds: Option<f64>,
}

fn compare(cfg: &ExperimentConfig, out: &mut Outputs, skip_variance: bool) -> Result<()> {
    // Leave-one-out variances need two members left over.
    if cfg.ensemble.members < 3 {
        return Err(Error::InvalidParameter {
            field: "--members".into(),
            reason: "comparison statistics need at least 3 members".into(),
        });
    }
    let kg = cfg.k_grid_pe()?;
    let prep = prepare(
        cfg,
        &kg,
        Needs {
            profiles: true,
            launch_fields: true,
        },
    )?;
    let (mut pe_set, mut rmt_set) = (Vec::new(), Vec::new());
    let (mut pe_time, mut rmt_time) = (0.0, 0.0);
    for member in member_ids(cfg) {
        let t = Instant::now();
        let tf = member_timefront(cfg, &prep, PathKind::Pe, member)?;
        pe_time += t.elapsed().as_secs_f64();
        pe_set.push((member, tf.intensity()));
        let t = Instant::now();
        let tf = member_timefront(cfg, &prep, PathKind::Rmt, member)?;
        rmt_time += t.elapsed().as_secs_f64();
        rmt_set.push((member, tf.intensity()));
        out.add_seeds([cfg.iw_seed(member)]);
        info!("compare member {member} done");
    }
    let pe_set = MemberSet::new(pe_set)?;
    let rmt_set = MemberSet::new(rmt_set)?;
    write_intensity(cfg, out, "compare_average_pe", &pe_set.mean(None))?;
    write_intensity(cfg, out, "compare_average_rmt", &rmt_set.mean(None))?;
    let (lo, hi) = below_axis(cfg);
    let settings = TraceComparison {
        trace_depths: cfg.output.trace_depths.clone(),
        max_lag: kg.count / 8,
        z_lo: lo,
        z_hi: hi,
        axis_depth: cfg.environment.guide.axis_depth,
        time_cells: 8,
    };
    let (branch_lags, [dpe, drmt, tpe, trmt]) = compare_timefronts(&pe_set, &rmt_set, &settings)?;

    let (mut variance, mut pe_u_time, mut rmt_u_time) = (Vec::new(), None, None);
    if !skip_variance {
        let basis = basis_at(cfg, k_center(cfg))?;
        let profile = profile_for(cfg, &basis)?;
        let t = Instant::now();
        let pe_u = member_ids(cfg)
            .map(|m| Ok(pe_unitary_member(cfg, &basis, m)?.0))
            .collect::<Result<Vec<_>>>()?;
        pe_u_time = Some(t.elapsed().as_secs_f64() / cfg.ensemble.members as f64);
        let t = Instant::now();
        let rmt_u = member_ids(cfg)
            .map(|m| rmt_unitary_member(cfg, &profile, m))
            .collect::<Result<Vec<_>>>()?;
        rmt_u_time = Some(t.elapsed().as_secs_f64() / cfg.ensemble.members as f64);
        let m = profile.mode_count();
        let analytic: Vec<Vec<f64>> = (0..m)
            .map(|r| (0..m).map(|c| 4.0 * profile.values[(r, c)].powi(2)).collect())
            .collect();
        variance = variance_table(&pe_u, &rmt_u, &analytic, 5.min(m)..(m / 2).max(6.min(m)), 10)?;
    }
    let report = ComparisonReport {
        range_km: cfg.range(),
        pe_members: pe_set.len(),
        rmt_members: rmt_set.len(),
        branch_lags,
        depth_slope_pe: dpe,
        depth_slope_rmt: drmt,
        time_slope_pe: tpe,
        time_slope_rmt: trmt,
        variance,
    };
    out.json("comparison_report.json", &report)?;
    let n = cfg.ensemble.members as f64;
    out.unrecorded_json(
        "comparison_timings.json",
        &Timings {
            pe_member_seconds: pe_time / n,
            rmt_member_seconds: rmt_time / n,
            pe_over_rmt: pe_time / rmt_time,
            pe_unitary_seconds: pe_u_time,
            rmt_unitary_seconds: rmt_u_time,
        },
    )?;
    Ok(())
}
