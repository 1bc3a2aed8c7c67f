//! Traces, decay fits and ensemble comparison statistics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io::{csv_err, to_db, write_atomic};
use crate::timefront::IntensityGrid;
use crate::unitary::UnitaryPropagator;

/// Intensity time series at one kept depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub requested_depth: f64,
    pub depth: f64,
    /// `depth - requested_depth` (km).
    pub offset: f64,
    pub values: Vec<f64>,
}

/// Traces at the kept depths nearest to `depths`.
pub fn traces(grid: &IntensityGrid, depths: &[f64]) -> Result<Vec<Trace>> {
    let (lo, hi) = match (grid.depths.first(), grid.depths.last()) {
        (Some(a), Some(b)) => (*a, *b),
        _ => return Err(Error::Dimension("intensity grid has no depths".into())),
    };
    depths
        .iter()
        .map(|&z| {
            if !(z >= lo && z <= hi) {
                return Err(invalid("trace depth", format!("{z} km is outside [{lo}, {hi}]")));
            }
            let (iz, offset) = grid.nearest_depth(z);
            Ok(Trace {
                requested_depth: z,
                depth: grid.depths[iz],
                offset,
                values: grid.trace(iz).to_vec(),
            })
        })
        .collect()
}

/// Long-format CSV: one row per (depth, time) with linear and dB intensity.
pub fn traces_csv(times: &[f64], traces: &[Trace], floor_db: f64) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["requested_depth_km", "depth_km", "offset_km", "tau_s", "intensity", "intensity_db"])
        .map_err(csv_err)?;
    for t in traces {
        let db = to_db(&t.values, floor_db);
        for ((tau, v), d) in times.iter().zip(&t.values).zip(&db) {
            w.write_record([
                format!("{}", t.requested_depth),
                format!("{:.6}", t.depth),
                format!("{:.3e}", t.offset),
                format!("{tau:.9e}"),
                format!("{v:.9e}"),
                format!("{d:.4}"),
            ])
            .map_err(csv_err)?;
        }
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

pub fn write_traces_csv(path: &Path, times: &[f64], traces: &[Trace], floor_db: f64) -> Result<()> {
    write_atomic(path, &traces_csv(times, traces, floor_db)?)
}

/// Least-squares line with its coefficient of determination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Dimension(format!("line fit needs >= 2 pairs, got {} and {}", x.len(), y.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(invalid("fit", "abscissae are all equal"));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LineFit {
        slope,
        intercept: my - slope * mx,
        r2,
    })
}

/// Fit of `ln y` against `x`, skipping non-positive samples.
pub fn log_fit(x: &[f64], y: &[f64]) -> Result<LineFit> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = x
        .iter()
        .zip(y)
        .filter(|(_, v)| **v > 0.0)
        .map(|(a, v)| (*a, v.ln()))
        .unzip();
    fit_line(&xs, &ys)
}

/// Depth decay of `ln I` at the time sample nearest `tau`, over `z_lo..=z_hi`.
pub fn depth_decay(grid: &IntensityGrid, tau: f64, z_lo: f64, z_hi: f64) -> Result<LineFit> {
    let col = grid.column(tau);
    let (z, v): (Vec<f64>, Vec<f64>) = grid
        .depths
        .iter()
        .zip(&col)
        .filter(|(z, _)| **z >= z_lo && **z <= z_hi)
        .map(|(z, v)| (*z, *v))
        .unzip();
    log_fit(&z, &v)
}

/// Time decay of `ln I` after the trace maximum at depth `z`, over `cells` samples.
pub fn time_decay(grid: &IntensityGrid, z: f64, cells: usize) -> Result<LineFit> {
    let (iz, _) = grid.nearest_depth(z);
    let tr = grid.trace(iz);
    let peak = argmax(tr);
    let end = (peak + cells + 1).min(tr.len());
    log_fit(&grid.times[peak..end], &tr[peak..end])
}

pub fn argmax(v: &[f64]) -> usize {
    (0..v.len()).max_by(|a, b| v[*a].total_cmp(&v[*b])).unwrap_or(0)
}

/// Strict local maxima above `rel` times the global maximum.
pub fn peaks(v: &[f64], rel: f64) -> Vec<usize> {
    let top = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (1..v.len().saturating_sub(1))
        .filter(|&i| v[i] > v[i - 1] && v[i] >= v[i + 1] && v[i] >= rel * top)
        .collect()
}

/// Lag (in samples, within `+-max_lag`) maximizing the circular correlation
/// of the mean-removed series: `b[i + lag]` best matches `a[i]`.
pub fn best_lag(a: &[f64], b: &[f64], max_lag: usize) -> Result<isize> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Dimension("correlated series differ in length".into()));
    }
    let n = a.len();
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let max_lag = max_lag.min(n / 2) as isize;
    let score = |lag: isize| -> f64 {
        (0..n)
            .map(|i| {
                let j = (i as isize + lag).rem_euclid(n as isize) as usize;
                (a[i] - ma) * (b[j] - mb)
            })
            .sum()
    };
    Ok((-max_lag..=max_lag)
        .max_by(|x, y| score(*x).total_cmp(&score(*y)).then(y.abs().cmp(&x.abs())))
        .unwrap_or(0))
}

/// Jackknife estimate and standard error: `stat(None)` on the full set,
/// `stat(Some(i))` with member `i` left out.
pub fn jackknife<F: Fn(Option<usize>) -> Result<f64>>(n: usize, stat: F) -> Result<(f64, f64)> {
    let full = stat(None)?;
    if n < 2 {
        return Ok((full, f64::INFINITY));
    }
    let loo = (0..n).map(|i| stat(Some(i))).collect::<Result<Vec<_>>>()?;
    let mean = loo.iter().sum::<f64>() / n as f64;
    let var = loo.iter().map(|x| (x - mean).powi(2)).sum::<f64>() * (n as f64 - 1.0) / n as f64;
    Ok((full, var.sqrt()))
}

/// A statistic with its Monte-Carlo error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
}

/// Per-member intensity grids in canonical (seed) order, so statistics do
/// not depend on the order members were produced in.
#[derive(Debug, Clone)]
pub struct MemberSet {
    seeds: Vec<u64>,
    grids: Vec<IntensityGrid>,
    sum: Vec<f64>,
}

impl MemberSet {
    pub fn new(members: Vec<(u64, IntensityGrid)>) -> Result<Self> {
        let mut members = members;
        members.sort_by_key(|(s, _)| *s);
        let first = members
            .first()
            .map(|(_, g)| g.clone())
            .ok_or_else(|| Error::Dimension("empty member set".into()))?;
        let mut sum = vec![0.0; first.values.len()];
        for (_, g) in &members {
            if g.depths != first.depths || g.times != first.times {
                return Err(Error::Dimension("member grids have different axes".into()));
            }
            sum.iter_mut().zip(&g.values).for_each(|(s, v)| *s += v);
        }
        let (seeds, grids) = members.into_iter().unzip();
        Ok(MemberSet { seeds, grids, sum })
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    /// Mean grid, optionally leaving one member out.
    pub fn mean(&self, leave_out: Option<usize>) -> IntensityGrid {
        let n = self.len() - leave_out.map_or(0, |_| 1);
        let values = match leave_out {
            None => self.sum.iter().map(|s| s / n as f64).collect(),
            Some(i) => self
                .sum
                .iter()
                .zip(&self.grids[i].values)
                .map(|(s, v)| (s - v) / n as f64)
                .collect(),
        };
        IntensityGrid {
            values,
            members: n,
            ..self.grids[0].clone()
        }
    }

    /// Jackknife of a statistic of the mean grid.
    pub fn estimate<F: Fn(&IntensityGrid) -> Result<f64>>(&self, stat: F) -> Result<Estimate> {
        let (value, error) = jackknife(self.len(), |i| stat(&self.mean(i)))?;
        Ok(Estimate { value, error })
    }
}

/// Statistic of two independent member sets; errors add in quadrature.
pub fn paired_estimate<F>(a: &MemberSet, b: &MemberSet, stat: F) -> Result<Estimate>
where
    F: Fn(&IntensityGrid, &IntensityGrid) -> Result<f64>,
{
    let mb = b.mean(None);
    let ma = a.mean(None);
    let (value, ea) = jackknife(a.len(), |i| stat(&a.mean(i), &mb))?;
    let (_, eb) = jackknife(b.len(), |i| stat(&ma, &b.mean(i)))?;
    Ok(Estimate {
        value,
        error: ea.hypot(eb),
    })
}

/// Sample variances `Var(U_mn)` over members, with element means removed.
/// `leave_out` drops one member (index into `members` sorted by seed).
pub fn element_variances(members: &[UnitaryPropagator], leave_out: Option<usize>) -> Result<Vec<Vec<f64>>> {
    let m = members
        .iter()
        .map(|u| u.mode_count())
        .min()
        .ok_or_else(|| Error::Dimension("no propagators".into()))?;
    let used: Vec<&UnitaryPropagator> = members
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != leave_out)
        .map(|(_, u)| u)
        .collect();
    let n = used.len() as f64;
    if used.len() < 2 {
        return Err(Error::Dimension("need at least two members for a variance".into()));
    }
    Ok((0..m)
        .map(|r| {
            (0..m)
                .map(|c| {
                    let mean = used.iter().map(|u| u.u[(r, c)]).sum::<crate::C64>() / n;
                    used.iter().map(|u| (u.u[(r, c)] - mean).norm_sqr()).sum::<f64>() / (n - 1.0)
                })
                .collect()
        })
        .collect())
}

/// Mean of `values[m][m+d]` and `values[m+d][m]` over rows `rows`, for each offset d.
pub fn band_means(values: &[Vec<f64>], rows: std::ops::Range<usize>, max_offset: usize) -> Vec<f64> {
    let m = values.len();
    (0..=max_offset)
        .map(|d| {
            let mut sum = 0.0;
            let mut count = 0usize;
            for r in rows.clone() {
                if r + d < m {
                    sum += values[r][r + d];
                    count += 1;
                    if d > 0 {
                        sum += values[r + d][r];
                        count += 1;
                    }
                }
            }
            if count == 0 {
                f64::NAN
            } else {
                sum / count as f64
            }
        })
        .collect()
}

/// Band-averaged variance ratio for one offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub offset: usize,
    /// Random-matrix over PE band variance.
    pub rmt_over_pe: Estimate,
    /// PE band variance over the analytic `4 s^2`.
    pub pe_over_analytic: Estimate,
}

/// Ratio table for offsets `0..=max_offset` over rows `rows`, both sets sorted by seed.
pub fn variance_table(
    pe: &[UnitaryPropagator],
    rmt: &[UnitaryPropagator],
    analytic: &[Vec<f64>],
    rows: std::ops::Range<usize>,
    max_offset: usize,
) -> Result<Vec<VarianceRow>> {
    let sorted = |set: &[UnitaryPropagator]| {
        let mut v = set.to_vec();
        v.sort_by_key(|u| u.seeds.clone());
        v
    };
    let (pe, rmt) = (sorted(pe), sorted(rmt));
    let band = |set: &[UnitaryPropagator], out: Option<usize>| -> Result<Vec<f64>> {
        Ok(band_means(&element_variances(set, out)?, rows.clone(), max_offset))
    };
    let pe_full = band(&pe, None)?;
    let rmt_full = band(&rmt, None)?;
    let pe_loo = (0..pe.len()).map(|i| band(&pe, Some(i))).collect::<Result<Vec<_>>>()?;
    let rmt_loo = (0..rmt.len()).map(|i| band(&rmt, Some(i))).collect::<Result<Vec<_>>>()?;
    let theory = band_means(analytic, rows.clone(), max_offset);
    (0..=max_offset)
        .map(|d| {
            let (ratio, e1) = jackknife(rmt.len(), |i| {
                Ok(i.map_or(rmt_full[d], |i| rmt_loo[i][d]) / pe_full[d])
            })?;
            let (_, e2) = jackknife(pe.len(), |i| Ok(rmt_full[d] / i.map_or(pe_full[d], |i| pe_loo[i][d])))?;
            let (pa, e3) = jackknife(pe.len(), |i| Ok(i.map_or(pe_full[d], |i| pe_loo[i][d]) / theory[d]))?;
            Ok(VarianceRow {
                offset: d,
                rmt_over_pe: Estimate {
                    value: ratio,
                    error: e1.hypot(e2),
                },
                pe_over_analytic: Estimate { value: pa, error: e3 },
            })
        })
        .collect()
}

/// Depth profiles at `tau = 0` with their log-decay fits below the axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthProfiles {
    pub depths: Vec<f64>,
    pub names: Vec<String>,
    pub curves: Vec<Vec<f64>>,
    pub fits: Vec<LineFit>,
}

/// `<I>(z)` at reduced time 0 for each named grid, with decay fits over `z_lo..=z_hi`.
pub fn mixing_depth_profile(grids: &[(&str, &IntensityGrid)], z_lo: f64, z_hi: f64) -> Result<DepthProfiles> {
    let first = grids
        .first()
        .ok_or_else(|| Error::Dimension("no grids".into()))?
        .1;
    let mut out = DepthProfiles {
        depths: first.depths.clone(),
        names: Vec::new(),
        curves: Vec::new(),
        fits: Vec::new(),
    };
    for (name, g) in grids {
        if g.depths != first.depths {
            return Err(Error::Dimension("depth axes differ".into()));
        }
        out.names.push(name.to_string());
        out.curves.push(g.column(0.0));
        out.fits.push(depth_decay(g, 0.0, z_lo, z_hi)?);
    }
    Ok(out)
}

pub fn depth_profiles_csv(p: &DepthProfiles) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut head = vec!["depth_km".to_string()];
    head.extend(p.names.iter().cloned());
    w.write_record(&head).map_err(csv_err)?;
    for (iz, z) in p.depths.iter().enumerate() {
        let mut row = vec![format!("{z:.6}")];
        row.extend(p.curves.iter().map(|c| format!("{:.9e}", c[iz])));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

/// Branch-position agreement at one depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagRow {
    pub depth: f64,
    /// Lag of the random-matrix trace relative to PE (s).
    pub lag: Estimate,
}

/// PE versus random-matrix comparison at one range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub range_km: f64,
    pub pe_members: usize,
    pub rmt_members: usize,
    pub branch_lags: Vec<LagRow>,
    pub depth_slope_pe: Estimate,
    pub depth_slope_rmt: Estimate,
    pub time_slope_pe: Estimate,
    pub time_slope_rmt: Estimate,
    pub variance: Vec<VarianceRow>,
}

/// Settings of the timefront part of a comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceComparison {
    pub trace_depths: Vec<f64>,
    pub max_lag: usize,
    pub z_lo: f64,
    pub z_hi: f64,
    pub axis_depth: f64,
    pub time_cells: usize,
}

pub fn compare_timefronts(
    pe: &MemberSet,
    rmt: &MemberSet,
    settings: &TraceComparison,
) -> Result<(Vec<LagRow>, [Estimate; 4])> {
    let dt = {
        let t = &pe.mean(None).times;
        t[1] - t[0]
    };
    let lags = settings
        .trace_depths
        .iter()
        .map(|&z| {
            let lag = paired_estimate(pe, rmt, |p, r| {
                let (iz, _) = p.nearest_depth(z);
                Ok(best_lag(p.trace(iz), r.trace(iz), settings.max_lag)? as f64 * dt)
            })?;
            Ok(LagRow { depth: z, lag })
        })
        .collect::<Result<Vec<_>>>()?;
    let depth = |g: &IntensityGrid| Ok(depth_decay(g, 0.0, settings.z_lo, settings.z_hi)?.slope);
    let time = |g: &IntensityGrid| Ok(time_decay(g, settings.axis_depth, settings.time_cells)?.slope);
    Ok((
        lags,
        [
            pe.estimate(depth)?,
            rmt.estimate(depth)?,
            pe.estimate(time)?,
            rmt.estimate(time)?,
        ],
    ))
}
