//! Broadband timefronts from per-wavenumber fields.
//!
//! `Phi(z, tau) = (2 pi sigma_k^2 r)^{-1/2} sum_q w_q g(k_q) exp(-i k_q c0 tau) f(z; k_q)`
//! with a Gaussian spectrum `g`, trapezoid weights `w_q` and reduced time
//! `tau = t - r/c0`. On a uniform k-grid the sum over q is one FFT per depth.

use std::f64::consts::PI;

use log::warn;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::depth::DepthGrid;
use crate::error::{invalid, Error, Result};
use crate::modes::ModeBasis;
use crate::rmt::VarianceProfile;
use crate::unitary::UnitaryPropagator;
use crate::C64;

/// Gaussian weight `exp(-x^2/2)` at 4 sigma; the k-window may not clip more.
pub const CLIP_LIMIT: f64 = 3.4e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSpec {
    /// Centre frequency (Hz).
    pub f0: f64,
    /// Frequency standard deviation (Hz).
    pub sigma_f: f64,
    /// Source depth (km).
    pub z_src: f64,
    /// 1/e half-width of the Gaussian depth profile (km).
    pub w_src: f64,
}

impl Default for SourceSpec {
    fn default() -> Self {
        SourceSpec {
            f0: 75.0,
            sigma_f: 18.75,
            z_src: 1.0,
            w_src: 0.1,
        }
    }
}

impl SourceSpec {
    pub fn validate(&self, grid: &DepthGrid) -> Result<()> {
        if !(self.sigma_f > 0.0) || !(self.f0 > 3.0 * self.sigma_f) {
            return Err(invalid(
                "source.f0",
                format!("need f0 > 3 sigma_f > 0, got f0 = {}, sigma_f = {}", self.f0, self.sigma_f),
            ));
        }
        if !(self.w_src >= 4.0 * grid.dz()) {
            return Err(invalid(
                "source.w_src",
                format!("half-width {} km spans fewer than 4 grid cells", self.w_src),
            ));
        }
        if !(self.z_src > grid.z_min && self.z_src < grid.z_max) {
            return Err(invalid("source.z_src", "outside the depth window"));
        }
        Ok(())
    }

    pub fn k0(&self, c0: f64) -> f64 {
        2.0 * PI * self.f0 / c0
    }

    pub fn sigma_k(&self, c0: f64) -> f64 {
        2.0 * PI * self.sigma_f / c0
    }

    /// Unit-norm depth profile `exp(-((z - z_src)/w)^2)` on the grid.
    pub fn profile(&self, grid: &DepthGrid) -> Vec<C64> {
        let raw: Vec<f64> = grid
            .points()
            .iter()
            .map(|z| (-((z - self.z_src) / self.w_src).powi(2)).exp())
            .collect();
        let norm = (raw.iter().map(|x| x * x).sum::<f64>() * grid.dz()).sqrt();
        raw.iter().map(|x| C64::new(x / norm, 0.0)).collect()
    }
}

/// Modal amplitudes of the source and the energy fraction they miss.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceWeights {
    pub a: Vec<C64>,
    pub spillover: f64,
}

pub fn source_weights(src: &SourceSpec, basis: &ModeBasis) -> Result<SourceWeights> {
    source_weights_of(&src.profile(&basis.grid), basis)
}

/// Projection of an arbitrary unit-norm depth profile.
pub fn source_weights_of(field: &[C64], basis: &ModeBasis) -> Result<SourceWeights> {
    let w = project_source(field, basis)?;
    if w.spillover > 0.01 {
        warn!(
            "source leaves {:.2}% of its energy outside the {} trapped modes at k = {:.3}",
            100.0 * w.spillover,
            basis.mode_count(),
            basis.k
        );
    }
    Ok(w)
}

/// [`source_weights_of`] without the spillover warning, for callers that
/// summarize spillover over a whole wavenumber grid.
pub fn project_source(field: &[C64], basis: &ModeBasis) -> Result<SourceWeights> {
    let a = basis.project(field)?;
    let captured: f64 = a.iter().map(|c| c.norm_sqr()).sum();
    let total: f64 = field.iter().map(|c| c.norm_sqr()).sum::<f64>() * basis.grid.dz();
    let spillover = (1.0 - captured / total).max(0.0);
    Ok(SourceWeights { a, spillover })
}

/// Uniform wavenumber grid centred on `k0`: cell centres
/// `k0 + (q - (K-1)/2) dk` with `dk = 2 half_width sigma_k / K`, so the
/// cells tile exactly `k0 +- half_width sigma_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KGrid {
    pub k0: f64,
    pub sigma_k: f64,
    pub count: usize,
    /// Half-width of the window in units of `sigma_k`.
    pub half_width: f64,
}

impl KGrid {
    pub fn new(src: &SourceSpec, c0: f64, count: usize) -> Result<Self> {
        let g = KGrid {
            k0: src.k0(c0),
            sigma_k: src.sigma_k(c0),
            count,
            half_width: 4.0,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.count < 2 {
            return Err(invalid("k_grid.count", "need at least 2 wavenumbers"));
        }
        let edge_weight = (-0.5 * self.half_width * self.half_width).exp();
        if edge_weight > CLIP_LIMIT {
            return Err(Error::KWindowClipped {
                edge_weight,
                limit: CLIP_LIMIT,
            });
        }
        if self.k(0) <= 0.0 {
            return Err(invalid("k_grid", "window reaches non-positive wavenumbers"));
        }
        Ok(())
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width * self.sigma_k / self.count as f64
    }

    pub fn k(&self, q: usize) -> f64 {
        self.k0 + (q as f64 - 0.5 * (self.count as f64 - 1.0)) * self.spacing()
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.count).map(|q| self.k(q)).collect()
    }

    pub fn spectrum(&self, k: f64) -> f64 {
        (-0.5 * ((k - self.k0) / self.sigma_k).powi(2)).exp()
    }

    /// Trapezoid weight times spectrum, `w_q g(k_q)`.
    pub fn weights(&self) -> Vec<f64> {
        let dk = self.spacing();
        (0..self.count)
            .map(|q| {
                let w = if q == 0 || q + 1 == self.count { 0.5 * dk } else { dk };
                w * self.spectrum(self.k(q))
            })
            .collect()
    }

    /// Time window `T = 2 pi / (c0 dk)`.
    pub fn period(&self, c0: f64) -> f64 {
        2.0 * PI / (c0 * self.spacing())
    }

    pub fn dt(&self, c0: f64) -> f64 {
        self.period(c0) / self.count as f64
    }

    /// Reduced times `(p - K/2) dt`, p = 0..K.
    pub fn times(&self, c0: f64) -> Vec<f64> {
        let dt = self.dt(c0);
        (0..self.count)
            .map(|p| (p as f64 - (self.count / 2) as f64) * dt)
            .collect()
    }
}

/// Which depth samples a timefront keeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthSelection {
    pub z_lo: f64,
    pub z_hi: f64,
    pub stride: usize,
}

impl Default for DepthSelection {
    fn default() -> Self {
        DepthSelection {
            z_lo: -0.5,
            z_hi: 5.0,
            stride: 8,
        }
    }
}

impl DepthSelection {
    /// Every sample of the grid.
    pub fn full(grid: &DepthGrid) -> Self {
        DepthSelection {
            z_lo: grid.z_min,
            z_hi: grid.z_max,
            stride: 1,
        }
    }

    pub fn indices(&self, grid: &DepthGrid) -> Result<Vec<usize>> {
        if self.stride == 0 || !(self.z_lo <= self.z_hi) {
            return Err(invalid("output.depths", "need z_lo <= z_hi and stride >= 1"));
        }
        let idx: Vec<usize> = (0..grid.len)
            .filter(|&i| {
                let z = grid.z(i);
                z >= self.z_lo - 1e-12 && z <= self.z_hi + 1e-12
            })
            .step_by(self.stride)
            .collect();
        if idx.is_empty() {
            return Err(invalid("output.depths", "selection contains no grid samples"));
        }
        Ok(idx)
    }
}

/// Complex field on (depth x reduced time), row-major by depth.
#[derive(Debug, Clone, PartialEq)]
pub struct TimefrontGrid {
    pub depths: Vec<f64>,
    pub times: Vec<f64>,
    pub phi: Vec<C64>,
    pub r: f64,
    pub k_grid: KGrid,
    pub source: SourceSpec,
}

impl TimefrontGrid {
    pub fn at(&self, iz: usize, it: usize) -> C64 {
        self.phi[iz * self.times.len() + it]
    }

    pub fn intensity(&self) -> IntensityGrid {
        IntensityGrid {
            depths: self.depths.clone(),
            times: self.times.clone(),
            values: self.phi.iter().map(|c| c.norm_sqr()).collect(),
            members: 1,
        }
    }

    /// `int int |Phi|^2 dz dtau` with rectangle weights on the kept samples.
    pub fn energy(&self, dz: f64) -> f64 {
        let dt = self.times.get(1).map_or(0.0, |t| t - self.times[0]);
        self.phi.iter().map(|c| c.norm_sqr()).sum::<f64>() * dz * dt
    }
}

/// `sum_q w_q g_q exp(-i k_q c0 tau_p) h_q` for all p, through one FFT.
struct TimeTransform {
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    /// `(-1)^q`, folding the centred time axis into the FFT.
    sign: Vec<f64>,
    /// `exp(-i k_first c0 tau_p)` times the range prefactor.
    post: Vec<C64>,
}

impl TimeTransform {
    fn new(kg: &KGrid, c0: f64, prefactor: f64) -> Self {
        let k_first = kg.k(0);
        TimeTransform {
            fft: FftPlanner::new().plan_fft_forward(kg.count),
            sign: (0..kg.count).map(|q| if q % 2 == 0 { 1.0 } else { -1.0 }).collect(),
            post: kg
                .times(c0)
                .iter()
                .map(|t| C64::from_polar(prefactor, -k_first * c0 * t))
                .collect(),
        }
    }

    /// In place: `buf[q]` (already weighted) becomes the time series.
    fn run(&self, buf: &mut [C64]) {
        buf.iter_mut().zip(&self.sign).for_each(|(b, s)| *b *= s);
        self.fft.process(buf);
        buf.iter_mut().zip(&self.post).for_each(|(b, p)| *b *= p);
    }
}

/// Timefront from depth fields `fields[q][i]` at the kept depths
/// (`depths.len()` samples) for every wavenumber of `kg`.
pub fn synthesize_fields(
    fields: &[Vec<C64>],
    depths: &[f64],
    kg: &KGrid,
    c0: f64,
    r: f64,
    source: &SourceSpec,
) -> Result<TimefrontGrid> {
    kg.validate()?;
    if fields.len() != kg.count {
        return Err(Error::Dimension(format!(
            "{} fields for {} wavenumbers",
            fields.len(),
            kg.count
        )));
    }
    if let Some(f) = fields.iter().find(|f| f.len() != depths.len()) {
        return Err(Error::GridMismatch {
            expected: depths.len(),
            found: f.len(),
        });
    }
    if !(r > 0.0) {
        return Err(invalid("range", "must be positive"));
    }
    let w = kg.weights();
    let transform = TimeTransform::new(kg, c0, (2.0 * PI * kg.sigma_k.powi(2) * r).powf(-0.5));
    let kcount = kg.count;
    let mut phi = vec![C64::new(0.0, 0.0); depths.len() * kcount];
    phi.par_chunks_mut(kcount).enumerate().for_each(|(iz, row)| {
        for q in 0..kcount {
            row[q] = fields[q][iz] * w[q];
        }
        transform.run(row);
    });
    Ok(TimefrontGrid {
        depths: depths.to_vec(),
        times: kg.times(c0),
        phi,
        r,
        k_grid: *kg,
        source: *source,
    })
}

/// Mode shapes kept only at selected depth samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSamples {
    pub k: f64,
    pub energies: Vec<f64>,
    pub depths: Vec<f64>,
    /// Mode-major: `psi[m * depths.len() + i]`.
    psi: Vec<f64>,
}

impl ModeSamples {
    pub fn new(basis: &ModeBasis, indices: &[usize]) -> Self {
        let psi = (0..basis.mode_count())
            .flat_map(|m| indices.iter().map(move |&i| basis.mode(m)[i]))
            .collect();
        ModeSamples {
            k: basis.k,
            energies: basis.energies.clone(),
            depths: indices.iter().map(|&i| basis.grid.z(i)).collect(),
            psi,
        }
    }

    pub fn mode_count(&self) -> usize {
        self.energies.len()
    }

    pub fn mode(&self, m: usize) -> &[f64] {
        let n = self.depths.len();
        &self.psi[m * n..(m + 1) * n]
    }

    /// `sum_m c_m psi_m(z_i)`.
    pub fn field(&self, coefs: &[C64]) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); self.depths.len()];
        for (m, c) in coefs.iter().enumerate().take(self.mode_count()) {
            for (o, p) in out.iter_mut().zip(self.mode(m)) {
                *o += c * p;
            }
        }
        out
    }
}

fn common_depths(samples: &[ModeSamples]) -> Result<&[f64]> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Dimension("empty basis family".into()))?;
    if samples.iter().any(|s| s.depths != first.depths) {
        return Err(Error::Dimension("mode samples use different depths".into()));
    }
    Ok(&first.depths)
}

/// Timefront of modal coefficients `coefs[q]` in `samples[q]`.
pub fn synthesize_modal(
    coefs: &[Vec<C64>],
    samples: &[ModeSamples],
    kg: &KGrid,
    c0: f64,
    r: f64,
    source: &SourceSpec,
) -> Result<TimefrontGrid> {
    let depths = common_depths(samples)?;
    if samples.len() != coefs.len() {
        return Err(Error::Dimension(format!(
            "{} coefficient sets for {} bases",
            coefs.len(),
            samples.len()
        )));
    }
    let fields: Vec<Vec<C64>> = samples
        .par_iter()
        .zip(coefs.par_iter())
        .map(|(s, c)| s.field(c))
        .collect();
    synthesize_fields(&fields, depths, kg, c0, r, source)
}

/// Timefront at range `r` for a family of propagators `U(r; k_q)`.
pub fn synthesize(
    family: &[UnitaryPropagator],
    bases: &[ModeBasis],
    src: &SourceSpec,
    kg: &KGrid,
    c0: f64,
    selection: &DepthSelection,
) -> Result<TimefrontGrid> {
    if family.len() != bases.len() {
        return Err(Error::Dimension(format!(
            "{} propagators for {} bases",
            family.len(),
            bases.len()
        )));
    }
    let (samples, a) = sample_family(bases, src, selection)?;
    let r = family.first().map_or(0.0, |u| u.r);
    let coefs = family
        .par_iter()
        .zip(a.par_iter())
        .map(|(u, a)| u.apply(a))
        .collect::<Result<Vec<_>>>()?;
    synthesize_modal(&coefs, &samples, kg, c0, r, src)
}

/// Sampled mode shapes and source weights for every basis of a family.
pub fn sample_family(
    bases: &[ModeBasis],
    src: &SourceSpec,
    selection: &DepthSelection,
) -> Result<(Vec<ModeSamples>, Vec<Vec<C64>>)> {
    let grid = bases
        .first()
        .map(|b| b.grid)
        .ok_or_else(|| Error::Dimension("empty basis family".into()))?;
    let idx = selection.indices(&grid)?;
    let samples = bases.par_iter().map(|b| ModeSamples::new(b, &idx)).collect();
    let a = bases
        .par_iter()
        .map(|b| Ok(source_weights(src, b)?.a))
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, a))
}

/// Real grid on (depth x reduced time), row-major by depth.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityGrid {
    pub depths: Vec<f64>,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// Number of fields averaged into `values`.
    pub members: usize,
}

impl IntensityGrid {
    pub fn at(&self, iz: usize, it: usize) -> f64 {
        self.values[iz * self.times.len() + it]
    }

    fn same_axes(&self, other: &IntensityGrid) -> Result<()> {
        if self.depths != other.depths || self.times != other.times {
            return Err(Error::Dimension("intensity grids have different axes".into()));
        }
        Ok(())
    }

    /// Pooled mean of two averages, weighted by member counts.
    pub fn merge(&self, other: &IntensityGrid) -> Result<IntensityGrid> {
        self.same_axes(other)?;
        let (a, b) = (self.members as f64, other.members as f64);
        Ok(IntensityGrid {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| (a * x + b * y) / (a + b))
                .collect(),
            members: self.members + other.members,
            ..self.clone()
        })
    }

    /// `self - other` pointwise (member count of `self`).
    pub fn difference(&self, other: &IntensityGrid) -> Result<IntensityGrid> {
        self.same_axes(other)?;
        Ok(IntensityGrid {
            values: self.values.iter().zip(&other.values).map(|(x, y)| x - y).collect(),
            ..self.clone()
        })
    }

    /// Nearest kept depth row for `z`, with its offset from `z`.
    pub fn nearest_depth(&self, z: f64) -> (usize, f64) {
        let (i, d) = self
            .depths
            .iter()
            .enumerate()
            .map(|(i, d)| (i, d - z))
            .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .expect("non-empty depth axis");
        (i, d)
    }

    pub fn trace(&self, iz: usize) -> &[f64] {
        let n = self.times.len();
        &self.values[iz * n..(iz + 1) * n]
    }

    /// Depth profile at the time sample closest to `tau`.
    pub fn column(&self, tau: f64) -> Vec<f64> {
        let it = self
            .times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - tau).abs().total_cmp(&(b.1 - tau).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        (0..self.depths.len()).map(|iz| self.at(iz, it)).collect()
    }
}

/// Running sum of `|Phi|^2` over members; summation order is the order of `add`.
#[derive(Debug, Clone)]
pub struct IntensityAccumulator {
    depths: Vec<f64>,
    times: Vec<f64>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    members: usize,
}

impl IntensityAccumulator {
    pub fn new(depths: Vec<f64>, times: Vec<f64>) -> Self {
        let n = depths.len() * times.len();
        IntensityAccumulator {
            depths,
            times,
            sum: vec![0.0; n],
            sum_sq: vec![0.0; n],
            members: 0,
        }
    }

    pub fn add(&mut self, tf: &TimefrontGrid) -> Result<()> {
        if tf.depths != self.depths || tf.times != self.times {
            return Err(Error::Dimension("timefront axes differ from the accumulator".into()));
        }
        for ((s, s2), c) in self.sum.iter_mut().zip(self.sum_sq.iter_mut()).zip(&tf.phi) {
            let i = c.norm_sqr();
            *s += i;
            *s2 += i * i;
        }
        self.members += 1;
        Ok(())
    }

    pub fn members(&self) -> usize {
        self.members
    }

    pub fn mean(&self) -> IntensityGrid {
        let n = self.members.max(1) as f64;
        IntensityGrid {
            depths: self.depths.clone(),
            times: self.times.clone(),
            values: self.sum.iter().map(|s| s / n).collect(),
            members: self.members,
        }
    }

    /// Standard error of the mean at every sample.
    pub fn standard_error(&self) -> Vec<f64> {
        let n = self.members as f64;
        if self.members < 2 {
            return vec![f64::INFINITY; self.sum.len()];
        }
        self.sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s, s2)| {
                let mean = s / n;
                let var = ((s2 / n - mean * mean) * n / (n - 1.0)).max(0.0);
                (var / n).sqrt()
            })
            .collect()
    }
}

/// `<I> = (1/N) sum |Phi_l|^2`.
pub fn average_intensity(members: &[TimefrontGrid]) -> Result<IntensityGrid> {
    let first = members
        .first()
        .ok_or_else(|| Error::Dimension("no members to average".into()))?;
    let mut acc = IntensityAccumulator::new(first.depths.clone(), first.times.clone());
    for m in members {
        acc.add(m)?;
    }
    Ok(acc.mean())
}

/// Ensemble-averaged intensity change of one block to first order:
/// `(1 / 2 pi sigma_k^2 r_b) sum_{m,n} |sum_q w_q g_q exp(-i k_q c0 tau)
///   2 s_mn(k_q) exp(-i k_q r_b E_m) a_n(k_q) psi_m(z; k_q)|^2`.
pub fn mixing_front(
    profiles: &[VarianceProfile],
    bases: &[ModeBasis],
    src: &SourceSpec,
    kg: &KGrid,
    c0: f64,
    selection: &DepthSelection,
) -> Result<IntensityGrid> {
    let (samples, a) = sample_family(bases, src, selection)?;
    mixing_front_sampled(profiles, &samples, &a, kg, c0)
}

/// [`mixing_front`] from pre-sampled mode shapes and source weights `a[q]`.
pub fn mixing_front_sampled(
    profiles: &[VarianceProfile],
    samples: &[ModeSamples],
    a: &[Vec<C64>],
    kg: &KGrid,
    c0: f64,
) -> Result<IntensityGrid> {
    kg.validate()?;
    if profiles.len() != kg.count || samples.len() != kg.count || a.len() != kg.count {
        return Err(Error::Dimension(format!(
            "{} profiles, {} bases and {} weight sets for {} wavenumbers",
            profiles.len(),
            samples.len(),
            a.len(),
            kg.count
        )));
    }
    let depths = common_depths(samples)?;
    let r_b = profiles[0].block_range;
    let w = kg.weights();
    let transform = TimeTransform::new(kg, c0, (2.0 * PI * kg.sigma_k.powi(2) * r_b).powf(-0.5));
    let m_max = profiles.iter().map(|p| p.mode_count()).max().unwrap_or(0);
    // x[q][(m, n)] = w_q g_q 2 s_mn exp(-i k r_b E_m) a_n, zero past M(k_q).
    let x: Vec<Vec<C64>> = profiles
        .iter()
        .zip(a)
        .enumerate()
        .map(|(q, (p, a))| {
            let m = p.mode_count();
            let mut out = vec![C64::new(0.0, 0.0); m_max * m_max];
            for row in 0..m {
                let phase = C64::from_polar(2.0 * w[q], -p.k * r_b * p.energies[row]);
                for col in 0..m {
                    out[row * m_max + col] = phase * (p.values[(row, col)] * a[col]);
                }
            }
            out
        })
        .collect();
    let nt = kg.count;
    let mut values = vec![0.0; depths.len() * nt];
    values.par_chunks_mut(nt).enumerate().for_each(|(i, row)| {
        let mut buf = vec![C64::new(0.0, 0.0); nt];
        for m in 0..m_max {
            for n in 0..m_max {
                let mut any = false;
                for q in 0..nt {
                    let psi = if m < samples[q].mode_count() { samples[q].mode(m)[i] } else { 0.0 };
                    buf[q] = x[q][m * m_max + n] * psi;
                    any |= buf[q] != C64::new(0.0, 0.0);
                }
                if !any {
                    continue;
                }
                transform.run(&mut buf);
                row.iter_mut().zip(&buf).for_each(|(v, b)| *v += b.norm_sqr());
            }
        }
    });
    Ok(IntensityGrid {
        depths: depths.to_vec(),
        times: kg.times(c0),
        values,
        members: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Environment;
    use crate::modes::{solve_modes, CouplingTensor, ModeCount};
    use crate::rmt::{draw_block, stream_seed, variance_profile, GaussianDraw};
    use crate::unitary::{free_propagator, Provenance};

    /// Low-frequency source so the basis family is cheap.
    fn toy_source() -> SourceSpec {
        SourceSpec {
            f0: 20.0,
            sigma_f: 5.0,
            ..SourceSpec::default()
        }
    }

    fn family(src: &SourceSpec, count: usize) -> (Environment, KGrid, Vec<ModeBasis>) {
        let env = Environment::default();
        let kg = KGrid::new(src, env.guide.c0, count).unwrap();
        let grid = DepthGrid::default();
        let bases = kg
            .points()
            .iter()
            .map(|&k| solve_modes(k, &env.guide, &grid, ModeCount::Trapped).unwrap())
            .collect();
        (env, kg, bases)
    }

    fn free_family(bases: &[ModeBasis], r: f64) -> Vec<UnitaryPropagator> {
        bases
            .iter()
            .map(|b| UnitaryPropagator {
                u: free_propagator(b.k, &b.energies, r),
                r,
                k: b.k,
                provenance: Provenance::Rmt,
                blocks: None,
                seeds: vec![],
            })
            .collect()
    }

    #[test]
    fn k_grid_tiles_four_sigma() {
        let src = SourceSpec::default();
        let kg = KGrid::new(&src, 1.49, 64).unwrap();
        assert!((kg.k0 - 316.27).abs() < 0.01);
        assert!((kg.sigma_k - 79.07).abs() < 0.01);
        let dk = kg.spacing();
        assert!((kg.k(0) - 0.5 * dk - (kg.k0 - 4.0 * kg.sigma_k)).abs() < 1e-9);
        assert!((kg.k(63) + 0.5 * dk - (kg.k0 + 4.0 * kg.sigma_k)).abs() < 1e-9);
        let t = kg.times(1.49);
        assert_eq!(t[32], 0.0);
        assert!((t[1] - t[0] - kg.period(1.49) / 64.0).abs() < 1e-15);
        let narrow = KGrid { half_width: 3.5, ..kg };
        assert!(matches!(narrow.validate(), Err(Error::KWindowClipped { .. })));
        let wide = KGrid { half_width: 4.5, ..kg };
        assert!(wide.validate().is_err(), "reaches k <= 0");
    }

    #[test]
    fn axis_source_is_captured_by_trapped_modes() {
        let env = Environment::default();
        let src = SourceSpec::default();
        let b = solve_modes(src.k0(env.guide.c0), &env.guide, &DepthGrid::default(), ModeCount::Trapped)
            .unwrap();
        let w = source_weights(&src, &b).unwrap();
        assert!(w.spillover < 1e-3, "spillover {}", w.spillover);
        let captured: f64 = w.a.iter().map(|c| c.norm_sqr()).sum();
        assert!(captured <= 1.0 + 1e-9);
        assert!((captured + w.spillover - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mode_shaped_source_excites_one_mode() {
        let env = Environment::default();
        let b = solve_modes(100.0, &env.guide, &DepthGrid::default(), ModeCount::Trapped).unwrap();
        let field: Vec<C64> = b.mode(5).iter().map(|x| C64::new(*x, 0.0)).collect();
        let w = source_weights_of(&field, &b).unwrap();
        for (n, a) in w.a.iter().enumerate() {
            let target = if n == 5 { 1.0 } else { 0.0 };
            assert!((a - C64::new(target, 0.0)).norm() < 1e-8, "a_{n} = {a}");
        }
        assert!(w.spillover < 1e-8);
    }

    #[test]
    fn narrow_axial_source_favours_low_even_modes() {
        let env = Environment::default();
        let src = SourceSpec { w_src: 0.05, ..SourceSpec::default() };
        let b = solve_modes(src.k0(env.guide.c0), &env.guide, &DepthGrid::default(), ModeCount::Trapped)
            .unwrap();
        let a = source_weights(&src, &b).unwrap().a;
        let grid = b.grid;
        let profile = src.profile(&grid);
        // Direct rectangle-rule quadrature as an independent route.
        for n in 0..8 {
            let direct: f64 = (0..grid.len).map(|i| profile[i].re * b.mode(n)[i]).sum::<f64>() * grid.dz();
            assert!((a[n].re - direct).abs() < 1e-10);
        }
        let mag: Vec<f64> = a.iter().map(|c| c.norm()).collect();
        let top = (0..mag.len()).max_by(|x, y| mag[*x].total_cmp(&mag[*y])).unwrap();
        assert!(top <= 2, "largest weight at mode {top}");
        assert!(mag[0] > mag[1] && mag[2] > mag[1], "{:?}", &mag[..4]);
        assert!(mag[0] > 5.0 * mag[mag.len() - 1]);
    }

    #[test]
    fn fft_matches_direct_sum() {
        let src = toy_source();
        let (env, kg, bases) = family(&src, 16);
        let c0 = env.guide.c0;
        let tf = synthesize(&free_family(&bases, 30.0), &bases, &src, &kg, c0, &DepthSelection::default())
            .unwrap();
        let w = kg.weights();
        let grid = bases[0].grid;
        let pref = (2.0 * PI * kg.sigma_k.powi(2) * 30.0).powf(-0.5);
        for &(iz, it) in &[(0usize, 0usize), (40, 3), (100, 8), (150, 15)] {
            let i = grid.nearest(tf.depths[iz]);
            let tau = tf.times[it];
            let direct: C64 = (0..kg.count)
                .map(|q| {
                    let b = &bases[q];
                    let a = source_weights(&src, b).unwrap().a;
                    let f: C64 = (0..b.mode_count())
                        .map(|m| C64::from_polar(1.0, -b.k * b.energies[m] * 30.0) * a[m] * b.mode(m)[i])
                        .sum();
                    f * w[q] * C64::from_polar(pref, -b.k * c0 * tau)
                })
                .sum();
            assert!((tf.at(iz, it) - direct).norm() < 1e-10 * (1.0 + direct.norm()));
        }
    }

    /// Parseval plus mode orthonormality: the total energy depends only on
    /// `||U a||`, so any unitary family gives the free-propagation value.
    #[test]
    fn energy_identity_holds_for_unitary_families() {
        let src = toy_source();
        let (env, kg, bases) = family(&src, 16);
        let c0 = env.guide.c0;
        let grid = bases[0].grid;
        let full = DepthSelection::full(&grid);
        let w = kg.weights();
        let pref2 = 1.0 / (2.0 * PI * kg.sigma_k.powi(2) * 50.0);
        let expect: f64 = pref2
            * kg.dt(c0)
            * kg.count as f64
            * bases
                .iter()
                .zip(&w)
                .map(|(b, wq)| {
                    let a = source_weights(&src, b).unwrap().a;
                    wq * wq * a.iter().map(|c| c.norm_sqr()).sum::<f64>()
                })
                .sum::<f64>();

        let free = synthesize(&free_family(&bases, 50.0), &bases, &src, &kg, c0, &full).unwrap();
        let e_free = free.energy(grid.dz());
        assert!((e_free / expect - 1.0).abs() < 1e-8, "{e_free} vs {expect}");

        let scattered: Vec<UnitaryPropagator> = bases
            .iter()
            .enumerate()
            .map(|(q, b)| {
                let p = variance_profile(&CouplingTensor::new(b, &env), &b.energies, 50.0, 1.0).unwrap();
                let d = GaussianDraw::generate(b.mode_count(), stream_seed(3, 0, 0, q as u64));
                let blk = draw_block(&p, &d).unwrap();
                UnitaryPropagator {
                    u: blk.u,
                    r: 50.0,
                    k: b.k,
                    provenance: Provenance::Rmt,
                    blocks: None,
                    seeds: vec![],
                }
            })
            .collect();
        let tf = synthesize(&scattered, &bases, &src, &kg, c0, &full).unwrap();
        assert!((tf.energy(grid.dz()) / expect - 1.0).abs() < 1e-8);
        assert!((tf.phi[0] - free.phi[0]).norm() > 0.0 || tf.phi != free.phi);
    }

    #[test]
    fn time_shift_is_a_circular_shift() {
        let src = toy_source();
        let (env, kg, bases) = family(&src, 16);
        let c0 = env.guide.c0;
        let sel = DepthSelection::default();
        let coefs: Vec<Vec<C64>> = bases
            .iter()
            .map(|b| source_weights(&src, b).unwrap().a)
            .collect();
        let samples = sample_family(&bases, &src, &sel).unwrap().0;
        let base = synthesize_modal(&coefs, &samples, &kg, c0, 40.0, &src).unwrap();
        let shift = 5;
        let t0 = shift as f64 * kg.dt(c0);
        let shifted: Vec<Vec<C64>> = coefs
            .iter()
            .zip(&bases)
            .map(|(c, b)| c.iter().map(|x| x * C64::from_polar(1.0, -b.k * c0 * t0)).collect())
            .collect();
        let moved = synthesize_modal(&shifted, &samples, &kg, c0, 40.0, &src).unwrap();
        let n = kg.count;
        for iz in 0..base.depths.len() {
            for it in 0..n {
                let a = base.at(iz, (it + shift) % n).norm();
                let b = moved.at(iz, it).norm();
                assert!((a - b).abs() < 1e-12 * (1.0 + a));
            }
        }
    }

    #[test]
    fn synthesis_is_linear() {
        let src = toy_source();
        let (env, kg, bases) = family(&src, 8);
        let c0 = env.guide.c0;
        let sel = DepthSelection::default();
        let c1: Vec<Vec<C64>> = bases.iter().map(|b| source_weights(&src, b).unwrap().a).collect();
        let c2: Vec<Vec<C64>> = bases
            .iter()
            .map(|b| (0..b.mode_count()).map(|m| C64::new(m as f64, -1.0)).collect())
            .collect();
        let (al, be) = (C64::new(0.3, -1.2), C64::new(-2.0, 0.5));
        let mix: Vec<Vec<C64>> = c1
            .iter()
            .zip(&c2)
            .map(|(x, y)| x.iter().zip(y).map(|(a, b)| al * a + be * b).collect())
            .collect();
        let samples = sample_family(&bases, &src, &sel).unwrap().0;
        let f1 = synthesize_modal(&c1, &samples, &kg, c0, 20.0, &src).unwrap();
        let f2 = synthesize_modal(&c2, &samples, &kg, c0, 20.0, &src).unwrap();
        let fm = synthesize_modal(&mix, &samples, &kg, c0, 20.0, &src).unwrap();
        for i in 0..fm.phi.len() {
            let want = al * f1.phi[i] + be * f2.phi[i];
            assert!((fm.phi[i] - want).norm() < 1e-12 * (1.0 + want.norm()));
        }
    }

    /// A single launched mode arrives at its group delay `-r d(k E_m)/dk / c0`.
    #[test]
    fn single_mode_arrives_at_group_delay() {
        let src = toy_source();
        let (env, kg, bases) = family(&src, 64);
        let c0 = env.guide.c0;
        let (m, r) = (5, 100.0);
        let coefs: Vec<Vec<C64>> = bases
            .iter()
            .map(|b| {
                let mut c = vec![C64::new(0.0, 0.0); b.mode_count()];
                if m < b.mode_count() {
                    c[m] = C64::from_polar(1.0, -b.k * b.energies[m] * r);
                }
                c
            })
            .collect();
        let samples = sample_family(&bases, &src, &DepthSelection::default()).unwrap().0;
        let tf = synthesize_modal(&coefs, &samples, &kg, c0, r, &src).unwrap();
        let q = kg.count / 2;
        let slope = (bases[q + 1].k * bases[q + 1].energies[m] - bases[q - 1].k * bases[q - 1].energies[m])
            / (bases[q + 1].k - bases[q - 1].k);
        let expect = -r * slope / c0;
        let iz = tf.intensity().nearest_depth(1.0).0;
        let it = (0..tf.times.len())
            .max_by(|a, b| tf.at(iz, *a).norm().total_cmp(&tf.at(iz, *b).norm()))
            .unwrap();
        assert!(
            (tf.times[it] - expect).abs() <= 1.5 * kg.dt(c0),
            "peak {} expected {expect}",
            tf.times[it]
        );
    }

    #[test]
    fn mixing_front_scales_with_strength_squared() {
        let src = toy_source();
        let (env, kg, bases) = family(&src, 8);
        let c0 = env.guide.c0;
        let sel = DepthSelection { stride: 32, ..DepthSelection::default() };
        let profiles: Vec<VarianceProfile> = bases
            .iter()
            .map(|b| variance_profile(&CouplingTensor::new(b, &env), &b.energies, 50.0, 1.0).unwrap())
            .collect();
        let one = mixing_front(&profiles, &bases, &src, &kg, c0, &sel).unwrap();
        assert!(one.values.iter().all(|v| *v >= 0.0));
        assert!(one.values.iter().any(|v| *v > 0.0));
        let half: Vec<VarianceProfile> = profiles.iter().map(|p| p.scaled(0.5)).collect();
        let quarter = mixing_front(&half, &bases, &src, &kg, c0, &sel).unwrap();
        for (a, b) in one.values.iter().zip(&quarter.values) {
            assert!((0.25 * a - b).abs() <= 1e-12 * a.max(1e-300));
        }
        let zero: Vec<VarianceProfile> = profiles.iter().map(|p| p.scaled(0.0)).collect();
        let none = mixing_front(&zero, &bases, &src, &kg, c0, &sel).unwrap();
        assert!(none.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn accumulator_matches_direct_statistics() {
        let mk = |vals: &[f64]| TimefrontGrid {
            depths: vec![0.0, 1.0],
            times: vec![0.0],
            phi: vals.iter().map(|v| C64::new(*v, 0.0)).collect(),
            r: 1.0,
            k_grid: KGrid { k0: 10.0, sigma_k: 1.0, count: 2, half_width: 4.0 },
            source: SourceSpec::default(),
        };
        let members = [mk(&[1.0, 2.0]), mk(&[2.0, 0.0]), mk(&[3.0, 1.0])];
        let mut acc = IntensityAccumulator::new(vec![0.0, 1.0], vec![0.0]);
        for m in &members {
            acc.add(m).unwrap();
        }
        let mean = acc.mean();
        assert_eq!(mean.values, vec![14.0 / 3.0, 5.0 / 3.0]);
        let x = [1.0, 4.0, 9.0];
        let mu = 14.0 / 3.0;
        let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 2.0;
        assert!((acc.standard_error()[0] - (var / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(average_intensity(&members).unwrap(), mean);

        let first = average_intensity(&members[..1]).unwrap();
        let rest = average_intensity(&members[1..]).unwrap();
        let pooled = first.merge(&rest).unwrap();
        for (a, b) in pooled.values.iter().zip(&mean.values) {
            assert!((a - b).abs() < 1e-12);
        }
        let other = IntensityAccumulator::new(vec![0.5], vec![0.0]).mean();
        assert!(mean.merge(&other).is_err());
    }
}
