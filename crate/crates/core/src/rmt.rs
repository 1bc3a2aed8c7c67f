//! Random-matrix building blocks.
//!
//! A block over range `r_b` is `U = Lambda (I + iA)^{-1} (I - iA)` with a
//! Hermitian Gaussian `A` whose element variances come from first-order
//! perturbation theory in the internal-wave field. Long ranges are products
//! of independent blocks.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::modes::CouplingTensor;
use crate::unitary::{BlockInfo, Provenance, UnitaryPropagator};
use crate::C64;

/// Standard deviations `s_mn` of the A-matrix elements at one wavenumber.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceProfile {
    pub k: f64,
    pub block_range: f64,
    /// Overall multiplier already folded into `values`.
    pub strength: f64,
    /// Mode energies `E_m`, needed for `Lambda`.
    pub energies: Vec<f64>,
    /// `s_mn`, symmetric, non-negative.
    pub values: DMatrix<f64>,
}

impl VarianceProfile {
    pub fn mode_count(&self) -> usize {
        self.energies.len()
    }

    /// Same profile with every `s_mn` multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        VarianceProfile {
            strength: self.strength * factor,
            values: &self.values * factor,
            ..self.clone()
        }
    }

    /// `s_mn` averaged over pairs with `|m - n| = d` inside the mode range
    /// `rows`; entry d of the result.
    pub fn band_profile(&self, rows: std::ops::Range<usize>, max_offset: usize) -> Vec<f64> {
        let m = self.mode_count();
        (0..=max_offset)
            .map(|d| {
                let vals: Vec<f64> = rows
                    .clone()
                    .filter(|&r| r + d < m)
                    .map(|r| self.values[(r, r + d)].powi(2))
                    .collect();
                vals.iter().sum::<f64>() / vals.len().max(1) as f64
            })
            .collect()
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// `s_mn^2 = (k^2 r_b^2 / 16) sum_l [sinc^2(w+ r_b/2) + sinc^2(w- r_b/2)] sum_j |V^{jl}_mn|^2`
/// with `w+- = k (E_m - E_n) +- k_l`, times `strength^2`.
pub fn variance_profile(
    coupling: &CouplingTensor<'_>,
    energies: &[f64],
    block_range: f64,
    strength: f64,
) -> Result<VarianceProfile> {
    if !(block_range > 0.0) {
        return Err(invalid("ensemble.block_range", "must be positive"));
    }
    if !(strength >= 0.0) {
        return Err(invalid("ensemble.strength", "must be non-negative"));
    }
    let k = coupling.k();
    let m = energies.len();
    let (j_max, l_max) = (coupling.j_max(), coupling.l_max());
    let kl: Vec<f64> = (0..l_max).map(|l| coupling.kl(l)).collect();
    // W2[j][l] = w_jl^2, G2[j] = (G^j)^2 elementwise.
    let w2: Vec<Vec<f64>> = (1..=j_max)
        .map(|j| (0..l_max).map(|l| coupling.weight(j, l).powi(2)).collect())
        .collect();
    let g2: Vec<DMatrix<f64>> = (1..=j_max)
        .map(|j| coupling.shape_matrix(j).map(|g| g.map(|x| x * x)))
        .collect::<Result<_>>()?;
    if g2.first().is_some_and(|g| g.nrows() < m) {
        return Err(Error::Dimension(format!(
            "coupling tensor has {} modes, {m} energies given",
            g2[0].nrows()
        )));
    }

    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|a| (a..m).map(move |b| (a, b))).collect();
    let prefactor = (k * block_range).powi(2) / 16.0 * strength * strength;
    let half = 0.5 * block_range;
    let vals: Vec<f64> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let dk = k * (energies[a] - energies[b]);
            let mut total = 0.0;
            for (l, &kll) in kl.iter().enumerate() {
                let q: f64 = (0..j_max).map(|j| w2[j][l] * g2[j][(a, b)]).sum();
                let s = sinc((dk + kll) * half).powi(2) + sinc((dk - kll) * half).powi(2);
                total += s * q;
            }
            (prefactor * total).sqrt()
        })
        .collect();
    let mut values = DMatrix::zeros(m, m);
    for (&(a, b), v) in pairs.iter().zip(vals) {
        values[(a, b)] = v;
        values[(b, a)] = v;
    }
    Ok(VarianceProfile {
        k,
        block_range,
        strength,
        energies: energies.to_vec(),
        values,
    })
}

const Z_TAG: u64 = 0x5a44_5241_5753_0001;

/// ChaCha8 seed from `(master, member, block, slot)`; distinct tuples give
/// distinct seeds because the 32 bytes are the four words themselves.
pub fn stream_seed(master: u64, member: u64, block: u64, slot: u64) -> [u8; 32] {
    let mut out = [0u8; 32];
    out[..8].copy_from_slice(&master.to_le_bytes());
    out[8..16].copy_from_slice(&member.to_le_bytes());
    out[16..24].copy_from_slice(&block.to_le_bytes());
    out[24..].copy_from_slice(&(Z_TAG ^ slot).to_le_bytes());
    out
}

/// Unit Gaussians `z_mn`: complex with `<|z|^2> = 1` off the diagonal, real
/// on it.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDraw {
    pub z: DMatrix<C64>,
}

impl GaussianDraw {
    /// Entries are drawn shell by shell (row s left of the diagonal, then
    /// column s above it, then the diagonal), so the leading `n x n` block
    /// of a larger draw is the draw of size `n` from the same seed.
    pub fn generate(size: usize, seed: [u8; 32]) -> Self {
        let mut rng = ChaCha8Rng::from_seed(seed);
        let mut z = DMatrix::zeros(size, size);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let complex = |rng: &mut ChaCha8Rng| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            C64::new(h * re, h * im)
        };
        for s in 0..size {
            for c in 0..s {
                z[(s, c)] = complex(&mut rng);
            }
            for r in 0..s {
                z[(r, s)] = complex(&mut rng);
            }
            let d: f64 = rng.sample(StandardNormal);
            z[(s, s)] = C64::new(d, 0.0);
        }
        GaussianDraw { z }
    }

    pub fn zeros(size: usize) -> Self {
        GaussianDraw {
            z: DMatrix::zeros(size, size),
        }
    }

    pub fn size(&self) -> usize {
        self.z.nrows()
    }
}

/// One building block.
#[derive(Debug, Clone)]
pub struct BlockDraw {
    pub a: DMatrix<C64>,
    pub u: DMatrix<C64>,
    pub k: f64,
    pub block_range: f64,
}

/// Hermitian `A`: `A_mm = s_mm z_mm`, and for `m < n`
/// `A_mn = s_mn (z_mn + conj z_nm) / sqrt 2 = conj A_nm`, which keeps
/// `<|A_mn|^2> = s_mn^2` while using both independent draws.
pub fn hermitian_coupling(profile: &VarianceProfile, draw: &GaussianDraw) -> Result<DMatrix<C64>> {
    let m = profile.mode_count();
    if draw.size() < m {
        return Err(Error::Dimension(format!(
            "Gaussian draw of size {} for {m} modes",
            draw.size()
        )));
    }
    let z = &draw.z;
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let mut a = DMatrix::zeros(m, m);
    for r in 0..m {
        a[(r, r)] = C64::new(profile.values[(r, r)] * z[(r, r)].re, 0.0);
        for c in r + 1..m {
            let v = (z[(r, c)] + z[(c, r)].conj()) * (profile.values[(r, c)] * h);
            a[(r, c)] = v;
            a[(c, r)] = v.conj();
        }
    }
    Ok(a)
}

/// `Lambda (I + iA)^{-1} (I - iA)` by LU with partial pivoting.
pub fn cayley(a: &DMatrix<C64>, k: f64, energies: &[f64], block_range: f64) -> Result<DMatrix<C64>> {
    let m = a.nrows();
    let ia = a * C64::new(0.0, 1.0);
    let eye = DMatrix::<C64>::identity(m, m);
    let lu = (&eye + &ia).lu();
    let mut u = lu
        .solve(&(&eye - &ia))
        .ok_or_else(|| Error::Singular("I + iA is singular".into()))?;
    for (r, e) in energies.iter().enumerate().take(m) {
        let phase = C64::from_polar(1.0, -k * e * block_range);
        for c in 0..m {
            u[(r, c)] *= phase;
        }
    }
    Ok(u)
}

pub fn draw_block(profile: &VarianceProfile, draw: &GaussianDraw) -> Result<BlockDraw> {
    let a = hermitian_coupling(profile, draw)?;
    let u = cayley(&a, profile.k, &profile.energies, profile.block_range)?;
    Ok(BlockDraw {
        a,
        u,
        k: profile.k,
        block_range: profile.block_range,
    })
}

/// `U_N ... U_1`, with `blocks[0]` the first block in range.
pub fn compose(blocks: &[BlockDraw], seeds: Vec<u64>) -> Result<UnitaryPropagator> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::Dimension("no blocks to compose".into()))?;
    let m = first.u.nrows();
    for b in blocks {
        if b.u.nrows() != m || b.k != first.k || b.block_range != first.block_range {
            return Err(Error::Dimension(format!(
                "block (k={}, M={}, r_b={}) does not match (k={}, M={m}, r_b={})",
                b.k,
                b.u.nrows(),
                b.block_range,
                first.k,
                first.block_range
            )));
        }
    }
    let mut u = first.u.clone();
    for b in &blocks[1..] {
        u = &b.u * &u;
    }
    Ok(UnitaryPropagator {
        u,
        r: first.block_range * blocks.len() as f64,
        k: first.k,
        provenance: Provenance::Rmt,
        blocks: Some(BlockInfo {
            block_range: first.block_range,
            blocks: blocks.len(),
        }),
        seeds,
    })
}

/// How z-draws relate across the wavenumber grid within one member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Coherence {
    /// One draw per (member, block) shared by every k.
    #[default]
    Coherent,
    /// Independent draws at every k.
    WhiteNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSpec {
    pub master_seed: u64,
    pub members: usize,
    pub block_range: f64,
    pub blocks: usize,
    pub coherence: Coherence,
    /// Multiplier on every `s_mn`.
    pub strength: f64,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        EnsembleSpec {
            master_seed: 1,
            members: 100,
            block_range: 50.0,
            blocks: 1,
            coherence: Coherence::Coherent,
            strength: 1.0,
        }
    }
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.members == 0 {
            return Err(invalid("ensemble.members", "must be at least 1"));
        }
        if self.blocks == 0 {
            return Err(invalid("ensemble.blocks", "must be at least 1"));
        }
        if !(self.block_range > 0.0) {
            return Err(invalid("ensemble.block_range", "must be positive"));
        }
        if !(self.strength >= 0.0) {
            return Err(invalid("ensemble.strength", "must be non-negative"));
        }
        Ok(())
    }

    pub fn range(&self) -> f64 {
        self.block_range * self.blocks as f64
    }

    /// Gaussian draw for (member, block) at wavenumber slot `k_index`.
    pub fn draw(&self, member: u64, block: u64, k_index: usize, size: usize) -> GaussianDraw {
        let slot = match self.coherence {
            Coherence::Coherent => 0,
            Coherence::WhiteNoise => k_index as u64 + 1,
        };
        GaussianDraw::generate(size, stream_seed(self.master_seed, member, block, slot))
    }

    fn draws_for_member(&self, member: u64, k_count: usize, size: usize) -> Vec<Vec<GaussianDraw>> {
        (0..self.blocks as u64)
            .map(|b| match self.coherence {
                Coherence::Coherent => vec![self.draw(member, b, 0, size)],
                Coherence::WhiteNoise => (0..k_count).map(|q| self.draw(member, b, q, size)).collect(),
            })
            .collect()
    }
}

fn draw_for(draws: &[GaussianDraw], q: usize) -> &GaussianDraw {
    if draws.len() == 1 {
        &draws[0]
    } else {
        &draws[q]
    }
}

/// Full propagators `U(N r_b; k)` of one member for every profile in the family.
pub fn draw_member(
    spec: &EnsembleSpec,
    member: u64,
    profiles: &[VarianceProfile],
) -> Result<Vec<UnitaryPropagator>> {
    spec.validate()?;
    let size = profiles.iter().map(|p| p.mode_count()).max().unwrap_or(0);
    let draws = spec.draws_for_member(member, profiles.len(), size);
    profiles
        .par_iter()
        .enumerate()
        .map(|(q, p)| {
            let p = checked_profile(spec, p)?;
            let blocks = draws
                .iter()
                .map(|d| draw_block(p, draw_for(d, q)))
                .collect::<Result<Vec<_>>>()?;
            compose(&blocks, vec![spec.master_seed, member])
        })
        .collect()
}

/// `U(N r_b; k) a(k)` for every k of one member, without forming `U`: each
/// block costs one LU factorisation and two triangular solves per k.
pub fn apply_member(
    spec: &EnsembleSpec,
    member: u64,
    profiles: &[VarianceProfile],
    initial: &[Vec<C64>],
) -> Result<Vec<Vec<C64>>> {
    spec.validate()?;
    if initial.len() != profiles.len() {
        return Err(Error::Dimension(format!(
            "{} initial vectors for {} wavenumbers",
            initial.len(),
            profiles.len()
        )));
    }
    let size = profiles.iter().map(|p| p.mode_count()).max().unwrap_or(0);
    let draws = spec.draws_for_member(member, profiles.len(), size);
    profiles
        .par_iter()
        .zip(initial.par_iter())
        .enumerate()
        .map(|(q, (p, a0))| {
            let p = checked_profile(spec, p)?;
            let m = p.mode_count();
            if a0.len() != m {
                return Err(Error::Dimension(format!("{} coefficients for {m} modes", a0.len())));
            }
            if m == 0 {
                return Ok(Vec::new());
            }
            let mut v = nalgebra::DVector::from_column_slice(a0);
            for d in &draws {
                let a = hermitian_coupling(p, draw_for(d, q))?;
                let ia = a * C64::new(0.0, 1.0);
                let rhs = &v - &ia * &v;
                let mut sys = ia;
                for i in 0..m {
                    sys[(i, i)] += C64::new(1.0, 0.0);
                }
                v = sys
                    .lu()
                    .solve(&rhs)
                    .ok_or_else(|| Error::Singular("I + iA is singular".into()))?;
                for (i, e) in p.energies.iter().enumerate() {
                    v[i] *= C64::from_polar(1.0, -p.k * e * p.block_range);
                }
            }
            Ok(v.as_slice().to_vec())
        })
        .collect()
}

fn checked_profile<'p>(spec: &EnsembleSpec, p: &'p VarianceProfile) -> Result<&'p VarianceProfile> {
    if (p.block_range - spec.block_range).abs() > 1e-12 * spec.block_range {
        return Err(Error::Dimension(format!(
            "profile block range {} differs from ensemble block range {}",
            p.block_range, spec.block_range
        )));
    }
    if (p.strength - spec.strength).abs() > 1e-12 * spec.strength.max(1.0) {
        return Err(Error::Dimension(format!(
            "profile strength {} differs from ensemble strength {}",
            p.strength, spec.strength
        )));
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depth::DepthGrid;
    use crate::env::{Environment, IwRealization};
    use crate::modes::{solve_modes, ModeBasis, ModeCount};
    use crate::unitary::{free_propagator, unitarity_defect};
    use proptest::prelude::*;

    fn toy_env() -> Environment {
        let mut env = Environment::default();
        env.waves.j_max = 4;
        env.waves.kl_count = 32;
        env
    }

    fn toy_basis(env: &Environment) -> ModeBasis {
        solve_modes(60.0, &env.guide, &DepthGrid::default(), ModeCount::Fixed(10)).unwrap()
    }

    fn profile_for(env: &Environment, basis: &ModeBasis, strength: f64) -> VarianceProfile {
        let c = CouplingTensor::new(basis, env);
        variance_profile(&c, &basis.energies, 50.0, strength).unwrap()
    }

    fn max_abs(m: &DMatrix<C64>) -> f64 {
        m.iter().fold(0.0f64, |a, x| a.max(x.norm()))
    }

    #[test]
    fn sinc_limits() {
        assert_eq!(sinc(0.0), 1.0);
        assert!((sinc(std::f64::consts::PI)).abs() < 1e-16);
        assert!((sinc(1e-9) - 1.0).abs() < 1e-16);
        assert!((sinc(0.5) - 0.5f64.sin() / 0.5).abs() < 1e-16);
    }

    #[test]
    fn profile_is_symmetric_and_banded() {
        let env = Environment::default();
        let basis = toy_basis(&env);
        let p = profile_for(&env, &basis, 1.0);
        for a in 0..10 {
            for b in 0..10 {
                assert_eq!(p.values[(a, b)], p.values[(b, a)]);
                assert!(p.values[(a, b)].is_finite() && p.values[(a, b)] >= 0.0);
            }
        }
        // The diagonal needs k_l near 0, below the k_l grid, so decay starts at |m-n| = 1.
        let band = p.band_profile(2..6, 4);
        assert!(band[1..].windows(2).all(|w| w[1] < w[0]), "{band:?}");
        let doubled = profile_for(&env, &basis, 2.0);
        assert!((doubled.values[(3, 4)] / p.values[(3, 4)] - 2.0).abs() < 1e-12);
    }

    /// Brute force: integrate `(k/2) int_0^{r_b} e^{ik(E_m-E_n)r} [V1(r)]_mn dr`
    /// by Simpson's rule over many random phase sets and compare the sample
    /// second moment with the closed form.
    #[test]
    fn variance_matches_monte_carlo_integral() {
        let env = toy_env();
        let basis = toy_basis(&env);
        let k = basis.k;
        let coupling = CouplingTensor::new(&basis, &env);
        let profile = variance_profile(&coupling, &basis.energies, 50.0, 1.0).unwrap();
        let (jm, lm) = (env.waves.j_max, env.waves.kl_count);
        let intervals = 1000;
        let h = 50.0 / intervals as f64;
        let r: Vec<f64> = (0..=intervals).map(|i| i as f64 * h).collect();
        let simpson: Vec<f64> = (0..=intervals)
            .map(|i| {
                let w = if i == 0 || i == intervals {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                w * h / 3.0
            })
            .collect();
        let kl: Vec<f64> = (0..lm).map(|l| env.waves.kl(l)).collect();
        let cos_t: Vec<f64> = r.iter().flat_map(|&ri| kl.iter().map(move |k| (k * ri).cos())).collect();
        let sin_t: Vec<f64> = r.iter().flat_map(|&ri| kl.iter().map(move |k| (k * ri).sin())).collect();
        let pairs: Vec<(usize, usize)> = (0..10)
            .flat_map(|a| (a..10).filter(move |b| b - a <= 3).map(move |b| (a, b)))
            .collect();
        let g: Vec<DMatrix<f64>> = (1..=jm).map(|j| coupling.shape_matrix(j).unwrap().clone()).collect();
        let osc: Vec<Vec<C64>> = pairs
            .iter()
            .map(|&(a, b)| {
                let d = k * (basis.energies[a] - basis.energies[b]);
                r.iter()
                    .zip(&simpson)
                    .map(|(&ri, &w)| C64::from_polar(w, d * ri))
                    .collect()
            })
            .collect();
        let draws = 10_000;
        let mut second = vec![0.0; pairs.len()];
        let mut rj = vec![0.0; jm * r.len()];
        for seed in 0..draws {
            let rz = IwRealization::generate(seed, jm, lm);
            for j in 0..jm {
                let wc: Vec<f64> = (0..lm)
                    .map(|l| coupling.weight(j + 1, l) * rz.phase(j + 1, l).cos())
                    .collect();
                let ws: Vec<f64> = (0..lm)
                    .map(|l| coupling.weight(j + 1, l) * rz.phase(j + 1, l).sin())
                    .collect();
                for i in 0..r.len() {
                    let c = &cos_t[i * lm..(i + 1) * lm];
                    let s = &sin_t[i * lm..(i + 1) * lm];
                    rj[j * r.len() + i] = (0..lm).map(|l| wc[l] * c[l] - ws[l] * s[l]).sum();
                }
            }
            for (p, &(a, b)) in pairs.iter().enumerate() {
                let mut acc = C64::new(0.0, 0.0);
                for i in 0..r.len() {
                    let v: f64 = (0..jm).map(|j| g[j][(a, b)] * rj[j * r.len() + i]).sum();
                    acc += osc[p][i] * v;
                }
                second[p] += (acc * (0.5 * k)).norm_sqr();
            }
        }
        for (p, &(a, b)) in pairs.iter().enumerate() {
            let mc = second[p] / draws as f64;
            let exact = profile.values[(a, b)].powi(2);
            assert!((mc / exact - 1.0).abs() < 0.05, "({a},{b}): {mc} vs {exact}");
        }
    }

    #[test]
    fn empty_basis_gives_empty_blocks() {
        let env = toy_env();
        let b = solve_modes(1.0, &env.guide, &DepthGrid::default(), ModeCount::Trapped).unwrap();
        let p = profile_for(&env, &b, 1.0);
        let spec = EnsembleSpec { blocks: 3, ..EnsembleSpec::default() };
        let u = draw_member(&spec, 0, std::slice::from_ref(&p)).unwrap();
        assert_eq!(u[0].mode_count(), 0);
        let v = apply_member(&spec, 0, &[p], &[vec![]]).unwrap();
        assert!(v[0].is_empty());
    }

    #[test]
    fn zero_draw_gives_free_propagation() {
        let env = Environment::default();
        let basis = toy_basis(&env);
        let p = profile_for(&env, &basis, 1.0);
        let b = draw_block(&p, &GaussianDraw::zeros(10)).unwrap();
        assert_eq!(b.u, free_propagator(p.k, &p.energies, 50.0));
        let blocks = vec![b.clone(); 7];
        let u = compose(&blocks, vec![]).unwrap();
        let lam = free_propagator(p.k, &p.energies, 350.0);
        assert!(max_abs(&(&u.u - &lam)) < 1e-12);
        assert_eq!(u.r, 350.0);
        let single = compose(&blocks[..1], vec![]).unwrap();
        assert_eq!(single.u, b.u);
    }

    #[test]
    fn blocks_are_unitary_and_products_stay_unitary() {
        let env = Environment::default();
        let basis = solve_modes(316.27, &env.guide, &DepthGrid::default(), ModeCount::Trapped).unwrap();
        let p = profile_for(&env, &basis, 1.0);
        let spec = EnsembleSpec {
            blocks: 60,
            ..Default::default()
        };
        let mut blocks = Vec::new();
        for b in 0..60 {
            let blk = draw_block(&p, &spec.draw(0, b, 0, p.mode_count())).unwrap();
            assert!(unitarity_defect(&blk.u) < 1e-12);
            blocks.push(blk);
        }
        let u = compose(&blocks, vec![]).unwrap();
        assert!(u.unitarity_defect() < 1e-10, "{}", u.unitarity_defect());
        assert_eq!(u.provenance, Provenance::Rmt);
        assert_eq!(u.blocks.unwrap().blocks, 60);
    }

    #[test]
    fn cayley_matches_first_order_expansion() {
        let env = Environment::default();
        let basis = toy_basis(&env);
        let p = profile_for(&env, &basis, 1.0);
        let draw = GaussianDraw::generate(10, stream_seed(9, 0, 0, 0));
        let a0 = hermitian_coupling(&p, &draw).unwrap();
        let norm = max_abs(&a0);
        let defect = |scale: f64| {
            let a = &a0 * C64::new(scale * 0.05 / norm, 0.0);
            let u = cayley(&a, p.k, &p.energies, 50.0).unwrap();
            let lam = free_propagator(p.k, &p.energies, 50.0);
            let eye = DMatrix::<C64>::identity(10, 10);
            let first = &lam * (&eye - &a * C64::new(0.0, 2.0));
            (&u - &first).norm()
        };
        let ratio = defect(1.0) / defect(0.5);
        assert!((ratio - 4.0).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn a_matrix_statistics() {
        let sizes = 6;
        let mut values = DMatrix::zeros(sizes, sizes);
        for a in 0..sizes {
            for b in 0..sizes {
                values[(a, b)] = 0.01 / (1.0 + (a as f64 - b as f64).abs()).powi(2);
            }
        }
        let p = VarianceProfile {
            k: 100.0,
            block_range: 50.0,
            strength: 1.0,
            energies: vec![0.0; sizes],
            values,
        };
        let n = 10_000;
        let mut mean = DMatrix::<C64>::zeros(sizes, sizes);
        let mut second = DMatrix::<f64>::zeros(sizes, sizes);
        for i in 0..n {
            let d = GaussianDraw::generate(sizes, stream_seed(4, i, 0, 0));
            let a = hermitian_coupling(&p, &d).unwrap();
            assert_eq!(a, a.adjoint());
            mean += &a;
            second += a.map(|x| x.norm_sqr());
        }
        for (x, y) in [(0, 1), (1, 3), (2, 2), (0, 5), (4, 4)] {
            let var = second[(x, y)] / n as f64;
            let target = p.values[(x, y)].powi(2);
            assert!((var / target - 1.0).abs() < 0.03, "({x},{y}): {var} vs {target}");
        }
        for d in 0..sizes {
            let m = mean[(d, d)].re / n as f64;
            let se = p.values[(d, d)] / (n as f64).sqrt();
            assert!(m.abs() < 4.0 * se, "diagonal drift {m}");
        }
    }

    #[test]
    fn leading_block_of_a_draw_is_the_smaller_draw() {
        let seed = stream_seed(1, 2, 3, 0);
        let big = GaussianDraw::generate(30, seed);
        let small = GaussianDraw::generate(12, seed);
        assert_eq!(big.z.view((0, 0), (12, 12)).into_owned(), small.z);
    }

    #[test]
    fn coherence_policies() {
        let coherent = EnsembleSpec::default();
        assert_eq!(coherent.draw(3, 1, 0, 8), coherent.draw(3, 1, 5, 8));
        let white = EnsembleSpec {
            coherence: Coherence::WhiteNoise,
            ..Default::default()
        };
        assert_ne!(white.draw(3, 1, 0, 8), white.draw(3, 1, 5, 8));
        assert_eq!(EnsembleSpec::default().coherence, Coherence::Coherent);
    }

    #[test]
    fn blocks_are_independent() {
        let spec = EnsembleSpec::default();
        let m = 40;
        let a = spec.draw(0, 0, 0, m);
        let b = spec.draw(0, 1, 0, m);
        let n = (m * m) as f64;
        let dot: C64 = a.z.iter().zip(b.z.iter()).map(|(x, y)| x * y.conj()).sum();
        let na: f64 = a.z.iter().map(|x| x.norm_sqr()).sum();
        let nb: f64 = b.z.iter().map(|x| x.norm_sqr()).sum();
        let corr = dot.norm() / (na * nb).sqrt();
        assert!(corr < 3.0 / n.sqrt(), "{corr}");
    }

    #[test]
    fn members_are_reproducible_and_apply_path_agrees() {
        let env = Environment::default();
        let grid = DepthGrid::default();
        let profiles: Vec<VarianceProfile> = [55.0, 60.0, 65.0]
            .iter()
            .map(|&k| {
                let b = solve_modes(k, &env.guide, &grid, ModeCount::Trapped).unwrap();
                let c = CouplingTensor::new(&b, &env);
                variance_profile(&c, &b.energies, 50.0, 1.0).unwrap()
            })
            .collect();
        let spec = EnsembleSpec {
            blocks: 4,
            ..Default::default()
        };
        let first = draw_member(&spec, 7, &profiles).unwrap();
        let again = draw_member(&spec, 7, &profiles).unwrap();
        let other = draw_member(&spec, 8, &profiles).unwrap();
        assert_eq!(first[1].u, again[1].u);
        assert_ne!(first[1].u, other[1].u);
        let a0: Vec<Vec<C64>> = profiles
            .iter()
            .map(|p| (0..p.mode_count()).map(|i| C64::new(1.0 / (1.0 + i as f64), 0.0)).collect())
            .collect();
        let applied = apply_member(&spec, 7, &profiles, &a0).unwrap();
        for q in 0..3 {
            let direct = first[q].apply(&a0[q]).unwrap();
            for (x, y) in direct.iter().zip(&applied[q]) {
                assert!((x - y).norm() < 1e-12);
            }
        }
        let wrong = EnsembleSpec {
            block_range: 25.0,
            ..spec.clone()
        };
        assert!(draw_member(&wrong, 0, &profiles).is_err());
    }

    #[test]
    fn single_block_intensity_follows_four_s_squared() {
        let env = Environment::default();
        let basis = toy_basis(&env);
        let p = profile_for(&env, &basis, 0.3);
        let spec = EnsembleSpec {
            strength: 0.3,
            ..Default::default()
        };
        let n = 4000;
        let mut acc = DMatrix::<f64>::zeros(10, 10);
        for i in 0..n {
            let b = draw_block(&p, &spec.draw(i, 0, 0, 10)).unwrap();
            acc += b.u.map(|x| x.norm_sqr());
        }
        for (a, b) in [(2, 3), (4, 5), (3, 5), (5, 6)] {
            let got = acc[(a, b)] / n as f64;
            let want = 4.0 * p.values[(a, b)].powi(2);
            // |U_mn|^2 is close to exponential: relative error 1/sqrt(n)
            // plus second-order corrections of size M s^2.
            assert!((got / want - 1.0).abs() < 0.1, "({a},{b}): {got} vs {want}");
        }
    }

    #[test]
    fn row_spreading_grows_with_blocks() {
        let env = Environment::default();
        let basis = toy_basis(&env);
        let p = profile_for(&env, &basis, 1.0);
        let pr = |blocks: usize| {
            let spec = EnsembleSpec {
                blocks,
                ..Default::default()
            };
            let members = 200;
            let mut total = 0.0;
            for i in 0..members {
                let u = &draw_member(&spec, i, std::slice::from_ref(&p)).unwrap()[0].u;
                for row in 0..10 {
                    let s4: f64 = (0..10).map(|c| u[(row, c)].norm_sqr().powi(2)).sum();
                    total += 1.0 / s4;
                }
            }
            total / (members as f64 * 10.0)
        };
        let series: Vec<f64> = [1, 2, 4, 8].iter().map(|&n| pr(n)).collect();
        assert!(series.windows(2).all(|w| w[1] >= w[0]), "{series:?}");
    }

    proptest! {
        #[test]
        fn stream_seeds_are_injective(a in any::<(u64, u64, u64, u64)>(), b in any::<(u64, u64, u64, u64)>()) {
            prop_assume!(a != b);
            prop_assert_ne!(stream_seed(a.0, a.1, a.2, a.3), stream_seed(b.0, b.1, b.2, b.3));
        }
    }
}
