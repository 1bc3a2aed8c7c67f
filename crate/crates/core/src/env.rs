//! Deep-ocean waveguide and internal-wave sound-speed perturbations.
//!
//! Depths and ranges are in km (z positive downward, surface at 0), acoustic
//! and internal-wave horizontal wavenumbers in rad/km, frequencies in rad/s.
//! The background channel is Munk's canonical profile; the perturbation is the
//! Colosi–Brown sum of Garrett–Munk internal-wave modes with random phases.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depth::DepthGrid;
use crate::error::{invalid, Error, Result};

/// Domain tag mixed into phase-generator keys so phase streams never collide
/// with the random-matrix draws.
const PHASE_STREAM_TAG: u64 = 0x4957_5048_4153_4531;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaveguideParams {
    /// Reference sound speed, km/s.
    pub c0: f64,
    /// Sound-channel axis depth, km.
    pub axis_depth: f64,
    /// Thermocline depth scale B, km.
    pub thermocline_scale: f64,
    /// Confinement strength gamma, 1/km.
    pub confinement: f64,
    /// Ocean depth H, km.
    pub ocean_depth: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for WaveguideParams {
    fn default() -> Self {
        WaveguideParams {
            c0: 1.49,
            axis_depth: 1.0,
            thermocline_scale: 1.0,
            confinement: 0.0114,
            ocean_depth: 5.0,
            z_min: -3.0,
            z_max: 10.0,
        }
    }
}

impl WaveguideParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c0 > 0.0) {
            return Err(invalid("environment.guide.c0", "must be positive"));
        }
        if !(self.thermocline_scale > 0.0) {
            return Err(invalid("environment.guide.thermocline_scale", "must be positive"));
        }
        if !(self.confinement > 0.0) {
            return Err(invalid("environment.guide.confinement", "must be positive"));
        }
        if !(self.z_min < 0.0) {
            return Err(invalid("environment.guide.z_min", "must lie above the surface (< 0)"));
        }
        if !(self.axis_depth > 0.0 && self.axis_depth < self.ocean_depth) {
            return Err(invalid("environment.guide.axis_depth", "must satisfy 0 < z_a < H"));
        }
        if !(self.ocean_depth <= self.z_max) {
            return Err(invalid("environment.guide.ocean_depth", "must not exceed z_max"));
        }
        Ok(())
    }

    /// Munk canonical potential `V0(z) = (B gamma / 2) [exp(-eta) - 1 + eta]`,
    /// `eta = 2 (z - z_a) / B`.
    pub fn munk_potential(&self, z: f64) -> f64 {
        let eta = 2.0 * (z - self.axis_depth) / self.thermocline_scale;
        // exp_m1 keeps the bracket accurate next to the axis.
        0.5 * self.thermocline_scale * self.confinement * ((-eta).exp_m1() + eta)
    }
}

pub fn munk_potential(z: f64, p: &WaveguideParams) -> f64 {
    p.munk_potential(z)
}

/// Garrett–Munk internal-wave field parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InternalWaveParams {
    /// Garrett–Munk energy level (dimensionless).
    pub energy: f64,
    /// Surface buoyancy frequency N0, rad/s.
    pub surface_buoyancy: f64,
    /// Inertial frequency f_i, rad/s.
    pub inertial: f64,
    /// Principal mode number j_*.
    pub j_star: f64,
    pub j_max: usize,
    /// Gravitational acceleration, m/s^2.
    pub gravity: f64,
    /// Smallest horizontal wavenumber, rad/km.
    pub kl_min: f64,
    /// Largest horizontal wavenumber, rad/km.
    pub kl_max: f64,
    pub kl_count: usize,
}

impl Default for InternalWaveParams {
    fn default() -> Self {
        InternalWaveParams {
            energy: 6.3e-5,
            // 1 cycle per 10 min
            surface_buoyancy: 2.0 * PI / 600.0,
            // 1 cycle per day (30 deg latitude)
            inertial: 2.0 * PI / 86_400.0,
            j_star: 3.0,
            j_max: 30,
            gravity: 9.81,
            kl_min: 2.0 * PI * 0.01,
            kl_max: 2.0 * PI * 1.0,
            kl_count: 512,
        }
    }
}

impl InternalWaveParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("energy", self.energy),
            ("surface_buoyancy", self.surface_buoyancy),
            ("inertial", self.inertial),
            ("j_star", self.j_star),
            ("gravity", self.gravity),
            ("kl_min", self.kl_min),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(invalid(&format!("environment.waves.{name}"), "must be positive"));
            }
        }
        if self.j_max == 0 {
            return Err(invalid("environment.waves.j_max", "must be at least 1"));
        }
        if self.kl_count < 2 {
            return Err(invalid("environment.waves.kl_count", "need at least 2 wavenumbers"));
        }
        if !(self.kl_max > self.kl_min) {
            return Err(invalid("environment.waves.kl_max", "must exceed kl_min"));
        }
        Ok(())
    }

    pub fn kl_spacing(&self) -> f64 {
        (self.kl_max - self.kl_min) / (self.kl_count - 1) as f64
    }

    pub fn kl(&self, l: usize) -> f64 {
        self.kl_min + l as f64 * self.kl_spacing()
    }

    pub fn kl_grid(&self) -> Vec<f64> {
        (0..self.kl_count).map(|l| self.kl(l)).collect()
    }

    /// Mode scaling number `M = (pi j_* - 1) / (2 j_*^2)`.
    pub fn mode_scaling(&self) -> f64 {
        (PI * self.j_star - 1.0) / (2.0 * self.j_star * self.j_star)
    }

    /// Characteristic wavenumber `k_j = f_i pi j / (N0 B)` of vertical mode j, rad/km.
    pub fn mode_wavenumber(&self, j: usize, thermocline_scale: f64) -> f64 {
        self.inertial * PI * j as f64 / (self.surface_buoyancy * thermocline_scale)
    }

    /// Horizontal spectral integral `I_{j,k_l}` in km.
    pub fn spectral_integral(&self, j: usize, kl: f64, thermocline_scale: f64) -> f64 {
        let kj = self.mode_wavenumber(j, thermocline_scale);
        let b2 = (kl / kj).powi(2);
        let s = (b2 + 1.0).sqrt();
        // s - 1 rewritten to avoid cancellation for small beta
        let s_minus_1 = b2 / (s + 1.0);
        let log_term = if b2 == 0.0 { 0.0 } else { ((s + 1.0) / s_minus_1).ln() };
        (1.0 / (b2 + 1.0) + 0.5 * b2 / (b2 + 1.0).powf(1.5) * log_term) / kj
    }

    /// `sqrt(I_{j,k_l} / (j^2 + j_*^2))`.
    pub fn spectral_weight(&self, j: usize, kl: f64, thermocline_scale: f64) -> f64 {
        let jf = j as f64;
        (self.spectral_integral(j, kl, thermocline_scale) / (jf * jf + self.j_star * self.j_star))
            .sqrt()
    }

    /// Leading amplitude `(24.5/g) (2B/pi) N0^2 sqrt(E dk_l / M)`.
    ///
    /// The factor is the Colosi–Brown displacement-to-sound-speed conversion
    /// and is evaluated in SI: `2B/pi` is a displacement scale in metres, `N0`
    /// in rad/s, `g` in m/s^2, so `N0^2 (2B/pi) / g` is dimensionless. `dk_l`
    /// (rad/km) multiplies `I_{j,k_l}` (km) under the square root, so their
    /// product is dimensionless in whichever length unit both share.
    pub fn amplitude(&self, thermocline_scale: f64) -> f64 {
        let b_metres = thermocline_scale * 1000.0;
        24.5 / self.gravity
            * (2.0 * b_metres / PI)
            * self.surface_buoyancy.powi(2)
            * (self.energy * self.kl_spacing() / self.mode_scaling()).sqrt()
    }
}

/// Waveguide plus internal-wave statistics.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Environment {
    pub guide: WaveguideParams,
    pub waves: InternalWaveParams,
}

impl Environment {
    pub fn validate(&self) -> Result<()> {
        self.guide.validate()?;
        self.waves.validate()
    }

    /// Buoyancy frequency `N(z) = N0 exp(-z/B)`, rad/s.
    pub fn buoyancy(&self, z: f64) -> f64 {
        self.waves.surface_buoyancy * (-z / self.guide.thermocline_scale).exp()
    }

    /// `xi(z) = exp(-z/B) - exp(-H/B)`.
    pub fn stretched_depth(&self, z: f64) -> f64 {
        let b = self.guide.thermocline_scale;
        (-z / b).exp() - (-self.guide.ocean_depth / b).exp()
    }

    /// Depth factor shared by every horizontal wavenumber of mode j:
    /// amplitude x `exp(-3z/2B) sin(j pi xi(z))`.
    pub fn mode_shape(&self, j: usize, z: f64) -> f64 {
        let b = self.guide.thermocline_scale;
        self.waves.amplitude(b)
            * (-1.5 * z / b).exp()
            * (j as f64 * PI * self.stretched_depth(z)).sin()
    }

    /// Internal-wave mode weighting `V_j(z; k_l)`.
    pub fn iw_mode_profile(&self, j: usize, kl: f64, z: f64) -> Result<f64> {
        if j == 0 || j > self.waves.j_max {
            return Err(Error::ModeIndex {
                j,
                j_max: self.waves.j_max,
            });
        }
        Ok(self.mode_shape(j, z)
            * self
                .waves
                .spectral_weight(j, kl, self.guide.thermocline_scale))
    }

    /// `w_{jl} = sqrt(I_{j,k_l}/(j^2+j_*^2))`, row-major over (j-1, l).
    pub fn spectral_weights(&self) -> Vec<f64> {
        let w = &self.waves;
        let mut out = Vec::with_capacity(w.j_max * w.kl_count);
        for j in 1..=w.j_max {
            for l in 0..w.kl_count {
                out.push(w.spectral_weight(j, w.kl(l), self.guide.thermocline_scale));
            }
        }
        out
    }

    /// `eps V1(z, r) = sum_j sum_l V_j(z; k_l) cos(phi_jl + k_l r)`, evaluated
    /// term by term.
    pub fn eval_perturbation(&self, rz: &IwRealization, z: f64, r: f64) -> f64 {
        let w = &self.waves;
        let b = self.guide.thermocline_scale;
        let mut total = 0.0;
        for j in 1..=rz.j_max.min(w.j_max) {
            let shape = self.mode_shape(j, z);
            let mut sum = 0.0;
            for l in 0..rz.l_max.min(w.kl_count) {
                let kl = w.kl(l);
                sum += w.spectral_weight(j, kl, b) * (rz.phase(j, l) + kl * r).cos();
            }
            total += shape * sum;
        }
        total
    }
}

pub fn buoyancy(z: f64, env: &Environment) -> f64 {
    env.buoyancy(z)
}

/// One frozen internal-wave realization: the phase matrix `phi_{jl}` and the
/// seed that generated it. Serializes as `{seed, j_max, l_max}` only.
#[derive(Debug, Clone, PartialEq)]
pub struct IwRealization {
    pub seed: u64,
    pub j_max: usize,
    pub l_max: usize,
    phases: Vec<f64>,
}

impl IwRealization {
    /// Phases in [0, 2pi). Phase (j, l) depends only on (seed, j, l): each
    /// mode j owns a ChaCha stream keyed by (seed, j) and l indexes the draw.
    pub fn generate(seed: u64, j_max: usize, l_max: usize) -> Self {
        let mut phases = Vec::with_capacity(j_max * l_max);
        for j in 1..=j_max {
            let mut rng = phase_rng(seed, j);
            phases.extend((0..l_max).map(|_| 2.0 * PI * rng.random::<f64>()));
        }
        IwRealization {
            seed,
            j_max,
            l_max,
            phases,
        }
    }

    /// Phase of vertical mode `j` (1-based) at horizontal index `l` (0-based).
    pub fn phase(&self, j: usize, l: usize) -> f64 {
        self.phases[(j - 1) * self.l_max + l]
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    /// All phases set to one value; used by tests and diagnostics.
    pub fn uniform(phase: f64, j_max: usize, l_max: usize) -> Self {
        IwRealization {
            seed: 0,
            j_max,
            l_max,
            phases: vec![phase; j_max * l_max],
        }
    }
}

fn phase_rng(seed: u64, j: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&PHASE_STREAM_TAG.to_le_bytes());
    key[16..24].copy_from_slice(&(j as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

pub fn sample_iw_realization(seed: u64, env: &Environment) -> IwRealization {
    IwRealization::generate(seed, env.waves.j_max, env.waves.kl_count)
}

#[derive(Serialize, Deserialize)]
struct RealizationKey {
    seed: u64,
    j_max: usize,
    l_max: usize,
}

impl Serialize for IwRealization {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        RealizationKey {
            seed: self.seed,
            j_max: self.j_max,
            l_max: self.l_max,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for IwRealization {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let key = RealizationKey::deserialize(d)?;
        Ok(IwRealization::generate(key.seed, key.j_max, key.l_max))
    }
}

/// Perturbation sampler for a fixed depth grid.
///
/// The field separates as `sum_j S_j(z) R_j(r)` with
/// `R_j(r) = sum_l w_jl cos(phi_jl + k_l r)`, so a full depth profile costs
/// `l_max` complex exponentials plus `j_max * len` multiply-adds.
#[derive(Debug, Clone)]
pub struct PerturbationField {
    j_max: usize,
    l_max: usize,
    kl: Vec<f64>,
    /// `w_jl exp(i phi_jl)` split into real and imaginary parts, row-major (j, l).
    coef_re: Vec<f64>,
    coef_im: Vec<f64>,
    /// `scale * S_j(z_i)`, row-major (j, i).
    shapes: Vec<f64>,
    len: usize,
}

impl PerturbationField {
    /// `scale` multiplies the whole field (0 switches internal waves off).
    pub fn new(env: &Environment, rz: &IwRealization, grid: &DepthGrid, scale: f64) -> Self {
        let j_max = rz.j_max.min(env.waves.j_max);
        let l_max = rz.l_max.min(env.waves.kl_count);
        let weights = env.spectral_weights();
        let mut coef_re = Vec::with_capacity(j_max * l_max);
        let mut coef_im = Vec::with_capacity(j_max * l_max);
        for j in 1..=j_max {
            for l in 0..l_max {
                let w = weights[(j - 1) * env.waves.kl_count + l];
                let phi = rz.phase(j, l);
                coef_re.push(w * phi.cos());
                coef_im.push(w * phi.sin());
            }
        }
        let z = grid.points();
        let mut shapes = Vec::with_capacity(j_max * grid.len);
        for j in 1..=j_max {
            shapes.extend(z.iter().map(|&zi| scale * env.mode_shape(j, zi)));
        }
        PerturbationField {
            j_max,
            l_max,
            kl: (0..l_max).map(|l| env.waves.kl(l)).collect(),
            coef_re,
            coef_im,
            shapes,
            len: grid.len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Range coefficients `R_j(r)`.
    pub fn range_coefficients(&self, r: f64) -> Vec<f64> {
        let (c, s): (Vec<f64>, Vec<f64>) =
            self.kl.iter().map(|&k| ((k * r).cos(), (k * r).sin())).unzip();
        (0..self.j_max)
            .map(|j| {
                let re = &self.coef_re[j * self.l_max..(j + 1) * self.l_max];
                let im = &self.coef_im[j * self.l_max..(j + 1) * self.l_max];
                // Re[w e^{i phi} e^{i k r}]
                re.iter()
                    .zip(im)
                    .zip(c.iter().zip(&s))
                    .map(|((a, b), (cr, sr))| a * cr - b * sr)
                    .sum()
            })
            .collect()
    }

    /// Writes `eps V1(z_i, r)` for every grid depth into `out`.
    pub fn profile_into(&self, r: f64, out: &mut [f64]) {
        assert_eq!(out.len(), self.len);
        out.iter_mut().for_each(|v| *v = 0.0);
        for (j, rj) in self.range_coefficients(r).into_iter().enumerate() {
            let shape = &self.shapes[j * self.len..(j + 1) * self.len];
            for (o, s) in out.iter_mut().zip(shape) {
                *o += rj * s;
            }
        }
    }

    pub fn profile(&self, r: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        self.profile_into(r, &mut out);
        out
    }
}
