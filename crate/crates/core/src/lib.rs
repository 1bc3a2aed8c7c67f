// Parameter checks are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod config;
pub mod depth;
pub mod env;
pub mod error;
pub mod experiment;
pub mod io;
pub mod modes;
pub mod pe;
pub mod rmt;
pub mod timefront;
pub mod tridiag;
pub mod unitary;

pub use nalgebra::Complex;

/// Complex double used for every field and matrix element.
pub type C64 = Complex<f64>;

pub use depth::DepthGrid;
pub use env::{Environment, InternalWaveParams, IwRealization, WaveguideParams};
pub use error::{Error, Result};
pub use modes::{solve_modes, CouplingTensor, ModeBasis, ModeCount};
pub use pe::{extract_unitary, KineticSymbol, PeConfig, PeSolver, SplitOrder};
pub use unitary::{Provenance, UnitaryPropagator};
pub use rmt::{Coherence, EnsembleSpec, GaussianDraw, VarianceProfile};
pub use timefront::{
    average_intensity, mixing_front, source_weights, synthesize, DepthSelection, IntensityGrid, KGrid,
    SourceSpec, TimefrontGrid,
};
