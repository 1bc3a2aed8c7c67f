use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Uniform depth samples `z_i = z_min + i * dz`, both window edges included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthGrid {
    pub z_min: f64,
    pub z_max: f64,
    pub len: usize,
}

impl DepthGrid {
    pub fn new(z_min: f64, z_max: f64, len: usize) -> Result<Self> {
        let grid = DepthGrid { z_min, z_max, len };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.z_max > self.z_min) {
            return Err(invalid("depth_grid.z_max", "must exceed z_min"));
        }
        if self.len < 8 {
            return Err(invalid("depth_grid.len", "need at least 8 samples"));
        }
        Ok(())
    }

    pub fn dz(&self) -> f64 {
        (self.z_max - self.z_min) / (self.len - 1) as f64
    }

    pub fn z(&self, i: usize) -> f64 {
        self.z_min + i as f64 * self.dz()
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.z(i)).collect()
    }

    /// Index of the sample closest to `z`, clamped to the window.
    pub fn nearest(&self, z: f64) -> usize {
        let x = ((z - self.z_min) / self.dz()).round();
        x.clamp(0.0, (self.len - 1) as f64) as usize
    }
}

impl Default for DepthGrid {
    fn default() -> Self {
        DepthGrid {
            z_min: -3.0,
            z_max: 10.0,
            len: 1 << 13,
        }
    }
}
