use nalgebra::Vector3;

use crate::error::{Error, Result};

/// Number of order-2 real spherical-harmonic basis functions.
pub const SH_COEFFS: usize = 9;

pub const Y00: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: f64 = 1.092_548_430_592_079_2;
const C20: f64 = 0.315_391_565_252_520_05;
const C22: f64 = 0.546_274_215_296_039_6;

/// Order-2 SH lighting, nine coefficients per RGB channel, ordered
/// `Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SHLighting {
    pub coefficients: [[f64; 3]; SH_COEFFS],
}

impl SHLighting {
    /// Direction-independent light of irradiance `c · Y00` on every channel.
    pub fn ambient(c: f64) -> Self {
        let mut coefficients = [[0.0; 3]; SH_COEFFS];
        coefficients[0] = [c; 3];
        Self { coefficients }
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        crate::error::check_dim("SH lighting", SH_COEFFS * 3, v.len())?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("SH lighting must be finite"));
        }
        let mut coefficients = [[0.0; 3]; SH_COEFFS];
        for (i, c) in coefficients.iter_mut().enumerate() {
            c.copy_from_slice(&v[3 * i..3 * i + 3]);
        }
        Ok(Self { coefficients })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.coefficients.iter().flatten().copied().collect()
    }
}

/// The nine basis functions evaluated at unit direction `n`.
pub fn sh_basis(n: &Vector3<f64>) -> [f64; SH_COEFFS] {
    let (x, y, z) = (n.x, n.y, n.z);
    [
        Y00,
        C1 * y,
        C1 * z,
        C1 * x,
        C2 * x * y,
        C2 * y * z,
        C20 * (3.0 * z * z - 1.0),
        C2 * x * z,
        C22 * (x * x - y * y),
    ]
}

/// Unclamped irradiance `Σ l_i Y_i(n)` per channel.
pub fn sh_irradiance(n: &Vector3<f64>, l: &SHLighting) -> [f64; 3] {
    let y = sh_basis(n);
    let mut out = [0.0; 3];
    for (yi, li) in y.iter().zip(&l.coefficients) {
        for c in 0..3 {
            out[c] += yi * li[c];
        }
    }
    out
}

/// Irradiance at a unit normal, clamped at zero from below.
pub fn sh_shade(normal: &Vector3<f64>, l: &SHLighting) -> Result<[f64; 3]> {
    if (normal.norm() - 1.0).abs() > 1e-4 {
        return Err(Error::invalid(format!("normal has norm {}, expected 1", normal.norm())));
    }
    Ok(sh_irradiance(normal, l).map(|v| v.max(0.0)))
}
