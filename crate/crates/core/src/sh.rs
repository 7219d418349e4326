//! Real spherical harmonics up to degree 3 with direction derivatives.
//!
//! Coefficient layout and sign conventions follow the common Gaussian
//! splatting layout: `color = clamp(sum_k c_k Y_k(dir) + 0.5, 0, 1)`.

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub const MAX_DEGREE: usize = 3;

pub const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Number of coefficients per channel for `degree`.
#[inline]
pub const fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Degree whose coefficient count is `count`, if any.
pub fn degree_for_count(count: usize) -> Option<usize> {
    (0..=MAX_DEGREE).find(|d| coeff_count(*d) == count)
}

/// Basis values `Y_k(dir)` and their gradients w.r.t. the (unit) direction
/// components. Entries past `coeff_count(degree)` are zero.
#[derive(Debug, Clone, Copy)]
pub struct ShBasis {
    pub values: [f64; 16],
    pub grads: [[f64; 3]; 16],
    pub count: usize,
}

pub fn basis(dir: &Vector3<f64>, degree: usize) -> ShBasis {
    let mut values = [0.0; 16];
    let mut grads = [[0.0; 3]; 16];
    let (x, y, z) = (dir.x, dir.y, dir.z);
    values[0] = C0;
    if degree >= 1 {
        values[1] = -C1 * y;
        grads[1] = [0.0, -C1, 0.0];
        values[2] = C1 * z;
        grads[2] = [0.0, 0.0, C1];
        values[3] = -C1 * x;
        grads[3] = [-C1, 0.0, 0.0];
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        values[4] = C2[0] * x * y;
        grads[4] = [C2[0] * y, C2[0] * x, 0.0];
        values[5] = C2[1] * y * z;
        grads[5] = [0.0, C2[1] * z, C2[1] * y];
        values[6] = C2[2] * (2.0 * zz - xx - yy);
        grads[6] = [-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z];
        values[7] = C2[3] * x * z;
        grads[7] = [C2[3] * z, 0.0, C2[3] * x];
        values[8] = C2[4] * (xx - yy);
        grads[8] = [2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0];
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        values[9] = C3[0] * y * (3.0 * xx - yy);
        grads[9] = [C3[0] * 6.0 * x * y, C3[0] * (3.0 * xx - 3.0 * yy), 0.0];
        values[10] = C3[1] * x * y * z;
        grads[10] = [C3[1] * y * z, C3[1] * x * z, C3[1] * x * y];
        values[11] = C3[2] * y * (4.0 * zz - xx - yy);
        grads[11] = [
            C3[2] * (-2.0 * x * y),
            C3[2] * (4.0 * zz - xx - 3.0 * yy),
            C3[2] * 8.0 * y * z,
        ];
        values[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
        grads[12] = [
            C3[3] * (-6.0 * x * z),
            C3[3] * (-6.0 * y * z),
            C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
        ];
        values[13] = C3[4] * x * (4.0 * zz - xx - yy);
        grads[13] = [
            C3[4] * (4.0 * zz - 3.0 * xx - yy),
            C3[4] * (-2.0 * x * y),
            C3[4] * 8.0 * x * z,
        ];
        values[14] = C3[5] * z * (xx - yy);
        grads[14] = [C3[5] * 2.0 * x * z, C3[5] * (-2.0 * y * z), C3[5] * (xx - yy)];
        values[15] = C3[6] * x * (xx - 3.0 * yy);
        grads[15] = [C3[6] * (3.0 * xx - 3.0 * yy), C3[6] * (-6.0 * x * y), 0.0];
    }
    ShBasis { values, grads, count: coeff_count(degree) }
}

/// Unclamped color `sum_k c_k Y_k + 0.5`.
pub fn eval_raw(coeffs: &[[f64; 3]], basis: &ShBasis) -> [f64; 3] {
    let mut out = [0.5; 3];
    for (c, y) in coeffs.iter().zip(&basis.values[..basis.count]) {
        for ch in 0..3 {
            out[ch] += c[ch] * y;
        }
    }
    out
}

/// View-dependent RGB color clamped to [0, 1].
pub fn eval_sh(coeffs: &[[f64; 3]], view_dir: &Vector3<f64>, degree: usize) -> Result<[f64; 3]> {
    if degree > MAX_DEGREE {
        return Err(Error::Shape(alloc::format!("SH degree {degree} exceeds {MAX_DEGREE}")));
    }
    if coeffs.len() != coeff_count(degree) {
        return Err(Error::Shape(alloc::format!(
            "{} SH coefficients given for degree {degree} (expected {})",
            coeffs.len(),
            coeff_count(degree)
        )));
    }
    let raw = eval_raw(coeffs, &basis(view_dir, degree));
    Ok(raw.map(|v| v.clamp(0.0, 1.0)))
}

/// DC coefficient that produces `color` (per channel) with all higher
/// coefficients zero.
pub fn dc_from_color(color: [f64; 3]) -> [f64; 3] {
    color.map(|c| (c - 0.5) / C0)
}
