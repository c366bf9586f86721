//! Real spherical harmonics up to degree 3 for view-dependent color.
//!
//! Coefficients are stored as `[[f64; 3]; 16]`: basis function index first,
//! RGB channel second. The rendered color is `0.5 + Σ_k Y_k(dir) · c_k`.

use nalgebra::Vector3;

pub const SH_DEGREE: usize = 3;
pub const SH_BASIS: usize = 16;

/// 16 basis functions × 3 color channels.
pub type ShCoeffs = [[f64; 3]; SH_BASIS];

/// `Y_00`.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Basis values at a unit direction, in the sign convention used by common
/// splatting tools.
pub fn basis(dir: &Vector3<f64>) -> [f64; SH_BASIS] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        SH_C0,
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[1] * y * z,
        SH_C2[2] * (2.0 * zz - xx - yy),
        SH_C2[3] * x * z,
        SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3.0 * xx - yy),
        SH_C3[1] * x * y * z,
        SH_C3[2] * y * (4.0 * zz - xx - yy),
        SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        SH_C3[4] * x * (4.0 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy),
        SH_C3[6] * x * (xx - 3.0 * yy),
    ]
}

/// Partial derivatives of each basis polynomial with respect to the
/// components of `dir`, treating them as independent.
pub fn basis_gradient(dir: &Vector3<f64>) -> [[f64; 3]; SH_BASIS] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let c2 = SH_C2;
    let c3 = SH_C3;
    [
        [0.0, 0.0, 0.0],
        [0.0, -SH_C1, 0.0],
        [0.0, 0.0, SH_C1],
        [-SH_C1, 0.0, 0.0],
        [c2[0] * y, c2[0] * x, 0.0],
        [0.0, c2[1] * z, c2[1] * y],
        [-2.0 * c2[2] * x, -2.0 * c2[2] * y, 4.0 * c2[2] * z],
        [c2[3] * z, 0.0, c2[3] * x],
        [2.0 * c2[4] * x, -2.0 * c2[4] * y, 0.0],
        [6.0 * c3[0] * x * y, c3[0] * (3.0 * xx - 3.0 * yy), 0.0],
        [c3[1] * y * z, c3[1] * x * z, c3[1] * x * y],
        [
            -2.0 * c3[2] * x * y,
            c3[2] * (4.0 * zz - xx - 3.0 * yy),
            8.0 * c3[2] * y * z,
        ],
        [
            -6.0 * c3[3] * x * z,
            -6.0 * c3[3] * y * z,
            c3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
        ],
        [
            c3[4] * (4.0 * zz - 3.0 * xx - yy),
            -2.0 * c3[4] * x * y,
            8.0 * c3[4] * x * z,
        ],
        [2.0 * c3[5] * x * z, -2.0 * c3[5] * y * z, c3[5] * (xx - yy)],
        [c3[6] * (3.0 * xx - 3.0 * yy), -6.0 * c3[6] * x * y, 0.0],
    ]
}

/// Unclamped color `0.5 + Σ_k Y_k(dir)·c_k`. Clamping to `[0, 1]` happens in
/// the rasterizer.
pub fn eval_sh(coeffs: &ShCoeffs, view_dir: &Vector3<f64>) -> [f64; 3] {
    let b = basis(view_dir);
    let mut rgb = [0.5; 3];
    for (bk, ck) in b.iter().zip(coeffs.iter()) {
        for c in 0..3 {
            rgb[c] += bk * ck[c];
        }
    }
    rgb
}

/// Backpropagates a color adjoint through [`eval_sh`] for an unnormalized
/// direction vector `raw_dir`.
///
/// Returns the gradient with respect to `raw_dir`; coefficient gradients are
/// accumulated into `d_coeffs`.
pub fn eval_sh_backward(
    coeffs: &ShCoeffs,
    raw_dir: &Vector3<f64>,
    d_rgb: &[f64; 3],
    d_coeffs: &mut ShCoeffs,
) -> Vector3<f64> {
    let norm = raw_dir.norm();
    let dir = raw_dir / norm;
    let b = basis(&dir);
    let gb = basis_gradient(&dir);
    let mut d_dir = Vector3::zeros();
    for k in 0..SH_BASIS {
        let mut s = 0.0;
        for c in 0..3 {
            d_coeffs[k][c] += b[k] * d_rgb[c];
            s += coeffs[k][c] * d_rgb[c];
        }
        d_dir += Vector3::new(gb[k][0], gb[k][1], gb[k][2]) * s;
    }
    // through dir = raw / |raw|
    (d_dir - dir * dir.dot(&d_dir)) / norm
}
