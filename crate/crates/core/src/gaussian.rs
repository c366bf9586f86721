//! Semantic Gaussian primitives and the activation rules that map raw
//! decoder outputs to valid attributes.

use nalgebra::{Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, UnprojectOptions};
use crate::error::{shape_err, Error, Result};
use crate::map::PixelMap;
use crate::sh::{ShCoeffs, SH_BASIS, SH_C0};

/// Largest supported feature embedding width.
pub const MAX_FEATURE_DIM: usize = 1024;

/// A set of activated Gaussians with per-primitive feature embeddings.
///
/// Quaternions are stored `(w, x, y, z)`. Features are a flat
/// `len() × feature_dim` row-major buffer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<Vector4<f64>>,
    pub scales: Vec<Vector3<f64>>,
    pub opacities: Vec<f64>,
    pub sh: Vec<ShCoeffs>,
    pub feature_dim: usize,
    pub features: Vec<f64>,
}

impl GaussianCloud {
    pub fn empty(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn feature_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Appends one primitive.
    pub fn push(
        &mut self,
        position: Vector3<f64>,
        rotation: Vector4<f64>,
        scale: Vector3<f64>,
        opacity: f64,
        sh: ShCoeffs,
        feature: &[f64],
    ) {
        assert_eq!(feature.len(), self.feature_dim, "feature width mismatch");
        self.positions.push(position);
        self.rotations.push(rotation);
        self.scales.push(scale);
        self.opacities.push(opacity);
        self.sh.push(sh);
        self.features.extend_from_slice(feature);
    }

    /// Keeps the primitives for which `keep(i)` is true, in order.
    pub fn select(&self, mut keep: impl FnMut(usize) -> bool) -> GaussianCloud {
        let mut out = GaussianCloud::empty(self.feature_dim);
        for i in 0..self.len() {
            if keep(i) {
                out.push(
                    self.positions[i],
                    self.rotations[i],
                    self.scales[i],
                    self.opacities[i],
                    self.sh[i],
                    self.feature(i),
                );
            }
        }
        out
    }

    /// Checks the structural and value invariants of the cloud.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.rotations.len() != n
            || self.scales.len() != n
            || self.opacities.len() != n
            || self.sh.len() != n
            || self.features.len() != n * self.feature_dim
        {
            return Err(shape_err("per-primitive attribute arrays have inconsistent lengths"));
        }
        if self.feature_dim > MAX_FEATURE_DIM {
            return Err(Error::Invalid(format!(
                "feature dimension {} exceeds {MAX_FEATURE_DIM}",
                self.feature_dim
            )));
        }
        for i in 0..n {
            let q = &self.rotations[i];
            if (q.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::Invalid(format!("rotation {i} is not a unit quaternion")));
            }
            if !self.scales[i].iter().all(|s| *s > 0.0 && s.is_finite()) {
                return Err(Error::Invalid(format!("scale {i} is not strictly positive")));
            }
            if !(0.0..=1.0).contains(&self.opacities[i]) {
                return Err(Error::Invalid(format!("opacity {i} outside [0, 1]")));
            }
            if !self.positions[i].iter().all(|x| x.is_finite()) || !self.sh[i].iter().flatten().all(|x| x.is_finite()) {
                return Err(Error::NonFinite("gaussian attributes"));
            }
        }
        if !self.features.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("features"));
        }
        Ok(())
    }
}

/// Constants of the attribute activation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActivationConfig {
    pub s_min: f64,
    pub s_max: f64,
    pub opacity_filter_threshold: f64,
    /// Depth range that `sigmoid(raw_depth)` is mapped onto.
    pub depth_near: f64,
    pub depth_far: f64,
    /// Offsets are `max_offset · tanh(raw_offset)`.
    pub max_offset: f64,
}

impl Default for ActivationConfig {
    fn default() -> Self {
        Self {
            s_min: 5e-4,
            s_max: 2e-2,
            opacity_filter_threshold: 0.005,
            depth_near: 0.1,
            depth_far: 4.0,
            max_offset: 0.05,
        }
    }
}

impl ActivationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s_min > 0.0 && self.s_min < self.s_max) {
            return Err(Error::Invalid(format!(
                "need 0 < s_min < s_max (got {}, {})",
                self.s_min, self.s_max
            )));
        }
        if !(0.0..1.0).contains(&self.opacity_filter_threshold) {
            return Err(Error::Invalid("opacity filter threshold must lie in [0, 1)".into()));
        }
        if !(self.depth_near > 0.0 && self.depth_near < self.depth_far) {
            return Err(Error::Invalid("need 0 < depth_near < depth_far".into()));
        }
        if !(self.max_offset >= 0.0) {
            return Err(Error::Invalid("max_offset must be non-negative".into()));
        }
        Ok(())
    }

    /// `s_min·sigmoid(ŝ) + s_max·(1 − sigmoid(ŝ))`; decreasing in `ŝ`.
    #[inline]
    pub fn scale(&self, raw: f64) -> f64 {
        let s = sigmoid(raw);
        self.s_min * s + self.s_max * (1.0 - s)
    }

    /// d scale / d raw.
    #[inline]
    pub fn scale_derivative(&self, raw: f64) -> f64 {
        let s = sigmoid(raw);
        (self.s_min - self.s_max) * s * (1.0 - s)
    }

    /// Inverse of [`ActivationConfig::scale`], clamped `1e-6` inside the
    /// open interval.
    pub fn inverse_scale(&self, scale: f64) -> f64 {
        let s = (self.s_max - scale) / (self.s_max - self.s_min);
        logit(s)
    }

    #[inline]
    pub fn depth(&self, raw: f64) -> f64 {
        self.depth_near + (self.depth_far - self.depth_near) * sigmoid(raw)
    }

    #[inline]
    pub fn depth_derivative(&self, raw: f64) -> f64 {
        let s = sigmoid(raw);
        (self.depth_far - self.depth_near) * s * (1.0 - s)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse sigmoid with the argument clamped to `[1e-6, 1 − 1e-6]`.
#[inline]
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

/// DC coefficient for a color in `[0, 1]`.
#[inline]
pub fn rgb_to_dc(rgb: f64) -> f64 {
    (rgb - 0.5) / SH_C0
}

/// Per-pixel channel layout of [`RawGaussianParams`].
pub mod channel {
    pub const DEPTH: usize = 0;
    pub const OFFSET: usize = 1;
    pub const SCALE: usize = 4;
    pub const ROTATION: usize = 7;
    pub const OPACITY: usize = 11;
    pub const COLOR: usize = 12;
    pub const FEATURE: usize = 60;
    /// Channels before the feature block.
    pub const BASE: usize = FEATURE;
}

/// Pre-activation decoder outputs, one primitive per pixel.
///
/// Channels per pixel: depth (1), offset (3), scale (3), rotation (4),
/// opacity (1), SH color (48, basis-major, DC first), feature (`feature_dim`).
#[derive(Clone, Debug, PartialEq)]
pub struct RawGaussianParams {
    pub feature_dim: usize,
    pub map: PixelMap,
}

impl RawGaussianParams {
    pub fn channel_count(feature_dim: usize) -> usize {
        channel::BASE + feature_dim
    }

    pub fn zeros(height: usize, width: usize, feature_dim: usize) -> Self {
        Self {
            feature_dim,
            map: PixelMap::zeros(height, width, Self::channel_count(feature_dim)),
        }
    }

    pub fn from_map(map: PixelMap, feature_dim: usize) -> Result<Self> {
        if map.channels != Self::channel_count(feature_dim) {
            return Err(shape_err(format!(
                "raw params need {} channels for feature_dim {feature_dim}, got {}",
                Self::channel_count(feature_dim),
                map.channels
            )));
        }
        Ok(Self { feature_dim, map })
    }

    pub fn height(&self) -> usize {
        self.map.height
    }

    pub fn width(&self) -> usize {
        self.map.width
    }
}

/// Activated attributes of a single primitive, position excluded.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ActivatedAttributes {
    pub rotation: Vector4<f64>,
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub sh: ShCoeffs,
}

/// Applies the activation rules to one primitive's raw attributes:
/// scale interpolation, sigmoid opacity, L2-normalized rotation and a sigmoid
/// on the DC color converted to SH space. Higher SH bands pass through.
pub(crate) fn activate_attributes(
    cfg: &ActivationConfig,
    raw_scale: &[f64],
    raw_rotation: &[f64],
    raw_opacity: f64,
    raw_color: &[f64],
) -> Result<ActivatedAttributes> {
    let q = Vector4::new(raw_rotation[0], raw_rotation[1], raw_rotation[2], raw_rotation[3]);
    let norm = q.norm();
    if norm == 0.0 {
        return Err(Error::DegenerateRotation);
    }
    let mut sh = [[0.0; 3]; SH_BASIS];
    for (k, row) in sh.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let raw = raw_color[k * 3 + c];
            *v = if k == 0 { rgb_to_dc(sigmoid(raw)) } else { raw };
        }
    }
    Ok(ActivatedAttributes {
        rotation: q / norm,
        scale: Vector3::new(
            cfg.scale(raw_scale[0]),
            cfg.scale(raw_scale[1]),
            cfg.scale(raw_scale[2]),
        ),
        opacity: sigmoid(raw_opacity),
        sh,
    })
}

/// Turns per-pixel decoder outputs into a cloud of pixel-aligned Gaussians.
///
/// Positions come from unprojecting the activated depth plus offset through
/// `camera`; `mask` (row-major, optional) selects which pixels spawn a
/// primitive.
pub fn activate_params(
    raw: &RawGaussianParams,
    cfg: &ActivationConfig,
    camera: &Camera,
    mask: Option<&[bool]>,
    opts: UnprojectOptions,
) -> Result<GaussianCloud> {
    cfg.validate()?;
    camera.validate()?;
    if raw.height() != camera.height || raw.width() != camera.width {
        return Err(shape_err("raw parameter map does not match camera size"));
    }
    if raw.map.channels != RawGaussianParams::channel_count(raw.feature_dim) {
        return Err(shape_err("raw parameter channel count"));
    }
    if !raw.map.is_finite() {
        return Err(Error::NonFinite("raw gaussian parameters"));
    }
    let (h, w) = (raw.height(), raw.width());
    let mut depth = PixelMap::zeros(h, w, 1);
    let mut offsets = PixelMap::zeros(h, w, 3);
    for v in 0..h {
        for u in 0..w {
            let px = raw.map.pixel(v, u);
            depth.data[v * w + u] = cfg.depth(px[channel::DEPTH]);
            for a in 0..3 {
                offsets.pixel_mut(v, u)[a] = cfg.max_offset * px[channel::OFFSET + a].tanh();
            }
        }
    }
    let points = camera.unproject(&depth, Some(&offsets), mask, opts)?;
    let mut cloud = GaussianCloud::empty(raw.feature_dim);
    for (pos, &(u, v)) in points.positions.iter().zip(points.pixels.iter()) {
        let px = raw.map.pixel(v, u);
        let a = activate_attributes(
            cfg,
            &px[channel::SCALE..channel::SCALE + 3],
            &px[channel::ROTATION..channel::ROTATION + 4],
            px[channel::OPACITY],
            &px[channel::COLOR..channel::COLOR + 48],
        )?;
        cloud.push(*pos, a.rotation, a.scale, a.opacity, a.sh, &px[channel::FEATURE..]);
    }
    Ok(cloud)
}

/// Drops primitives with opacity below `threshold`, preserving order.
pub fn filter_low_opacity(cloud: &GaussianCloud, threshold: f64) -> GaussianCloud {
    cloud.select(|i| cloud.opacities[i] >= threshold)
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn rotation_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Gradient of `⟨G, R(q)⟩` with respect to the four quaternion components,
/// for the polynomial form of [`rotation_matrix`].
pub fn rotation_matrix_backward(q: &Vector4<f64>, g: &Matrix3<f64>) -> Vector4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0);
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x);
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y);
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0);
    Vector4::new(
        2.0 * g.component_mul(&dw).sum(),
        2.0 * g.component_mul(&dx).sum(),
        2.0 * g.component_mul(&dy).sum(),
        2.0 * g.component_mul(&dz).sum(),
    )
}

/// Backpropagates through `q̂ = q / ‖q‖`.
pub fn normalize_backward(q: &Vector4<f64>, d_unit: &Vector4<f64>) -> Vector4<f64> {
    let n = q.norm();
    let u = q / n;
    (d_unit - u * u.dot(d_unit)) / n
}

/// `Σ = R(q)·diag(s)²·R(q)ᵀ`.
pub fn covariance_from(q: &Vector4<f64>, s: &Vector3<f64>) -> Matrix3<f64> {
    let m = rotation_matrix(q) * Matrix3::from_diagonal(s);
    let mut cov = m * m.transpose();
    for i in 0..3 {
        for j in (i + 1)..3 {
            let avg = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = avg;
            cov[(j, i)] = avg;
        }
    }
    cov
}
