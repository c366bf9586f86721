//! Pinhole cameras and the pixel ↔ world transforms built on them.
//!
//! Conventions: `rotation`/`translation` map world to camera
//! (`x_cam = R·x_world + t`); the camera looks down +z with +y pointing down
//! the image. Pixel `(u, v)` is column `u`, row `v`, and its center sits at
//! `(u + 0.5, v + 0.5)` unless the half-pixel shift is disabled.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::map::PixelMap;

/// Distance below which a camera-frame depth counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-8;

/// Isotropic low-pass added to every projected covariance, in pixels².
pub const EWA_LOW_PASS: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// `K⁻¹·(x, y, 1)ᵀ`.
    #[inline]
    pub fn backproject(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    /// World → camera rotation.
    pub rotation: Matrix3<f64>,
    /// World → camera translation.
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

/// How depth unprojection combines the camera rotation and translation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnprojectConvention {
    /// `Rᵀ(K⁻¹p·D − t) + Δ`, the rigid inverse of the world → camera map.
    #[default]
    Conventional,
    /// `Rᵀ·K⁻¹p·D − t + Δ`, subtracting `t` after the rotation.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnprojectOptions {
    pub half_pixel: bool,
    pub convention: UnprojectConvention,
}

impl Default for UnprojectOptions {
    fn default() -> Self {
        Self {
            half_pixel: true,
            convention: UnprojectConvention::Conventional,
        }
    }
}

impl UnprojectOptions {
    #[inline]
    pub fn pixel_offset(&self) -> f64 {
        if self.half_pixel {
            0.5
        } else {
            0.0
        }
    }
}

/// Output of [`Camera::unproject`]: one world point per masked pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct UnprojectedPoints {
    pub positions: Vec<Vector3<f64>>,
    /// `(u, v)` of the source pixel for each position, row-major order.
    pub pixels: Vec<(usize, usize)>,
}

/// Result of projecting a 3D Gaussian to the image plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedGaussian {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
}

impl Camera {
    pub fn new(
        intrinsics: Intrinsics,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            intrinsics,
            rotation,
            translation,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// A camera at `eye` looking at `target`; `up` fixes the roll.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        intrinsics: Intrinsics,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("eye coincides with target".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("up is parallel to view direction".into()))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(intrinsics, rotation, translation, width, height)
    }

    /// Checks the camera invariants.
    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive (fx={}, fy={})",
                k.fx, k.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("image size must be positive".into()));
        }
        if !(0.0..=self.width as f64).contains(&k.cx) || !(0.0..=self.height as f64).contains(&k.cy) {
            return Err(Error::InvalidCamera(format!(
                "principal point ({}, {}) outside the {}x{} image",
                k.cx, k.cy, self.width, self.height
            )));
        }
        let r = &self.rotation;
        let ortho = (r * r.transpose() - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if !(ortho <= 1e-6 && (det - 1.0).abs() <= 1e-6) {
            return Err(Error::InvalidCamera(format!(
                "rotation is not proper orthonormal (|RRᵀ-I|={ortho:.3e}, det={det})"
            )));
        }
        if !self.translation.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidCamera("non-finite translation".into()));
        }
        Ok(())
    }

    /// World-space camera center `-Rᵀt`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    #[inline]
    pub fn world_to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Perspective projection of a world point: returns continuous image
    /// coordinates `(u, v)` and the camera-frame depth.
    pub fn project_point(&self, x: &Vector3<f64>) -> Result<(f64, f64, f64)> {
        let p = self.world_to_camera(x);
        if p.z <= MIN_DEPTH {
            return Err(Error::BehindCamera(p.z));
        }
        let k = &self.intrinsics;
        Ok((k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy, p.z))
    }

    /// Lifts a single pixel with the given depth and offset to world space.
    pub fn unproject_pixel(
        &self,
        u: usize,
        v: usize,
        depth: f64,
        offset: &Vector3<f64>,
        opts: UnprojectOptions,
    ) -> Vector3<f64> {
        let s = opts.pixel_offset();
        let cam = self.intrinsics.backproject(u as f64 + s, v as f64 + s) * depth;
        let rt = self.rotation.transpose();
        match opts.convention {
            UnprojectConvention::Conventional => rt * (cam - self.translation) + offset,
            UnprojectConvention::Literal => rt * cam - self.translation + offset,
        }
    }

    /// Lifts every masked pixel of a depth map (with per-pixel 3D offsets) to
    /// world space. Output order is row-major.
    pub fn unproject(
        &self,
        depth: &PixelMap,
        offsets: Option<&PixelMap>,
        mask: Option<&[bool]>,
        opts: UnprojectOptions,
    ) -> Result<UnprojectedPoints> {
        depth.ensure_shape(self.height, self.width, 1, "depth map")?;
        if let Some(o) = offsets {
            o.ensure_shape(self.height, self.width, 3, "offset map")?;
        }
        if let Some(m) = mask {
            if m.len() != self.width * self.height {
                return Err(shape_err(format!(
                    "mask has {} entries, expected {}",
                    m.len(),
                    self.width * self.height
                )));
            }
        }
        let mut out = UnprojectedPoints {
            positions: Vec::new(),
            pixels: Vec::new(),
        };
        for v in 0..self.height {
            for u in 0..self.width {
                let idx = v * self.width + u;
                if mask.is_some_and(|m| !m[idx]) {
                    continue;
                }
                let d = depth.data[idx];
                if !(d > 0.0 && d.is_finite()) {
                    return Err(Error::InvalidDepth { u, v, depth: d });
                }
                let delta = offsets.map_or_else(Vector3::zeros, |o| {
                    let p = o.pixel(v, u);
                    Vector3::new(p[0], p[1], p[2])
                });
                if !delta.iter().all(|x| x.is_finite()) {
                    return Err(Error::NonFinite("offset map"));
                }
                out.positions.push(self.unproject_pixel(u, v, d, &delta, opts));
                out.pixels.push((u, v));
            }
        }
        Ok(out)
    }

    /// Normalized world-space ray direction through pixel `(u, v)`.
    pub fn ray_direction(&self, u: usize, v: usize, half_pixel: bool) -> Vector3<f64> {
        let s = if half_pixel { 0.5 } else { 0.0 };
        (self.rotation.transpose() * self.intrinsics.backproject(u as f64 + s, v as f64 + s)).normalize()
    }

    /// Per-pixel Plücker ray coordinates `(d, o × d)`, 6 channels.
    pub fn plucker_embedding(&self, half_pixel: bool) -> PixelMap {
        let o = self.center();
        PixelMap::from_fn(self.height, self.width, 6, |v, u, px| {
            let d = self.ray_direction(u, v, half_pixel);
            let m = o.cross(&d);
            px.copy_from_slice(&[d.x, d.y, d.z, m.x, m.y, m.z]);
        })
    }

    /// Local affine (EWA) projection of a 3D Gaussian.
    pub fn project_covariance(&self, mean: &Vector3<f64>, cov: &Matrix3<f64>) -> Result<ProjectedGaussian> {
        let p = self.world_to_camera(mean);
        if p.z <= MIN_DEPTH {
            return Err(Error::BehindCamera(p.z));
        }
        let j = self.projection_jacobian(&p);
        let t = j * self.rotation;
        let mut cov2d = t * cov * t.transpose();
        cov2d[(0, 1)] = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
        cov2d[(1, 0)] = cov2d[(0, 1)];
        cov2d[(0, 0)] += EWA_LOW_PASS;
        cov2d[(1, 1)] += EWA_LOW_PASS;
        let k = &self.intrinsics;
        Ok(ProjectedGaussian {
            mean2d: Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy),
            cov2d,
            depth: p.z,
        })
    }

    /// Jacobian of the perspective map at camera-frame point `p`.
    #[inline]
    pub fn projection_jacobian(&self, p: &Vector3<f64>) -> Matrix2x3<f64> {
        let k = &self.intrinsics;
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        Matrix2x3::new(k.fx * iz, 0.0, -k.fx * p.x * iz2, 0.0, k.fy * iz, -k.fy * p.y * iz2)
    }
}
