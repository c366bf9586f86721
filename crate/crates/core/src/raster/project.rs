//! Per-primitive preprocessing shared by the forward, reference and backward
//! passes.

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::RenderSettings;
use crate::camera::{Camera, EWA_LOW_PASS};
use crate::error::Result;
use crate::gaussian::{rotation_matrix, GaussianCloud};
use crate::sh::eval_sh;

/// Primitives closer than this (camera-frame z) are culled.
pub const NEAR_PLANE: f64 = 0.01;

/// Upper clamp on per-fragment opacity.
pub const MAX_FRAGMENT_ALPHA: f64 = 0.99;

/// Screen-space state of one visible primitive.
#[derive(Clone, Debug)]
pub(crate) struct Splat {
    pub index: usize,
    pub cam_point: Vector3<f64>,
    pub mean2d: Vector2<f64>,
    /// Inverse covariance `[[a, b], [b, c]]` as `(a, b, c)`.
    pub conic: [f64; 3],
    pub opacity: f64,
    /// Color after clamping to `[0, 1]`.
    pub color: [f64; 3],
    /// Whether each color channel was strictly inside the clamp range.
    pub color_live: [bool; 3],
    pub rot: Matrix3<f64>,
    pub normal: Vector3<f64>,
    pub normal_axis: usize,
    pub normal_sign: f64,
    /// Inclusive pixel bounds `(x0, x1, y0, y1)` that can receive fragments;
    /// empty when `x0 > x1` or `y0 > y1`.
    pub rect: (i64, i64, i64, i64),
}

impl Splat {
    /// Fragment opacity at pixel `(x, y)` and the unclamped Gaussian falloff.
    #[inline]
    pub fn fragment(&self, x: usize, y: usize) -> (f64, f64) {
        let dx = x as f64 + 0.5 - self.mean2d.x;
        let dy = y as f64 + 0.5 - self.mean2d.y;
        let [a, b, c] = self.conic;
        let power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy;
        let g = power.exp();
        ((self.opacity * g).min(MAX_FRAGMENT_ALPHA), g)
    }

    #[inline]
    pub fn depth(&self) -> f64 {
        self.cam_point.z
    }
}

/// All visible primitives of one view, sorted front to back.
pub(crate) struct Prepared {
    pub splats: Vec<Splat>,
    /// Render-space features, `splats.len() × feature_dim`, aligned with `splats`.
    pub features: Vec<f64>,
    pub feature_dim: usize,
}

impl Prepared {
    #[inline]
    pub fn feature(&self, k: usize) -> &[f64] {
        &self.features[k * self.feature_dim..(k + 1) * self.feature_dim]
    }
}

pub(crate) fn prepare(cloud: &GaussianCloud, camera: &Camera, settings: &RenderSettings) -> Result<Prepared> {
    settings.validate()?;
    let projection = settings.resolve_projection(cloud.feature_dim)?;
    let feature_dim = projection.output_dim();
    let center = camera.center();
    let cutoff = settings.alpha_cutoff;
    let (w, h) = (camera.width as i64, camera.height as i64);

    let mut splats: Vec<(Splat, Vec<f64>)> = (0..cloud.len())
        .into_par_iter()
        .filter_map(|i| {
            let p = camera.world_to_camera(&cloud.positions[i]);
            let opacity = cloud.opacities[i];
            if p.z <= NEAR_PLANE || opacity < cutoff {
                return None;
            }
            let q = cloud.rotations[i] / cloud.rotations[i].norm();
            let rot = rotation_matrix(&q);
            let m = rot * Matrix3::from_diagonal(&cloud.scales[i]);
            let cov3 = m * m.transpose();
            let t = camera.projection_jacobian(&p) * camera.rotation;
            let mut cov2d = t * cov3 * t.transpose();
            cov2d[(0, 0)] += EWA_LOW_PASS;
            cov2d[(1, 1)] += EWA_LOW_PASS;
            let (ca, cb, cc) = (cov2d[(0, 0)], 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]), cov2d[(1, 1)]);
            cov2d[(0, 1)] = cb;
            cov2d[(1, 0)] = cb;
            let det = ca * cc - cb * cb;
            if !(det > 0.0) {
                return None;
            }
            let conic = [cc / det, -cb / det, ca / det];
            let k = &camera.intrinsics;
            let mean2d = Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy);

            let rect = if cutoff > 0.0 {
                let mid = 0.5 * (ca + cc);
                let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
                let r = (2.0 * (opacity / cutoff).ln()).max(0.0).sqrt() * lambda_max.sqrt() + 1.0;
                (
                    ((mean2d.x - r - 0.5).floor() as i64).max(0),
                    ((mean2d.x + r - 0.5).ceil() as i64).min(w - 1),
                    ((mean2d.y - r - 0.5).floor() as i64).max(0),
                    ((mean2d.y + r - 0.5).ceil() as i64).min(h - 1),
                )
            } else {
                (0, w - 1, 0, h - 1)
            };
            if rect.0 > rect.1 || rect.2 > rect.3 {
                return None;
            }

            let raw_color = eval_sh(&cloud.sh[i], &(cloud.positions[i] - center).normalize());
            let mut color = [0.0; 3];
            let mut color_live = [false; 3];
            for c in 0..3 {
                color[c] = raw_color[c].clamp(0.0, 1.0);
                color_live[c] = (0.0..=1.0).contains(&raw_color[c]);
            }

            let s = &cloud.scales[i];
            let mut axis = 0;
            for a in 1..3 {
                if s[a] < s[axis] {
                    axis = a;
                }
            }
            let n = rot.column(axis).into_owned();
            let sign = if n.dot(&(center - cloud.positions[i])) < 0.0 {
                -1.0
            } else {
                1.0
            };

            let feat = projection.apply(cloud.feature(i));
            Some((
                Splat {
                    index: i,
                    cam_point: p,
                    mean2d,
                    conic,
                    opacity,
                    color,
                    color_live,
                    rot,
                    normal: n * sign,
                    normal_axis: axis,
                    normal_sign: sign,
                    rect,
                },
                feat,
            ))
        })
        .collect();

    splats.sort_by(|(a, _), (b, _)| a.depth().total_cmp(&b.depth()).then(a.index.cmp(&b.index)));
    let mut features = Vec::with_capacity(splats.len() * feature_dim);
    let splats = splats
        .into_iter()
        .map(|(s, f)| {
            features.extend_from_slice(&f);
            s
        })
        .collect();
    Ok(Prepared {
        splats,
        features,
        feature_dim,
    })
}
