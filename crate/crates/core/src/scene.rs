//! Scene normalization into the unit cube.

use nalgebra::Vector3;

use crate::camera::Camera;
use crate::error::{Error, Result};

/// Default multiplier applied to camera positions after normalization.
pub const DEFAULT_CAMERA_SCALE: f64 = 1.4;

/// Centers `points` on their axis-aligned bounding box and scales them
/// uniformly into `[-1, 1]³`. Cameras undergo the same similarity transform,
/// after which their centers are multiplied by `camera_scale`. Intrinsics and
/// orientations are unchanged.
pub fn normalize_scene(
    points: &[Vector3<f64>],
    cameras: &[Camera],
    camera_scale: f64,
) -> Result<(Vec<Vector3<f64>>, Vec<Camera>)> {
    if points.is_empty() {
        return Err(Error::Invalid("normalize_scene needs at least one point".into()));
    }
    if cameras.is_empty() {
        return Err(Error::Invalid("normalize_scene needs at least one camera".into()));
    }
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let center = (lo + hi) * 0.5;
    let half_extent = ((hi - lo) * 0.5).max();
    if !(half_extent > 0.0) || !half_extent.is_finite() {
        return Err(Error::DegeneratePointSet);
    }
    let inv = 1.0 / half_extent;
    let out_points = points
        .iter()
        .map(|p| ((p - center) * inv).map(|x| x.clamp(-1.0, 1.0)))
        .collect();
    let out_cams = cameras
        .iter()
        .map(|cam| {
            let c = (cam.center() - center) * inv * camera_scale;
            let mut moved = cam.clone();
            moved.translation = -(cam.rotation * c);
            moved
        })
        .collect();
    Ok((out_points, out_cams))
}
