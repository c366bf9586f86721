//! Central finite-difference verification of [`backward_render`].

use std::fmt;

use nalgebra::Vector3;
use rand::{Rng, RngExt};
use serde::Serialize;

use super::backward::{adjoint_dot, backward_render, ParamGradients};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::{rgb_to_dc, GaussianCloud};
use crate::map::PixelMap;
use crate::raster::{render, RenderOutput, RenderSettings};
use crate::sh::SH_BASIS;
use crate::synthetic::{camera_towards_origin, random_quaternion, random_unit_vector, rng};

/// Attribute group perturbed by [`finite_diff_check`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamClass {
    /// All 48 spherical-harmonics coefficients.
    Color,
    Opacity,
    Feature,
    Mean,
    Scale,
    Rotation,
}

impl ParamClass {
    pub const ALL: [ParamClass; 6] = [
        ParamClass::Color,
        ParamClass::Opacity,
        ParamClass::Feature,
        ParamClass::Mean,
        ParamClass::Scale,
        ParamClass::Rotation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamClass::Color => "color",
            ParamClass::Opacity => "opacity",
            ParamClass::Feature => "feature",
            ParamClass::Mean => "mean",
            ParamClass::Scale => "scale",
            ParamClass::Rotation => "rotation",
        }
    }

    fn width(self, feature_dim: usize) -> usize {
        match self {
            ParamClass::Color => SH_BASIS * 3,
            ParamClass::Opacity => 1,
            ParamClass::Feature => feature_dim,
            ParamClass::Mean | ParamClass::Scale => 3,
            ParamClass::Rotation => 4,
        }
    }

    fn entry(self, cloud: &mut GaussianCloud, i: usize, j: usize) -> &mut f64 {
        match self {
            ParamClass::Color => &mut cloud.sh[i][j / 3][j % 3],
            ParamClass::Opacity => &mut cloud.opacities[i],
            ParamClass::Feature => &mut cloud.feature_mut(i)[j],
            ParamClass::Mean => &mut cloud.positions[i][j],
            ParamClass::Scale => &mut cloud.scales[i][j],
            ParamClass::Rotation => &mut cloud.rotations[i][j],
        }
    }

    fn analytic(self, g: &ParamGradients, i: usize, j: usize) -> f64 {
        match self {
            ParamClass::Color => g.sh[i][j / 3][j % 3],
            ParamClass::Opacity => g.opacities[i],
            ParamClass::Feature => g.feature(i)[j],
            ParamClass::Mean => g.positions[i][j],
            ParamClass::Scale => g.scales[i][j],
            ParamClass::Rotation => g.rotations[i][j],
        }
    }
}

impl std::str::FromStr for ParamClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter class '{s}'")))
    }
}

/// A cloud, a camera and a fixed set of output adjoints defining the scalar
/// loss `Σ adjoint · render(cloud)`.
#[derive(Clone, Debug)]
pub struct GradScene {
    pub cloud: GaussianCloud,
    pub camera: Camera,
    pub settings: RenderSettings,
    pub adjoints: RenderOutput,
}

impl GradScene {
    pub fn loss(&self, cloud: &GaussianCloud) -> Result<f64> {
        Ok(adjoint_dot(
            &self.adjoints,
            &render(cloud, &self.camera, &self.settings)?,
        ))
    }

    pub fn gradients(&self) -> Result<ParamGradients> {
        backward_render(&self.cloud, &self.camera, &self.settings, &self.adjoints)
    }

    /// Random scene built for derivative checks: smooth render settings,
    /// opacities and colors kept away from their clamps, well-separated
    /// scale axes and depths so no ordering flips under small perturbations.
    pub fn random(seed: u64, count: usize, size: usize, feature_dim: usize) -> Result<Self> {
        let mut r = rng(seed);
        let dir = random_unit_vector(&mut r);
        let camera = camera_towards_origin(dir * 3.0, 1.25 * size as f64, size, size)?;
        let mut cloud = GaussianCloud::empty(feature_dim);
        let mut depths: Vec<f64> = Vec::new();
        while cloud.len() < count {
            let pos = random_unit_vector(&mut r) * r.random_range(0.0..0.7f64);
            let z = camera.world_to_camera(&pos).z;
            if depths.iter().any(|d| (d - z).abs() < 2e-3) {
                continue;
            }
            let s: [f64; 3] = std::array::from_fn(|_| r.random_range(0.05..0.3f64));
            let ratio_ok = (0..3).all(|a| (0..a).all(|b| (s[a] / s[b]).ln().abs() > 0.1));
            if !ratio_ok {
                continue;
            }
            depths.push(z);
            let mut sh = [[0.0; 3]; SH_BASIS];
            for c in 0..3 {
                sh[0][c] = rgb_to_dc(r.random_range(0.25..0.75));
                for row in sh.iter_mut().skip(1) {
                    row[c] = r.random_range(-0.02..0.02);
                }
            }
            let feature: Vec<f64> = (0..feature_dim).map(|_| r.random_range(-1.0..1.0)).collect();
            cloud.push(
                pos,
                random_quaternion(&mut r),
                Vector3::from(s),
                r.random_range(0.1..0.9),
                sh,
                &feature,
            );
        }
        let adjoints = random_adjoints(&mut r, size, size, feature_dim);
        Ok(Self {
            cloud,
            camera,
            settings: RenderSettings::smooth(),
            adjoints,
        })
    }

    /// Checks a given cloud and camera against random adjoints drawn from
    /// `seed`.
    pub fn given(cloud: GaussianCloud, camera: Camera, seed: u64) -> Result<Self> {
        cloud.validate()?;
        camera.validate()?;
        let adjoints = random_adjoints(&mut rng(seed), camera.height, camera.width, cloud.feature_dim);
        Ok(Self {
            cloud,
            camera,
            settings: RenderSettings::smooth(),
            adjoints,
        })
    }
}

fn random_adjoints<R: Rng + ?Sized>(r: &mut R, h: usize, w: usize, feature_dim: usize) -> RenderOutput {
    let mut plane = |c: usize| {
        PixelMap::from_fn(h, w, c, |_, _, px| {
            px.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0))
        })
    };
    RenderOutput {
        color: plane(3),
        depth: plane(1),
        alpha: plane(1),
        normal: plane(3),
        feature: plane(feature_dim),
        label_logits: None,
    }
}

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub class: ParamClass,
    /// Largest `|a − n| / max(|a|, |n|, 1e-6)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub compared: usize,
    pub tolerance: f64,
    pub passed: bool,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<9} entries={:<5} max_rel={:.3e} max_abs={:.3e} {}",
            self.class.name(),
            self.compared,
            self.max_rel_error,
            self.max_abs_error,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Default tolerance on the relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compares analytic gradients of every entry in `class` against central
/// differences with step `eps`.
pub fn finite_diff_check(scene: &GradScene, class: ParamClass, eps: f64) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(Error::Invalid("finite-difference step must be positive".into()));
    }
    let analytic = scene.gradients()?;
    let width = class.width(scene.cloud.feature_dim);
    let mut cloud = scene.cloud.clone();
    let (mut max_rel, mut max_abs, mut compared) = (0.0f64, 0.0f64, 0);
    for i in 0..cloud.len() {
        for j in 0..width {
            let orig = *class.entry(&mut cloud, i, j);
            *class.entry(&mut cloud, i, j) = orig + eps;
            let up = scene.loss(&cloud)?;
            *class.entry(&mut cloud, i, j) = orig - eps;
            let down = scene.loss(&cloud)?;
            *class.entry(&mut cloud, i, j) = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = class.analytic(&analytic, i, j);
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
            compared += 1;
        }
    }
    Ok(GradCheckReport {
        class,
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        compared,
        tolerance: GRADCHECK_TOLERANCE,
        passed: max_rel <= GRADCHECK_TOLERANCE,
    })
}

/// Runs [`finite_diff_check`] for every parameter class.
pub fn check_all(scene: &GradScene, eps: f64) -> Result<Vec<GradCheckReport>> {
    ParamClass::ALL
        .iter()
        .map(|&c| finite_diff_check(scene, c, eps))
        .collect()
}
