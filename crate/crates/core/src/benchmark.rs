//! Desk-scale fitting experiments on ray-traced sphere scenes: a textured
//! sphere for appearance and two colored blobs for a semantic field.

use crate::camera::Camera;
use crate::error::Result;
use crate::gaussian::{ActivationConfig, GaussianCloud};
use crate::grad::{optimize_cloud_with, FitConfig, FitResult, FitView, LearningRates};
use crate::metrics::{psnr, seg_scores, SegScores};
use crate::palette::NUM_CLASSES;
use crate::raster::{render, render_labels, Classifier, RenderSettings};
use crate::synthetic::{orbit_cameras, rng, SphereScene, SphereView};

/// Primitive budget of both experiments.
pub const PRIMITIVES: usize = 512;
/// Upper scale bound used while fitting. The default 2e-2 is sized for
/// dense pixel-aligned clouds and leaves holes at this primitive count.
pub const FIT_S_MAX: f64 = 0.08;
pub const INITIAL_SCALE: f64 = 0.05;
pub const INITIAL_OPACITY: f64 = 0.5;
/// Supersampling of the ray-traced targets.
pub const SUPERSAMPLE: usize = 4;

const DISTANCE: f64 = 3.0;
const ELEVATION: f64 = 0.6;

/// Four training cameras a quarter turn apart with alternating elevation
/// ±0.6 rad, and a held-out camera at zero elevation halfway between the
/// first two.
pub fn sphere_rig(width: usize, height: usize) -> Result<(Vec<Camera>, Camera)> {
    let focal = 90.0 * width.min(height) as f64 / 64.0;
    let train = (0..4)
        .map(|i| {
            let el = if i % 2 == 0 { ELEVATION } else { -ELEVATION };
            let az = i as f64 * std::f64::consts::FRAC_PI_2;
            orbit_cameras(1, DISTANCE, el, az, focal, width, height).map(|mut v| v.remove(0))
        })
        .collect::<Result<Vec<_>>>()?;
    let held_out = orbit_cameras(1, DISTANCE, 0.0, std::f64::consts::FRAC_PI_4, focal, width, height)?.remove(0);
    Ok((train, held_out))
}

#[derive(Clone, Debug)]
pub struct SphereExperiment {
    pub scene: SphereScene,
    pub train: Vec<SphereView>,
    pub held_out: SphereView,
    pub initial: GaussianCloud,
    pub config: FitConfig,
    /// Supervise rendered features with the one-hot class maps.
    pub features: bool,
}

impl SphereExperiment {
    /// Appearance fit: color and mask supervision, view-dependent color frozen.
    pub fn textured_sphere(seed: u64, steps: usize, size: usize) -> Result<Self> {
        Self::build(SphereScene::textured_sphere(), seed, steps, size, false)
    }

    /// Semantic fit: color, mask and 28-wide one-hot feature supervision.
    pub fn two_blobs(seed: u64, steps: usize, size: usize) -> Result<Self> {
        Self::build(SphereScene::two_blobs(), seed, steps, size, true)
    }

    fn build(scene: SphereScene, seed: u64, steps: usize, size: usize, features: bool) -> Result<Self> {
        let (cams, held_out) = sphere_rig(size, size)?;
        let train = cams.iter().map(|c| scene.render_view(c, SUPERSAMPLE)).collect();
        let held_out = scene.render_view(&held_out, SUPERSAMPLE);
        let fd = if features { NUM_CLASSES } else { 0 };
        let initial = scene.initial_cloud(&mut rng(seed), PRIMITIVES, 0.02, INITIAL_SCALE, INITIAL_OPACITY, fd);
        let config = FitConfig {
            steps,
            rates: LearningRates {
                color_rest: 0.0,
                ..Default::default()
            },
            activation: ActivationConfig {
                s_max: FIT_S_MAX,
                ..Default::default()
            },
            ..Default::default()
        };
        Ok(Self {
            scene,
            train,
            held_out,
            initial,
            config,
            features,
        })
    }

    pub fn views(&self) -> Vec<FitView> {
        self.train
            .iter()
            .map(|v| FitView {
                camera: v.camera.clone(),
                color: Some(v.color.clone()),
                mask: Some(v.mask.clone()),
                features: self.features.then(|| v.features.clone()),
                labels: None,
            })
            .collect()
    }

    pub fn run(&self, on_step: impl FnMut(usize, f64)) -> Result<FitResult> {
        optimize_cloud_with(&self.initial, &self.views(), &self.config, on_step)
    }

    /// Color PSNR of `cloud` on the held-out camera.
    pub fn held_out_psnr(&self, cloud: &GaussianCloud) -> Result<f64> {
        let out = render(cloud, &self.held_out.camera, &RenderSettings::default())?;
        psnr(&out.color, &self.held_out.color, 1.0)
    }

    /// Segmentation scores of `cloud` on the held-out camera under the
    /// identity classifier.
    pub fn held_out_seg(&self, cloud: &GaussianCloud) -> Result<SegScores> {
        let r = render_labels(
            cloud,
            &self.held_out.camera,
            &RenderSettings::default(),
            &Classifier::identity(),
        )?;
        seg_scores(&r.labels, &self.held_out.labels, NUM_CLASSES)
    }
}

/// Means of consecutive `window`-step blocks of a loss trace never increase.
pub fn windows_non_increasing(trace: &[f64], window: usize) -> bool {
    let means: Vec<f64> = trace
        .chunks(window.max(1))
        .filter(|c| c.len() == window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    means.windows(2).all(|w| w[1] <= w[0])
}
