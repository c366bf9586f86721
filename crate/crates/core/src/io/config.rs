//! Strict JSON scene configuration.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Intrinsics, UnprojectConvention, UnprojectOptions};
use crate::error::{Error, Result};
use crate::gaussian::ActivationConfig;
use crate::grad::{AdamConfig, LearningRates, Schedule};
use crate::loss::LossConfig;
use crate::raster::RenderConfig;

/// Pinhole camera as written in a config: `K`, world → camera `R`, `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    #[serde(rename = "K")]
    pub k: [[f64; 3]; 3],
    #[serde(rename = "R")]
    pub r: [[f64; 3]; 3],
    pub t: [f64; 3],
    pub width: usize,
    pub height: usize,
}

impl CameraConfig {
    pub fn to_camera(&self) -> Result<Camera> {
        let k = &self.k;
        if k[0][1] != 0.0 || k[1][0] != 0.0 || k[2] != [0.0, 0.0, 1.0] {
            return Err(Error::InvalidCamera("K must be [[fx,0,cx],[0,fy,cy],[0,0,1]]".into()));
        }
        let intrinsics = Intrinsics {
            fx: k[0][0],
            fy: k[1][1],
            cx: k[0][2],
            cy: k[1][2],
        };
        let r = Matrix3::from_fn(|i, j| self.r[i][j]);
        Camera::new(intrinsics, r, Vector3::from(self.t), self.width, self.height)
    }

    pub fn from_camera(c: &Camera) -> Self {
        let i = &c.intrinsics;
        Self {
            k: [[i.fx, 0.0, i.cx], [0.0, i.fy, i.cy], [0.0, 0.0, 1.0]],
            r: std::array::from_fn(|a| std::array::from_fn(|b| c.rotation[(a, b)])),
            t: [c.translation.x, c.translation.y, c.translation.z],
            width: c.width,
            height: c.height,
        }
    }
}

/// Inputs attached to one camera. Paths are relative to the config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewConfig {
    /// Index into `cameras`.
    pub camera: usize,
    /// RGB target image (PNG).
    pub image: Option<PathBuf>,
    /// Foreground mask (grayscale PNG).
    pub mask: Option<PathBuf>,
    /// Class ids (grayscale PNG of raw ids).
    pub labels: Option<PathBuf>,
    /// Target feature map, `H × W × d` `.npy`.
    pub features: Option<PathBuf>,
    /// Body-normal render (RGB PNG, normals mapped to `[0, 1]`).
    pub normals: Option<PathBuf>,
    /// Depth map, `H × W` `.npy`.
    pub depth: Option<PathBuf>,
    /// Offset map, `H × W × 3` `.npy`.
    pub offsets: Option<PathBuf>,
}

/// Optimizer and initialization settings for `fit`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub steps: usize,
    pub adam: AdamConfig,
    pub rates: LearningRates,
    pub schedule: Schedule,
    /// Primitives in the random initial cloud (when no splat is given).
    pub initial_count: usize,
    /// Radius of the ball the initial primitives are drawn in.
    pub initial_radius: f64,
    pub initial_scale: f64,
}

impl Default for FitSection {
    fn default() -> Self {
        Self {
            steps: 500,
            adam: AdamConfig::default(),
            rates: LearningRates::default(),
            schedule: Schedule::default(),
            initial_count: 512,
            initial_radius: 0.8,
            initial_scale: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnprojectSection {
    pub half_pixel: bool,
    pub convention: UnprojectConvention,
}

impl Default for UnprojectSection {
    fn default() -> Self {
        let d = UnprojectOptions::default();
        Self {
            half_pixel: d.half_pixel,
            convention: d.convention,
        }
    }
}

impl From<UnprojectSection> for UnprojectOptions {
    fn from(s: UnprojectSection) -> Self {
        Self {
            half_pixel: s.half_pixel,
            convention: s.convention,
        }
    }
}

/// Everything a CLI run needs besides flags.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    #[serde(default)]
    pub cameras: Vec<CameraConfig>,
    #[serde(default)]
    pub views: Vec<ViewConfig>,
    /// Splat file to render or to start fitting from.
    #[serde(default)]
    pub splat: Option<PathBuf>,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub render: RenderConfig,
    #[serde(default)]
    pub activation: ActivationConfig,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub unproject: UnprojectSection,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl SceneConfig {
    /// Parses `text`; any unknown key is an error naming its line and column.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: SceneConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, v) in self.views.iter().enumerate() {
            if v.camera >= self.cameras.len() {
                return Err(Error::Config(format!(
                    "view {i} refers to camera {} but only {} are defined",
                    v.camera,
                    self.cameras.len()
                )));
            }
        }
        self.loss.validate()?;
        self.activation.validate()?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        self.cameras.iter().map(CameraConfig::to_camera).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}
