//! Semantic 3D Gaussian splatting.
//!
//! Gaussian primitives carry appearance (spherical-harmonics color, opacity,
//! anisotropic covariance) together with a per-primitive feature embedding.
//! The crate provides:
//!
//! - [`gaussian`]: the [`GaussianCloud`] type, attribute activation from raw
//!   decoder outputs, opacity filtering and covariance construction.
//! - [`camera`]: pinhole cameras, depth unprojection, Plücker ray embeddings
//!   and EWA projection of 3D covariances.
//! - [`raster`]: a tile-parallel multi-channel rasterizer (color, depth,
//!   alpha, normal, feature, labels) and a brute-force reference renderer.
//! - [`grad`]: the analytic backward pass, finite-difference checking and a
//!   small Adam-based scene fitting loop.
//! - [`attention`]: patch tokens, grouped-query attention blocks, attention
//!   weight reuse for lifting external feature maps, and the per-pixel decoder.
//! - [`loss`] and [`metrics`]: training objective terms and evaluation scores.
//! - [`io`]: splat PLY files, feature sidecars, JSON scene configs, images and
//!   tensor archives.
//!
//! - [`benchmark`]: the desk-scale sphere fitting experiments.
//! - [`cli`]: the `semsplat` command-line front end.
//!
//! Runnable walkthroughs live in the crate's `examples/` directory.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attention;
pub mod benchmark;
pub mod camera;
pub mod cli;
pub mod error;
pub mod gaussian;
pub mod grad;
pub mod io;
pub mod loss;
pub mod map;
pub mod metrics;
pub mod palette;
pub mod raster;
pub mod scene;
pub mod sh;
pub mod synthetic;

pub use camera::{Camera, Intrinsics, UnprojectOptions};
pub use error::{Error, Result};
pub use gaussian::{ActivationConfig, GaussianCloud, RawGaussianParams};
pub use map::PixelMap;
pub use palette::ClassPalette;
pub use raster::{render, render_reference, RenderOutput, RenderSettings};
