//! Multi-channel Gaussian rasterization.
//!
//! Primitives are projected, globally depth-sorted (ties broken by index) and
//! binned into screen tiles. Each tile composites its pixels front to back
//! independently, so the output does not depend on the tile size or on the
//! number of worker threads. [`render_reference`] evaluates every primitive at
//! every pixel with a per-pixel sort and serves as the correctness oracle.

mod labels;
pub(crate) mod project;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub(crate) use labels::labels_from_logits;
pub use labels::{render_labels, Classifier, LabelRender};
pub(crate) use project::{prepare, Prepared, Splat};
pub use project::{MAX_FRAGMENT_ALPHA, NEAR_PLANE};

use crate::camera::Camera;
use crate::error::{shape_err, Error, Result};
use crate::gaussian::{GaussianCloud, MAX_FEATURE_DIM};
use crate::map::PixelMap;

/// Optional linear map applied to per-primitive features before blending.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum FeatureProjection {
    /// Render all feature channels unchanged.
    #[default]
    Identity,
    /// Render only the first `n` feature channels.
    Truncate(usize),
    /// Row-major `rows × cols` matrix with `cols` equal to the cloud's
    /// feature width.
    Matrix { rows: usize, cols: usize, data: Vec<f64> },
}

/// A feature projection bound to a concrete cloud feature width.
pub(crate) struct ResolvedProjection<'a> {
    input: usize,
    kind: &'a FeatureProjection,
}

impl ResolvedProjection<'_> {
    pub fn output_dim(&self) -> usize {
        match self.kind {
            FeatureProjection::Identity => self.input,
            FeatureProjection::Truncate(n) => *n,
            FeatureProjection::Matrix { rows, .. } => *rows,
        }
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        match self.kind {
            FeatureProjection::Identity => f.to_vec(),
            FeatureProjection::Truncate(n) => f[..*n].to_vec(),
            FeatureProjection::Matrix { rows, cols, data } => (0..*rows)
                .map(|r| {
                    let row = &data[r * cols..(r + 1) * cols];
                    row.iter().zip(f).map(|(a, b)| a * b).sum()
                })
                .collect(),
        }
    }

    /// Adds `Mᵀ·g` to `out`.
    pub fn apply_transpose(&self, g: &[f64], out: &mut [f64]) {
        match self.kind {
            FeatureProjection::Identity => out.iter_mut().zip(g).for_each(|(o, v)| *o += v),
            FeatureProjection::Truncate(n) => out[..*n].iter_mut().zip(g).for_each(|(o, v)| *o += v),
            FeatureProjection::Matrix { rows, cols, data } => {
                for r in 0..*rows {
                    let row = &data[r * cols..(r + 1) * cols];
                    for (o, m) in out.iter_mut().zip(row) {
                        *o += m * g[r];
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderSettings {
    pub background: [f64; 3],
    pub tile_size: usize,
    /// Fragments with opacity below this are skipped.
    pub alpha_cutoff: f64,
    /// A pixel stops compositing once its transmittance drops below this.
    pub early_stop: f64,
    pub feature_projection: FeatureProjection,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            tile_size: 16,
            alpha_cutoff: 1.0 / 255.0,
            early_stop: 1e-4,
            feature_projection: FeatureProjection::Identity,
        }
    }
}

/// Serializable subset of [`RenderSettings`] used in scene configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub background: [f64; 3],
    pub tile_size: usize,
    pub alpha_cutoff: f64,
    pub early_stop: f64,
    /// Render only the first `feature_dim` feature channels.
    pub feature_dim: Option<usize>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        let s = RenderSettings::default();
        Self {
            background: s.background,
            tile_size: s.tile_size,
            alpha_cutoff: s.alpha_cutoff,
            early_stop: s.early_stop,
            feature_dim: None,
        }
    }
}

impl From<&RenderConfig> for RenderSettings {
    fn from(c: &RenderConfig) -> Self {
        Self {
            background: c.background,
            tile_size: c.tile_size,
            alpha_cutoff: c.alpha_cutoff,
            early_stop: c.early_stop,
            feature_projection: c
                .feature_dim
                .map_or(FeatureProjection::Identity, FeatureProjection::Truncate),
        }
    }
}

impl RenderSettings {
    /// Settings with every threshold disabled, making the forward map smooth
    /// in all parameters away from the opacity and color clamps.
    pub fn smooth() -> Self {
        Self {
            alpha_cutoff: 0.0,
            early_stop: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 {
            return Err(Error::Invalid("tile size must be at least 1".into()));
        }
        if !(0.0..=MAX_FRAGMENT_ALPHA).contains(&self.alpha_cutoff) {
            return Err(Error::Invalid("alpha cutoff must lie in [0, 0.99]".into()));
        }
        if !(0.0..1.0).contains(&self.early_stop) {
            return Err(Error::Invalid("early-stop transmittance must lie in [0, 1)".into()));
        }
        if !self.background.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(Error::Invalid("background color must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub(crate) fn resolve_projection(&self, input: usize) -> Result<ResolvedProjection<'_>> {
        match &self.feature_projection {
            FeatureProjection::Identity => {}
            FeatureProjection::Truncate(n) => {
                if *n > input {
                    return Err(shape_err(format!(
                        "feature render dimension {n} exceeds cloud feature dimension {input}"
                    )));
                }
            }
            FeatureProjection::Matrix { rows, cols, data } => {
                if *cols != input || data.len() != rows * cols {
                    return Err(shape_err(format!(
                        "feature projection is {rows}x{cols}, cloud features have width {input}"
                    )));
                }
                if *rows > MAX_FEATURE_DIM {
                    return Err(Error::Invalid("feature render dimension exceeds 1024".into()));
                }
            }
        }
        Ok(ResolvedProjection {
            input,
            kind: &self.feature_projection,
        })
    }
}

/// Every rendered plane of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: PixelMap,
    /// Unnormalized `Σ wᵢ dᵢ`; divide by alpha for expected depth.
    pub depth: PixelMap,
    pub alpha: PixelMap,
    pub normal: PixelMap,
    pub feature: PixelMap,
    pub label_logits: Option<PixelMap>,
}

impl RenderOutput {
    pub fn zeros(height: usize, width: usize, feature_dim: usize) -> Self {
        Self {
            color: PixelMap::zeros(height, width, 3),
            depth: PixelMap::zeros(height, width, 1),
            alpha: PixelMap::zeros(height, width, 1),
            normal: PixelMap::zeros(height, width, 3),
            feature: PixelMap::zeros(height, width, feature_dim),
            label_logits: None,
        }
    }

    pub fn height(&self) -> usize {
        self.color.height
    }

    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn feature_dim(&self) -> usize {
        self.feature.channels
    }

    /// Largest absolute difference across the color, depth, alpha, normal and
    /// feature planes.
    pub fn max_abs_diff(&self, other: &RenderOutput) -> f64 {
        let planes = [
            (&self.color, &other.color),
            (&self.depth, &other.depth),
            (&self.alpha, &other.alpha),
            (&self.normal, &other.normal),
            (&self.feature, &other.feature),
        ];
        planes
            .iter()
            .flat_map(|(a, b)| a.data.iter().zip(b.data.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// Hash of the exact bit patterns of every plane.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        let mut planes = vec![&self.color, &self.depth, &self.alpha, &self.normal, &self.feature];
        if let Some(l) = &self.label_logits {
            planes.push(l);
        }
        for p in planes {
            hasher.update((p.height as u64).to_le_bytes());
            hasher.update((p.width as u64).to_le_bytes());
            hasher.update((p.channels as u64).to_le_bytes());
            for v in &p.data {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Front-to-back blending of `(alpha, payload)` fragments.
///
/// Returns `Σ payloadᵢ·αᵢ·Tᵢ` with `Tᵢ = Π_{j<i}(1 − α_j)`, and the final
/// transmittance.
pub fn composite_fragments<'a, I>(fragments: I, payload_dim: usize) -> (Vec<f64>, f64)
where
    I: IntoIterator<Item = (f64, &'a [f64])>,
{
    let mut out = vec![0.0; payload_dim];
    let mut t = 1.0;
    for (alpha, payload) in fragments {
        let w = alpha * t;
        for (o, p) in out.iter_mut().zip(payload) {
            *o += w * p;
        }
        t *= 1.0 - alpha;
    }
    (out, t)
}

/// Payload layout of one composited pixel.
pub(crate) const PX_COLOR: usize = 0;
pub(crate) const PX_DEPTH: usize = 3;
pub(crate) const PX_NORMAL: usize = 4;
pub(crate) const PX_FEATURE: usize = 7;

/// Composites the given `(alpha, splat position)` fragments into `acc`
/// (color, depth, normal, features) and returns the final transmittance.
#[inline]
pub(crate) fn shade_pixel(
    prepared: &Prepared,
    fragments: impl Iterator<Item = (f64, usize)>,
    early_stop: f64,
    acc: &mut [f64],
) -> f64 {
    let mut t = 1.0;
    for (alpha, k) in fragments {
        let s = &prepared.splats[k];
        let w = alpha * t;
        for c in 0..3 {
            acc[PX_COLOR + c] += w * s.color[c];
        }
        acc[PX_DEPTH] += w * s.depth();
        for c in 0..3 {
            acc[PX_NORMAL + c] += w * s.normal[c];
        }
        for (a, f) in acc[PX_FEATURE..].iter_mut().zip(prepared.feature(k)) {
            *a += w * f;
        }
        t *= 1.0 - alpha;
        if t < early_stop {
            break;
        }
    }
    t
}

/// Screen tiling of one view.
#[derive(Clone, Copy, Debug)]
pub(crate) struct TileGrid {
    pub size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub width: usize,
    pub height: usize,
}

impl TileGrid {
    pub fn new(width: usize, height: usize, size: usize) -> Self {
        Self {
            size,
            tiles_x: width.div_ceil(size),
            tiles_y: height.div_ceil(size),
            width,
            height,
        }
    }

    pub fn count(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    /// Pixel ranges `(x0..x1, y0..y1)` of tile `t`.
    pub fn bounds(&self, t: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        (
            tx * self.size..((tx + 1) * self.size).min(self.width),
            ty * self.size..((ty + 1) * self.size).min(self.height),
        )
    }

    /// Per-tile lists of splat positions, each in global depth order.
    pub fn bin(&self, prepared: &Prepared) -> Vec<Vec<u32>> {
        let mut lists = vec![Vec::new(); self.count()];
        for (k, s) in prepared.splats.iter().enumerate() {
            let (x0, x1, y0, y1) = s.rect;
            let (tx0, tx1) = (x0 as usize / self.size, x1 as usize / self.size);
            let (ty0, ty1) = (y0 as usize / self.size, y1 as usize / self.size);
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    lists[ty * self.tiles_x + tx].push(k as u32);
                }
            }
        }
        lists
    }
}

#[inline]
pub(crate) fn in_rect(s: &Splat, x: usize, y: usize) -> bool {
    let (x0, x1, y0, y1) = s.rect;
    (x as i64) >= x0 && (x as i64) <= x1 && (y as i64) >= y0 && (y as i64) <= y1
}

fn write_pixel(out: &mut RenderOutput, settings: &RenderSettings, idx: usize, acc: &[f64], t: f64) {
    let fd = out.feature.channels;
    for c in 0..3 {
        out.color.data[idx * 3 + c] = acc[PX_COLOR + c] + t * settings.background[c];
        out.normal.data[idx * 3 + c] = acc[PX_NORMAL + c];
    }
    out.depth.data[idx] = acc[PX_DEPTH];
    out.alpha.data[idx] = 1.0 - t;
    out.feature.data[idx * fd..(idx + 1) * fd].copy_from_slice(&acc[PX_FEATURE..]);
}

/// Renders every plane of `cloud` as seen from `camera`.
pub fn render(cloud: &GaussianCloud, camera: &Camera, settings: &RenderSettings) -> Result<RenderOutput> {
    camera.validate()?;
    let prepared = prepare(cloud, camera, settings)?;
    Ok(render_prepared(&prepared, camera, settings))
}

pub(crate) fn render_prepared(prepared: &Prepared, camera: &Camera, settings: &RenderSettings) -> RenderOutput {
    let (w, h) = (camera.width, camera.height);
    let fd = prepared.feature_dim;
    let mut out = RenderOutput::zeros(h, w, fd);
    let grid = TileGrid::new(w, h, settings.tile_size);
    let lists = grid.bin(prepared);
    let stride = PX_FEATURE + fd;

    let tiles: Vec<(usize, Vec<f64>, Vec<f64>)> = (0..grid.count())
        .into_par_iter()
        .map(|t| {
            let (xs, ys) = grid.bounds(t);
            let n_px = xs.len() * ys.len();
            let mut acc = vec![0.0; n_px * stride];
            let mut trans = vec![1.0; n_px];
            let list = &lists[t];
            let mut p = 0;
            for y in ys.clone() {
                for x in xs.clone() {
                    let frags = list.iter().filter_map(|&k| {
                        let s = &prepared.splats[k as usize];
                        if !in_rect(s, x, y) {
                            return None;
                        }
                        let (alpha, _) = s.fragment(x, y);
                        (alpha >= settings.alpha_cutoff).then_some((alpha, k as usize))
                    });
                    trans[p] = shade_pixel(
                        prepared,
                        frags,
                        settings.early_stop,
                        &mut acc[p * stride..(p + 1) * stride],
                    );
                    p += 1;
                }
            }
            (t, acc, trans)
        })
        .collect();

    for (t, acc, trans) in tiles {
        let (xs, ys) = grid.bounds(t);
        let mut p = 0;
        for y in ys.clone() {
            for x in xs.clone() {
                write_pixel(
                    &mut out,
                    settings,
                    y * w + x,
                    &acc[p * stride..(p + 1) * stride],
                    trans[p],
                );
                p += 1;
            }
        }
    }
    out
}

/// Brute-force renderer: every visible primitive is tested at every pixel,
/// fragments are sorted per pixel, and compositing never stops early.
pub fn render_reference(cloud: &GaussianCloud, camera: &Camera, settings: &RenderSettings) -> Result<RenderOutput> {
    camera.validate()?;
    let prepared = prepare(cloud, camera, settings)?;
    let (w, h) = (camera.width, camera.height);
    let fd = prepared.feature_dim;
    let mut out = RenderOutput::zeros(h, w, fd);
    let mut acc = vec![0.0; PX_FEATURE + fd];
    let mut frags: Vec<(f64, f64, usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            frags.clear();
            for (k, s) in prepared.splats.iter().enumerate() {
                let (alpha, _) = s.fragment(x, y);
                if alpha >= settings.alpha_cutoff {
                    frags.push((s.depth(), alpha, s.index, k));
                }
            }
            frags.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
            acc.iter_mut().for_each(|a| *a = 0.0);
            let t = shade_pixel(&prepared, frags.iter().map(|f| (f.1, f.3)), 0.0, &mut acc);
            write_pixel(&mut out, settings, y * w + x, &acc, t);
        }
    }
    Ok(out)
}

/// World-space unit normal of the primitive's shortest axis, facing `eye`.
pub fn primitive_normal(cloud: &GaussianCloud, i: usize, eye: &Vector3<f64>) -> Vector3<f64> {
    let q = cloud.rotations[i] / cloud.rotations[i].norm();
    let rot = crate::gaussian::rotation_matrix(&q);
    let s = &cloud.scales[i];
    let axis = (0..3).fold(0, |a, b| if s[b] < s[a] { b } else { a });
    let n = rot.column(axis).into_owned();
    if n.dot(&(eye - cloud.positions[i])) < 0.0 {
        -n
    } else {
        n
    }
}

#[cfg(test)]
mod tests;
