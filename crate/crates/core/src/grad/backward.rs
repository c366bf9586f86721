//! Analytic adjoint of the rasterizer.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3, Vector4};
use rayon::prelude::*;

use crate::camera::{Camera, UnprojectOptions};
use crate::error::{shape_err, Error, Result};
use crate::gaussian::{
    channel, normalize_backward, rotation_matrix_backward, sigmoid, ActivationConfig, GaussianCloud, RawGaussianParams,
};
use crate::raster::{in_rect, prepare, Prepared, RenderOutput, RenderSettings, Splat, TileGrid, MAX_FRAGMENT_ALPHA};
use crate::sh::{eval_sh_backward, ShCoeffs, SH_BASIS, SH_C0};

/// Gradients of a scalar loss with respect to every attribute of a
/// [`GaussianCloud`], in the same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradients {
    pub positions: Vec<Vector3<f64>>,
    /// With respect to the stored (possibly unnormalized) quaternion.
    pub rotations: Vec<Vector4<f64>>,
    pub scales: Vec<Vector3<f64>>,
    pub opacities: Vec<f64>,
    pub sh: Vec<ShCoeffs>,
    pub feature_dim: usize,
    pub features: Vec<f64>,
}

impl ParamGradients {
    pub fn zeros(n: usize, feature_dim: usize) -> Self {
        Self {
            positions: vec![Vector3::zeros(); n],
            rotations: vec![Vector4::zeros(); n],
            scales: vec![Vector3::zeros(); n],
            opacities: vec![0.0; n],
            sh: vec![[[0.0; 3]; SH_BASIS]; n],
            feature_dim,
            features: vec![0.0; n * feature_dim],
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

    /// `self += other`.
    pub fn accumulate(&mut self, other: &ParamGradients) {
        for i in 0..self.len() {
            self.positions[i] += other.positions[i];
            self.rotations[i] += other.rotations[i];
            self.scales[i] += other.scales[i];
            self.opacities[i] += other.opacities[i];
            for k in 0..SH_BASIS {
                for c in 0..3 {
                    self.sh[i][k][c] += other.sh[i][k][c];
                }
            }
        }
        for (a, b) in self.features.iter_mut().zip(&other.features) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.max_abs().is_finite()
    }

    /// Largest absolute entry across all attributes.
    pub fn max_abs(&self) -> f64 {
        let vals = self
            .positions
            .iter()
            .flat_map(|v| v.iter().copied())
            .chain(self.rotations.iter().flat_map(|v| v.iter().copied()))
            .chain(self.scales.iter().flat_map(|v| v.iter().copied()))
            .chain(self.opacities.iter().copied())
            .chain(self.sh.iter().flatten().flatten().copied())
            .chain(self.features.iter().copied());
        vals.fold(0.0, |m: f64, x| if x.is_nan() { f64::NAN } else { m.max(x.abs()) })
    }
}

// Per-splat screen-space accumulator layout.
const G_MEAN: usize = 0;
const G_CONIC: usize = 2;
const G_OPACITY: usize = 5;
const G_COLOR: usize = 6;
const G_DEPTH: usize = 9;
const G_NORMAL: usize = 10;
const G_FEATURE: usize = 13;

fn check_adjoints(adj: &RenderOutput, camera: &Camera, fd: usize) -> Result<()> {
    let (h, w) = (camera.height, camera.width);
    adj.color.ensure_shape(h, w, 3, "color adjoint")?;
    adj.depth.ensure_shape(h, w, 1, "depth adjoint")?;
    adj.alpha.ensure_shape(h, w, 1, "alpha adjoint")?;
    adj.normal.ensure_shape(h, w, 3, "normal adjoint")?;
    adj.feature.ensure_shape(h, w, fd, "feature adjoint")?;
    let planes = [&adj.color, &adj.depth, &adj.alpha, &adj.normal, &adj.feature];
    if !planes.iter().all(|p| p.is_finite()) {
        return Err(Error::NonFinite("output adjoints"));
    }
    Ok(())
}

/// Backpropagates per-pixel output adjoints through the forward render.
///
/// `adjoints` has the shape of the forward [`RenderOutput`]; its
/// `label_logits` plane is ignored (fold it into the feature adjoint with
/// [`crate::raster::Classifier::backward`]). Each tile accumulates into its
/// own buffer and tiles are reduced in index order, so repeated calls give
/// bitwise identical results.
pub fn backward_render(
    cloud: &GaussianCloud,
    camera: &Camera,
    settings: &RenderSettings,
    adjoints: &RenderOutput,
) -> Result<ParamGradients> {
    camera.validate()?;
    let prepared = prepare(cloud, camera, settings)?;
    let fd = prepared.feature_dim;
    check_adjoints(adjoints, camera, fd)?;
    let screen = screen_space_gradients(&prepared, camera, settings, adjoints);
    let projection = settings.resolve_projection(cloud.feature_dim)?;
    let stride = G_FEATURE + fd;
    let center = camera.center();

    let per_splat: Vec<SplatGrad> = prepared
        .splats
        .par_iter()
        .enumerate()
        .map(|(k, s)| splat_backward(cloud, camera, &center, s, &screen[k * stride..(k + 1) * stride]))
        .collect();

    let mut grads = ParamGradients::zeros(cloud.len(), cloud.feature_dim);
    let fdc = cloud.feature_dim;
    for (k, (s, sg)) in prepared.splats.iter().zip(per_splat).enumerate() {
        let i = s.index;
        grads.positions[i] = sg.position;
        grads.rotations[i] = sg.rotation;
        grads.scales[i] = sg.scale;
        grads.opacities[i] = sg.opacity;
        grads.sh[i] = sg.sh;
        let gf = &screen[k * stride + G_FEATURE..(k + 1) * stride];
        projection.apply_transpose(gf, &mut grads.features[i * fdc..(i + 1) * fdc]);
    }
    Ok(grads)
}

/// Screen-space adjoints per prepared splat: mean2d, conic, opacity, color,
/// depth, normal and render-space feature.
fn screen_space_gradients(
    prepared: &Prepared,
    camera: &Camera,
    settings: &RenderSettings,
    adj: &RenderOutput,
) -> Vec<f64> {
    let w = camera.width;
    let fd = prepared.feature_dim;
    let stride = G_FEATURE + fd;
    let grid = TileGrid::new(w, camera.height, settings.tile_size);
    let lists = grid.bin(prepared);
    let bg = settings.background;

    let partials: Vec<Vec<f64>> = (0..grid.count())
        .into_par_iter()
        .map(|t| {
            let list = &lists[t];
            let mut local = vec![0.0; list.len() * stride];
            let (xs, ys) = grid.bounds(t);
            // (list position, alpha, falloff, transmittance in front)
            let mut frags: Vec<(usize, f64, f64, f64)> = Vec::new();
            for y in ys {
                for x in xs.clone() {
                    let idx = y * w + x;
                    frags.clear();
                    let mut trans = 1.0;
                    for (pos, &k) in list.iter().enumerate() {
                        let s = &prepared.splats[k as usize];
                        if !in_rect(s, x, y) {
                            continue;
                        }
                        let (alpha, g) = s.fragment(x, y);
                        if alpha < settings.alpha_cutoff {
                            continue;
                        }
                        frags.push((pos, alpha, g, trans));
                        trans *= 1.0 - alpha;
                        if trans < settings.early_stop {
                            break;
                        }
                    }
                    if frags.is_empty() {
                        continue;
                    }
                    let final_t = trans;
                    let gc = &adj.color.data[idx * 3..idx * 3 + 3];
                    let gd = adj.depth.data[idx];
                    let ga = adj.alpha.data[idx];
                    let gn = &adj.normal.data[idx * 3..idx * 3 + 3];
                    let gf = &adj.feature.data[idx * fd..(idx + 1) * fd];
                    // adjoint of the final transmittance
                    let g_final = gc[0] * bg[0] + gc[1] * bg[1] + gc[2] * bg[2] - ga;
                    // Σ_{j>i} α_j Π_{i<k<j}(1 − α_k) ⟨G, p_j⟩
                    let mut behind = 0.0;
                    for &(pos, alpha, g, t_front) in frags.iter().rev() {
                        let k = list[pos] as usize;
                        let s = &prepared.splats[k];
                        let wgt = alpha * t_front;
                        let acc = &mut local[pos * stride..(pos + 1) * stride];
                        let mut dot = gd * s.depth();
                        for c in 0..3 {
                            acc[G_COLOR + c] += wgt * gc[c];
                            acc[G_NORMAL + c] += wgt * gn[c];
                            dot += gc[c] * s.color[c] + gn[c] * s.normal[c];
                        }
                        acc[G_DEPTH] += wgt * gd;
                        for (j, (&gj, &fj)) in gf.iter().zip(prepared.feature(k)).enumerate() {
                            acc[G_FEATURE + j] += wgt * gj;
                            dot += gj * fj;
                        }
                        let d_alpha = t_front * (dot - behind) - g_final * final_t / (1.0 - alpha);
                        behind = alpha * dot + (1.0 - alpha) * behind;

                        // no gradient through the opacity clamp
                        if s.opacity * g >= MAX_FRAGMENT_ALPHA {
                            continue;
                        }
                        acc[G_OPACITY] += d_alpha * g;
                        let d_power = d_alpha * s.opacity * g;
                        let dx = x as f64 + 0.5 - s.mean2d.x;
                        let dy = y as f64 + 0.5 - s.mean2d.y;
                        let [a, b, c] = s.conic;
                        acc[G_MEAN] += d_power * (a * dx + b * dy);
                        acc[G_MEAN + 1] += d_power * (b * dx + c * dy);
                        acc[G_CONIC] -= 0.5 * d_power * dx * dx;
                        acc[G_CONIC + 1] -= d_power * dx * dy;
                        acc[G_CONIC + 2] -= 0.5 * d_power * dy * dy;
                    }
                }
            }
            local
        })
        .collect();

    let mut total = vec![0.0; prepared.splats.len() * stride];
    for (t, local) in partials.iter().enumerate() {
        for (pos, &k) in lists[t].iter().enumerate() {
            let dst = &mut total[k as usize * stride..(k as usize + 1) * stride];
            for (d, s) in dst.iter_mut().zip(&local[pos * stride..(pos + 1) * stride]) {
                *d += s;
            }
        }
    }
    total
}

struct SplatGrad {
    position: Vector3<f64>,
    rotation: Vector4<f64>,
    scale: Vector3<f64>,
    opacity: f64,
    sh: ShCoeffs,
}

fn splat_backward(cloud: &GaussianCloud, camera: &Camera, center: &Vector3<f64>, s: &Splat, g: &[f64]) -> SplatGrad {
    let i = s.index;
    let k = &camera.intrinsics;
    let p = s.cam_point;
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    let mut d_cam = Vector3::zeros();

    // mean2d = (fx x/z + cx, fy y/z + cy)
    let (gmx, gmy) = (g[G_MEAN], g[G_MEAN + 1]);
    d_cam.x += gmx * k.fx * iz;
    d_cam.y += gmy * k.fy * iz;
    d_cam.z += -(gmx * k.fx * p.x + gmy * k.fy * p.y) * iz2 + g[G_DEPTH];

    // conic = cov2d⁻¹
    let [a, b, c] = s.conic;
    let conic = Matrix2::new(a, b, b, c);
    let g_conic = Matrix2::new(g[G_CONIC], 0.5 * g[G_CONIC + 1], 0.5 * g[G_CONIC + 1], g[G_CONIC + 2]);
    let g_cov2d = -conic * g_conic * conic;

    // cov2d = T Σ Tᵀ + low-pass, T = J W
    let t = camera.projection_jacobian(&p) * camera.rotation;
    let scale = cloud.scales[i];
    let m = s.rot * Matrix3::from_diagonal(&scale);
    let sigma = m * m.transpose();
    let g_sigma = t.transpose() * g_cov2d * t;
    let g_t: Matrix2x3<f64> = 2.0 * g_cov2d * t * sigma;
    let g_j = g_t * camera.rotation.transpose();
    d_cam.x -= g_j[(0, 2)] * k.fx * iz2;
    d_cam.y -= g_j[(1, 2)] * k.fy * iz2;
    d_cam.z +=
        (2.0 * iz * (g_j[(0, 2)] * k.fx * p.x + g_j[(1, 2)] * k.fy * p.y) - g_j[(0, 0)] * k.fx - g_j[(1, 1)] * k.fy)
            * iz2;

    let mut d_pos = camera.rotation.transpose() * d_cam;

    // Σ = M Mᵀ, M = R S
    let g_m = (g_sigma + g_sigma.transpose()) * m;
    let mut g_rot = Matrix3::zeros();
    let mut d_scale = Vector3::zeros();
    for col in 0..3 {
        for row in 0..3 {
            g_rot[(row, col)] = g_m[(row, col)] * scale[col];
            d_scale[col] += g_m[(row, col)] * s.rot[(row, col)];
        }
    }
    for r in 0..3 {
        g_rot[(r, s.normal_axis)] += s.normal_sign * g[G_NORMAL + r];
    }
    let q = cloud.rotations[i];
    let d_rot = normalize_backward(&q, &rotation_matrix_backward(&(q / q.norm()), &g_rot));

    // view-dependent color; clamped channels pass no gradient
    let mut d_sh = [[0.0; 3]; SH_BASIS];
    let mut d_rgb = [0.0; 3];
    for ch in 0..3 {
        if s.color_live[ch] {
            d_rgb[ch] = g[G_COLOR + ch];
        }
    }
    d_pos += eval_sh_backward(&cloud.sh[i], &(cloud.positions[i] - center), &d_rgb, &mut d_sh);

    SplatGrad {
        position: d_pos,
        rotation: d_rot,
        scale: d_scale,
        opacity: g[G_OPACITY],
        sh: d_sh,
    }
}

/// Chains cloud gradients back to the raw decoder outputs that produced the
/// cloud through [`crate::gaussian::activate_params`] with the same camera,
/// mask and options. Pixels outside the mask receive zero gradient.
pub fn activation_backward(
    raw: &RawGaussianParams,
    cfg: &ActivationConfig,
    camera: &Camera,
    mask: Option<&[bool]>,
    opts: UnprojectOptions,
    grads: &ParamGradients,
) -> Result<RawGaussianParams> {
    let (h, w) = (raw.height(), raw.width());
    if h != camera.height || w != camera.width {
        return Err(shape_err("raw parameter map does not match camera size"));
    }
    if mask.is_some_and(|m| m.len() != h * w) {
        return Err(shape_err("mask does not match the raw parameter map"));
    }
    let pixels: Vec<(usize, usize)> = (0..h)
        .flat_map(|v| (0..w).map(move |u| (u, v)))
        .filter(|&(u, v)| mask.is_none_or(|m| m[v * w + u]))
        .collect();
    if pixels.len() != grads.len() || grads.feature_dim != raw.feature_dim {
        return Err(shape_err("gradients do not match the activated cloud"));
    }
    let mut out = RawGaussianParams::zeros(h, w, raw.feature_dim);
    let rt = camera.rotation.transpose();
    let shift = opts.pixel_offset();
    for (i, &(u, v)) in pixels.iter().enumerate() {
        let px = raw.map.pixel(v, u);
        let o = out.map.pixel_mut(v, u);
        let dp = grads.positions[i];
        // both unprojection readings are affine in depth with slope Rᵀ K⁻¹ p̃
        let ray = rt * camera.intrinsics.backproject(u as f64 + shift, v as f64 + shift);
        o[channel::DEPTH] = ray.dot(&dp) * cfg.depth_derivative(px[channel::DEPTH]);
        for a in 0..3 {
            let th = px[channel::OFFSET + a].tanh();
            o[channel::OFFSET + a] = dp[a] * cfg.max_offset * (1.0 - th * th);
            o[channel::SCALE + a] = grads.scales[i][a] * cfg.scale_derivative(px[channel::SCALE + a]);
        }
        let r = &px[channel::ROTATION..channel::ROTATION + 4];
        let dq = normalize_backward(&Vector4::new(r[0], r[1], r[2], r[3]), &grads.rotations[i]);
        o[channel::ROTATION..channel::ROTATION + 4].copy_from_slice(dq.as_slice());
        let so = sigmoid(px[channel::OPACITY]);
        o[channel::OPACITY] = grads.opacities[i] * so * (1.0 - so);
        for kb in 0..SH_BASIS {
            for c in 0..3 {
                let ch = channel::COLOR + kb * 3 + c;
                o[ch] = if kb == 0 {
                    let sc = sigmoid(px[ch]);
                    grads.sh[i][0][c] * sc * (1.0 - sc) / SH_C0
                } else {
                    grads.sh[i][kb][c]
                };
            }
        }
        o[channel::FEATURE..].copy_from_slice(grads.feature(i));
    }
    Ok(out)
}

/// `Σ adjoint · output` over the color, depth, alpha, normal and feature
/// planes.
pub fn adjoint_dot(adjoints: &RenderOutput, output: &RenderOutput) -> f64 {
    let planes = [
        (&adjoints.color, &output.color),
        (&adjoints.depth, &output.depth),
        (&adjoints.alpha, &output.alpha),
        (&adjoints.normal, &output.normal),
        (&adjoints.feature, &output.feature),
    ];
    planes
        .iter()
        .map(|(a, o)| a.data.iter().zip(&o.data).map(|(x, y)| x * y).sum::<f64>())
        .sum()
}
