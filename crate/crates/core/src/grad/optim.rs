//! Adam-style fitting of a cloud to posed target views.

use nalgebra::{Vector3, Vector4};
use serde::{Deserialize, Serialize};

use super::backward::{backward_render, ParamGradients};
use crate::camera::Camera;
use crate::error::{shape_err, Error, Result};
use crate::gaussian::{logit, rgb_to_dc, sigmoid, ActivationConfig, GaussianCloud};
use crate::loss::{
    feature_dist_grad, feature_dist_loss, mse_grad, render_loss, seg_ce_grad, seg_ce_loss, total_loss, LossConfig,
};
use crate::map::PixelMap;
use crate::raster::{render, Classifier, RenderOutput, RenderSettings};
use crate::sh::{SH_BASIS, SH_C0};

/// Parameter groups of the unconstrained fitting parameterization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Position,
    Rotation,
    Scale,
    Opacity,
    ColorDc,
    ColorRest,
    Feature,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::Position,
        Group::Rotation,
        Group::Scale,
        Group::Opacity,
        Group::ColorDc,
        Group::ColorRest,
        Group::Feature,
    ];
}

/// A cloud in raw form: positions as is, quaternions unnormalized, scales
/// and opacities before their activations, DC color before the sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct FitParams {
    pub count: usize,
    pub feature_dim: usize,
    /// One flat buffer per [`Group`], in `Group::ALL` order.
    pub groups: [Vec<f64>; 7],
}

impl FitParams {
    /// Inverts the activations. Scales are clamped into the activation range.
    pub fn from_cloud(cloud: &GaussianCloud, cfg: &ActivationConfig) -> Self {
        let n = cloud.len();
        let mut groups: [Vec<f64>; 7] = Default::default();
        for i in 0..n {
            groups[0].extend(cloud.positions[i].iter());
            groups[1].extend(cloud.rotations[i].iter());
            groups[2].extend(cloud.scales[i].iter().map(|s| cfg.inverse_scale(*s)));
            groups[3].push(logit(cloud.opacities[i]));
            groups[4].extend(cloud.sh[i][0].iter().map(|dc| logit(0.5 + SH_C0 * dc)));
            for k in 1..SH_BASIS {
                groups[5].extend(cloud.sh[i][k].iter());
            }
        }
        groups[6] = cloud.features.clone();
        Self {
            count: n,
            feature_dim: cloud.feature_dim,
            groups,
        }
    }

    pub fn to_cloud(&self, cfg: &ActivationConfig) -> Result<GaussianCloud> {
        let g = &self.groups;
        let mut cloud = GaussianCloud::empty(self.feature_dim);
        for i in 0..self.count {
            let q = Vector4::from_column_slice(&g[1][i * 4..i * 4 + 4]);
            let norm = q.norm();
            if !(norm > 0.0) {
                return Err(Error::DegenerateRotation);
            }
            let mut sh = [[0.0; 3]; SH_BASIS];
            for c in 0..3 {
                sh[0][c] = rgb_to_dc(sigmoid(g[4][i * 3 + c]));
                for k in 1..SH_BASIS {
                    sh[k][c] = g[5][i * 45 + (k - 1) * 3 + c];
                }
            }
            let s = &g[2][i * 3..i * 3 + 3];
            cloud.push(
                Vector3::from_column_slice(&g[0][i * 3..i * 3 + 3]),
                q / norm,
                Vector3::new(cfg.scale(s[0]), cfg.scale(s[1]), cfg.scale(s[2])),
                sigmoid(g[3][i]),
                sh,
                &g[6][i * self.feature_dim..(i + 1) * self.feature_dim],
            );
        }
        Ok(cloud)
    }

    /// Chains gradients of the activated cloud returned by
    /// [`FitParams::to_cloud`] back to the raw groups.
    pub fn chain(&self, grads: &ParamGradients, cfg: &ActivationConfig) -> [Vec<f64>; 7] {
        let g = &self.groups;
        let mut out: [Vec<f64>; 7] = std::array::from_fn(|k| vec![0.0; g[k].len()]);
        for i in 0..self.count {
            for a in 0..3 {
                out[0][i * 3 + a] = grads.positions[i][a];
                out[2][i * 3 + a] = grads.scales[i][a] * cfg.scale_derivative(g[2][i * 3 + a]);
                let s = sigmoid(g[4][i * 3 + a]);
                out[4][i * 3 + a] = grads.sh[i][0][a] * s * (1.0 - s) / SH_C0;
                for k in 1..SH_BASIS {
                    out[5][i * 45 + (k - 1) * 3 + a] = grads.sh[i][k][a];
                }
            }
            // the cloud stores the normalized quaternion, which the
            // renderer normalizes again (a no-op), so one projection suffices
            let q = Vector4::from_column_slice(&g[1][i * 4..i * 4 + 4]);
            let dq = crate::gaussian::normalize_backward(&q, &grads.rotations[i]);
            out[1][i * 4..i * 4 + 4].copy_from_slice(dq.as_slice());
            let s = sigmoid(g[3][i]);
            out[3][i] = grads.opacities[i] * s * (1.0 - s);
        }
        out[6] = grads.features.clone();
        out
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay rate, applied toward the initial parameters.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Per-group base learning rates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub position: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color_dc: f64,
    pub color_rest: f64,
    pub feature: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 2e-3,
            rotation: 1e-2,
            scale: 3e-2,
            opacity: 5e-2,
            color_dc: 5e-2,
            color_rest: 5e-3,
            feature: 2e-2,
        }
    }
}

impl LearningRates {
    pub fn get(&self, g: Group) -> f64 {
        match g {
            Group::Position => self.position,
            Group::Rotation => self.rotation,
            Group::Scale => self.scale,
            Group::Opacity => self.opacity,
            Group::ColorDc => self.color_dc,
            Group::ColorRest => self.color_rest,
            Group::Feature => self.feature,
        }
    }

    /// Rates with every group frozen except `keep`.
    pub fn only(&self, keep: &[Group]) -> Self {
        let mut r = *self;
        for g in Group::ALL {
            if !keep.contains(&g) {
                *r.slot(g) = 0.0;
            }
        }
        r
    }

    fn slot(&mut self, g: Group) -> &mut f64 {
        match g {
            Group::Position => &mut self.position,
            Group::Rotation => &mut self.rotation,
            Group::Scale => &mut self.scale,
            Group::Opacity => &mut self.opacity,
            Group::ColorDc => &mut self.color_dc,
            Group::ColorRest => &mut self.color_rest,
            Group::Feature => &mut self.feature,
        }
    }
}

/// Linear warmup followed by cosine decay to `final_fraction` of the base
/// rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub warmup: usize,
    pub final_fraction: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            warmup: 20,
            final_fraction: 0.1,
        }
    }
}

impl Schedule {
    pub fn factor(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup {
            return (step + 1) as f64 / self.warmup as f64;
        }
        let span = total.saturating_sub(self.warmup).max(1) as f64;
        let t = ((step - self.warmup) as f64 / span).min(1.0);
        self.final_fraction + (1.0 - self.final_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Settings of [`optimize_cloud`].
#[derive(Clone, Debug)]
pub struct FitConfig {
    pub steps: usize,
    pub adam: AdamConfig,
    pub rates: LearningRates,
    pub schedule: Schedule,
    pub activation: ActivationConfig,
    pub loss: LossConfig,
    pub render: RenderSettings,
    /// Classifier used for the cross-entropy term on labeled views.
    pub classifier: Option<Classifier>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            adam: AdamConfig::default(),
            rates: LearningRates::default(),
            schedule: Schedule::default(),
            activation: ActivationConfig::default(),
            loss: LossConfig::default(),
            render: RenderSettings::default(),
            classifier: None,
        }
    }
}

/// One supervised view. Absent targets contribute no loss.
#[derive(Clone, Debug)]
pub struct FitView {
    pub camera: Camera,
    pub color: Option<PixelMap>,
    pub mask: Option<PixelMap>,
    pub features: Option<PixelMap>,
    pub labels: Option<Vec<u32>>,
}

impl FitView {
    pub fn color_only(camera: Camera, color: PixelMap) -> Self {
        Self {
            camera,
            color: Some(color),
            mask: None,
            features: None,
            labels: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub cloud: GaussianCloud,
    /// Total loss before each update.
    pub trace: Vec<f64>,
}

/// Loss of `cloud` over `views` and its gradient.
pub fn evaluate(cloud: &GaussianCloud, views: &[FitView], cfg: &FitConfig) -> Result<(f64, ParamGradients)> {
    let lc = &cfg.loss;
    let n_render = lc.render_views.unwrap_or(views.len()).min(views.len());
    let labeled: Vec<usize> = (0..views.len()).filter(|&v| views[v].labels.is_some()).collect();
    let n_seg = lc.seg_views.unwrap_or(labeled.len()).min(labeled.len());
    let seg_set = &labeled[..n_seg];
    let n_dist = views[..n_render].iter().filter(|v| v.features.is_some()).count();

    let mut render_terms = Vec::new();
    let mut dist_terms = Vec::new();
    let mut ce_terms = Vec::new();
    let mut grads = ParamGradients::zeros(cloud.len(), cloud.feature_dim);
    for (vi, view) in views.iter().enumerate() {
        let supervised = vi < n_render;
        let segmented = seg_set.contains(&vi);
        if !supervised && !segmented {
            continue;
        }
        let out = render(cloud, &view.camera, &cfg.render)?;
        let mut adj = RenderOutput::zeros(out.height(), out.width(), out.feature_dim());
        if supervised {
            let color_t = view.color.as_ref().unwrap_or(&out.color);
            let mask_t = view.mask.as_ref().unwrap_or(&out.alpha);
            let b = render_loss(&out.color, color_t, &out.alpha, mask_t, lc)?;
            let nr = n_render as f64;
            adj.color = scaled(mse_grad(&out.color, color_t)?, 1.0 / nr);
            adj.alpha = scaled(mse_grad(&out.alpha, mask_t)?, lc.lambda_mask / nr);
            render_terms.push(b);
            if let Some(ft) = &view.features {
                dist_terms.push(feature_dist_loss(&out.feature, ft)?);
                adj.feature = scaled(feature_dist_grad(&out.feature, ft)?, lc.lambda_dist / n_dist as f64);
            }
        }
        if segmented {
            let classifier = cfg
                .classifier
                .as_ref()
                .ok_or_else(|| Error::Invalid("labeled views need a classifier".into()))?;
            let labels = view.labels.as_ref().expect("labeled view");
            let logits = classifier.apply(&out.feature)?;
            ce_terms.push(seg_ce_loss(&logits, labels, None)?.loss);
            let d_logits = scaled(seg_ce_grad(&logits, labels, None)?, lc.lambda_seg / n_seg as f64);
            for (a, b) in adj.feature.data.iter_mut().zip(classifier.backward(&d_logits).data) {
                *a += b;
            }
        }
        let planes = [&adj.color, &adj.alpha, &adj.feature];
        if !planes.iter().all(|p| p.is_finite()) {
            return Ok((f64::NAN, grads));
        }
        grads.accumulate(&backward_render(cloud, &view.camera, &cfg.render, &adj)?);
    }
    let total = if render_terms.is_empty() {
        cfg.loss.lambda_seg * ce_terms.iter().sum::<f64>() / ce_terms.len().max(1) as f64
    } else {
        total_loss(&render_terms, &dist_terms, &ce_terms, lc)?.total
    };
    Ok((total, grads))
}

fn scaled(mut m: PixelMap, s: f64) -> PixelMap {
    m.data.iter_mut().for_each(|v| *v *= s);
    m
}

/// Fits `initial` to the target views with Adam updates on the raw
/// parameterization.
pub fn optimize_cloud(initial: &GaussianCloud, views: &[FitView], cfg: &FitConfig) -> Result<FitResult> {
    optimize_cloud_with(initial, views, cfg, |_, _| {})
}

/// [`optimize_cloud`] with a callback invoked after every step with the step
/// index and loss.
pub fn optimize_cloud_with(
    initial: &GaussianCloud,
    views: &[FitView],
    cfg: &FitConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<FitResult> {
    if views.is_empty() {
        return Err(Error::Invalid("fitting needs at least one view".into()));
    }
    if cfg.steps == 0 {
        return Err(Error::Invalid("fitting needs at least one step".into()));
    }
    cfg.activation.validate()?;
    cfg.loss.validate()?;
    initial.validate()?;
    for v in views {
        let (h, w) = (v.camera.height, v.camera.width);
        let shapes = [
            v.color.as_ref().map(|m| m.ensure_shape(h, w, 3, "color target")),
            v.mask.as_ref().map(|m| m.ensure_shape(h, w, 1, "mask target")),
            v.features
                .as_ref()
                .map(|m| m.ensure_shape(h, w, m.channels, "feature target")),
        ];
        for s in shapes.into_iter().flatten() {
            s?;
        }
        if v.labels.as_ref().is_some_and(|l| l.len() != h * w) {
            return Err(shape_err("label target does not match its camera"));
        }
    }

    let mut params = FitParams::from_cloud(initial, &cfg.activation);
    let anchor = params.groups.clone();
    let mut m: [Vec<f64>; 7] = std::array::from_fn(|k| vec![0.0; params.groups[k].len()]);
    let mut v = m.clone();
    let mut trace = Vec::with_capacity(cfg.steps);
    let a = &cfg.adam;
    for step in 0..cfg.steps {
        let cloud = params.to_cloud(&cfg.activation)?;
        let (loss, grads) = evaluate(&cloud, views, cfg)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        trace.push(loss);
        on_step(step, loss);
        let raw = params.chain(&grads, &cfg.activation);
        let t = (step + 1) as i32;
        let (bc1, bc2) = (1.0 - a.beta1.powi(t), 1.0 - a.beta2.powi(t));
        let factor = cfg.schedule.factor(step, cfg.steps);
        for (k, group) in Group::ALL.iter().enumerate() {
            let lr = cfg.rates.get(*group) * factor;
            if lr == 0.0 {
                continue;
            }
            let p = &mut params.groups[k];
            for j in 0..p.len() {
                let g = raw[k][j];
                m[k][j] = a.beta1 * m[k][j] + (1.0 - a.beta1) * g;
                v[k][j] = a.beta2 * v[k][j] + (1.0 - a.beta2) * g * g;
                let update = (m[k][j] / bc1) / ((v[k][j] / bc2).sqrt() + a.eps);
                p[j] -= lr * (update + a.weight_decay * (p[j] - anchor[k][j]));
            }
        }
    }
    Ok(FitResult {
        cloud: params.to_cloud(&cfg.activation)?,
        trace,
    })
}
