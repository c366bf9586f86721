//! Training objective: image reconstruction, mask, feature distillation and
//! segmentation terms, with their gradients.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::map::PixelMap;
use crate::palette::NUM_CLASSES;

/// An externally supplied image distance, e.g. a learned perceptual metric.
pub trait PerceptualDistance: Send + Sync {
    fn distance(&self, pred: &PixelMap, target: &PixelMap) -> Result<f64>;
}

impl<F> PerceptualDistance for F
where
    F: Fn(&PixelMap, &PixelMap) -> Result<f64> + Send + Sync,
{
    fn distance(&self, pred: &PixelMap, target: &PixelMap) -> Result<f64> {
        self(pred, target)
    }
}

/// Loss weights.
#[derive(Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_mask: f64,
    pub lambda_perceptual: f64,
    pub lambda_dist: f64,
    pub lambda_seg: f64,
    /// Number of views that receive image supervision (all when absent).
    pub render_views: Option<usize>,
    /// Number of views that receive label supervision (all labeled views
    /// when absent).
    pub seg_views: Option<usize>,
    #[serde(skip)]
    pub perceptual: Option<Arc<dyn PerceptualDistance>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_mask: 1.0,
            lambda_perceptual: 0.1,
            lambda_dist: 0.5,
            lambda_seg: 1.0,
            render_views: None,
            seg_views: None,
            perceptual: None,
        }
    }
}

impl fmt::Debug for LossConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LossConfig")
            .field("lambda_mask", &self.lambda_mask)
            .field("lambda_perceptual", &self.lambda_perceptual)
            .field("lambda_dist", &self.lambda_dist)
            .field("lambda_seg", &self.lambda_seg)
            .field("render_views", &self.render_views)
            .field("seg_views", &self.seg_views)
            .field("perceptual", &self.perceptual.as_ref().map(|_| "<callable>"))
            .finish()
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ls = [
            self.lambda_mask,
            self.lambda_perceptual,
            self.lambda_dist,
            self.lambda_seg,
        ];
        if ls.iter().all(|l| *l >= 0.0 && l.is_finite()) {
            Ok(())
        } else {
            Err(Error::Invalid("loss weights must be finite and non-negative".into()))
        }
    }
}

/// Individual loss terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub mask: f64,
    /// `None` when no perceptual distance is configured.
    pub perceptual: Option<f64>,
    pub dist: f64,
    pub ce: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Reconstruction total `mse + λ_m·mask + λ_p·perceptual`.
    pub fn render_total(&self, cfg: &LossConfig) -> f64 {
        self.mse + cfg.lambda_mask * self.mask + self.perceptual.map_or(0.0, |p| cfg.lambda_perceptual * p)
    }
}

fn check_same(a: &PixelMap, b: &PixelMap, what: &str) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(shape_err(format!(
            "{what}: {}x{}x{} vs {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )))
    }
}

pub fn mse(pred: &PixelMap, target: &PixelMap) -> Result<f64> {
    check_same(pred, target, "mse")?;
    if pred.data.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = pred.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.data.len() as f64)
}

/// Gradient of [`mse`] with respect to `pred`.
pub fn mse_grad(pred: &PixelMap, target: &PixelMap) -> Result<PixelMap> {
    check_same(pred, target, "mse")?;
    let n = pred.data.len().max(1) as f64;
    let data = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| 2.0 * (a - b) / n)
        .collect();
    PixelMap::from_vec(pred.height, pred.width, pred.channels, data)
}

/// Reconstruction loss of one view: image MSE, squared error between
/// rendered alpha and the mask, and the optional perceptual term.
pub fn render_loss(
    pred_img: &PixelMap,
    gt_img: &PixelMap,
    pred_mask: &PixelMap,
    gt_mask: &PixelMap,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let mut b = LossBreakdown {
        mse: mse(pred_img, gt_img)?,
        mask: mse(pred_mask, gt_mask)?,
        perceptual: cfg
            .perceptual
            .as_ref()
            .map(|p| p.distance(pred_img, gt_img))
            .transpose()?,
        ..Default::default()
    };
    b.total = b.render_total(cfg);
    Ok(b)
}

/// Mean over pixels of `1 − cos(pred, target)`; a pixel where either vector
/// has zero norm contributes 1.
pub fn feature_dist_loss(pred: &PixelMap, target: &PixelMap) -> Result<f64> {
    check_same(pred, target, "feature distillation")?;
    let n = pred.num_pixels();
    if n == 0 {
        return Ok(0.0);
    }
    let s: f64 = pred
        .pixels()
        .zip(target.pixels())
        .map(|(p, t)| 1.0 - cosine(p, t).0)
        .sum();
    Ok(s / n as f64)
}

/// `(cos, ‖p‖, ‖t‖, p·t)`; cosine is 0 when either norm is 0.
fn cosine(p: &[f64], t: &[f64]) -> (f64, f64, f64, f64) {
    let dot: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
    let np = p.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nt = t.iter().map(|a| a * a).sum::<f64>().sqrt();
    if np == 0.0 || nt == 0.0 {
        (0.0, np, nt, dot)
    } else {
        (dot / (np * nt), np, nt, dot)
    }
}

/// Gradient of [`feature_dist_loss`] with respect to `pred` (zero on
/// zero-norm pixels).
pub fn feature_dist_grad(pred: &PixelMap, target: &PixelMap) -> Result<PixelMap> {
    check_same(pred, target, "feature distillation")?;
    let n = pred.num_pixels().max(1) as f64;
    let mut out = PixelMap::zeros(pred.height, pred.width, pred.channels);
    for ((p, t), g) in pred
        .pixels()
        .zip(target.pixels())
        .zip(out.data.chunks_exact_mut(pred.channels.max(1)))
    {
        let (_, np, nt, dot) = cosine(p, t);
        if np == 0.0 || nt == 0.0 {
            continue;
        }
        // the numerator vanishes exactly when p == t
        let pp: f64 = p.iter().map(|a| a * a).sum();
        for k in 0..p.len() {
            let dcos = (t[k] * pp - dot * p[k]) / (np * np * np * nt);
            g[k] = -dcos / n;
        }
    }
    Ok(out)
}

/// Mean cross entropy and the number of pixels it averaged over.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CrossEntropy {
    pub loss: f64,
    pub count: usize,
}

fn check_labels(logits: &PixelMap, labels: &[u32], ignore: Option<u32>) -> Result<()> {
    if logits.channels != NUM_CLASSES || labels.len() != logits.num_pixels() {
        return Err(shape_err(format!(
            "cross entropy needs {NUM_CLASSES}-channel logits with one label per pixel"
        )));
    }
    for (index, &label) in labels.iter().enumerate() {
        if Some(label) != ignore && label as usize >= NUM_CLASSES {
            return Err(Error::LabelOutOfRange { index, label });
        }
    }
    Ok(())
}

fn log_softmax(l: &[f64], out: &mut [f64]) {
    let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + l.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    for (o, x) in out.iter_mut().zip(l) {
        *o = x - lse;
    }
}

/// Mean per-pixel softmax cross entropy, skipping pixels labeled `ignore`.
pub fn seg_ce_loss(logits: &PixelMap, labels: &[u32], ignore: Option<u32>) -> Result<CrossEntropy> {
    check_labels(logits, labels, ignore)?;
    let mut ls = [0.0; NUM_CLASSES];
    let (mut sum, mut count) = (0.0, 0);
    for (l, &y) in logits.pixels().zip(labels) {
        if Some(y) == ignore {
            continue;
        }
        log_softmax(l, &mut ls);
        sum -= ls[y as usize];
        count += 1;
    }
    Ok(CrossEntropy {
        loss: if count == 0 { 0.0 } else { sum / count as f64 },
        count,
    })
}

/// Gradient of [`seg_ce_loss`] with respect to the logits.
pub fn seg_ce_grad(logits: &PixelMap, labels: &[u32], ignore: Option<u32>) -> Result<PixelMap> {
    check_labels(logits, labels, ignore)?;
    let count = labels.iter().filter(|&&y| Some(y) != ignore).count();
    let mut out = PixelMap::zeros(logits.height, logits.width, NUM_CLASSES);
    if count == 0 {
        return Ok(out);
    }
    let mut ls = [0.0; NUM_CLASSES];
    for ((l, &y), g) in logits.pixels().zip(labels).zip(out.data.chunks_exact_mut(NUM_CLASSES)) {
        if Some(y) == ignore {
            continue;
        }
        log_softmax(l, &mut ls);
        for k in 0..NUM_CLASSES {
            let onehot = if k == y as usize { 1.0 } else { 0.0 };
            g[k] = (ls[k].exp() - onehot) / count as f64;
        }
    }
    Ok(out)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Combines per-view terms: the mean reconstruction loss plus `λ_dist` times
/// the mean distillation loss over the image-supervised views, plus `λ_seg`
/// times the mean cross entropy over the label-supervised views.
pub fn total_loss(render: &[LossBreakdown], dist: &[f64], ce: &[f64], cfg: &LossConfig) -> Result<LossBreakdown> {
    if render.is_empty() {
        return Err(Error::Invalid("total loss needs at least one supervised view".into()));
    }
    let pick = |f: fn(&LossBreakdown) -> f64| mean(&render.iter().map(f).collect::<Vec<_>>());
    let perceptual: Vec<f64> = render.iter().filter_map(|b| b.perceptual).collect();
    let render_mean = mean(&render.iter().map(|b| b.render_total(cfg)).collect::<Vec<_>>());
    let (dist_mean, ce_mean) = (mean(dist), mean(ce));
    Ok(LossBreakdown {
        mse: pick(|b| b.mse),
        mask: pick(|b| b.mask),
        perceptual: (!perceptual.is_empty()).then(|| mean(&perceptual)),
        dist: dist_mean,
        ce: ce_mean,
        total: render_mean + cfg.lambda_dist * dist_mean + cfg.lambda_seg * ce_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(h: usize, w: usize, c: usize, f: impl Fn(usize) -> f64) -> PixelMap {
        PixelMap::from_vec(h, w, c, (0..h * w * c).map(f).collect()).unwrap()
    }

    #[test]
    fn identical_inputs_give_zero_render_loss() {
        let img = map(4, 5, 3, |i| (i as f64 * 0.37).sin().abs());
        let m = map(4, 5, 1, |i| (i % 2) as f64);
        let b = render_loss(&img, &img, &m, &m, &LossConfig::default()).unwrap();
        assert_eq!((b.mse, b.mask, b.total), (0.0, 0.0, 0.0));
        assert_eq!(b.perceptual, None);
    }

    #[test]
    fn constant_offset_mse() {
        let a = map(3, 3, 3, |_| 0.4);
        let b = map(3, 3, 3, |_| 0.5);
        assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn weighted_render_total_with_unit_terms() {
        let cfg = LossConfig {
            perceptual: Some(Arc::new(|_: &PixelMap, _: &PixelMap| Ok(1.0))),
            ..Default::default()
        };
        // unit mse and mask: images differ by one everywhere
        let a = map(2, 2, 3, |_| 0.0);
        let b = map(2, 2, 3, |_| 1.0);
        let ma = map(2, 2, 1, |_| 0.0);
        let mb = map(2, 2, 1, |_| 1.0);
        let l = render_loss(&a, &b, &ma, &mb, &cfg).unwrap();
        assert_eq!((l.mse, l.mask, l.perceptual), (1.0, 1.0, Some(1.0)));
        assert!((l.total - 2.1).abs() < 1e-12);
    }

    #[test]
    fn cosine_distance_closed_forms() {
        let p = map(3, 2, 4, |i| (i as f64 * 0.91).cos() + 0.1);
        let neg = map(3, 2, 4, |i| -((i as f64 * 0.91).cos() + 0.1));
        assert!(feature_dist_loss(&p, &p).unwrap().abs() < 1e-12);
        assert!((feature_dist_loss(&p, &neg).unwrap() - 2.0).abs() < 1e-12);
        let e0 = map(2, 2, 2, |i| if i % 2 == 0 { 1.0 } else { 0.0 });
        let e1 = map(2, 2, 2, |i| if i % 2 == 1 { 3.0 } else { 0.0 });
        assert!((feature_dist_loss(&e0, &e1).unwrap() - 1.0).abs() < 1e-12);
        let z = map(2, 2, 2, |_| 0.0);
        assert_eq!(feature_dist_loss(&z, &e1).unwrap(), 1.0);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let labels: Vec<u32> = (0..6).map(|i| (i * 5 % 28) as u32).collect();
        let uniform = map(2, 3, NUM_CLASSES, |_| 0.7);
        let ce = seg_ce_loss(&uniform, &labels, None).unwrap();
        assert!((ce.loss - (28.0f64).ln()).abs() < 1e-12);
        assert_eq!(ce.count, 6);
        let confident = map(2, 3, NUM_CLASSES, |i| {
            if (i % NUM_CLASSES) as u32 == labels[i / NUM_CLASSES] {
                20.0
            } else {
                -20.0
            }
        });
        assert!(seg_ce_loss(&confident, &labels, None).unwrap().loss < 1e-8);
        let ignored = vec![255; 6];
        let ce = seg_ce_loss(&uniform, &ignored, Some(255)).unwrap();
        assert_eq!((ce.loss, ce.count), (0.0, 0));
        assert!(matches!(
            seg_ce_loss(&uniform, &[0, 1, 2, 3, 4, 28], None),
            Err(Error::LabelOutOfRange { index: 5, label: 28 })
        ));
    }

    #[test]
    fn total_loss_examples() {
        let cfg = LossConfig {
            lambda_seg: 0.0,
            ..Default::default()
        };
        let v = |t: f64| LossBreakdown {
            mse: t,
            total: t,
            ..Default::default()
        };
        let t = total_loss(&[v(1.0), v(3.0)], &[0.0, 0.0], &[], &cfg).unwrap();
        assert_eq!(t.total, 2.0);
        let cfg = LossConfig::default();
        let t = total_loss(&[v(1.0)], &[0.4], &[], &cfg).unwrap();
        assert!((t.total - (1.0 + 0.5 * 0.4)).abs() < 1e-15);
        let zero = total_loss(&[v(0.0)], &[0.0], &[0.0], &cfg).unwrap();
        assert_eq!(zero.total, 0.0);
    }

    fn fd_check(f: impl Fn(&PixelMap) -> f64, g: &PixelMap, x: &PixelMap) {
        let h = 1e-6;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data[i] += h;
            xm.data[i] -= h;
            let n = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((n - g.data[i]).abs() < 1e-7, "entry {i}: {n} vs {}", g.data[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = map(2, 3, 5, |i| (i as f64 * 1.3).sin());
        let t = map(2, 3, 5, |i| (i as f64 * 0.7).cos());
        fd_check(|x| mse(x, &t).unwrap(), &mse_grad(&p, &t).unwrap(), &p);
        fd_check(
            |x| feature_dist_loss(x, &t).unwrap(),
            &feature_dist_grad(&p, &t).unwrap(),
            &p,
        );
        let logits = map(2, 3, NUM_CLASSES, |i| (i as f64 * 0.37).sin() * 3.0);
        let labels = [0, 5, 27, 3, 99, 12];
        fd_check(
            |x| seg_ce_loss(x, &labels, Some(99)).unwrap().loss,
            &seg_ce_grad(&logits, &labels, Some(99)).unwrap(),
            &logits,
        );
    }

    proptest! {
        #[test]
        fn distillation_ignores_positive_rescaling(
            vals in prop::collection::vec(-3.0f64..3.0, 24),
            scales in prop::collection::vec(0.01f64..100.0, 6),
        ) {
            let p = PixelMap::from_vec(2, 3, 4, vals.clone()).unwrap();
            let t = PixelMap::from_vec(2, 3, 4, vals.iter().rev().copied().collect()).unwrap();
            let mut ps = p.clone();
            for (px, s) in ps.data.chunks_exact_mut(4).zip(&scales) {
                px.iter_mut().for_each(|v| *v *= s);
            }
            let a = feature_dist_loss(&p, &t).unwrap();
            let b = feature_dist_loss(&ps, &t).unwrap();
            let c = feature_dist_loss(&p, &ps).unwrap();
            let d = feature_dist_loss(&p, &p).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!((c - d).abs() < 1e-9);
        }

        #[test]
        fn total_is_homogeneous_in_lambda_dist(d in 0.0f64..2.0, r in 0.0f64..5.0, l in 0.0f64..3.0) {
            let v = LossBreakdown { mse: r, total: r, ..Default::default() };
            let c1 = LossConfig { lambda_dist: l, ..Default::default() };
            let c2 = LossConfig { lambda_dist: 2.0 * l, ..Default::default() };
            let t1 = total_loss(&[v], &[d], &[], &c1).unwrap().total;
            let t2 = total_loss(&[v], &[d], &[], &c2).unwrap().total;
            prop_assert!(((t2 - r) - 2.0 * (t1 - r)).abs() < 1e-12);
        }
    }
}
