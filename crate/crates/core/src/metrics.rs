//! Image and segmentation quality scores.

use serde::Serialize;

use crate::error::{shape_err, Error, Result};
use crate::map::PixelMap;

/// PSNR values are capped here when the images (nearly) coincide.
pub const PSNR_CAP: f64 = 100.0;

/// Peak signal-to-noise ratio in dB; [`PSNR_CAP`] when the MSE is below
/// `1e-10`.
pub fn psnr(a: &PixelMap, b: &PixelMap, peak: f64) -> Result<f64> {
    let mse = crate::loss::mse(a, b)?;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Separable "valid" filtering of one channel.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean structural similarity over all channels, with an 11×11 Gaussian
/// window (σ = 1.5) evaluated at every fully covered position. Images smaller
/// than the window use the largest odd window that fits.
pub fn ssim(a: &PixelMap, b: &PixelMap, peak: f64) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(shape_err("ssim inputs differ in shape"));
    }
    let (h, w) = (a.height, a.width);
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size == 0 {
        return Err(Error::Invalid("ssim of an empty image".into()));
    }
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian_window(size);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..a.channels {
        let pa: Vec<f64> = a.data.iter().skip(ch).step_by(a.channels).copied().collect();
        let pb: Vec<f64> = b.data.iter().skip(ch).step_by(b.channels).copied().collect();
        let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let (mu_a, oh, ow) = filter(&pa, h, w, &k);
        let (mu_b, ..) = filter(&pb, h, w, &k);
        let (saa, ..) = filter(&sq(&pa, &pa), h, w, &k);
        let (sbb, ..) = filter(&sq(&pb, &pb), h, w, &k);
        let (sab, ..) = filter(&sq(&pa, &pb), h, w, &k);
        for i in 0..oh * ow {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = saa[i] - ma * ma;
            let vb = sbb[i] - mb * mb;
            let cov = sab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Mean IoU and mean per-class accuracy over the classes present in the
/// ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SegScores {
    pub miou: f64,
    pub macc: f64,
    pub classes: usize,
}

pub fn seg_scores(pred: &[u32], gt: &[u32], num_classes: usize) -> Result<SegScores> {
    if pred.len() != gt.len() {
        return Err(shape_err(format!(
            "label maps have {} and {} pixels",
            pred.len(),
            gt.len()
        )));
    }
    let mut inter = vec![0usize; num_classes];
    let mut in_pred = vec![0usize; num_classes];
    let mut in_gt = vec![0usize; num_classes];
    for (index, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        for label in [p, g] {
            if label as usize >= num_classes {
                return Err(Error::LabelOutOfRange { index, label });
            }
        }
        in_pred[p as usize] += 1;
        in_gt[g as usize] += 1;
        if p == g {
            inter[p as usize] += 1;
        }
    }
    let (mut iou, mut acc, mut classes) = (0.0, 0.0, 0);
    for c in 0..num_classes {
        if in_gt[c] == 0 {
            continue;
        }
        classes += 1;
        iou += inter[c] as f64 / (in_gt[c] + in_pred[c] - inter[c]) as f64;
        acc += inter[c] as f64 / in_gt[c] as f64;
    }
    if classes == 0 {
        return Ok(SegScores {
            miou: 1.0,
            macc: 1.0,
            classes: 0,
        });
    }
    Ok(SegScores {
        miou: iou / classes as f64,
        macc: acc / classes as f64,
        classes,
    })
}
