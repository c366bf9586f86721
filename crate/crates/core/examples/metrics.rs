//! Scores a noisy render against its target and evaluates the training
//! objective terms.
//!
//! `cargo run --example metrics`

use rand::RngExt;

use semsplat::loss::{feature_dist_loss, mse, seg_ce_loss};
use semsplat::metrics::{psnr, seg_scores, ssim};
use semsplat::palette::NUM_CLASSES;
use semsplat::synthetic::{orbit_cameras, rng, SphereScene};
use semsplat::PixelMap;

fn main() -> semsplat::Result<()> {
    let cam = orbit_cameras(1, 3.0, 0.2, 0.0, 60.0, 48, 48)?.remove(0);
    let view = SphereScene::two_blobs().render_view(&cam, 2);
    let mut r = rng(2);
    for sigma in [0.01, 0.05, 0.1] {
        let mut noisy = view.color.clone();
        noisy
            .data
            .iter_mut()
            .for_each(|v| *v = (*v + r.random_range(-sigma..sigma)).clamp(0.0, 1.0));
        println!(
            "noise ±{sigma}: MSE {:.2e}  PSNR {:.2} dB  SSIM {:.4}",
            mse(&noisy, &view.color)?,
            psnr(&noisy, &view.color, 1.0)?,
            ssim(&noisy, &view.color, 1.0)?
        );
    }

    // corrupt a vertical strip of labels
    let mut pred = view.labels.clone();
    for v in 0..48 {
        for u in 20..26 {
            pred[v * 48 + u] = 3;
        }
    }
    let s = seg_scores(&pred, &view.labels, NUM_CLASSES)?;
    println!(
        "segmentation: mIoU {:.4}  mAcc {:.4} over {} classes",
        s.miou, s.macc, s.classes
    );

    let uniform = PixelMap::zeros(48, 48, NUM_CLASSES);
    let ce = seg_ce_loss(&uniform, &view.labels, None)?;
    println!(
        "cross-entropy of uniform logits {:.6} (ln 28 = {:.6})",
        ce.loss,
        (NUM_CLASSES as f64).ln()
    );
    let flipped = PixelMap::from_vec(48, 48, NUM_CLASSES, view.features.data.iter().map(|x| -x).collect())?;
    // background pixels carry zero features and always count as 1
    let background = view.mask.data.iter().filter(|&&m| m < 0.5).count() as f64 / view.mask.data.len() as f64;
    println!(
        "distillation: self {:.3}, flipped {:.3} (background fraction {background:.3})",
        feature_dist_loss(&view.features, &view.features)?,
        feature_dist_loss(&flipped, &view.features)?
    );
    Ok(())
}
