//! Distills one-hot class features into a two-blob cloud and segments a
//! held-out view with the identity classifier.
//!
//! `cargo run --release --example semantic_field -- [steps] [seed]`

use semsplat::benchmark::SphereExperiment;

fn main() -> semsplat::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(500);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let exp = SphereExperiment::two_blobs(seed, steps, 64)?;
    let before = exp.held_out_seg(&exp.initial)?;
    println!("before: mIoU {:.3}  mAcc {:.3}", before.miou, before.macc);
    let fit = exp.run(|step, loss| {
        if step % 100 == 0 {
            println!("step {step:5}  loss {loss:.6}");
        }
    })?;
    let after = exp.held_out_seg(&fit.cloud)?;
    println!(
        "after: mIoU {:.3}  mAcc {:.3} over {} classes, held-out PSNR {:.2} dB",
        after.miou,
        after.macc,
        after.classes,
        exp.held_out_psnr(&fit.cloud)?
    );
    Ok(())
}
