//! Fits 512 Gaussians to four ray-traced views of a textured sphere and
//! reports PSNR on a held-out view.
//!
//! `cargo run --release --example fit_sphere -- [steps] [seed]`

use std::time::Instant;

use semsplat::benchmark::{windows_non_increasing, SphereExperiment};

fn main() -> semsplat::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(1000);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let exp = SphereExperiment::textured_sphere(seed, steps, 64)?;
    println!("before: held-out PSNR {:.2} dB", exp.held_out_psnr(&exp.initial)?);
    let t0 = Instant::now();
    let fit = exp.run(|step, loss| {
        if step % 100 == 0 {
            println!("step {step:5}  loss {loss:.6}");
        }
    })?;
    println!(
        "after {steps} steps ({:.1?}): held-out PSNR {:.2} dB, 50-step window means non-increasing: {}",
        t0.elapsed(),
        exp.held_out_psnr(&fit.cloud)?,
        windows_non_increasing(&fit.trace, 50)
    );
    Ok(())
}
