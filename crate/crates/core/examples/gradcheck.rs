//! Checks the analytic backward pass against central differences on a few
//! random scenes.
//!
//! `cargo run --release --example gradcheck -- [seeds]`

use semsplat::grad::{check_all, GradScene};

fn main() -> semsplat::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let mut ok = true;
    for seed in 0..seeds {
        let scene = GradScene::random(seed, 24, 16, 4)?;
        println!("seed {seed}");
        for r in check_all(&scene, 1e-4)? {
            println!("  {r}");
            ok &= r.passed;
        }
    }
    println!("{}", if ok { "all gradients match" } else { "MISMATCH" });
    if !ok {
        std::process::exit(1);
    }
    Ok(())
}
