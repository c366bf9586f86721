//! Renders the builtin demo scene, checks it against the brute-force
//! reference and writes every output plane.
//!
//! `cargo run --example render_scene -- [out_dir]`

use std::path::PathBuf;

use semsplat::io::{normal_to_display, normalize_for_display, write_image};
use semsplat::synthetic::demo_scene;
use semsplat::{render, render_reference, RenderSettings};

fn main() -> semsplat::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "render_out".into()));
    std::fs::create_dir_all(&out)?;
    let scene = demo_scene()?;
    let settings = RenderSettings::default();
    let fast = render(&scene.cloud, &scene.camera, &settings)?;
    let slow = render_reference(&scene.cloud, &scene.camera, &settings)?;
    println!(
        "{} primitives, {}x{}: tiled vs reference max diff {:.2e}",
        scene.cloud.len(),
        fast.width(),
        fast.height(),
        fast.max_abs_diff(&slow)
    );
    println!("hash {}", fast.content_hash());
    write_image(&out.join("color.png"), &fast.color)?;
    write_image(&out.join("alpha.png"), &fast.alpha)?;
    write_image(&out.join("depth.png"), &normalize_for_display(&fast.depth))?;
    write_image(&out.join("normal.png"), &normal_to_display(&fast.normal))?;
    // first three feature channels as a false-color image
    write_image(
        &out.join("feature.png"),
        &normalize_for_display(&fast.feature.slice_channels(0, 3)),
    )?;
    println!("wrote images to {}", out.display());
    Ok(())
}
