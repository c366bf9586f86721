//! Renders depth from a sphere cloud, lifts the covered pixels back to world
//! space under both camera conventions and normalizes the result.
//!
//! `cargo run --example unproject`

use semsplat::camera::UnprojectConvention;
use semsplat::scene::{normalize_scene, DEFAULT_CAMERA_SCALE};
use semsplat::synthetic::{orbit_cameras, rng, SphereScene};
use semsplat::{render, PixelMap, RenderSettings, UnprojectOptions};

fn main() -> semsplat::Result<()> {
    let scene = SphereScene::textured_sphere();
    let cloud = scene.initial_cloud(&mut rng(4), 2000, 0.0, 0.03, 0.95, 0);
    let cam = orbit_cameras(1, 3.0, 0.2, 0.0, 70.0, 48, 48)?.remove(0);
    let out = render(&cloud, &cam, &RenderSettings::default())?;
    let mask: Vec<bool> = out.alpha.data.iter().map(|&a| a > 0.9).collect();
    let depth = PixelMap::from_vec(
        48,
        48,
        1,
        out.depth
            .data
            .iter()
            .zip(&out.alpha.data)
            .map(|(d, a)| if *a > 1e-9 { d / a } else { 1.0 })
            .collect(),
    )?;
    for convention in [UnprojectConvention::Conventional, UnprojectConvention::Literal] {
        let opts = UnprojectOptions {
            half_pixel: true,
            convention,
        };
        let pts = cam.unproject(&depth, None, Some(&mask), opts)?;
        let mean_r = pts.positions.iter().map(|p| p.norm()).sum::<f64>() / pts.positions.len() as f64;
        println!(
            "{convention:?}: {} points, mean distance from center {mean_r:.3} (sphere radius 0.8)",
            pts.positions.len()
        );
    }
    let pts = cam.unproject(&depth, None, Some(&mask), UnprojectOptions::default())?;
    let (norm, cams) = normalize_scene(&pts.positions, std::slice::from_ref(&cam), DEFAULT_CAMERA_SCALE)?;
    let extent = norm
        .iter()
        .flat_map(|p| p.iter().copied())
        .fold(0.0f64, |m, x| m.max(x.abs()));
    println!(
        "normalized: max |coord| {extent:.3}, camera moved to {:.3?}",
        cams[0].center()
    );
    Ok(())
}
