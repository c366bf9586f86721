//! Writes a random cloud as a splat PLY with a feature sidecar and
//! classifier, reads it back, and parses a strict scene config.
//!
//! `cargo run --example io_round_trip`

use semsplat::io::{read_splat, sidecar_path, write_splat, CameraConfig, SceneConfig};
use semsplat::raster::Classifier;
use semsplat::synthetic::{random_cloud, random_scene, rng, RandomCloudSpec};

fn main() -> semsplat::Result<()> {
    let dir = std::env::temp_dir().join("semsplat_io_example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("cloud.ply");
    let cloud = random_cloud(
        &mut rng(9),
        &RandomCloudSpec {
            count: 100,
            feature_dim: 28,
            ..Default::default()
        },
    );
    write_splat(&path, &cloud, Some(&Classifier::identity()))?;
    let back = read_splat(&path)?;
    let moved = cloud
        .positions
        .iter()
        .zip(&back.cloud.positions)
        .map(|(a, b)| (a - b).amax())
        .fold(0.0, f64::max);
    println!(
        "{} primitives, {} feature channels, classifier {}; f32 storage moved positions by {moved:.1e}",
        back.cloud.len(),
        back.cloud.feature_dim,
        if back.classifier.is_some() {
            "restored"
        } else {
            "missing"
        }
    );
    write_splat(&path, &back.cloud, back.classifier.as_ref())?;
    println!("second round trip exact: {}", read_splat(&path)?.cloud == back.cloud);
    println!("sidecar at {}", sidecar_path(&path).display());

    let cam = random_scene(1, 1, 32, 32, 0)?.camera;
    let text = serde_json::json!({
        "cameras": [CameraConfig::from_camera(&cam)],
        "views": [{"camera": 0, "image": "view0.png"}],
        "loss": {"lambda_dist": 0.25}
    })
    .to_string();
    let cfg = SceneConfig::parse(&text)?;
    println!(
        "config with {} camera(s) parsed; lambda_dist {}",
        cfg.cameras.len(),
        cfg.loss.lambda_dist
    );
    let typo = text.replace("lambda_dist", "lambda_dits");
    println!("typo rejected: {}", SceneConfig::parse(&typo).unwrap_err());
    Ok(())
}
