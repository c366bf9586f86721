//! Runs the aggregation transformer on a pose-conditioned view, reuses its
//! cached attention to lift an external feature map, and decodes per-pixel
//! Gaussians from the output tokens.
//!
//! `cargo run --release --example attention_lift`

use nalgebra::DMatrix;
use rand::RngExt;

use semsplat::attention::{
    decode_gaussians, lift_features, pose_conditioned_image, AggregationTransformer, DecodeHead, LiftSource,
    TransformerConfig,
};
use semsplat::gaussian::{activate_params, filter_low_opacity, ActivationConfig};
use semsplat::synthetic::{orbit_cameras, rng, SphereScene};
use semsplat::UnprojectOptions;

fn main() -> semsplat::Result<()> {
    let cam = orbit_cameras(1, 3.0, 0.3, 0.4, 60.0, 32, 32)?.remove(0);
    let view = SphereScene::two_blobs().render_view(&cam, 2);
    let image = pose_conditioned_image(&view.color, None, &cam, true)?;
    println!(
        "pose-conditioned input: {}x{}x{}",
        image.height, image.width, image.channels
    );

    let config = TransformerConfig {
        dim: 64,
        blocks: 2,
        ffn_hidden: 128,
        ..Default::default()
    };
    let mut r = rng(1);
    let model = AggregationTransformer::init(config, 32, 32, &mut r)?;
    let (tokens, cache) = model.forward(&image)?;
    println!(
        "{} tokens of width {}, {} cached blocks",
        tokens.len(),
        tokens.dim(),
        cache.blocks.len()
    );

    // stand-in for an external encoder's patch features
    let external = DMatrix::from_fn(tokens.len(), 384, |_, _| r.random_range(-1.0..1.0));
    for source in [LiftSource::LastBlock, LiftSource::AverageBlocks] {
        let lifted = lift_features(&cache, &external, source)?;
        println!("{source:?}: lifted {}x{}", lifted.nrows(), lifted.ncols());
    }

    let head = DecodeHead::init(tokens.dim(), config.patch, 8, 0.1, &mut r);
    let raw = decode_gaussians(&tokens.tokens, tokens.grid_h, tokens.grid_w, &head)?;
    let depth_cam = cam.clone();
    let act = ActivationConfig::default();
    let cloud = activate_params(&raw, &act, &depth_cam, None, UnprojectOptions::default())?;
    let kept = filter_low_opacity(&cloud, act.opacity_filter_threshold);
    println!(
        "decoded {} pixel-aligned Gaussians, {} above the opacity floor",
        cloud.len(),
        kept.len()
    );
    Ok(())
}
