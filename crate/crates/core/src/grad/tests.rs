use nalgebra::{Matrix3, Vector3, Vector4};

use super::*;
use crate::camera::{Camera, Intrinsics, UnprojectOptions};
use crate::gaussian::{activate_params, channel, rgb_to_dc, ActivationConfig, GaussianCloud, RawGaussianParams};
use crate::map::PixelMap;
use crate::raster::{render, RenderOutput, RenderSettings};
use crate::sh::SH_BASIS;
use crate::synthetic::camera_towards_origin;

const EPS: f64 = 1e-4;

fn pinhole(w: usize, h: usize, f: f64) -> Camera {
    Camera::new(
        Intrinsics {
            fx: f,
            fy: f,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
        },
        Matrix3::identity(),
        Vector3::zeros(),
        w,
        h,
    )
    .unwrap()
}

fn gray(v: f64) -> [[f64; 3]; SH_BASIS] {
    let mut sh = [[0.0; 3]; SH_BASIS];
    sh[0] = [rgb_to_dc(v); 3];
    sh
}

fn color_adjoint(h: usize, w: usize, fd: usize, value: f64) -> RenderOutput {
    let mut adj = RenderOutput::zeros(h, w, fd);
    adj.color.data.iter_mut().for_each(|v| *v = value);
    adj
}

#[test]
fn single_fragment_color_gradient_is_its_weight() {
    let cam = pinhole(1, 1, 10.0);
    let mut cloud = GaussianCloud::empty(0);
    cloud.push(
        Vector3::new(0.0, 0.0, 2.0),
        Vector4::new(1.0, 0.0, 0.0, 0.0),
        Vector3::new(0.1, 0.1, 0.1),
        0.6,
        gray(0.4),
        &[],
    );
    let g = backward_render(&cloud, &cam, &RenderSettings::default(), &color_adjoint(1, 1, 0, 1.0)).unwrap();
    // d color / d dc = w·Y00, with w = 0.6 at the exact center
    let w = g.sh[0][0][0] / crate::sh::SH_C0;
    assert!((w - 0.6).abs() < 1e-15);
}

#[test]
fn transparent_primitive_gets_no_payload_gradient() {
    let scene = GradScene::random(3, 6, 16, 3).unwrap();
    let mut cloud = scene.cloud.clone();
    cloud.opacities[2] = 0.0;
    let g = backward_render(&cloud, &scene.camera, &scene.settings, &scene.adjoints).unwrap();
    assert_eq!(g.sh[2], [[0.0; 3]; SH_BASIS]);
    assert!(g.feature(2).iter().all(|&x| x == 0.0));
    assert_eq!(g.positions[2], Vector3::zeros());
    assert_eq!(g.scales[2], Vector3::zeros());
}

#[test]
fn zero_adjoint_gives_exactly_zero() {
    let scene = GradScene::random(4, 10, 16, 2).unwrap();
    let zero = RenderOutput::zeros(16, 16, 2);
    let g = backward_render(&scene.cloud, &scene.camera, &scene.settings, &zero).unwrap();
    assert_eq!(g.max_abs(), 0.0);
    let s = GradScene {
        adjoints: zero,
        ..scene
    };
    for class in ParamClass::ALL {
        let r = finite_diff_check(&s, class, EPS).unwrap();
        assert_eq!((r.max_rel_error, r.max_abs_error), (0.0, 0.0));
        assert!(r.passed);
    }
}

#[test]
fn random_scene_matches_finite_differences() {
    let scene = GradScene::random(1, 8, 16, 3).unwrap();
    for r in check_all(&scene, EPS).unwrap() {
        assert!(r.passed, "{r}");
    }
}

#[test]
fn color_path_is_exact_on_single_gaussian() {
    let scene = GradScene::random(9, 1, 16, 2).unwrap();
    let r = finite_diff_check(&scene, ParamClass::Color, EPS).unwrap();
    assert!(r.max_rel_error <= 1e-6, "{r}");
    let r = finite_diff_check(&scene, ParamClass::Feature, EPS).unwrap();
    assert!(r.max_rel_error <= 1e-6, "{r}");
}

#[test]
fn mean_gradient_is_continuous_across_tiles() {
    let mut scene = GradScene::random(12, 4, 16, 1).unwrap();
    scene.settings.tile_size = 8;
    // put primitive 0 on the corner shared by four tiles
    let cam = &scene.camera;
    let k = &cam.intrinsics;
    let z = cam.world_to_camera(&scene.cloud.positions[0]).z;
    let p_cam = Vector3::new((8.0 - k.cx) * z / k.fx, (8.0 - k.cy) * z / k.fy, z);
    scene.cloud.positions[0] = cam.rotation.transpose() * (p_cam - cam.translation);
    let (u, v, _) = cam.project_point(&scene.cloud.positions[0]).unwrap();
    assert!((u - 8.0).abs() < 1e-9 && (v - 8.0).abs() < 1e-9);
    let r = finite_diff_check(&scene, ParamClass::Mean, EPS).unwrap();
    assert!(r.passed, "{r}");
}

#[test]
fn repeated_backward_is_bitwise_identical() {
    let scene = GradScene::random(5, 24, 16, 4).unwrap();
    let a = scene.gradients().unwrap();
    for ts in [16, 16, 5] {
        let mut s = scene.clone();
        s.settings.tile_size = ts;
        let b = s.gradients().unwrap();
        if ts == 16 {
            assert_eq!(a, b);
        } else {
            // other tilings reduce in a different order
            assert!((a.max_abs() - b.max_abs()).abs() < 1e-9 * (1.0 + a.max_abs()));
        }
    }
}

#[test]
fn frontmost_opacity_never_reduces_coverage() {
    for seed in 0..6 {
        let scene = GradScene::random(seed, 12, 16, 0).unwrap();
        let out = render(&scene.cloud, &scene.camera, &scene.settings).unwrap();
        let eye = scene.camera.center();
        let front = (0..scene.cloud.len())
            .min_by(|&a, &b| {
                let za = scene.camera.world_to_camera(&scene.cloud.positions[a]).z;
                let zb = scene.camera.world_to_camera(&scene.cloud.positions[b]).z;
                za.total_cmp(&zb)
            })
            .unwrap();
        let _ = eye;
        // unit adjoint on the alpha of every pixel
        let mut adj = RenderOutput::zeros(16, 16, 0);
        for y in 0..16 {
            for x in 0..16 {
                let mut one = adj.clone();
                one.alpha.data[y * 16 + x] = 1.0;
                let g = backward_render(&scene.cloud, &scene.camera, &scene.settings, &one).unwrap();
                assert!(g.opacities[front] >= 0.0);
            }
        }
        adj.alpha.data.iter_mut().for_each(|v| *v = 1.0);
        let g = backward_render(&scene.cloud, &scene.camera, &scene.settings, &adj).unwrap();
        assert!(g.opacities.iter().all(|&d| d >= 0.0));
        assert!(out.alpha.data.iter().all(|&a| (0.0..=1.0).contains(&a)));
    }
}

#[test]
fn mismatched_adjoints_are_rejected() {
    let scene = GradScene::random(2, 3, 16, 2).unwrap();
    let bad = RenderOutput::zeros(16, 15, 2);
    assert!(backward_render(&scene.cloud, &scene.camera, &scene.settings, &bad).is_err());
    let bad = RenderOutput::zeros(16, 16, 3);
    assert!(backward_render(&scene.cloud, &scene.camera, &scene.settings, &bad).is_err());
}

#[test]
fn activation_chain_matches_finite_differences() {
    let (h, w, fd) = (6, 6, 2);
    let camera = camera_towards_origin(Vector3::new(0.3, -0.2, -2.5), 7.0, w, h).unwrap();
    let cfg = ActivationConfig {
        s_max: 0.25,
        depth_near: 1.5,
        depth_far: 3.5,
        ..Default::default()
    };
    let n = RawGaussianParams::channel_count(fd);
    let data: Vec<f64> = (0..h * w * n).map(|i| 0.6 * ((i as f64) * 0.731).sin()).collect();
    let mut raw = RawGaussianParams::from_map(PixelMap::from_vec(h, w, n, data).unwrap(), fd).unwrap();
    for px in raw.map.data.chunks_exact_mut(n) {
        px[channel::ROTATION] += 1.5;
        px[channel::OPACITY] -= 0.5;
    }
    let mask: Vec<bool> = (0..h * w).map(|i| i % 3 != 1).collect();
    let opts = UnprojectOptions::default();
    let settings = RenderSettings::smooth();
    let adj = GradScene::random(0, 1, 6, fd).unwrap().adjoints;
    let loss = |r: &RawGaussianParams| {
        let cloud = activate_params(r, &cfg, &camera, Some(&mask), opts).unwrap();
        adjoint_dot(&adj, &render(&cloud, &camera, &settings).unwrap())
    };
    let cloud = activate_params(&raw, &cfg, &camera, Some(&mask), opts).unwrap();
    let g = backward_render(&cloud, &camera, &settings, &adj).unwrap();
    let graw = activation_backward(&raw, &cfg, &camera, Some(&mask), opts, &g).unwrap();
    let mut worst = 0.0f64;
    for idx in 0..raw.map.data.len() {
        let mut p = raw.clone();
        p.map.data[idx] += EPS;
        let up = loss(&p);
        p.map.data[idx] -= 2.0 * EPS;
        let down = loss(&p);
        let num = (up - down) / (2.0 * EPS);
        worst = worst.max(relative_error(graw.map.data[idx], num));
    }
    assert!(worst <= 1e-3, "worst relative error {worst}");
}

fn two_splat_cloud() -> (GaussianCloud, Camera) {
    let cam = camera_towards_origin(Vector3::new(0.0, 0.0, -3.0), 16.0, 12, 12).unwrap();
    let mut cloud = GaussianCloud::empty(2);
    cloud.push(
        Vector3::new(0.1, 0.0, 0.0),
        Vector4::new(1.0, 0.0, 0.0, 0.0),
        Vector3::new(0.01, 0.01, 0.01),
        0.7,
        gray(0.3),
        &[1.0, -1.0],
    );
    cloud.push(
        Vector3::new(-0.2, 0.1, 0.3),
        Vector4::new(0.9, 0.1, 0.0, 0.3).normalize(),
        Vector3::new(0.015, 0.01, 0.005),
        0.5,
        gray(0.8),
        &[0.5, 0.5],
    );
    (cloud, cam)
}

#[test]
fn fitting_to_own_render_is_a_fixed_point() {
    let (cloud, cam) = two_splat_cloud();
    let out = render(&cloud, &cam, &RenderSettings::default()).unwrap();
    let view = FitView {
        camera: cam,
        color: Some(out.color.clone()),
        mask: Some(out.alpha.clone()),
        features: Some(out.feature.clone()),
        labels: None,
    };
    let cfg = FitConfig {
        steps: 10,
        ..Default::default()
    };
    let fit = optimize_cloud(&cloud, &[view], &cfg).unwrap();
    assert_eq!(fit.trace.len(), 10);
    let before = FitParams::from_cloud(&cloud, &cfg.activation);
    let after = FitParams::from_cloud(&fit.cloud, &cfg.activation);
    for (a, b) in before.groups.iter().zip(&after.groups) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        }
    }
}

#[test]
fn solid_color_target_is_recovered() {
    let cam = camera_towards_origin(Vector3::new(0.0, 0.0, -3.0), 16.0, 16, 16).unwrap();
    let target = [0.8, 0.35, 0.1];
    let mut cloud = GaussianCloud::empty(0);
    cloud.push(
        Vector3::zeros(),
        Vector4::new(1.0, 0.0, 0.0, 0.0),
        Vector3::new(1.5, 1.5, 1.5),
        0.95,
        gray(1.0 - 1e-3),
        &[],
    );
    let color = PixelMap::from_fn(16, 16, 3, |_, _, px| px.copy_from_slice(&target));
    let cfg = FitConfig {
        steps: 500,
        activation: ActivationConfig {
            s_max: 2.0,
            ..Default::default()
        },
        render: RenderSettings {
            background: target,
            ..Default::default()
        },
        ..Default::default()
    };
    let fit = optimize_cloud(&cloud, &[FitView::color_only(cam.clone(), color)], &cfg).unwrap();
    let rgb = crate::sh::eval_sh(&fit.cloud.sh[0], &(fit.cloud.positions[0] - cam.center()).normalize());
    for c in 0..3 {
        assert!(
            (rgb[c] - target[c]).abs() < 1e-2,
            "channel {c}: {} vs {}",
            rgb[c],
            target[c]
        );
    }
    assert!(fit.trace.last().unwrap() < &fit.trace[0]);
}

#[test]
fn non_finite_loss_reports_the_step() {
    let (cloud, cam) = two_splat_cloud();
    let mut color = PixelMap::zeros(12, 12, 3);
    color.data[5] = f64::NAN;
    let cfg = FitConfig {
        steps: 3,
        ..Default::default()
    };
    let err = optimize_cloud(&cloud, &[FitView::color_only(cam, color)], &cfg);
    assert!(matches!(err, Err(crate::Error::Diverged { step: 0, .. })), "{err:?}");
}

#[test]
fn raw_parameterization_round_trips() {
    let (cloud, _) = two_splat_cloud();
    let cfg = ActivationConfig::default();
    let back = FitParams::from_cloud(&cloud, &cfg).to_cloud(&cfg).unwrap();
    for i in 0..cloud.len() {
        assert!((back.positions[i] - cloud.positions[i]).norm() < 1e-12);
        assert!((back.scales[i] - cloud.scales[i]).norm() < 1e-9);
        assert!((back.opacities[i] - cloud.opacities[i]).abs() < 1e-12);
        assert!((back.sh[i][0][0] - cloud.sh[i][0][0]).abs() < 1e-9);
    }
    assert_eq!(back.features, cloud.features);
}

#[test]
fn schedule_warms_up_then_decays() {
    let s = Schedule {
        warmup: 10,
        final_fraction: 0.1,
    };
    assert!((s.factor(0, 100) - 0.1).abs() < 1e-15);
    assert!((s.factor(9, 100) - 1.0).abs() < 1e-15);
    assert!((s.factor(10, 100) - 1.0).abs() < 1e-15);
    assert!((s.factor(100, 100) - 0.1).abs() < 1e-12);
    assert!(s.factor(50, 100) < s.factor(30, 100));
}
