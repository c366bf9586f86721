use nalgebra::{Matrix3, Vector3, Vector4};
use proptest::prelude::*;

use super::*;
use crate::camera::Intrinsics;
use crate::gaussian::{covariance_from, rgb_to_dc};
use crate::palette::NUM_CLASSES;
use crate::sh::{eval_sh, SH_BASIS};
use crate::synthetic::{random_scene, single_splat_scene};

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

fn gray_sh(v: f64) -> [[f64; 3]; SH_BASIS] {
    let mut sh = [[0.0; 3]; SH_BASIS];
    sh[0] = [rgb_to_dc(v); 3];
    sh
}

fn splat(cloud: &mut GaussianCloud, pos: Vector3<f64>, scale: f64, opacity: f64, gray: f64, feature: &[f64]) {
    cloud.push(
        pos,
        Vector4::new(1.0, 0.0, 0.0, 0.0),
        Vector3::new(scale, scale, scale),
        opacity,
        gray_sh(gray),
        feature,
    );
}

#[test]
fn composite_examples() {
    let (p, t) = composite_fragments([(1.0, &[2.0, 3.0][..])], 2);
    assert_eq!((p, t), (vec![2.0, 3.0], 0.0));
    let (p, t) = composite_fragments([(0.0, &[2.0][..]), (0.0, &[5.0][..])], 1);
    assert_eq!((p, t), (vec![0.0], 1.0));
    let p1 = [1.0, 0.0];
    let p2 = [0.0, 1.0];
    let (p, t) = composite_fragments([(0.25, &p1[..]), (0.5, &p2[..])], 2);
    assert_eq!(p, vec![0.25, 0.375]);
    assert_eq!(t, 0.375);
}

#[test]
fn single_splat_center_pixel_saturates_at_clamp() {
    // one pixel whose center sits exactly on the projected mean
    let cam = pinhole(1, 1, 10.0);
    let mut cloud = GaussianCloud::empty(0);
    splat(&mut cloud, Vector3::new(0.0, 0.0, 2.0), 0.1, 1.0, 0.8, &[]);
    let out = render(&cloud, &cam, &RenderSettings::default()).unwrap();
    // fragment opacity is clamped to 0.99
    assert!((out.alpha.data[0] - MAX_FRAGMENT_ALPHA).abs() < 1e-15);
    assert!((out.color.data[0] - MAX_FRAGMENT_ALPHA * 0.8).abs() < 1e-12);
}

#[test]
fn two_stacked_half_transparent_fragments() {
    let cam = pinhole(1, 1, 10.0);
    let mut cloud = GaussianCloud::empty(0);
    splat(&mut cloud, Vector3::new(0.0, 0.0, 3.0), 0.1, 0.5, 0.0, &[]);
    splat(&mut cloud, Vector3::new(0.0, 0.0, 2.0), 0.1, 0.5, 1.0, &[]);
    let out = render(&cloud, &cam, &RenderSettings::default()).unwrap();
    assert!((out.color.data[0] - 0.5).abs() < 1e-12);
    assert!((out.alpha.data[0] - 0.75).abs() < 1e-15);
}

#[test]
fn empty_cloud_renders_background() {
    let cam = pinhole(8, 6, 10.0);
    let settings = RenderSettings {
        background: [0.2, 0.4, 0.6],
        ..Default::default()
    };
    let cloud = GaussianCloud::empty(5);
    let out = render(&cloud, &cam, &settings).unwrap();
    for px in out.color.pixels() {
        assert_eq!(px, &[0.2, 0.4, 0.6]);
    }
    assert!(out.alpha.data.iter().all(|&a| a == 0.0));
    assert_eq!(out.feature.channels, 5);
    assert_eq!(out, render_reference(&cloud, &cam, &settings).unwrap());
}

#[test]
fn single_splat_matches_reference_bitwise_without_early_stop() {
    let scene = single_splat_scene().unwrap();
    let settings = RenderSettings {
        early_stop: 0.0,
        ..Default::default()
    };
    let a = render(&scene.cloud, &scene.camera, &settings).unwrap();
    let b = render_reference(&scene.cloud, &scene.camera, &settings).unwrap();
    assert_eq!(a, b);
}

#[test]
fn matches_reference_on_random_scenes() {
    for seed in 0..4 {
        let scene = random_scene(seed, 96, 32, 32, 4).unwrap();
        let settings = RenderSettings::default();
        let a = render(&scene.cloud, &scene.camera, &settings).unwrap();
        let b = render_reference(&scene.cloud, &scene.camera, &settings).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-5, "seed {seed}: {}", a.max_abs_diff(&b));
    }
}

#[test]
fn output_is_independent_of_tile_size() {
    let scene = random_scene(11, 80, 40, 24, 3).unwrap();
    let base = render(&scene.cloud, &scene.camera, &RenderSettings::default()).unwrap();
    for ts in [1, 3, 8, 32, 64] {
        let s = RenderSettings {
            tile_size: ts,
            ..Default::default()
        };
        assert_eq!(render(&scene.cloud, &scene.camera, &s).unwrap(), base, "tile size {ts}");
    }
}

#[test]
fn permutation_leaves_output_unchanged() {
    let scene = random_scene(3, 60, 24, 24, 2).unwrap();
    let n = scene.cloud.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.reverse();
    order.swap(3, 17);
    let mut shuffled = GaussianCloud::empty(scene.cloud.feature_dim);
    for &i in &order {
        let c = &scene.cloud;
        shuffled.push(
            c.positions[i],
            c.rotations[i],
            c.scales[i],
            c.opacities[i],
            c.sh[i],
            c.feature(i),
        );
    }
    let s = RenderSettings::default();
    let a = render(&scene.cloud, &scene.camera, &s).unwrap();
    let b = render(&shuffled, &scene.camera, &s).unwrap();
    assert_eq!(a, b);
}

#[test]
fn features_blend_linearly() {
    let scene = random_scene(8, 50, 24, 24, 3).unwrap();
    let s = RenderSettings::default();
    let mut f2 = scene.cloud.clone();
    for (i, v) in f2.features.iter_mut().enumerate() {
        *v = ((i * 7) as f64).cos();
    }
    let (a, b) = (1.7, -0.6);
    let mut mix = scene.cloud.clone();
    for i in 0..mix.features.len() {
        mix.features[i] = a * scene.cloud.features[i] + b * f2.features[i];
    }
    let r1 = render(&scene.cloud, &scene.camera, &s).unwrap();
    let r2 = render(&f2, &scene.camera, &s).unwrap();
    let rm = render(&mix, &scene.camera, &s).unwrap();
    for i in 0..rm.feature.data.len() {
        let lin = a * r1.feature.data[i] + b * r2.feature.data[i];
        assert!((rm.feature.data[i] - lin).abs() < 1e-5);
    }
}

#[test]
fn feature_projection_matrix_is_applied_before_blending() {
    let scene = random_scene(21, 30, 16, 16, 3).unwrap();
    let m = vec![1.0, 0.0, 2.0, 0.0, -1.0, 0.5];
    let proj = RenderSettings {
        feature_projection: FeatureProjection::Matrix {
            rows: 2,
            cols: 3,
            data: m.clone(),
        },
        ..Default::default()
    };
    let full = render(&scene.cloud, &scene.camera, &RenderSettings::default()).unwrap();
    let projected = render(&scene.cloud, &scene.camera, &proj).unwrap();
    assert_eq!(projected.feature.channels, 2);
    for (f, p) in full.feature.pixels().zip(projected.feature.pixels()) {
        let e0 = f[0] + 2.0 * f[2];
        let e1 = -f[1] + 0.5 * f[2];
        assert!((p[0] - e0).abs() < 1e-9 && (p[1] - e1).abs() < 1e-9);
    }
    let trunc = RenderSettings {
        feature_projection: FeatureProjection::Truncate(2),
        ..Default::default()
    };
    let t = render(&scene.cloud, &scene.camera, &trunc).unwrap();
    assert_eq!(t.feature, full.feature.slice_channels(0, 2));
    let too_wide = RenderSettings {
        feature_projection: FeatureProjection::Truncate(4),
        ..Default::default()
    };
    assert!(render(&scene.cloud, &scene.camera, &too_wide).is_err());
}

#[test]
fn normals_face_the_camera_and_are_unit_on_full_coverage() {
    let cam = pinhole(1, 1, 10.0);
    let mut cloud = GaussianCloud::empty(0);
    let h = std::f64::consts::FRAC_1_SQRT_2;
    // shortest axis is local z rotated 90° about x -> world ±y
    cloud.push(
        Vector3::new(0.0, 0.0, 2.0),
        Vector4::new(h, h, 0.0, 0.0),
        Vector3::new(0.2, 0.3, 0.01),
        0.9,
        gray_sh(0.5),
        &[],
    );
    let out = render(&cloud, &cam, &RenderSettings::default()).unwrap();
    let n = out.normal.pixel(0, 0);
    let a = out.alpha.data[0];
    assert!((n[0] / a).abs() < 1e-12 && (n[2] / a).abs() < 1e-12);
    assert!(((n[1] / a).abs() - 1.0).abs() < 1e-12);
    let eye = cam.center();
    let pn = primitive_normal(&cloud, 0, &eye);
    assert!(pn.dot(&(eye - cloud.positions[0])) >= 0.0);
}

/// Independent per-pixel evaluation built only from the public camera and
/// covariance operations.
fn brute_force_weights(cloud: &GaussianCloud, cam: &Camera, x: usize, y: usize) -> Vec<(usize, f64)> {
    let mut frags = Vec::new();
    for i in 0..cloud.len() {
        let cov = covariance_from(&cloud.rotations[i], &cloud.scales[i]);
        let Ok(g) = cam.project_covariance(&cloud.positions[i], &cov) else {
            continue;
        };
        let inv = g.cov2d.try_inverse().unwrap();
        let d = nalgebra::Vector2::new(x as f64 + 0.5, y as f64 + 0.5) - g.mean2d;
        let alpha = (cloud.opacities[i] * (-0.5 * (d.transpose() * inv * d)[0]).exp()).min(0.99);
        if alpha >= 1.0 / 255.0 {
            frags.push((g.depth, i, alpha));
        }
    }
    frags.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut t = 1.0;
    frags
        .into_iter()
        .map(|(_, i, a)| {
            let w = a * t;
            t *= 1.0 - a;
            (i, w)
        })
        .collect()
}

#[test]
fn brute_force_oracle_agrees_on_color() {
    let scene = random_scene(4, 40, 20, 20, 0).unwrap();
    let settings = RenderSettings {
        early_stop: 0.0,
        ..Default::default()
    };
    let out = render(&scene.cloud, &scene.camera, &settings).unwrap();
    let eye = scene.camera.center();
    for y in 0..20 {
        for x in 0..20 {
            let mut rgb = [0.0; 3];
            for (i, w) in brute_force_weights(&scene.cloud, &scene.camera, x, y) {
                let c = eval_sh(&scene.cloud.sh[i], &(scene.cloud.positions[i] - eye).normalize());
                for k in 0..3 {
                    rgb[k] += w * c[k].clamp(0.0, 1.0);
                }
            }
            for k in 0..3 {
                assert!((out.color.pixel(y, x)[k] - rgb[k]).abs() < 1e-9);
            }
        }
    }
}

fn one_hot(k: usize) -> Vec<f64> {
    let mut v = vec![0.0; NUM_CLASSES];
    v[k] = 1.0;
    v
}

#[test]
fn one_hot_features_label_every_foreground_pixel() {
    let cam = pinhole(16, 16, 16.0);
    let mut cloud = GaussianCloud::empty(NUM_CLASSES);
    for j in 0..5 {
        splat(
            &mut cloud,
            Vector3::new(-0.3 + 0.15 * j as f64, 0.05 * j as f64, 2.0 + 0.1 * j as f64),
            0.2,
            0.9,
            0.5,
            &one_hot(12),
        );
    }
    let r = render_labels(&cloud, &cam, &RenderSettings::default(), &Classifier::identity()).unwrap();
    let mut fg = 0;
    for (i, &l) in r.labels.iter().enumerate() {
        if r.output.alpha.data[i] >= 0.5 {
            assert_eq!(l, 12);
            fg += 1;
        } else {
            assert_eq!(l, 0);
        }
    }
    assert!(fg > 20);
    assert!(r.output.label_logits.is_some());
}

#[test]
fn empty_scene_labels_background() {
    let cam = pinhole(8, 8, 8.0);
    let r = render_labels(
        &GaussianCloud::empty(NUM_CLASSES),
        &cam,
        &RenderSettings::default(),
        &Classifier::identity(),
    )
    .unwrap();
    assert!(r.labels.iter().all(|&l| l == 0));
}

#[test]
fn two_separated_clouds_partition_by_coverage() {
    let cam = pinhole(24, 16, 20.0);
    let mut cloud = GaussianCloud::empty(NUM_CLASSES);
    for j in 0..4 {
        let dy = 0.1 * j as f64 - 0.15;
        splat(&mut cloud, Vector3::new(-0.5, dy, 2.5), 0.12, 0.8, 0.5, &one_hot(3));
        splat(&mut cloud, Vector3::new(0.45, dy, 2.2), 0.1, 0.85, 0.5, &one_hot(7));
    }
    let settings = RenderSettings {
        early_stop: 0.0,
        ..Default::default()
    };
    let r = render_labels(&cloud, &cam, &settings, &Classifier::identity()).unwrap();
    let mut seen = [0usize; NUM_CLASSES];
    for y in 0..16 {
        for x in 0..24 {
            let weights = brute_force_weights(&cloud, &cam, x, y);
            let mut mass = [0.0; NUM_CLASSES];
            let mut alpha = 0.0;
            for (i, w) in weights {
                alpha += w;
                for k in 0..NUM_CLASSES {
                    mass[k] += w * cloud.feature(i)[k];
                }
            }
            let expect = if alpha < 0.5 {
                0
            } else {
                (0..NUM_CLASSES).fold(0, |b, k| if mass[k] > mass[b] { k } else { b })
            };
            assert_eq!(r.labels[y * 24 + x] as usize, expect, "pixel ({x}, {y})");
            seen[expect] += 1;
        }
    }
    assert!(seen[3] > 0 && seen[7] > 0 && seen[0] > 0);
    assert_eq!(seen[3] + seen[7] + seen[0], 24 * 16);
}

#[test]
fn classifier_dimension_mismatch_is_an_error() {
    let scene = random_scene(1, 5, 8, 8, 4).unwrap();
    let err = render_labels(
        &scene.cloud,
        &scene.camera,
        &RenderSettings::default(),
        &Classifier::identity(),
    );
    assert!(err.is_err());
}

proptest! {
    #[test]
    fn compositing_weights_are_well_formed(alphas in prop::collection::vec(0.0f64..=0.99, 0..64)) {
        let ones = [1.0];
        let (acc, t) = composite_fragments(alphas.iter().map(|&a| (a, &ones[..])), 1);
        let mut trans = 1.0;
        let mut sum = 0.0;
        for &a in &alphas {
            let w = a * trans;
            prop_assert!((0.0..=1.0).contains(&w));
            let next = trans * (1.0 - a);
            prop_assert!(next <= trans);
            trans = next;
            sum += w;
        }
        prop_assert!(sum <= 1.0 + 1e-12);
        prop_assert!(((1.0 - t) - acc[0]).abs() <= 1e-6);
        prop_assert!((acc[0] - sum).abs() <= 1e-12);
    }
}
