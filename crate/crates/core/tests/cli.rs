//! End-to-end runs of the command-line front end.

use std::fs;
use std::path::Path;
use std::process::Command;

use semsplat::cli::run;
use semsplat::io::{read_npy, read_splat, write_image, write_label_ids, write_npy, CameraConfig, Tensor};
use semsplat::synthetic::{orbit_cameras, SphereScene};

fn args(list: &[&str]) -> Vec<String> {
    std::iter::once("semsplat")
        .chain(list.iter().copied())
        .map(String::from)
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gradcheck_on_the_builtin_scene_passes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(args(&["gradcheck", "--seed", "7", "--out", s(dir.path())])), 0);
    let text = fs::read_to_string(dir.path().join("gradcheck.json")).unwrap();
    let reports: serde_json::Value = serde_json::from_str(&text).unwrap();
    for r in reports.as_array().unwrap() {
        assert!(r["max_rel_error"].as_f64().unwrap() <= 1e-3, "{r}");
    }
}

#[test]
fn render_outputs_do_not_depend_on_threads_or_tiles() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for (threads, tile) in [("1", "8"), ("2", "16"), ("4", "32")] {
        let out = dir.path().join(format!("t{threads}"));
        let code = run(args(&[
            "render",
            "--scene",
            "demo",
            "--threads",
            threads,
            "--tile-size",
            tile,
            "--out",
            s(&out),
        ]));
        assert_eq!(code, 0);
        let files: Vec<Vec<u8>> = [
            "view0_color.png",
            "view0_depth.npy",
            "view0_feature.npy",
            "view0_alpha.png",
        ]
        .iter()
        .map(|f| fs::read(out.join(f)).unwrap())
        .collect();
        outputs.push(files);
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn metrics_of_identical_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let view = SphereScene::two_blobs().render_view(&orbit_cameras(1, 3.0, 0.2, 0.0, 60.0, 32, 32).unwrap()[0], 1);
    let img = dir.path().join("a.png");
    let lab = dir.path().join("l.png");
    write_image(&img, &view.color).unwrap();
    write_label_ids(&lab, &view.labels, 32, 32).unwrap();
    let out = dir.path().join("m");
    let code = run(args(&[
        "metrics",
        "--pred",
        s(&img),
        "--gt",
        s(&img),
        "--pred-labels",
        s(&lab),
        "--gt-labels",
        s(&lab),
        "--out",
        s(&out),
    ]));
    assert_eq!(code, 0);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["psnr"].as_f64(), Some(100.0));
    assert_eq!(m["miou"].as_f64(), Some(1.0));
    assert_eq!(m["macc"].as_f64(), Some(1.0));
    assert!((m["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(fs::read_to_string(out.join("metrics.csv"))
        .unwrap()
        .starts_with("metric,value\n"));
}

/// Writes a one-view config around a ray-traced two-blob view.
fn write_scene(dir: &Path) -> std::path::PathBuf {
    let cam = orbit_cameras(1, 3.0, 0.3, 0.2, 40.0, 24, 24).unwrap().remove(0);
    let view = SphereScene::two_blobs().render_view(&cam, 2);
    write_image(&dir.join("image.png"), &view.color).unwrap();
    write_image(&dir.join("mask.png"), &view.mask).unwrap();
    write_label_ids(&dir.join("labels.png"), &view.labels, 24, 24).unwrap();
    write_npy(&dir.join("features.npy"), &Tensor::from_map(&view.features)).unwrap();
    let cfg = serde_json::json!({
        "cameras": [CameraConfig::from_camera(&cam)],
        "views": [{"camera": 0, "image": "image.png", "mask": "mask.png", "labels": "labels.png", "features": "features.npy"}],
        "fit": {"steps": 15, "initial_count": 40, "initial_radius": 0.6},
        "activation": {"s_max": 0.1}
    });
    let path = dir.join("scene.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn fit_then_render_then_unproject_from_a_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_scene(dir.path());
    let out = dir.path().join("fit");
    assert_eq!(
        run(args(&["--config", s(&cfg), "fit", "--seed", "3", "--out", s(&out)])),
        0
    );
    let csv = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 16);
    let fitted = read_splat(&out.join("fit.ply")).unwrap();
    assert_eq!(fitted.cloud.len(), 40);
    assert_eq!(fitted.cloud.feature_dim, 28);
    assert!(fitted.classifier.is_some(), "labeled fits store the identity head");

    let rendered = dir.path().join("render");
    let splat = out.join("fit.ply");
    assert_eq!(
        run(args(&[
            "--config",
            s(&cfg),
            "render",
            "--splat",
            s(&splat),
            "--out",
            s(&rendered)
        ])),
        0
    );
    for f in [
        "view0_color.png",
        "view0_labels.png",
        "view0_label_ids.png",
        "view0_feature.npy",
        "view0_depth.npy",
    ] {
        assert!(rendered.join(f).exists(), "{f}");
    }

    let depth = rendered.join("view0_depth.npy");
    let pts = dir.path().join("points");
    let code = run(args(&[
        "--config",
        s(&cfg),
        "unproject",
        "--depth",
        s(&depth),
        "--mask",
        s(&rendered.join("view0_alpha.png")),
        "--out",
        s(&pts),
    ]));
    assert_eq!(code, 0);
    let positions = read_npy(&pts.join("positions.npy")).unwrap();
    assert_eq!(positions.shape[1], 3);
    assert!(positions.shape[0] > 0);
    assert_eq!(
        read_splat(&pts.join("points.ply")).unwrap().cloud.len(),
        positions.shape[0]
    );
}

#[test]
fn unproject_flags_change_the_convention() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_scene(dir.path());
    let depth = dir.path().join("d.npy");
    write_npy(&depth, &Tensor::new(vec![24, 24], vec![2.5; 576]).unwrap()).unwrap();
    let mut results = Vec::new();
    for extra in [&[][..], &["--no-half-pixel"][..], &["--eq1-literal"][..]] {
        let out = dir.path().join(format!("u{}", results.len()));
        let mut a = vec!["--config", s(&cfg), "unproject", "--depth", s(&depth), "--out", s(&out)];
        a.extend_from_slice(extra);
        assert_eq!(run(args(&a)), 0);
        results.push(read_npy(&out.join("positions.npy")).unwrap().data);
    }
    // the view's mask applies by default
    assert!(!results[0].is_empty() && results[0].len() < 576 * 3);
    assert!(results.iter().all(|r| r.len() == results[0].len()));
    assert_ne!(results[0], results[1]);
    assert_ne!(results[0], results[2]);
}

#[test]
fn lift_averages_heads_and_matches_uniform_weights() {
    let dir = tempfile::tempdir().unwrap();
    let t = 6;
    let d = 5;
    // two heads whose mean is uniform
    let mut w = vec![0.0; 2 * t * t];
    for i in 0..t {
        for j in 0..t {
            let u = 1.0 / t as f64;
            let bump = if j == i {
                0.1
            } else if j == (i + 1) % t {
                -0.1
            } else {
                0.0
            };
            w[i * t + j] = u + bump;
            w[t * t + i * t + j] = u - bump;
        }
    }
    let feats: Vec<f64> = (0..t * d).map(|k| (k as f64 * 0.37).sin()).collect();
    let wp = dir.path().join("w.npy");
    let fp = dir.path().join("f.npy");
    write_npy(&wp, &Tensor::new(vec![2, t, t], w).unwrap()).unwrap();
    write_npy(&fp, &Tensor::new(vec![t, d], feats.clone()).unwrap()).unwrap();
    let out = dir.path().join("o");
    assert_eq!(
        run(args(&[
            "lift",
            "--weights",
            s(&wp),
            "--features",
            s(&fp),
            "--out",
            s(&out)
        ])),
        0
    );
    let lifted = read_npy(&out.join("lifted.npy")).unwrap();
    assert_eq!(lifted.shape, vec![t, d]);
    for c in 0..d {
        let mean = (0..t).map(|r| feats[r * d + c]).sum::<f64>() / t as f64;
        for r in 0..t {
            assert!((lifted.data[r * d + c] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(args(&["render", "--no-such-flag"])), 2);
    assert_eq!(run(args(&["teleport"])), 2);
    let missing = dir.path().join("nope.npy");
    assert_eq!(
        run(args(&["lift", "--weights", s(&missing), "--features", s(&missing)])),
        1
    );
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\n  \"render\": {\"tile_size\": 8, \"tiles\": 2}\n}").unwrap();
    assert_eq!(run(args(&["--config", s(&bad), "gradcheck"])), 1);
    assert_eq!(run(args(&["metrics", "--out", s(dir.path())])), 1);
}

#[test]
fn the_binary_reports_usage_errors_with_code_2() {
    let st = Command::new(env!("CARGO_BIN_EXE_semsplat"))
        .arg("--definitely-not-a-flag")
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));
    let st = Command::new(env!("CARGO_BIN_EXE_semsplat"))
        .args(["render", "--hash-only"])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
}
