use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use super::*;
use crate::camera::UnprojectConvention;
use crate::map::PixelMap;
use crate::palette::{ClassPalette, NUM_CLASSES};
use crate::raster::Classifier;
use crate::synthetic::{random_cloud, rng, RandomCloudSpec};
use crate::{Error, GaussianCloud};

fn cloud(seed: u64, count: usize, feature_dim: usize) -> GaussianCloud {
    random_cloud(
        &mut rng(seed),
        &RandomCloudSpec {
            count,
            feature_dim,
            ..Default::default()
        },
    )
}

fn assert_close(a: &GaussianCloud, b: &GaussianCloud) {
    assert_eq!(a.len(), b.len());
    assert_eq!(a.feature_dim, b.feature_dim);
    let rel = |x: f64, y: f64| (x - y).abs() <= 1e-6 * x.abs().max(1.0);
    for i in 0..a.len() {
        assert!(a.positions[i]
            .iter()
            .zip(b.positions[i].iter())
            .all(|(x, y)| rel(*x, *y)));
        assert!(a.rotations[i]
            .iter()
            .zip(b.rotations[i].iter())
            .all(|(x, y)| rel(*x, *y)));
        assert!(a.scales[i].iter().zip(b.scales[i].iter()).all(|(x, y)| rel(*x, *y)));
        assert!(rel(a.opacities[i], b.opacities[i]));
        assert!(a.sh[i]
            .iter()
            .flatten()
            .zip(b.sh[i].iter().flatten())
            .all(|(x, y)| rel(*x, *y)));
    }
    assert!(a.features.iter().zip(&b.features).all(|(x, y)| rel(*x, *y)));
}

#[test]
fn splat_round_trip_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..8 {
        let c0 = cloud(seed, 40, (seed as usize) % 5);
        let p0 = dir.path().join("a.ply");
        write_splat(&p0, &c0, None).unwrap();
        let r1 = read_splat(&p0).unwrap();
        assert_eq!(r1.missing_sidecar, c0.feature_dim == 0);
        assert_close(&c0, &r1.cloud);

        let p1 = dir.path().join("b.ply");
        write_splat(&p1, &r1.cloud, None).unwrap();
        assert_eq!(std::fs::read(&p0).unwrap(), std::fs::read(&p1).unwrap());
        let r2 = read_splat(&p1).unwrap();
        assert_eq!(r2.cloud, r1.cloud);
    }
}

#[test]
fn header_lists_the_standard_layout() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.ply");
    write_splat(&p, &cloud(1, 3, 0), None).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    let end = bytes.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
    let header = std::str::from_utf8(&bytes[..end]).unwrap();
    assert!(header.contains("element vertex 3\n"));
    let props: Vec<&str> = header
        .lines()
        .filter_map(|l| l.strip_prefix("property float "))
        .collect();
    assert_eq!(props.len(), 62);
    assert_eq!(&props[..7], &["x", "y", "z", "nx", "ny", "nz", "f_dc_0"]);
    assert_eq!(props[9], "f_rest_0");
    assert_eq!(
        &props[54..],
        &["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    );
    assert_eq!(bytes.len() - end, 3 * 62 * 4);
    // normals are written as zeros
    let nx = f32::from_le_bytes(bytes[end + 12..end + 16].try_into().unwrap());
    assert_eq!(nx, 0.0);
}

#[test]
fn stored_values_use_inverse_activations() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.ply");
    let mut c = cloud(2, 1, 0);
    c.opacities[0] = 0.5;
    c.scales[0] = nalgebra::Vector3::new(1.0, std::f64::consts::E, 0.5);
    write_splat(&p, &c, None).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    let end = bytes.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
    let f = |k: usize| f32::from_le_bytes(bytes[end + 4 * k..end + 4 * k + 4].try_into().unwrap());
    assert_eq!(f(54), 0.0);
    assert_eq!(f(55), 0.0);
    assert!((f(56) - 1.0).abs() < 1e-6);
    assert!((f(57) - 0.5f32.ln()).abs() < 1e-6);
}

#[test]
fn missing_sidecar_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("e.ply");
    write_splat(&p, &cloud(3, 5, 4), None).unwrap();
    std::fs::remove_file(sidecar_path(&p)).unwrap();
    let r = read_splat(&p).unwrap();
    assert!(r.missing_sidecar);
    assert_eq!(r.cloud.feature_dim, 0);
    assert!(r.cloud.features.is_empty());
}

#[test]
fn sidecar_count_mismatch_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.ply");
    write_splat(&p, &cloud(4, 5, 2), None).unwrap();
    write_sidecar(&sidecar_path(&p), 6, 2, &[0.0; 12], None).unwrap();
    let err = read_splat(&p).unwrap_err();
    assert!(matches!(err, Error::SidecarMismatch { splat: 5, sidecar: 6 }));
    assert!(err.to_string().contains("sidecar mismatch"));
}

#[test]
fn classifier_survives_the_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.ply");
    let c = cloud(5, 7, 3);
    let weight: Vec<f64> = (0..NUM_CLASSES * 3).map(|i| (i as f64 * 0.37).sin()).collect();
    let bias: Vec<f64> = (0..NUM_CLASSES).map(|i| i as f64 * 0.25).collect();
    let clf = Classifier::new(3, weight, bias).unwrap();
    write_splat(&p, &c, Some(&clf)).unwrap();
    let r = read_splat(&p).unwrap();
    let back = r.classifier.unwrap();
    assert!(back.weight.iter().zip(&clf.weight).all(|(a, b)| (a - b).abs() < 1e-6));
    assert_eq!(back.bias, clf.bias);
}

#[test]
fn malformed_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("h.ply");
    write_splat(&p, &cloud(6, 4, 0), None).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
    let err = read_splat(&p).unwrap_err();
    assert!(err.to_string().contains("truncated"), "{err}");

    std::fs::write(&p, b"ply\nformat ascii 1.0\nend_header\n").unwrap();
    assert!(matches!(read_splat(&p), Err(Error::Format { .. })));
    std::fs::write(&p, b"not a ply").unwrap();
    assert!(matches!(read_splat(&p), Err(Error::Format { .. })));

    let side = dir.path().join("bad.feat");
    std::fs::write(&side, b"SSFS\x01\0\0\0\x02\0\0\0\x01\0\0\0\0\0\0\0").unwrap();
    assert!(read_sidecar(&side).unwrap_err().to_string().contains("truncated"));
}

#[test]
fn reader_accepts_doubles_extra_properties_and_no_rest() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("i.ply");
    let mut f = std::fs::File::create(&p).unwrap();
    let names = [
        "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1",
        "rot_2", "rot_3",
    ];
    write!(
        f,
        "ply\nformat binary_little_endian 1.0\ncomment test\nelement vertex 1\n"
    )
    .unwrap();
    for n in names {
        writeln!(f, "property double {n}").unwrap();
    }
    writeln!(f, "property uchar flag\nend_header").unwrap();
    let vals = [1.0, 2.0, 3.0, 0.1, 0.2, 0.3, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0];
    for v in vals {
        f.write_all(&f64::to_le_bytes(v)).unwrap();
    }
    f.write_all(&[7u8]).unwrap();
    drop(f);
    let r = read_splat(&p).unwrap();
    let c = &r.cloud;
    assert_eq!(c.positions[0], nalgebra::Vector3::new(1.0, 2.0, 3.0));
    assert_eq!(c.opacities[0], 0.5);
    assert_eq!(c.scales[0], nalgebra::Vector3::new(1.0, 1.0, 1.0));
    assert_eq!(c.rotations[0], nalgebra::Vector4::new(1.0, 0.0, 0.0, 0.0));
    assert_eq!(c.sh[0][0], [0.1, 0.2, 0.3]);
    assert!(c.sh[0][1..].iter().flatten().all(|v| *v == 0.0));
}

#[test]
fn image_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("black.png");
    write_image(&p, &PixelMap::zeros(4, 5, 3)).unwrap();
    let back = read_image(&p).unwrap();
    assert_eq!((back.height, back.width), (4, 5));
    assert!(back.data.iter().all(|v| *v == 0.0));

    let gray = PixelMap::from_fn(3, 3, 1, |v, u, px| px[0] = (v * 3 + u) as f64 / 8.0);
    let p = dir.path().join("gray.png");
    write_image(&p, &gray).unwrap();
    let back = read_gray(&p).unwrap();
    assert!(back
        .data
        .iter()
        .zip(&gray.data)
        .all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
    assert!(write_image(&p, &PixelMap::zeros(2, 2, 2)).is_err());

    let palette = ClassPalette::body_parts();
    let p = dir.path().join("labels.png");
    write_label_map(&p, &[0; 12], 4, 3, &palette).unwrap();
    let img = read_image(&p).unwrap();
    let bg = palette.color(0).unwrap();
    for px in img.pixels() {
        let rgb: Vec<u8> = px.iter().map(|v| (v * 255.0).round() as u8).collect();
        assert_eq!(rgb, bg);
    }

    let ids: Vec<u32> = (0..30).map(|i| (i * 7 % 28) as u32).collect();
    let p = dir.path().join("ids.png");
    write_label_ids(&p, &ids, 6, 5).unwrap();
    assert_eq!(read_label_ids(&p).unwrap(), (ids, 6, 5));
    assert!(write_label_map(&p, &[28], 1, 1, &palette).is_err());
    assert!(write_label_ids(&p, &[0, 1], 3, 1).is_err());
}

#[test]
fn npy_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.npy");
    let t = Tensor::new(vec![2, 3, 4], (0..24).map(|i| i as f64 * 0.1 - 1.0).collect()).unwrap();
    write_npy(&p, &t).unwrap();
    assert_eq!(read_npy(&p).unwrap(), t);
    assert_eq!(t.to_map().unwrap().at(1, 2, 3), t.data[23]);

    use ndarray_npy::WriteNpyExt;
    let p32 = dir.path().join("f32.npy");
    let a = ndarray::Array2::<f32>::from_shape_fn((2, 2), |(i, j)| (i * 2 + j) as f32 * 0.5);
    a.write_npy(std::fs::File::create(&p32).unwrap()).unwrap();
    let back = read_npy(&p32).unwrap();
    assert_eq!(back.shape, vec![2, 2]);
    assert_eq!(back.data, vec![0.0, 0.5, 1.0, 1.5]);
}

#[test]
fn tensor_archive_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.ssta");
    let mut ar = TensorArchive::default();
    ar.meta = serde_json::json!({ "note": "x" });
    let m = DMatrix::from_fn(3, 2, |i, j| (i * 10 + j) as f64 + 0.125);
    ar.insert("m", Tensor::from_matrix(&m));
    ar.insert(
        "v",
        Tensor::new(vec![4], vec![f64::MIN_POSITIVE, -0.0, 1e300, 3.0]).unwrap(),
    );
    ar.write(&p).unwrap();
    let back = TensorArchive::read(&p).unwrap();
    assert_eq!(back, ar);
    assert_eq!(back.get("m").unwrap().to_matrix().unwrap(), m);
    assert!(back.get("missing").is_err());
    std::fs::write(&p, b"XXXX").unwrap();
    assert!(matches!(TensorArchive::read(&p), Err(Error::Format { .. })));
}

const CONFIG: &str = r#"{
  "cameras": [
    { "K": [[32, 0, 16], [0, 32, 16], [0, 0, 1]],
      "R": [[1, 0, 0], [0, 1, 0], [0, 0, 1]],
      "t": [0, 0, 3], "width": 32, "height": 32 }
  ],
  "views": [ { "camera": 0, "image": "img/view0.png" } ],
  "splat": "scene.ply",
  "loss": { "lambda_mask": 0.5 },
  "render": { "tile_size": 8 },
  "activation": { "s_max": 0.1 },
  "fit": { "steps": 10, "adam": { "beta1": 0.8 } },
  "unproject": { "half_pixel": false, "convention": "literal" }
}"#;

#[test]
fn config_parses_and_resolves_paths() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("scene.json");
    std::fs::write(&p, CONFIG).unwrap();
    let cfg = SceneConfig::load(&p).unwrap();
    assert_eq!(cfg.loss.lambda_mask, 0.5);
    assert_eq!(cfg.render.tile_size, 8);
    assert_eq!(cfg.activation.s_max, 0.1);
    assert_eq!(cfg.fit.steps, 10);
    assert_eq!(cfg.fit.adam.beta1, 0.8);
    assert_eq!(cfg.unproject.convention, UnprojectConvention::Literal);
    let cams = cfg.cameras().unwrap();
    assert_eq!(cams[0].intrinsics.fx, 32.0);
    assert_eq!(
        cfg.resolve(cfg.views[0].image.as_deref().unwrap()),
        dir.path().join("img/view0.png")
    );
    assert_eq!(cfg.resolve(Path::new("/abs/x.ply")), Path::new("/abs/x.ply"));
    // serialized configs parse back
    let again = SceneConfig::parse(&cfg.to_json().unwrap()).unwrap();
    assert_eq!(again.cameras, cfg.cameras);
}

#[test]
fn config_rejects_unknown_keys_everywhere() {
    let cases = [
        ("\"splat\": \"scene.ply\"", "\"splat\": \"scene.ply\", \"bogus\": 1"),
        ("\"t\": [0, 0, 3]", "\"t\": [0, 0, 3], \"skew\": 0"),
        (
            "\"image\": \"img/view0.png\"",
            "\"image\": \"img/view0.png\", \"depth_png\": \"d\"",
        ),
        ("\"lambda_mask\": 0.5", "\"lambda_mask\": 0.5, \"lambda_lpips\": 1"),
        ("\"tile_size\": 8", "\"tile_size\": 8, \"tiles\": 2"),
        ("\"s_max\": 0.1", "\"s_max\": 0.1, \"s_mid\": 0.05"),
        ("\"beta1\": 0.8", "\"beta1\": 0.8, \"beta3\": 0.1"),
        ("\"half_pixel\": false", "\"half_pixel\": false, \"shift\": 1"),
    ];
    for (from, to) in cases {
        let text = CONFIG.replace(from, to);
        assert_ne!(text, CONFIG);
        let err = SceneConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("unknown field"), "{err}");
        assert!(err.contains("line"), "{err}");
    }
    assert!(SceneConfig::parse(&CONFIG.replace("\"camera\": 0", "\"camera\": 3")).is_err());
    assert!(SceneConfig::parse(&CONFIG.replace("[0, 0, 1]]", "[0, 1, 1]]"))
        .unwrap()
        .cameras()
        .is_err());
}
