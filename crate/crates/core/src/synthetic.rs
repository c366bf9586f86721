//! Procedural scenes: random clouds and cameras, builtin demo scenes and
//! analytically ray-traced sphere scenes with exact targets.

use nalgebra::{Vector3, Vector4};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::camera::{Camera, Intrinsics};
use crate::error::Result;
use crate::gaussian::{rgb_to_dc, GaussianCloud};
use crate::map::PixelMap;
use crate::palette::{BACKGROUND, NUM_CLASSES};
use crate::sh::{ShCoeffs, SH_BASIS};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Square-pixel intrinsics with the principal point at the image center.
pub fn centered_intrinsics(focal: f64, width: usize, height: usize) -> Intrinsics {
    Intrinsics {
        fx: focal,
        fy: focal,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
    }
}

/// Camera at `eye` looking at the origin.
pub fn camera_towards_origin(eye: Vector3<f64>, focal: f64, width: usize, height: usize) -> Result<Camera> {
    let fwd = -eye.normalize();
    let up = if fwd.y.abs() > 0.95 {
        Vector3::x()
    } else {
        -Vector3::y()
    };
    Camera::look_at(
        eye,
        Vector3::zeros(),
        up,
        centered_intrinsics(focal, width, height),
        width,
        height,
    )
}

/// Cameras evenly spaced in azimuth at a fixed elevation (radians).
pub fn orbit_cameras(
    count: usize,
    radius: f64,
    elevation: f64,
    azimuth_offset: f64,
    focal: f64,
    width: usize,
    height: usize,
) -> Result<Vec<Camera>> {
    (0..count)
        .map(|i| {
            let az = azimuth_offset + 2.0 * std::f64::consts::PI * i as f64 / count as f64;
            let eye = Vector3::new(
                radius * elevation.cos() * az.sin(),
                -radius * elevation.sin(),
                -radius * elevation.cos() * az.cos(),
            );
            camera_towards_origin(eye, focal, width, height)
        })
        .collect()
}

pub fn random_unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        if let Some(u) = v.try_normalize(1e-6) {
            return u;
        }
    }
}

pub fn random_quaternion<R: Rng + ?Sized>(rng: &mut R) -> Vector4<f64> {
    loop {
        let q = Vector4::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = q.norm();
        if n > 1e-3 {
            return q / n;
        }
    }
}

/// Distribution of attributes for [`random_cloud`].
#[derive(Clone, Debug)]
pub struct RandomCloudSpec {
    pub count: usize,
    pub feature_dim: usize,
    /// Positions are uniform in `[-extent, extent]³`.
    pub extent: f64,
    /// Scales are log-uniform in this range.
    pub scale_range: (f64, f64),
    pub opacity_range: (f64, f64),
    /// Base colors are uniform in this range.
    pub color_range: (f64, f64),
    /// Standard deviation of the higher-order SH coefficients.
    pub sh_rest_std: f64,
}

impl Default for RandomCloudSpec {
    fn default() -> Self {
        Self {
            count: 64,
            feature_dim: 8,
            extent: 0.8,
            scale_range: (0.02, 0.15),
            opacity_range: (0.05, 0.95),
            color_range: (0.05, 0.95),
            sh_rest_std: 0.05,
        }
    }
}

pub fn random_cloud<R: Rng + ?Sized>(rng: &mut R, spec: &RandomCloudSpec) -> GaussianCloud {
    let mut cloud = GaussianCloud::empty(spec.feature_dim);
    let (ls0, ls1) = (spec.scale_range.0.ln(), spec.scale_range.1.ln());
    for _ in 0..spec.count {
        let pos = Vector3::new(
            rng.random_range(-spec.extent..=spec.extent),
            rng.random_range(-spec.extent..=spec.extent),
            rng.random_range(-spec.extent..=spec.extent),
        );
        let scale = Vector3::new(
            rng.random_range(ls0..=ls1).exp(),
            rng.random_range(ls0..=ls1).exp(),
            rng.random_range(ls0..=ls1).exp(),
        );
        let opacity = rng.random_range(spec.opacity_range.0..=spec.opacity_range.1);
        let mut sh: ShCoeffs = [[0.0; 3]; SH_BASIS];
        for c in 0..3 {
            sh[0][c] = rgb_to_dc(rng.random_range(spec.color_range.0..=spec.color_range.1));
        }
        for row in sh.iter_mut().skip(1) {
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v = z * spec.sh_rest_std;
            }
        }
        let feature: Vec<f64> = (0..spec.feature_dim).map(|_| StandardNormal.sample(rng)).collect();
        let q = random_quaternion(rng);
        cloud.push(pos, q, scale, opacity, sh, &feature);
    }
    cloud
}

/// Camera on a random direction at a random distance, aimed at the origin.
pub fn random_camera<R: Rng + ?Sized>(
    rng: &mut R,
    width: usize,
    height: usize,
    distance: (f64, f64),
    focal: (f64, f64),
) -> Result<Camera> {
    let dir = random_unit_vector(rng);
    let d = rng.random_range(distance.0..=distance.1);
    let f = rng.random_range(focal.0..=focal.1);
    camera_towards_origin(dir * d, f, width, height)
}

/// A random cloud and camera pair.
#[derive(Clone, Debug)]
pub struct RandomScene {
    pub cloud: GaussianCloud,
    pub camera: Camera,
}

/// Random scene at `width × height` with up to `count` primitives.
pub fn random_scene(seed: u64, count: usize, width: usize, height: usize, feature_dim: usize) -> Result<RandomScene> {
    let mut r = rng(seed);
    let spec = RandomCloudSpec {
        count,
        feature_dim,
        ..Default::default()
    };
    let cloud = random_cloud(&mut r, &spec);
    let w = width as f64;
    let camera = random_camera(&mut r, width, height, (2.5, 4.0), (0.9 * w, 1.4 * w))?;
    Ok(RandomScene { cloud, camera })
}

/// One opaque-ish reddish Gaussian in front of a 32×32 camera.
pub fn single_splat_scene() -> Result<RandomScene> {
    let camera = camera_towards_origin(Vector3::new(0.0, 0.0, -3.0), 32.0, 32, 32)?;
    let mut cloud = GaussianCloud::empty(4);
    let mut sh = [[0.0; 3]; SH_BASIS];
    sh[0] = [rgb_to_dc(0.9), rgb_to_dc(0.2), rgb_to_dc(0.1)];
    cloud.push(
        Vector3::zeros(),
        Vector4::new(1.0, 0.0, 0.0, 0.0),
        Vector3::new(0.3, 0.2, 0.05),
        0.9,
        sh,
        &[1.0, 0.0, 0.5, -0.25],
    );
    Ok(RandomScene { cloud, camera })
}

/// The richer builtin demo scene: 200 random primitives at 64×64.
pub fn demo_scene() -> Result<RandomScene> {
    random_scene(2024, 200, 64, 64, 8)
}

/// Surface appearance of an analytic sphere.
#[derive(Clone, Debug, PartialEq)]
pub enum Texture {
    Solid([f64; 3]),
    /// Smooth color pattern over the surface normal.
    Bands,
}

impl Texture {
    fn color(&self, n: &Vector3<f64>) -> [f64; 3] {
        match self {
            Texture::Solid(c) => *c,
            Texture::Bands => [
                0.5 + 0.3 * (2.0 * n.x + 0.5).sin(),
                0.5 + 0.3 * (2.5 * n.y).cos() * 0.8 + 0.05 * n.z,
                0.45 + 0.3 * (1.5 * n.z - n.x).sin(),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sphere {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub class_id: u32,
    pub texture: Texture,
}

/// Exact targets of one view of a [`SphereScene`].
#[derive(Clone, Debug)]
pub struct SphereView {
    pub camera: Camera,
    /// Supersampled color composited over the background.
    pub color: PixelMap,
    /// Supersampled coverage in `[0, 1]`.
    pub mask: PixelMap,
    /// Class hit by the ray through each pixel center.
    pub labels: Vec<u32>,
    /// One-hot `NUM_CLASSES`-wide features of `labels` (zero on background).
    pub features: PixelMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SphereScene {
    pub spheres: Vec<Sphere>,
    pub background: [f64; 3],
}

impl SphereScene {
    /// One band-textured sphere of radius 0.8 at the origin.
    pub fn textured_sphere() -> Self {
        Self {
            spheres: vec![Sphere {
                center: Vector3::zeros(),
                radius: 0.8,
                class_id: 21,
                texture: Texture::Bands,
            }],
            background: [0.0; 3],
        }
    }

    /// Two solid-colored spheres of classes 3 and 7 side by side.
    pub fn two_blobs() -> Self {
        Self {
            spheres: vec![
                Sphere {
                    center: Vector3::new(-0.5, 0.0, 0.0),
                    radius: 0.42,
                    class_id: 3,
                    texture: Texture::Solid([0.85, 0.2, 0.15]),
                },
                Sphere {
                    center: Vector3::new(0.5, 0.05, 0.1),
                    radius: 0.38,
                    class_id: 7,
                    texture: Texture::Solid([0.15, 0.3, 0.85]),
                },
            ],
            background: [0.0; 3],
        }
    }

    /// Nearest hit along `origin + t·dir`, as `(sphere index, surface normal)`.
    pub fn trace(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(usize, Vector3<f64>)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, s) in self.spheres.iter().enumerate() {
            let oc = origin - s.center;
            let b = oc.dot(dir);
            let c = oc.norm_squared() - s.radius * s.radius;
            let disc = b * b - c;
            if disc < 0.0 {
                continue;
            }
            let t = -b - disc.sqrt();
            if t > 1e-9 && best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, i));
            }
        }
        best.map(|(t, i)| {
            let p = origin + dir * t;
            (i, (p - self.spheres[i].center) / self.spheres[i].radius)
        })
    }

    /// Ray-traces one view with `supersample²` rays per pixel.
    pub fn render_view(&self, camera: &Camera, supersample: usize) -> SphereView {
        let (w, h) = (camera.width, camera.height);
        let origin = camera.center();
        let rt = camera.rotation.transpose();
        let mut color = PixelMap::zeros(h, w, 3);
        let mut mask = PixelMap::zeros(h, w, 1);
        let mut labels = vec![BACKGROUND; w * h];
        let mut features = PixelMap::zeros(h, w, NUM_CLASSES);
        let n_sub = supersample.max(1);
        let inv = 1.0 / (n_sub * n_sub) as f64;
        for v in 0..h {
            for u in 0..w {
                let mut rgb = [0.0; 3];
                let mut cover = 0.0;
                for sy in 0..n_sub {
                    for sx in 0..n_sub {
                        let x = u as f64 + (sx as f64 + 0.5) / n_sub as f64;
                        let y = v as f64 + (sy as f64 + 0.5) / n_sub as f64;
                        let dir = (rt * camera.intrinsics.backproject(x, y)).normalize();
                        let c = match self.trace(&origin, &dir) {
                            Some((i, n)) => {
                                cover += inv;
                                self.spheres[i].texture.color(&n)
                            }
                            None => self.background,
                        };
                        for k in 0..3 {
                            rgb[k] += c[k] * inv;
                        }
                    }
                }
                color.pixel_mut(v, u).copy_from_slice(&rgb);
                mask.data[v * w + u] = cover;
                let dir = (rt * camera.intrinsics.backproject(u as f64 + 0.5, v as f64 + 0.5)).normalize();
                if let Some((i, _)) = self.trace(&origin, &dir) {
                    let id = self.spheres[i].class_id;
                    labels[v * w + u] = id;
                    features.pixel_mut(v, u)[id as usize] = 1.0;
                }
            }
        }
        SphereView {
            camera: camera.clone(),
            color,
            mask,
            labels,
            features,
        }
    }

    /// Noisy surface samples, standing in for a sparse reconstruction, turned
    /// into an initial cloud of mid-gray primitives with random features.
    pub fn initial_cloud<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        count: usize,
        noise: f64,
        scale: f64,
        opacity: f64,
        feature_dim: usize,
    ) -> GaussianCloud {
        let mut cloud = GaussianCloud::empty(feature_dim);
        let total_area: f64 = self.spheres.iter().map(|s| s.radius * s.radius).sum();
        for i in 0..count {
            // allocate samples proportionally to area
            let mut pick = (i as f64 + 0.5) / count as f64 * total_area;
            let mut sphere = &self.spheres[0];
            for s in &self.spheres {
                sphere = s;
                if pick < s.radius * s.radius {
                    break;
                }
                pick -= s.radius * s.radius;
            }
            let n = random_unit_vector(rng);
            let jitter: f64 = StandardNormal.sample(rng);
            let pos = sphere.center + n * (sphere.radius + noise * jitter);
            let feature: Vec<f64> = (0..feature_dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    0.1 * z
                })
                .collect();
            cloud.push(
                pos,
                random_quaternion(rng),
                Vector3::new(scale, scale, scale),
                opacity,
                [[0.0; 3]; SH_BASIS],
                &feature,
            );
        }
        cloud
    }
}
