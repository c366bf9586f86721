//! Command-line front end: `render`, `fit`, `gradcheck`, `unproject`,
//! `metrics` and `lift`.
//!
//! Usage errors exit with 2, validation and runtime failures with 1.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, Vector3, Vector4};
use serde_json::json;

use crate::attention::{cross_attn_reuse, AttentionCache, LiftSource};
use crate::benchmark::SphereExperiment;
use crate::camera::{Camera, UnprojectConvention, UnprojectOptions};
use crate::error::{shape_err, Error, Result};
use crate::gaussian::{rgb_to_dc, GaussianCloud};
use crate::grad::{check_all, optimize_cloud_with, FitConfig, FitView, GradScene};
use crate::io::{
    normal_to_display, normalize_for_display, read_gray, read_image, read_label_ids, read_npy, read_splat, write_image,
    write_label_ids, write_label_map, write_npy, write_splat, SceneConfig, Tensor, TensorArchive,
};
use crate::map::PixelMap;
use crate::metrics::{psnr, seg_scores, ssim};
use crate::palette::{ClassPalette, NUM_CLASSES};
use crate::raster::{labels_from_logits, render, Classifier, RenderConfig, RenderSettings};
use crate::sh::SH_BASIS;
use crate::synthetic::{demo_scene, random_cloud, rng, single_splat_scene, RandomCloudSpec};

#[derive(Parser, Debug)]
#[command(name = "semsplat", version, about = "Semantic Gaussian splatting engine")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// Scene configuration (JSON). Unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[arg(long, global = true)]
    tile_size: Option<usize>,
    /// Put pixel samples at integer coordinates instead of pixel centers.
    #[arg(long, global = true)]
    no_half_pixel: bool,
    /// Unproject as `Rᵀ·K⁻¹p·D − t + Δ`, for cameras exported that way.
    #[arg(long, global = true)]
    eq1_literal: bool,
    /// Feature channels: rendered channels for `render`, primitive features
    /// for `gradcheck` and randomly initialized fits.
    #[arg(long, global = true)]
    feature_dim: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a splat through every configured camera, or a builtin scene.
    Render(RenderArgs),
    /// Optimize a cloud against target views.
    Fit(FitArgs),
    /// Compare analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Lift a depth map (plus offsets) to world-space points.
    Unproject(UnprojectArgs),
    /// Score predicted images and label maps against ground truth.
    Metrics(MetricsArgs),
    /// Lift external features with cached attention weights.
    Lift(LiftArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RenderScene {
    /// One Gaussian at 32×32.
    Single,
    /// 200 random Gaussians at 64×64.
    Demo,
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Builtin scene used when no config is given.
    #[arg(long, value_enum, default_value = "single")]
    scene: RenderScene,
    /// Splat file; overrides the config's `splat`.
    #[arg(long)]
    splat: Option<PathBuf>,
    /// Print hashes without writing images.
    #[arg(long)]
    hash_only: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FitScene {
    /// Textured sphere, color and mask supervision.
    Sphere,
    /// Two colored blobs with one-hot class features.
    TwoBlobs,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Builtin experiment used when no config is given.
    #[arg(long, value_enum, default_value = "sphere")]
    scene: FitScene,
    #[arg(long)]
    steps: Option<usize>,
    /// Initial splat; overrides the config's `splat`.
    #[arg(long)]
    splat: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 16)]
    count: usize,
    /// Image side length of the random scene.
    #[arg(long, default_value_t = 16)]
    size: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    /// Check this splat through the first configured camera instead of a
    /// random scene.
    #[arg(long)]
    splat: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct UnprojectArgs {
    /// Config view whose camera (and default inputs) to use.
    #[arg(long, default_value_t = 0)]
    view: usize,
    /// `H × W` depth `.npy`.
    #[arg(long)]
    depth: Option<PathBuf>,
    /// `H × W × 3` offset `.npy`.
    #[arg(long)]
    offsets: Option<PathBuf>,
    /// Grayscale mask; pixels below one half are skipped.
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long, requires = "gt")]
    pred: Option<PathBuf>,
    #[arg(long, requires = "pred")]
    gt: Option<PathBuf>,
    /// Predicted class ids (grayscale PNG).
    #[arg(long, requires = "gt_labels")]
    pred_labels: Option<PathBuf>,
    #[arg(long, requires = "pred_labels")]
    gt_labels: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LiftSourceArg {
    Last,
    Average,
}

#[derive(Args, Debug)]
struct LiftArgs {
    /// `T × T` or `heads × T × T` `.npy`, or an attention cache archive.
    #[arg(long)]
    weights: PathBuf,
    /// `T × d` or `h × w × d` `.npy`.
    #[arg(long)]
    features: PathBuf,
    /// Which cached block feeds the lift (archives only).
    #[arg(long, value_enum, default_value = "last")]
    source: LiftSourceArg,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(cli: Cli) -> Result<i32> {
    let g = cli.global;
    let cfg = match &g.config {
        Some(p) => Some(SceneConfig::load(p)?),
        None => None,
    };
    if let Some(t) = g.tile_size {
        if t == 0 {
            return Err(Error::Invalid("--tile-size must be positive".into()));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(g.threads)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Render(a) => cmd_render(&g, cfg.as_ref(), a),
        Command::Fit(a) => cmd_fit(&g, cfg.as_ref(), a),
        Command::Gradcheck(a) => cmd_gradcheck(&g, cfg.as_ref(), a),
        Command::Unproject(a) => cmd_unproject(&g, cfg.as_ref(), a),
        Command::Metrics(a) => cmd_metrics(&g, a),
        Command::Lift(a) => cmd_lift(&g, a),
    })
}

fn render_settings(g: &Global, cfg: Option<&SceneConfig>) -> RenderSettings {
    let mut rc: RenderConfig = cfg.map(|c| c.render.clone()).unwrap_or_default();
    if let Some(t) = g.tile_size {
        rc.tile_size = t;
    }
    if let Some(d) = g.feature_dim {
        rc.feature_dim = Some(d);
    }
    RenderSettings::from(&rc)
}

fn out_dir(g: &Global) -> Result<&Path> {
    fs::create_dir_all(&g.out)?;
    Ok(&g.out)
}

fn splat_path(cfg: Option<&SceneConfig>, flag: Option<PathBuf>) -> Option<PathBuf> {
    flag.or_else(|| cfg.and_then(|c| c.splat.as_ref().map(|p| c.resolve(p))))
}

/// Expected depth `Σwd / Σw`, zero where nothing was hit.
fn expected_depth(depth: &PixelMap, alpha: &PixelMap) -> PixelMap {
    let data = depth
        .data
        .iter()
        .zip(&alpha.data)
        .map(|(&d, &a)| if a > 1e-12 { d / a } else { 0.0 })
        .collect();
    PixelMap::from_vec(depth.height, depth.width, 1, data).expect("same shape as the depth plane")
}

fn cmd_render(g: &Global, cfg: Option<&SceneConfig>, a: RenderArgs) -> Result<i32> {
    let settings = render_settings(g, cfg);
    let (cloud, classifier, cameras) = match cfg {
        Some(c) => {
            let path = splat_path(cfg, a.splat).ok_or_else(|| Error::Config("render needs a splat file".into()))?;
            let read = read_splat(&path)?;
            if read.missing_sidecar {
                eprintln!("warning: no feature sidecar next to {}", path.display());
            }
            let cams = c.cameras()?;
            if cams.is_empty() {
                return Err(Error::Config("no cameras configured".into()));
            }
            (read.cloud, read.classifier, cams)
        }
        None => {
            let scene = match a.scene {
                RenderScene::Single => single_splat_scene()?,
                RenderScene::Demo => demo_scene()?,
            };
            let cloud = match a.splat {
                Some(p) => read_splat(&p)?.cloud,
                None => scene.cloud,
            };
            (cloud, None, vec![scene.camera])
        }
    };
    let palette = ClassPalette::body_parts();
    for (i, cam) in cameras.iter().enumerate() {
        let mut out = render(&cloud, cam, &settings)?;
        let labels = match &classifier {
            Some(cl) if cl.feature_dim == out.feature.channels => {
                let logits = cl.apply(&out.feature)?;
                let l = labels_from_logits(&logits, &out.alpha);
                out.label_logits = Some(logits);
                Some(l)
            }
            Some(cl) => {
                eprintln!(
                    "warning: classifier expects {} feature channels, render has {}; skipping labels",
                    cl.feature_dim, out.feature.channels
                );
                None
            }
            None => None,
        };
        println!("view {i} hash {}", out.content_hash());
        if a.hash_only {
            continue;
        }
        let dir = out_dir(g)?;
        let name = |s: &str| dir.join(format!("view{i}_{s}"));
        let depth = expected_depth(&out.depth, &out.alpha);
        write_image(&name("color.png"), &out.color)?;
        write_image(&name("alpha.png"), &out.alpha)?;
        write_image(&name("depth.png"), &normalize_for_display(&depth))?;
        write_image(&name("normal.png"), &normal_to_display(&out.normal))?;
        write_npy(&name("depth.npy"), &Tensor::from_map(&depth))?;
        if out.feature.channels > 0 {
            write_npy(&name("feature.npy"), &Tensor::from_map(&out.feature))?;
        }
        if let Some(l) = labels {
            write_label_map(&name("labels.png"), &l, cam.width, cam.height, &palette)?;
            write_label_ids(&name("label_ids.png"), &l, cam.width, cam.height)?;
        }
    }
    Ok(0)
}

fn write_loss_csv(path: &Path, trace: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "step,loss")?;
    for (i, l) in trace.iter().enumerate() {
        writeln!(f, "{i},{l:.10e}")?;
    }
    f.flush()?;
    Ok(())
}

fn progress(total: usize) -> impl FnMut(usize, f64) {
    let every = (total / 10).max(1);
    move |step, loss| {
        if step % every == 0 {
            log::info!("step {step}/{total} loss {loss:.6}");
        }
    }
}

fn cmd_fit(g: &Global, cfg: Option<&SceneConfig>, a: FitArgs) -> Result<i32> {
    let Some(c) = cfg else {
        return fit_builtin(g, a);
    };
    let cams = c.cameras()?;
    let mut views = Vec::with_capacity(c.views.len());
    let mut feature_dim = None;
    for (i, v) in c.views.iter().enumerate() {
        let cam = cams[v.camera].clone();
        let (h, w) = (cam.height, cam.width);
        let load = |p: &Option<PathBuf>| p.as_ref().map(|p| c.resolve(p));
        let color = load(&v.image).map(|p| read_image(&p)).transpose()?;
        let mask = load(&v.mask).map(|p| read_gray(&p)).transpose()?;
        let features = load(&v.features).map(|p| read_npy(&p)?.to_map()).transpose()?;
        let labels = match load(&v.labels) {
            Some(p) => {
                let (l, lw, lh) = read_label_ids(&p)?;
                if (lw, lh) != (w, h) {
                    return Err(shape_err(format!("view {i}: labels are {lw}x{lh}, camera is {w}x{h}")));
                }
                Some(l)
            }
            None => None,
        };
        for (m, what) in [(&color, "image"), (&mask, "mask"), (&features, "features")] {
            if let Some(m) = m {
                if (m.width, m.height) != (w, h) {
                    return Err(shape_err(format!(
                        "view {i}: {what} is {}x{}, camera is {w}x{h}",
                        m.width, m.height
                    )));
                }
            }
        }
        if let Some(f) = &features {
            if feature_dim.is_some_and(|d| d != f.channels) {
                return Err(shape_err(format!("view {i}: feature maps disagree in channel count")));
            }
            feature_dim = Some(f.channels);
        }
        views.push(FitView {
            camera: cam,
            color,
            mask,
            features,
            labels,
        });
    }
    if views.is_empty() {
        return Err(Error::Config("fit needs at least one view".into()));
    }
    let (initial, classifier) = match splat_path(cfg, a.splat) {
        Some(p) => {
            let r = read_splat(&p)?;
            (r.cloud, r.classifier)
        }
        None => {
            let fd = feature_dim.or(g.feature_dim).unwrap_or(0);
            let s = c.fit.initial_scale;
            let spec = RandomCloudSpec {
                count: c.fit.initial_count,
                feature_dim: fd,
                extent: c.fit.initial_radius,
                scale_range: (s, s * 1.0001),
                opacity_range: (0.5, 0.5),
                color_range: (0.5, 0.5),
                sh_rest_std: 0.0,
            };
            let mut cloud = random_cloud(&mut rng(g.seed), &spec);
            cloud.features.iter_mut().for_each(|f| *f *= 0.1);
            (cloud, None)
        }
    };
    if let Some(d) = feature_dim {
        if d != initial.feature_dim {
            return Err(shape_err(format!(
                "target features have {d} channels, the cloud has {}",
                initial.feature_dim
            )));
        }
    }
    let labeled = views.iter().any(|v| v.labels.is_some());
    let classifier = match classifier {
        Some(cl) => Some(cl),
        None if labeled && initial.feature_dim == NUM_CLASSES => Some(Classifier::identity()),
        None if labeled => {
            return Err(Error::Config(format!(
                "label targets need a classifier in the splat sidecar or {NUM_CLASSES}-dim features"
            )))
        }
        None => None,
    };
    let steps = a.steps.unwrap_or(c.fit.steps);
    let config = FitConfig {
        steps,
        adam: c.fit.adam,
        rates: c.fit.rates,
        schedule: c.fit.schedule,
        activation: c.activation,
        loss: c.loss.clone(),
        render: render_settings(g, cfg),
        classifier: classifier.clone(),
    };
    let fit = optimize_cloud_with(&initial, &views, &config, progress(steps))?;
    let dir = out_dir(g)?;
    write_splat(&dir.join("fit.ply"), &fit.cloud, classifier.as_ref())?;
    write_loss_csv(&dir.join("loss.csv"), &fit.trace)?;
    println!(
        "fit {} primitives over {} views: loss {:.6} -> {:.6}",
        fit.cloud.len(),
        views.len(),
        fit.trace.first().copied().unwrap_or(f64::NAN),
        fit.trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(0)
}

fn fit_builtin(g: &Global, a: FitArgs) -> Result<i32> {
    let mut exp = match a.scene {
        FitScene::Sphere => SphereExperiment::textured_sphere(g.seed, a.steps.unwrap_or(1000), 64)?,
        FitScene::TwoBlobs => SphereExperiment::two_blobs(g.seed, a.steps.unwrap_or(500), 64)?,
    };
    if let Some(t) = g.tile_size {
        exp.config.render.tile_size = t;
    }
    let fit = exp.run(progress(exp.config.steps))?;
    let dir = out_dir(g)?;
    let classifier = exp.features.then(Classifier::identity);
    write_splat(&dir.join("fit.ply"), &fit.cloud, classifier.as_ref())?;
    write_loss_csv(&dir.join("loss.csv"), &fit.trace)?;
    let held = render(&fit.cloud, &exp.held_out.camera, &exp.config.render)?;
    write_image(&dir.join("held_out.png"), &held.color)?;
    write_image(&dir.join("held_out_target.png"), &exp.held_out.color)?;
    println!("held-out PSNR {:.3} dB", exp.held_out_psnr(&fit.cloud)?);
    if exp.features {
        let s = exp.held_out_seg(&fit.cloud)?;
        println!("held-out mIoU {:.4} mAcc {:.4}", s.miou, s.macc);
    }
    Ok(0)
}

fn cmd_gradcheck(g: &Global, cfg: Option<&SceneConfig>, a: GradcheckArgs) -> Result<i32> {
    let scene = match a.splat {
        Some(p) => {
            let cam = cfg
                .map(|c| c.cameras())
                .transpose()?
                .and_then(|c| c.into_iter().next())
                .ok_or_else(|| Error::Config("gradcheck on a splat needs a config with a camera".into()))?;
            GradScene::given(read_splat(&p)?.cloud, cam, g.seed)?
        }
        None => GradScene::random(g.seed, a.count, a.size, g.feature_dim.unwrap_or(4))?,
    };
    let reports = check_all(&scene, a.eps)?;
    for r in &reports {
        println!("{r}");
    }
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let passed = reports.iter().all(|r| r.passed);
    println!("max rel. err {worst:.3e} {}", if passed { "PASS" } else { "FAIL" });
    if g.config.is_some() || g.out != Path::new("out") {
        let text = serde_json::to_string_pretty(&reports).map_err(|e| Error::Invalid(e.to_string()))?;
        fs::write(out_dir(g)?.join("gradcheck.json"), text)?;
    }
    Ok(if passed { 0 } else { 1 })
}

fn cmd_unproject(g: &Global, cfg: Option<&SceneConfig>, a: UnprojectArgs) -> Result<i32> {
    let c = cfg.ok_or_else(|| Error::Config("unproject needs --config for the camera".into()))?;
    let cams = c.cameras()?;
    let view = c.views.get(a.view);
    let cam: &Camera = match view {
        Some(v) => &cams[v.camera],
        None => cams
            .get(a.view)
            .ok_or_else(|| Error::Config(format!("no view or camera {}", a.view)))?,
    };
    let pick = |flag: Option<PathBuf>, from_view: Option<&PathBuf>| flag.or_else(|| from_view.map(|p| c.resolve(p)));
    let depth_path = pick(a.depth, view.and_then(|v| v.depth.as_ref()))
        .ok_or_else(|| Error::Config("unproject needs a depth map".into()))?;
    let depth = read_npy(&depth_path)?.to_map()?;
    let offsets = pick(a.offsets, view.and_then(|v| v.offsets.as_ref()))
        .map(|p| read_npy(&p)?.to_map())
        .transpose()?;
    let mask: Option<Vec<bool>> = pick(a.mask, view.and_then(|v| v.mask.as_ref()))
        .map(|p| read_gray(&p).map(|m| m.data.iter().map(|&x| x >= 0.5).collect()))
        .transpose()?;
    let mut opts: UnprojectOptions = c.unproject.into();
    if g.no_half_pixel {
        opts.half_pixel = false;
    }
    if g.eq1_literal {
        opts.convention = UnprojectConvention::Literal;
    }
    let pts = cam.unproject(&depth, offsets.as_ref(), mask.as_deref(), opts)?;
    let image = view
        .and_then(|v| v.image.as_ref())
        .map(|p| read_image(&c.resolve(p)))
        .transpose()?;
    let mut cloud = GaussianCloud::empty(0);
    for (p, &(u, v)) in pts.positions.iter().zip(&pts.pixels) {
        let rgb = image.as_ref().map_or([0.5; 3], |im| {
            let px = im.pixel(v, u);
            [px[0], px[1], px[2]]
        });
        let mut sh = [[0.0; 3]; SH_BASIS];
        for k in 0..3 {
            sh[0][k] = rgb_to_dc(rgb[k]);
        }
        cloud.push(
            *p,
            Vector4::new(1.0, 0.0, 0.0, 0.0),
            Vector3::repeat(5e-3),
            0.9,
            sh,
            &[],
        );
    }
    let dir = out_dir(g)?;
    let flat: Vec<f64> = pts.positions.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    write_npy(
        &dir.join("positions.npy"),
        &Tensor::new(vec![pts.positions.len(), 3], flat)?,
    )?;
    write_splat(&dir.join("points.ply"), &cloud, None)?;
    println!("unprojected {} points", pts.positions.len());
    Ok(0)
}

fn cmd_metrics(g: &Global, a: MetricsArgs) -> Result<i32> {
    let mut report = serde_json::Map::new();
    if let (Some(p), Some(t)) = (&a.pred, &a.gt) {
        let (p, t) = (read_image(p)?, read_image(t)?);
        report.insert("psnr".into(), json!(psnr(&p, &t, 1.0)?));
        report.insert("ssim".into(), json!(ssim(&p, &t, 1.0)?));
    }
    if let (Some(p), Some(t)) = (&a.pred_labels, &a.gt_labels) {
        let (p, pw, ph) = read_label_ids(p)?;
        let (t, tw, th) = read_label_ids(t)?;
        if (pw, ph) != (tw, th) {
            return Err(shape_err(format!("label maps are {pw}x{ph} and {tw}x{th}")));
        }
        let s = seg_scores(&p, &t, NUM_CLASSES)?;
        report.insert("miou".into(), json!(s.miou));
        report.insert("macc".into(), json!(s.macc));
    }
    if report.is_empty() {
        return Err(Error::Invalid(
            "metrics needs --pred/--gt and/or --pred-labels/--gt-labels".into(),
        ));
    }
    let dir = out_dir(g)?;
    let mut csv = String::from("metric,value\n");
    for (k, v) in &report {
        println!("{k} {v}");
        csv.push_str(&format!("{k},{v}\n"));
    }
    fs::write(dir.join("metrics.csv"), csv)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Invalid(e.to_string()))?;
    fs::write(dir.join("metrics.json"), text)?;
    Ok(0)
}

fn load_weights(path: &Path, source: LiftSourceArg) -> Result<DMatrix<f64>> {
    if path.extension().is_some_and(|e| e == "ssta") {
        let cache = AttentionCache::from_archive(&TensorArchive::read(path)?)?;
        let source = match source {
            LiftSourceArg::Last => LiftSource::LastBlock,
            LiftSourceArg::Average => LiftSource::AverageBlocks,
        };
        return cache.reuse_weights(source);
    }
    let t = read_npy(path)?;
    match t.shape.len() {
        2 => t.to_matrix(),
        3 => {
            let [heads, r, c] = t.dims::<3>()?;
            if heads == 0 {
                return Err(shape_err("weight tensor has no heads"));
            }
            Ok(DMatrix::from_fn(r, c, |i, j| {
                (0..heads).map(|h| t.data[(h * r + i) * c + j]).sum::<f64>() / heads as f64
            }))
        }
        n => Err(shape_err(format!("attention weights must have rank 2 or 3, got {n}"))),
    }
}

fn cmd_lift(g: &Global, a: LiftArgs) -> Result<i32> {
    let weights = load_weights(&a.weights, a.source)?;
    let f = read_npy(&a.features)?;
    let features = match f.shape.len() {
        2 => f.to_matrix()?,
        3 => {
            let [h, w, d] = f.dims::<3>()?;
            Tensor::new(vec![h * w, d], f.data)?.to_matrix()?
        }
        n => return Err(shape_err(format!("features must have rank 2 or 3, got {n}"))),
    };
    let lifted = cross_attn_reuse(&weights, &features)?;
    let dir = out_dir(g)?;
    write_npy(&dir.join("lifted.npy"), &Tensor::from_matrix(&lifted))?;
    println!("lifted {} tokens x {} channels", lifted.nrows(), lifted.ncols());
    Ok(0)
}
