//! Binary little-endian PLY splat files and their feature sidecars.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Vector3, Vector4};

use crate::error::{Error, Result};
use crate::gaussian::{logit, sigmoid, GaussianCloud, MAX_FEATURE_DIM};
use crate::palette::NUM_CLASSES;
use crate::raster::Classifier;
use crate::sh::SH_BASIS;

const REST: usize = (SH_BASIS - 1) * 3;

/// Property names in write order.
fn property_names() -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..REST).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

/// Stored (pre-activation) record of one primitive, in property order.
fn encode(cloud: &GaussianCloud, i: usize) -> Vec<f32> {
    let mut rec = Vec::with_capacity(62);
    rec.extend(cloud.positions[i].iter().map(|&v| v as f32));
    rec.extend([0.0f32; 3]);
    let sh = &cloud.sh[i];
    rec.extend(sh[0].iter().map(|&v| v as f32));
    // channel-major rest coefficients
    for c in 0..3 {
        rec.extend(sh[1..].iter().map(|row| row[c] as f32));
    }
    rec.push(logit(cloud.opacities[i]) as f32);
    rec.extend(cloud.scales[i].iter().map(|&s| s.ln() as f32));
    rec.extend(cloud.rotations[i].iter().map(|&v| v as f32));
    rec
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Sidecar path paired with a splat file: the same stem with extension
/// `.feat`.
pub fn sidecar_path(splat: &Path) -> PathBuf {
    splat.with_extension("feat")
}

/// Writes `cloud` as a splat PLY plus, when it carries features or a
/// classifier is given, a feature sidecar next to it.
pub fn write_splat(path: &Path, cloud: &GaussianCloud, classifier: Option<&Classifier>) -> Result<()> {
    cloud.validate()?;
    let names = property_names();
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    for n in &names {
        writeln!(w, "property float {n}")?;
    }
    writeln!(w, "end_header")?;
    for i in 0..cloud.len() {
        for v in encode(cloud, i) {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    let side = sidecar_path(path);
    if cloud.feature_dim > 0 || classifier.is_some() {
        write_sidecar(&side, cloud.len(), cloud.feature_dim, &cloud.features, classifier)?;
    } else if side.exists() {
        std::fs::remove_file(&side)?;
    }
    Ok(())
}

/// Result of [`read_splat`].
#[derive(Clone, Debug, PartialEq)]
pub struct SplatRead {
    pub cloud: GaussianCloud,
    pub classifier: Option<Classifier>,
    /// No sidecar was found; features are empty (`feature_dim` 0).
    pub missing_sidecar: bool,
}

#[derive(Clone, Copy)]
enum Scalar {
    F32,
    F64,
    U8,
    I32,
    U32,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            "uchar" | "uint8" => Scalar::U8,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            _ => return None,
        })
    }

    fn read<R: Read>(self, r: &mut R) -> std::io::Result<f64> {
        Ok(match self {
            Scalar::F32 => f64::from(r.read_f32::<LittleEndian>()?),
            Scalar::F64 => r.read_f64::<LittleEndian>()?,
            Scalar::U8 => f64::from(r.read_u8()?),
            Scalar::I32 => f64::from(r.read_i32::<LittleEndian>()?),
            Scalar::U32 => f64::from(r.read_u32::<LittleEndian>()?),
        })
    }
}

/// Reads a splat PLY and, if present, its feature sidecar.
///
/// Unknown vertex properties are skipped; `f_rest_*` and normals may be
/// absent.
pub fn read_splat(path: &Path) -> Result<SplatRead> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<File>| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(format_err(path, "unexpected end of header"));
        }
        Ok(line.trim_end().to_string())
    };
    if next_line(&mut r)? != "ply" {
        return Err(format_err(path, "missing 'ply' magic"));
    }
    let mut count: Option<usize> = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut in_vertex = false;
    let mut format_ok = false;
    loop {
        let l = next_line(&mut r)?;
        let tok: Vec<&str> = l.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["format", "binary_little_endian", _] => format_ok = true,
            ["format", other, ..] => return Err(format_err(path, format!("unsupported PLY format '{other}'"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] => {
                count = Some(
                    n.parse()
                        .map_err(|_| format_err(path, format!("bad vertex count '{n}'")))?,
                );
                in_vertex = true;
            }
            ["element", name, _] => {
                if count.is_some() {
                    in_vertex = false;
                } else {
                    return Err(format_err(
                        path,
                        format!("element '{name}' before vertex is not supported"),
                    ));
                }
            }
            ["property", "list", ..] if in_vertex => return Err(format_err(path, "list properties are not supported")),
            ["property", ty, name] if in_vertex => {
                let s =
                    Scalar::parse(ty).ok_or_else(|| format_err(path, format!("unsupported property type '{ty}'")))?;
                props.push((name.to_string(), s));
            }
            ["property", ..] => {}
            _ => return Err(format_err(path, format!("malformed header line '{l}'"))),
        }
    }
    if !format_ok {
        return Err(format_err(path, "missing binary_little_endian format line"));
    }
    let n = count.ok_or_else(|| format_err(path, "no vertex element"))?;
    let col = |name: &str| props.iter().position(|(p, _)| p == name);
    let required = |name: &str| col(name).ok_or_else(|| format_err(path, format!("missing property '{name}'")));
    let pos = [required("x")?, required("y")?, required("z")?];
    let dc = [required("f_dc_0")?, required("f_dc_1")?, required("f_dc_2")?];
    let rest: Vec<Option<usize>> = (0..REST).map(|i| col(&format!("f_rest_{i}"))).collect();
    let opacity = required("opacity")?;
    let scale = [required("scale_0")?, required("scale_1")?, required("scale_2")?];
    let rot = [
        required("rot_0")?,
        required("rot_1")?,
        required("rot_2")?,
        required("rot_3")?,
    ];

    let mut cloud = GaussianCloud::empty(0);
    let mut rec = vec![0.0f64; props.len()];
    for i in 0..n {
        for (v, (_, s)) in rec.iter_mut().zip(&props) {
            *v = s
                .read(&mut r)
                .map_err(|_| format_err(path, format!("truncated payload at record {i} of {n}")))?;
        }
        let mut sh = [[0.0; 3]; SH_BASIS];
        for c in 0..3 {
            sh[0][c] = rec[dc[c]];
            for k in 1..SH_BASIS {
                sh[k][c] = rest[c * (SH_BASIS - 1) + k - 1].map_or(0.0, |j| rec[j]);
            }
        }
        let mut q = Vector4::new(rec[rot[0]], rec[rot[1]], rec[rot[2]], rec[rot[3]]);
        let norm = q.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(format_err(path, format!("record {i} has a degenerate rotation")));
        }
        if (norm - 1.0).abs() > 1e-6 {
            q /= norm;
        }
        cloud.push(
            Vector3::new(rec[pos[0]], rec[pos[1]], rec[pos[2]]),
            q,
            Vector3::new(rec[scale[0]].exp(), rec[scale[1]].exp(), rec[scale[2]].exp()),
            sigmoid(rec[opacity]),
            sh,
            &[],
        );
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(format_err(path, "trailing bytes after the vertex payload"));
    }

    let side = sidecar_path(path);
    if !side.exists() {
        log::warn!(
            "no feature sidecar next to {}; features default to empty",
            path.display()
        );
        return Ok(SplatRead {
            cloud,
            classifier: None,
            missing_sidecar: true,
        });
    }
    let sc = read_sidecar(&side)?;
    if sc.count != cloud.len() {
        return Err(Error::SidecarMismatch {
            splat: cloud.len(),
            sidecar: sc.count,
        });
    }
    cloud.feature_dim = sc.feature_dim;
    cloud.features = sc.features;
    Ok(SplatRead {
        cloud,
        classifier: sc.classifier,
        missing_sidecar: false,
    })
}

const SIDECAR_MAGIC: &[u8; 4] = b"SSFS";
const SIDECAR_VERSION: u32 = 1;
const FLAG_CLASSIFIER: u32 = 1;

/// Contents of a feature sidecar.
#[derive(Clone, Debug, PartialEq)]
pub struct Sidecar {
    pub count: usize,
    pub feature_dim: usize,
    pub features: Vec<f64>,
    pub classifier: Option<Classifier>,
}

/// Layout: magic `SSFS`, version, N, d_f, flags (all u32), N×d_f features,
/// then if flag bit 0 is set a 28×d_f classifier matrix and 28 biases; all
/// values little-endian `f32`.
pub fn write_sidecar(
    path: &Path,
    count: usize,
    feature_dim: usize,
    features: &[f64],
    classifier: Option<&Classifier>,
) -> Result<()> {
    if features.len() != count * feature_dim {
        return Err(Error::Shape("sidecar feature buffer length".into()));
    }
    if feature_dim > MAX_FEATURE_DIM {
        return Err(Error::Invalid(format!(
            "feature dimension {feature_dim} exceeds {MAX_FEATURE_DIM}"
        )));
    }
    if let Some(c) = classifier {
        if c.feature_dim != feature_dim {
            return Err(Error::Shape("classifier width differs from the feature width".into()));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SIDECAR_MAGIC)?;
    for v in [
        SIDECAR_VERSION,
        count as u32,
        feature_dim as u32,
        if classifier.is_some() { FLAG_CLASSIFIER } else { 0 },
    ] {
        w.write_u32::<LittleEndian>(v)?;
    }
    let tail = classifier.map(|c| c.weight.iter().chain(&c.bias));
    for &v in features.iter().chain(tail.into_iter().flatten()) {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let mut r = BufReader::new(File::open(path)?);
    let trunc = |_| format_err(path, "truncated sidecar");
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(trunc)?;
    if &magic != SIDECAR_MAGIC {
        return Err(format_err(path, "not a feature sidecar (bad magic)"));
    }
    let mut header = [0u32; 4];
    r.read_u32_into::<LittleEndian>(&mut header).map_err(trunc)?;
    let [version, count, feature_dim, flags] = header.map(|v| v as usize);
    if version != SIDECAR_VERSION as usize {
        return Err(format_err(path, format!("unsupported sidecar version {version}")));
    }
    if feature_dim > MAX_FEATURE_DIM {
        return Err(format_err(
            path,
            format!("feature dimension {feature_dim} exceeds {MAX_FEATURE_DIM}"),
        ));
    }
    let mut read_f32s = |n: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut buf).map_err(trunc)?;
        Ok(buf.into_iter().map(f64::from).collect())
    };
    let features = read_f32s(count * feature_dim)?;
    let classifier = if flags as u32 & FLAG_CLASSIFIER != 0 {
        let weight = read_f32s(NUM_CLASSES * feature_dim)?;
        let bias = read_f32s(NUM_CLASSES)?;
        Some(Classifier::new(feature_dim, weight, bias)?)
    } else {
        None
    };
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(format_err(path, "trailing bytes after the sidecar payload"));
    }
    Ok(Sidecar {
        count,
        feature_dim,
        features,
        classifier,
    })
}
