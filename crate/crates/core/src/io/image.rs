//! 8-bit PNG output and input.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{shape_err, Error, Result};
use crate::map::PixelMap;
use crate::palette::ClassPalette;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1- or 3-channel plane with values in `[0, 1]` (clamped) as an
/// 8-bit PNG.
pub fn write_image(path: &Path, plane: &PixelMap) -> Result<()> {
    let (w, h) = (plane.width as u32, plane.height as u32);
    match plane.channels {
        1 => GrayImage::from_fn(w, h, |x, y| Luma([to_u8(plane.at(y as usize, x as usize, 0))])).save(path)?,
        3 => RgbImage::from_fn(w, h, |x, y| {
            let p = plane.pixel(y as usize, x as usize);
            Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
        })
        .save(path)?,
        c => return Err(shape_err(format!("cannot write a {c}-channel plane as an image"))),
    }
    Ok(())
}

/// Reads a PNG as RGB in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<PixelMap> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(PixelMap::from_fn(h as usize, w as usize, 3, |v, u, px| {
        let p = img.get_pixel(u as u32, v as u32);
        for (o, &c) in px.iter_mut().zip(&p.0) {
            *o = f64::from(c) / 255.0;
        }
    }))
}

/// Reads a PNG as a single luminance channel in `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<PixelMap> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(PixelMap::from_fn(h as usize, w as usize, 1, |v, u, px| {
        px[0] = f64::from(img.get_pixel(u as u32, v as u32).0[0]) / 255.0;
    }))
}

fn check_labels(labels: &[u32], width: usize, height: usize) -> Result<()> {
    if labels.len() != width * height {
        return Err(shape_err(format!(
            "{} labels for a {width}x{height} image",
            labels.len()
        )));
    }
    Ok(())
}

/// Colorizes a class-id map with `palette`.
pub fn write_label_map(path: &Path, labels: &[u32], width: usize, height: usize, palette: &ClassPalette) -> Result<()> {
    check_labels(labels, width, height)?;
    let colors = labels.iter().map(|&l| palette.color(l)).collect::<Result<Vec<_>>>()?;
    RgbImage::from_fn(width as u32, height as u32, |x, y| {
        Rgb(colors[y as usize * width + x as usize])
    })
    .save(path)?;
    Ok(())
}

/// Stores raw class ids losslessly in an 8-bit grayscale PNG.
pub fn write_label_ids(path: &Path, labels: &[u32], width: usize, height: usize) -> Result<()> {
    check_labels(labels, width, height)?;
    let mut img = GrayImage::new(width as u32, height as u32);
    for (p, &l) in img.pixels_mut().zip(labels) {
        p.0[0] = u8::try_from(l).map_err(|_| Error::Invalid(format!("class id {l} does not fit in 8 bits")))?;
    }
    img.save(path)?;
    Ok(())
}

/// Reads ids written by [`write_label_ids`]; returns `(labels, width, height)`.
pub fn read_label_ids(path: &Path) -> Result<(Vec<u32>, usize, usize)> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok((
        img.pixels().map(|p| u32::from(p.0[0])).collect(),
        w as usize,
        h as usize,
    ))
}

/// Maps unit normals from `[-1, 1]` to `[0, 1]` for display.
pub fn normal_to_display(normals: &PixelMap) -> PixelMap {
    PixelMap {
        data: normals.data.iter().map(|n| 0.5 + 0.5 * n).collect(),
        ..normals.clone()
    }
}

/// Rescales a plane linearly so its finite range spans `[0, 1]`.
pub fn normalize_for_display(plane: &PixelMap) -> PixelMap {
    let (lo, hi) = plane
        .data
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    PixelMap {
        data: plane
            .data
            .iter()
            .map(|v| if lo.is_finite() { (v - lo) / span } else { 0.0 })
            .collect(),
        ..plane.clone()
    }
}
