//! Dense per-pixel storage.

use crate::error::{shape_err, Result};

/// An `height × width × channels` grid of reals stored row-major with the
/// channel index fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl PixelMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(shape_err(format!(
                "expected {}x{}x{} = {} values, got {}",
                height,
                width,
                channels,
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a map by evaluating `f(row, col)` for every pixel.
    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, &mut [f64])) -> Self {
        let mut map = Self::zeros(height, width, channels);
        for v in 0..height {
            for u in 0..width {
                f(v, u, map.pixel_mut(v, u));
            }
        }
        map
    }

    #[inline]
    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let start = (row * self.width + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.channels.max(1))
    }

    pub fn same_shape(&self, other: &PixelMap) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn ensure_shape(&self, height: usize, width: usize, channels: usize, what: &str) -> Result<()> {
        if self.height != height || self.width != width || self.channels != channels {
            return Err(shape_err(format!(
                "{what}: expected {height}x{width}x{channels}, got {}x{}x{}",
                self.height, self.width, self.channels
            )));
        }
        Ok(())
    }

    /// Copies channels `[start, start + count)` into a new map.
    pub fn slice_channels(&self, start: usize, count: usize) -> PixelMap {
        let mut out = PixelMap::zeros(self.height, self.width, count);
        for (dst, src) in out
            .data
            .chunks_exact_mut(count.max(1))
            .zip(self.data.chunks_exact(self.channels.max(1)))
        {
            dst.copy_from_slice(&src[start..start + count]);
        }
        out
    }

    /// Concatenates maps of identical spatial size along the channel axis.
    pub fn concat_channels(maps: &[&PixelMap]) -> Result<PixelMap> {
        let first = maps.first().ok_or_else(|| shape_err("cannot concatenate zero maps"))?;
        let (h, w) = (first.height, first.width);
        if maps.iter().any(|m| m.height != h || m.width != w) {
            return Err(shape_err("spatial sizes differ in channel concatenation"));
        }
        let channels = maps.iter().map(|m| m.channels).sum();
        let mut data = Vec::with_capacity(h * w * channels);
        for p in 0..h * w {
            for m in maps {
                data.extend_from_slice(&m.data[p * m.channels..(p + 1) * m.channels]);
            }
        }
        PixelMap::from_vec(h, w, channels, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
