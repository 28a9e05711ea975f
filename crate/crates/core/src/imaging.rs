//! Raster containers and the primitive pixel operations used by every stage
//! of the pipeline: binarization, 3×3 median filtering, Gaussian blur and
//! PNG input/output.
//!
//! Masks follow the annotation convention: `true` marks an object pixel
//! (class 0). On disk an object pixel is black (0) and background is white
//! (255).

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major 8-bit image with 1, 3 or 4 interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if !matches!(channels, 1 | 3 | 4) {
            return Err(Error::InvalidInput(format!(
                "unsupported channel count {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidInput(format!(
                "sample buffer holds {} values, expected {}×{}×{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: u8) {
        self.data[(y * self.width + x) * self.channels + c] = value;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Copies the `w`×`h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::InvalidInput(format!(
                "crop {w}×{h} at ({x0}, {y0}) exceeds {}×{} image",
                self.width, self.height
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Self::new(w, h, c, data)
    }
}

/// Row-major boolean grid; `true` is an object pixel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "mask holds {} bits, expected {}×{}",
                bits.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count_objects(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::InvalidInput(format!(
                "crop {w}×{h} at ({x0}, {y0}) exceeds {}×{} mask",
                self.width, self.height
            )));
        }
        let mut bits = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            let start = y * self.width + x0;
            bits.extend_from_slice(&self.bits[start..start + w]);
        }
        Self::new(w, h, bits)
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// Grayscale rendering: object = 0 (black), background = 255 (white).
    pub fn to_image(&self) -> RasterImage {
        let data = self.bits.iter().map(|&b| if b { 0 } else { 255 }).collect();
        RasterImage {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }
}

/// Per-pixel background probability accumulated from one or more tiles.
///
/// `values` holds the running mean, `coverage` how many tiles contributed.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    coverage: Vec<u32>,
}

impl ProbabilityMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>, coverage: Vec<u32>) -> Result<Self> {
        let n = width * height;
        if values.len() != n || coverage.len() != n {
            return Err(Error::InvalidInput(format!(
                "probability map buffers do not match {width}×{height}"
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "probability {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            values,
            coverage,
        })
    }

    /// A fully covered map with a single contribution per pixel.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(width, height, values, vec![1; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn coverage(&self) -> &[u32] {
        &self.coverage
    }

    #[inline]
    pub fn background(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn object(&self, x: usize, y: usize) -> f64 {
        1.0 - self.background(x, y)
    }

    /// Background probability scaled to 0–255 grayscale.
    pub fn to_grayscale(&self) -> RasterImage {
        let data = self.values.iter().map(|&v| scale_probability(v)).collect();
        RasterImage {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }
}

#[inline]
fn scale_probability(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Default binarization threshold on the 0–255 background-probability scale.
pub const DEFAULT_THRESHOLD: u8 = 127;

/// Object wherever the grayscale value is at or below `threshold`.
pub fn binarize(img: &RasterImage, threshold: u8) -> Result<BinaryMask> {
    if img.channels != 1 {
        return Err(Error::InvalidInput(format!(
            "binarize expects a single-channel image, got {} channels",
            img.channels
        )));
    }
    let bits = img.data.iter().map(|&v| v <= threshold).collect();
    BinaryMask::new(img.width, img.height, bits)
}

/// Binarizes a probability map after scaling it to the grayscale range, so
/// the result equals `binarize(&map.to_grayscale(), threshold)`.
pub fn binarize_probability(map: &ProbabilityMap, threshold: u8) -> BinaryMask {
    let bits = map
        .values
        .iter()
        .map(|&v| scale_probability(v) <= threshold)
        .collect();
    BinaryMask {
        width: map.width,
        height: map.height,
        bits,
    }
}

/// Majority vote over each 3×3 neighborhood, replicating edge pixels.
pub fn median_filter_3x3(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width, mask.height);
    let mut out = BinaryMask::empty(w, h);
    if w == 0 || h == 0 {
        return out;
    }
    for y in 0..h {
        let rows = [y.saturating_sub(1), y, (y + 1).min(h - 1)];
        for x in 0..w {
            let cols = [x.saturating_sub(1), x, (x + 1).min(w - 1)];
            let mut votes = 0;
            for &ry in &rows {
                for &cx in &cols {
                    votes += mask.bits[ry * w + cx] as u32;
                }
            }
            out.bits[y * w + x] = votes >= 5;
        }
    }
    out
}

/// Normalized 1-D Gaussian taps with σ = `radius` and `2·radius + 1` taps.
pub fn gaussian_kernel(radius: usize) -> Vec<f64> {
    let sigma = radius as f64;
    let r = radius as isize;
    let mut taps: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable Gaussian blur with replicate borders; radius must be 1 or 2.
pub fn gaussian_blur(img: &RasterImage, radius: usize) -> Result<RasterImage> {
    if !matches!(radius, 1 | 2) {
        return Err(Error::InvalidParameter(format!(
            "blur radius must be 1 or 2, got {radius}"
        )));
    }
    let taps = gaussian_kernel(radius);
    let (w, h, c) = (img.width, img.height, img.channels);
    let r = radius as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut horizontal = vec![0.0f64; w * h * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let sx = clamp(x as isize + k as isize - r, w);
                    acc += t * img.data[(y * w + sx) * c + ch] as f64;
                }
                horizontal[(y * w + x) * c + ch] = acc;
            }
        }
    }

    let mut data = vec![0u8; w * h * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let sy = clamp(y as isize + k as isize - r, h);
                    acc += t * horizontal[(sy * w + x) * c + ch];
                }
                data[(y * w + x) * c + ch] = acc.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    RasterImage::new(w, h, c, data)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<RasterImage> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let png_err = |e: png::DecodingError| Error::Png {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Png {
        path: path.to_path_buf(),
        reason: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    buf.truncate(info.buffer_size());
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => {
            return Err(Error::Png {
                path: path.to_path_buf(),
                reason: format!("unsupported color type {other:?}"),
            })
        }
    };
    RasterImage::new(info.width as usize, info.height as usize, channels, buf)
}

pub fn write_image(img: &RasterImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let png_err = |e: png::EncodingError| Error::Png {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    encoder.set_color(match img.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => png::ColorType::Rgba,
    });
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(&img.data).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Reads a ground-truth or predicted mask (dark = object).
pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let img = read_image(path)?;
    mask_from_image(&img, DEFAULT_THRESHOLD)
}

pub fn write_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    write_image(&mask.to_image(), path)
}

/// Object wherever every channel is at or below `threshold`.
pub fn mask_from_image(img: &RasterImage, threshold: u8) -> Result<BinaryMask> {
    let bits = img
        .data
        .chunks_exact(img.channels)
        .map(|px| px.iter().take(3).all(|&v| v <= threshold))
        .collect();
    BinaryMask::new(img.width, img.height, bits)
}
