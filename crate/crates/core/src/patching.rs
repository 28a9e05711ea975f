//! Cutting full-resolution images into network-sized patches and stitching
//! per-patch probability tiles back into a full-image map.
//!
//! Whenever an image side is not a multiple of the stride, one extra patch
//! is aligned to the far edge so that every pixel is covered without padding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, ProbabilityMap, RasterImage};

pub const DEFAULT_PATCH_SIZE: usize = 224;
pub const DEFAULT_RANDOM_COUNT: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchMode {
    /// Adjacent patches covering the whole image.
    Grid,
    /// A fixed number of uniformly drawn positions (with replacement).
    Random,
    /// Patches strided by `patch_size - overlap`.
    OverlapGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub patch_size: usize,
    pub mode: PatchMode,
    pub overlap: usize,
    pub random_count: usize,
}

impl PatchSpec {
    pub fn grid(patch_size: usize) -> Self {
        Self {
            patch_size,
            mode: PatchMode::Grid,
            overlap: 0,
            random_count: 0,
        }
    }

    /// Half-patch overlap in both axes.
    pub fn overlap50(patch_size: usize) -> Self {
        Self {
            patch_size,
            mode: PatchMode::OverlapGrid,
            overlap: patch_size / 2,
            random_count: 0,
        }
    }

    pub fn random(patch_size: usize, random_count: usize) -> Self {
        Self {
            patch_size,
            mode: PatchMode::Random,
            overlap: 0,
            random_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::InvalidParameter("patch size must be positive".into()));
        }
        if self.overlap >= self.patch_size {
            return Err(Error::InvalidParameter(format!(
                "overlap {} must be smaller than patch size {}",
                self.overlap, self.patch_size
            )));
        }
        if self.mode == PatchMode::Random && self.random_count == 0 {
            return Err(Error::InvalidParameter(
                "random patching needs at least one patch".into(),
            ));
        }
        Ok(())
    }

    fn stride(&self) -> usize {
        match self.mode {
            PatchMode::OverlapGrid => self.patch_size - self.overlap,
            _ => self.patch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// Top-left corner `(x, y)` in the source image.
    pub origin: (usize, usize),
    pub pixels: RasterImage,
    pub mask: Option<BinaryMask>,
}

/// Origins along one axis: multiples of `stride`, plus an edge-aligned
/// final origin when the last regular patch stops short of `len`.
pub fn axis_origins(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    debug_assert!(len >= patch && stride > 0);
    let mut origins: Vec<usize> = (0..)
        .map(|k| k * stride)
        .take_while(|&o| o + patch <= len)
        .collect();
    let last = *origins.last().expect("len >= patch");
    if last + patch < len {
        origins.push(len - patch);
    }
    origins
}

fn check_fits(width: usize, height: usize, spec: &PatchSpec) -> Result<()> {
    spec.validate()?;
    if width < spec.patch_size || height < spec.patch_size {
        return Err(Error::InvalidInput(format!(
            "{width}×{height} image is smaller than the {p}×{p} patch",
            p = spec.patch_size
        )));
    }
    Ok(())
}

/// Patch origins for the deterministic modes, row by row.
pub fn grid_origins(width: usize, height: usize, spec: &PatchSpec) -> Result<Vec<(usize, usize)>> {
    check_fits(width, height, spec)?;
    let stride = spec.stride();
    let xs = axis_origins(width, spec.patch_size, stride);
    let ys = axis_origins(height, spec.patch_size, stride);
    Ok(ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
        .collect())
}

pub fn random_origins(
    width: usize,
    height: usize,
    spec: &PatchSpec,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    check_fits(width, height, spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (max_x, max_y) = (width - spec.patch_size, height - spec.patch_size);
    Ok((0..spec.random_count)
        .map(|_| (rng.gen_range(0..=max_x), rng.gen_range(0..=max_y)))
        .collect())
}

/// Origins for any mode; `seed` only matters for random patching.
pub fn patch_origins(
    width: usize,
    height: usize,
    spec: &PatchSpec,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    match spec.mode {
        PatchMode::Random => random_origins(width, height, spec, seed),
        PatchMode::Grid | PatchMode::OverlapGrid => grid_origins(width, height, spec),
    }
}

pub fn extract_patches(
    img: &RasterImage,
    mask: Option<&BinaryMask>,
    origins: &[(usize, usize)],
    patch_size: usize,
) -> Result<Vec<Patch>> {
    if let Some(m) = mask {
        if (m.width(), m.height()) != (img.width(), img.height()) {
            return Err(Error::InvalidInput(format!(
                "mask is {}×{} but image is {}×{}",
                m.width(),
                m.height(),
                img.width(),
                img.height()
            )));
        }
    }
    origins
        .iter()
        .map(|&(x, y)| {
            Ok(Patch {
                origin: (x, y),
                pixels: img.crop(x, y, patch_size, patch_size)?,
                mask: mask
                    .map(|m| m.crop(x, y, patch_size, patch_size))
                    .transpose()?,
            })
        })
        .collect()
}

/// Adjacent patches covering the whole image.
pub fn grid_patches(
    img: &RasterImage,
    mask: Option<&BinaryMask>,
    spec: &PatchSpec,
) -> Result<Vec<Patch>> {
    let spec = PatchSpec {
        mode: PatchMode::Grid,
        ..*spec
    };
    let origins = grid_origins(img.width(), img.height(), &spec)?;
    extract_patches(img, mask, &origins, spec.patch_size)
}

pub fn random_patches(
    img: &RasterImage,
    mask: Option<&BinaryMask>,
    spec: &PatchSpec,
    seed: u64,
) -> Result<Vec<Patch>> {
    let spec = PatchSpec {
        mode: PatchMode::Random,
        ..*spec
    };
    let origins = random_origins(img.width(), img.height(), &spec, seed)?;
    extract_patches(img, mask, &origins, spec.patch_size)
}

pub fn overlap_grid_patches(
    img: &RasterImage,
    mask: Option<&BinaryMask>,
    spec: &PatchSpec,
) -> Result<Vec<Patch>> {
    let spec = PatchSpec {
        mode: PatchMode::OverlapGrid,
        ..*spec
    };
    let origins = grid_origins(img.width(), img.height(), &spec)?;
    extract_patches(img, mask, &origins, spec.patch_size)
}

/// A square block of background probabilities produced for one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityTile {
    pub origin: (usize, usize),
    pub size: usize,
    pub values: Vec<f64>,
}

/// Accumulates tiles into a per-pixel running mean.
///
/// The incremental form `m += (v - m) / k` keeps a pixel bitwise equal to
/// `v` when every contribution equals `v`.
#[derive(Debug, Clone)]
pub struct Recomposer {
    width: usize,
    height: usize,
    mean: Vec<f64>,
    coverage: Vec<u32>,
}

impl Recomposer {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            mean: vec![0.0; width * height],
            coverage: vec![0; width * height],
        }
    }

    pub fn add(&mut self, tile: &ProbabilityTile) -> Result<()> {
        let (x0, y0) = tile.origin;
        let s = tile.size;
        if tile.values.len() != s * s {
            return Err(Error::ShapeMismatch(format!(
                "tile holds {} values, expected {s}×{s}",
                tile.values.len()
            )));
        }
        if x0 + s > self.width || y0 + s > self.height {
            return Err(Error::InvalidInput(format!(
                "tile at ({x0}, {y0}) of side {s} exceeds {}×{} map",
                self.width, self.height
            )));
        }
        for ty in 0..s {
            let row = (y0 + ty) * self.width + x0;
            for tx in 0..s {
                let i = row + tx;
                let v = tile.values[ty * s + tx];
                self.coverage[i] += 1;
                self.mean[i] += (v - self.mean[i]) / self.coverage[i] as f64;
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<ProbabilityMap> {
        if let Some(i) = self.coverage.iter().position(|&c| c == 0) {
            return Err(Error::IncompleteCoverage {
                x: i % self.width,
                y: i / self.width,
            });
        }
        ProbabilityMap::new(self.width, self.height, self.mean, self.coverage)
    }
}

pub fn recompose(width: usize, height: usize, tiles: &[ProbabilityTile]) -> Result<ProbabilityMap> {
    let mut acc = Recomposer::new(width, height);
    for tile in tiles {
        acc.add(tile)?;
    }
    acc.finish()
}
