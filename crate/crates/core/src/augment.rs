//! Training-set augmentation: every patch gains one geometric copy, one
//! rescaled copy and one blurred copy, so the set grows fourfold.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{gaussian_blur, BinaryMask, RasterImage};
use crate::patching::Patch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeometricOp {
    FlipLr,
    FlipTb,
    Transpose,
    Rot90,
    Rot180,
    Rot270,
}

impl GeometricOp {
    pub const ALL: [GeometricOp; 6] = [
        GeometricOp::FlipLr,
        GeometricOp::FlipTb,
        GeometricOp::Transpose,
        GeometricOp::Rot90,
        GeometricOp::Rot180,
        GeometricOp::Rot270,
    ];

    /// Output size and the source pixel feeding output `(x, y)`.
    fn source(self, w: usize, h: usize, x: usize, y: usize) -> (usize, usize) {
        match self {
            GeometricOp::FlipLr => (w - 1 - x, y),
            GeometricOp::FlipTb => (x, h - 1 - y),
            GeometricOp::Transpose => (y, x),
            // clockwise
            GeometricOp::Rot90 => (y, h - 1 - x),
            GeometricOp::Rot180 => (w - 1 - x, h - 1 - y),
            GeometricOp::Rot270 => (w - 1 - y, x),
        }
    }

    fn output_size(self, w: usize, h: usize) -> (usize, usize) {
        match self {
            GeometricOp::Transpose | GeometricOp::Rot90 | GeometricOp::Rot270 => (h, w),
            _ => (w, h),
        }
    }

    pub fn apply_image(self, img: &RasterImage) -> RasterImage {
        let (w, h, c) = (img.width(), img.height(), img.channels());
        let (ow, oh) = self.output_size(w, h);
        let mut data = Vec::with_capacity(w * h * c);
        for y in 0..oh {
            for x in 0..ow {
                let (sx, sy) = self.source(w, h, x, y);
                data.extend_from_slice(img.pixel(sx, sy));
            }
        }
        RasterImage::new(ow, oh, c, data).expect("same sample count")
    }

    pub fn apply_mask(self, mask: &BinaryMask) -> BinaryMask {
        let (w, h) = (mask.width(), mask.height());
        let (ow, oh) = self.output_size(w, h);
        let mut bits = Vec::with_capacity(w * h);
        for y in 0..oh {
            for x in 0..ow {
                let (sx, sy) = self.source(w, h, x, y);
                bits.push(mask.get(sx, sy));
            }
        }
        BinaryMask::new(ow, oh, bits).expect("same pixel count")
    }
}

pub const SCALE_FACTORS: [f64; 4] = [0.8, 0.9, 1.1, 1.2];
pub const BLUR_RADII: [usize; 2] = [1, 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationChoice {
    pub geometric: GeometricOp,
    pub scale: f64,
    pub blur_radius: usize,
}

/// Uniform draw over each option set, reproducible per seed.
pub fn draw_choice(seed: u64) -> AugmentationChoice {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_choice_with(&mut rng)
}

pub fn draw_choice_with<R: Rng>(rng: &mut R) -> AugmentationChoice {
    AugmentationChoice {
        geometric: GeometricOp::ALL[rng.gen_range(0..GeometricOp::ALL.len())],
        scale: SCALE_FACTORS[rng.gen_range(0..SCALE_FACTORS.len())],
        blur_radius: BLUR_RADII[rng.gen_range(0..BLUR_RADII.len())],
    }
}

/// Bilinear resampling to an `n`×`n` image (pixel-center aligned).
pub fn resize_bilinear(img: &RasterImage, n: usize) -> RasterImage {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let (sx, sy) = (w as f64 / n as f64, h as f64 / n as f64);
    let mut data = Vec::with_capacity(n * n * c);
    for y in 0..n {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..n {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for ch in 0..c {
                let top = img.get(x0, y0, ch) as f64 * (1.0 - tx) + img.get(x1, y0, ch) as f64 * tx;
                let bottom =
                    img.get(x0, y1, ch) as f64 * (1.0 - tx) + img.get(x1, y1, ch) as f64 * tx;
                let v = top * (1.0 - ty) + bottom * ty;
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RasterImage::new(n, n, c, data).expect("sized by construction")
}

/// Nearest-neighbor resampling keeps the mask binary.
pub fn resize_nearest(mask: &BinaryMask, n: usize) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    let pick = |o: usize, src: usize| {
        (((o as f64 + 0.5) * src as f64 / n as f64).floor() as usize).min(src - 1)
    };
    let mut bits = Vec::with_capacity(n * n);
    for y in 0..n {
        let syy = pick(y, h);
        for x in 0..n {
            bits.push(mask.get(pick(x, w), syy));
        }
    }
    BinaryMask::new(n, n, bits).expect("sized by construction")
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Maps output coordinate `o` in `0..target` to a source coordinate of a
/// side-`n` image: centered crop when `n > target`, reflection otherwise.
fn fit_index(o: usize, n: usize, target: usize) -> usize {
    if n >= target {
        o + (n - target) / 2
    } else {
        let before = (target - n) / 2;
        reflect(o as isize - before as isize, n)
    }
}

fn fit_image(img: &RasterImage, target: usize) -> RasterImage {
    let n = img.width();
    let mut data = Vec::with_capacity(target * target * img.channels());
    for y in 0..target {
        let sy = fit_index(y, n, target);
        for x in 0..target {
            data.extend_from_slice(img.pixel(fit_index(x, n, target), sy));
        }
    }
    RasterImage::new(target, target, img.channels(), data).expect("sized by construction")
}

fn fit_mask(mask: &BinaryMask, target: usize) -> BinaryMask {
    let n = mask.width();
    let mut bits = Vec::with_capacity(target * target);
    for y in 0..target {
        let sy = fit_index(y, n, target);
        for x in 0..target {
            bits.push(mask.get(fit_index(x, n, target), sy));
        }
    }
    BinaryMask::new(target, target, bits).expect("sized by construction")
}

/// Side length after scaling a side-`side` patch by `scale`.
pub fn scaled_side(side: usize, scale: f64) -> usize {
    ((side as f64 * scale).round() as usize).max(1)
}

fn require_square_mask(p: &Patch) -> Result<&BinaryMask> {
    let side = p.pixels.width();
    if p.pixels.height() != side {
        return Err(Error::InvalidInput("augmentation expects square patches".into()));
    }
    let mask = p
        .mask
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("augmentation needs a patch mask".into()))?;
    if (mask.width(), mask.height()) != (side, side) {
        return Err(Error::InvalidInput("patch mask does not match its pixels".into()));
    }
    Ok(mask)
}

pub fn geometric_copy(p: &Patch, op: GeometricOp) -> Result<Patch> {
    let mask = require_square_mask(p)?;
    Ok(Patch {
        origin: p.origin,
        pixels: op.apply_image(&p.pixels),
        mask: Some(op.apply_mask(mask)),
    })
}

/// Rescales, then crops or reflect-pads back to the original side.
pub fn scaled_copy(p: &Patch, scale: f64) -> Result<Patch> {
    let mask = require_square_mask(p)?;
    let side = p.pixels.width();
    let n = scaled_side(side, scale);
    Ok(Patch {
        origin: p.origin,
        pixels: fit_image(&resize_bilinear(&p.pixels, n), side),
        mask: Some(fit_mask(&resize_nearest(mask, n), side)),
    })
}

pub fn blurred_copy(p: &Patch, radius: usize) -> Result<Patch> {
    let mask = require_square_mask(p)?;
    Ok(Patch {
        origin: p.origin,
        pixels: gaussian_blur(&p.pixels, radius)?,
        mask: Some(mask.clone()),
    })
}

/// `[geometric, scaled, blurred]` copies of one training patch.
pub fn augment_patch(p: &Patch, choice: &AugmentationChoice) -> Result<Vec<Patch>> {
    Ok(vec![
        geometric_copy(p, choice.geometric)?,
        scaled_copy(p, choice.scale)?,
        blurred_copy(p, choice.blur_radius)?,
    ])
}

/// Originals followed by their three copies; choices are drawn from one
/// seeded stream so the output is reproducible.
pub fn augment_all(patches: Vec<Patch>, seed: u64) -> Result<Vec<Patch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extra = Vec::with_capacity(patches.len() * 3);
    for p in &patches {
        let choice = draw_choice_with(&mut rng);
        extra.extend(augment_patch(p, &choice)?);
    }
    let mut out = patches;
    out.extend(extra);
    Ok(out)
}
