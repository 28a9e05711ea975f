//! Synthetic scenes with exactly known objects: non-overlapping discs,
//! polygon blobs or thin lines on a noisy background, written as images,
//! annotation files, ground-truth masks and a manifest.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotation::{AnnotationPrimitive, AnnotationSet, PrimitiveKind};
use crate::error::{Error, Result};
use crate::imaging::{write_image, write_mask, BinaryMask, RasterImage};
use crate::manifest::{DatasetManifest, DatasetParams, ImageRecord, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectKind {
    Disc,
    PolygonBlob,
    Line,
}

impl ObjectKind {
    pub fn primitive_kind(self) -> PrimitiveKind {
        match self {
            ObjectKind::Disc => PrimitiveKind::Circle,
            ObjectKind::PolygonBlob => PrimitiveKind::Polygon,
            ObjectKind::Line => PrimitiveKind::Line,
        }
    }
}

/// Color separation between objects and background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorProfile {
    /// Dark objects on a bright, flat backdrop.
    Easy,
    /// Objects close in color to a textured background.
    Hard,
}

struct Palette {
    background: [f64; 4],
    object: [f64; 4],
    /// Amplitude of the low-frequency background texture.
    texture: f64,
}

impl ColorProfile {
    fn palette(self) -> Palette {
        match self {
            ColorProfile::Easy => Palette {
                background: [222.0, 224.0, 216.0, 110.0],
                object: [72.0, 48.0, 96.0, 190.0],
                texture: 6.0,
            },
            ColorProfile::Hard => Palette {
                background: [104.0, 122.0, 72.0, 150.0],
                object: [84.0, 100.0, 70.0, 165.0],
                texture: 22.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub kind: ObjectKind,
    /// Inclusive range of objects per image.
    pub count_range: (usize, usize),
    /// Disc radius, blob radius or line length (inclusive range).
    pub size_range: (f64, f64),
    pub stroke_width: f64,
    /// Standard deviation of per-pixel noise in 8-bit units.
    pub noise: f64,
    pub profile: ColorProfile,
    /// Minimum number of background pixels between two objects.
    pub min_gap: usize,
    pub train_images: usize,
    pub eval_images: usize,
    pub test_images: usize,
    pub seed: u64,
    pub max_attempts: usize,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            width: 256,
            height: 256,
            channels: 3,
            kind: ObjectKind::Disc,
            count_range: (20, 60),
            size_range: (4.0, 4.0),
            stroke_width: 3.0,
            noise: 8.0,
            profile: ColorProfile::Easy,
            min_gap: 2,
            train_images: 30,
            eval_images: 15,
            test_images: 0,
            seed: 0,
            max_attempts: 2000,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.width == 0 || self.height == 0 {
            return bad("canvas must be non-empty".into());
        }
        if !matches!(self.channels, 1 | 3 | 4) {
            return bad(format!("unsupported channel count {}", self.channels));
        }
        if self.count_range.0 > self.count_range.1 {
            return bad(format!("empty count range {:?}", self.count_range));
        }
        let (lo, hi) = self.size_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("invalid size range {:?}", self.size_range));
        }
        if self.kind == ObjectKind::Disc && lo != hi {
            return bad("disc scenes need a single radius (size range min = max)".into());
        }
        if self.min_gap < 2 {
            return bad(format!("minimum gap {} is below 2 px", self.min_gap));
        }
        if !(self.stroke_width > 0.0) || !(self.noise >= 0.0) {
            return bad("stroke width must be positive and noise non-negative".into());
        }
        if self.max_attempts == 0 {
            return bad("placement needs at least one attempt".into());
        }
        Ok(())
    }

    pub fn image_count(&self) -> usize {
        self.train_images + self.eval_images + self.test_images
    }

    fn split_of(&self, index: usize) -> Split {
        if index < self.train_images {
            Split::Train
        } else if index < self.train_images + self.eval_images {
            Split::Eval
        } else {
            Split::Test
        }
    }

    /// Object diameter used as the default match tolerance.
    pub fn diameter(&self) -> f64 {
        match self.kind {
            ObjectKind::Disc | ObjectKind::PolygonBlob => 2.0 * self.size_range.1 + 1.0,
            ObjectKind::Line => self.size_range.1 / 2.0,
        }
    }

    pub fn dataset_params(&self) -> DatasetParams {
        let d = self.diameter();
        let (min_region_size, stroke_width, radius) = match self.kind {
            ObjectKind::Disc => {
                let r = self.size_range.0;
                ((std::f64::consts::PI * r * r / 4.0) as usize, None, Some(r))
            }
            ObjectKind::PolygonBlob => {
                let r = self.size_range.0 * 0.7;
                ((std::f64::consts::PI * r * r / 4.0) as usize, None, None)
            }
            ObjectKind::Line => ((self.size_range.0 / 2.0) as usize, Some(self.stroke_width), None),
        };
        DatasetParams {
            kind: Some(self.kind.primitive_kind()),
            radius,
            stroke_width,
            min_region_size: min_region_size.max(1),
            cluster_distance_threshold: 3.0 * d,
            tolerance: d,
            channels: self.channels,
        }
    }
}

/// One generated image with its exact ground truth.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: RasterImage,
    pub annotation: AnnotationSet,
    pub mask: BinaryMask,
    /// Mean pixel coordinate of every object, in placement order.
    pub centroids: Vec<(f64, f64)>,
}

pub fn image_id(spec: &SyntheticSceneSpec, index: usize) -> String {
    format!("{}_{index:03}", spec.name)
}

fn random_primitive(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> AnnotationPrimitive {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let (lo, hi) = spec.size_range;
    let size = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    match spec.kind {
        ObjectKind::Disc => {
            // integer centres keep the disc footprint symmetric
            let x = rng.gen_range(0..spec.width) as f64;
            let y = rng.gen_range(0..spec.height) as f64;
            AnnotationPrimitive::Circle { center: [x, y] }
        }
        ObjectKind::PolygonBlob => {
            let (cx, cy) = (rng.gen_range(0.0..w), rng.gen_range(0.0..h));
            let n = rng.gen_range(6..=9);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let vertices = (0..n)
                .map(|k| {
                    let a = phase + std::f64::consts::TAU * k as f64 / n as f64;
                    let r = size * rng.gen_range(0.7..1.3);
                    [cx + r * a.cos(), cy + r * a.sin()]
                })
                .collect();
            AnnotationPrimitive::Polygon { vertices }
        }
        ObjectKind::Line => {
            let (x, y) = (rng.gen_range(0.0..w), rng.gen_range(0.0..h));
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            AnnotationPrimitive::Line {
                from: [x, y],
                to: [x + size * a.cos(), y + size * a.sin()],
                stroke_width: None,
            }
        }
    }
}

/// Rejects primitives whose full (unclipped) extent leaves the canvas.
fn fully_inside(spec: &SyntheticSceneSpec, prim: &AnnotationPrimitive) -> bool {
    let margin = match prim {
        AnnotationPrimitive::Circle { .. } => spec.size_range.0,
        AnnotationPrimitive::Polygon { .. } => 0.0,
        AnnotationPrimitive::Line { .. } => spec.stroke_width / 2.0,
    };
    let points: Vec<[f64; 2]> = match prim {
        AnnotationPrimitive::Circle { center } => vec![*center],
        AnnotationPrimitive::Polygon { vertices } => vertices.clone(),
        AnnotationPrimitive::Line { from, to, .. } => vec![*from, *to],
    };
    points.iter().all(|&[x, y]| {
        x - margin >= 0.0
            && y - margin >= 0.0
            && x + margin <= spec.width as f64 - 1.0
            && y + margin <= spec.height as f64 - 1.0
    })
}

/// Generates image `index` of the dataset; identical for identical inputs.
pub fn generate_scene(spec: &SyntheticSceneSpec, index: usize) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let (w, h) = (spec.width, spec.height);
    let id = image_id(spec, index);

    let mut set = AnnotationSet::new(format!("{id}.png"), w, h, spec.kind.primitive_kind());
    if spec.kind == ObjectKind::Disc {
        set.radius = Some(spec.size_range.0);
    }
    if spec.kind == ObjectKind::Line {
        set.stroke_width = Some(spec.stroke_width);
    }

    let target = rng.gen_range(spec.count_range.0..=spec.count_range.1);
    // pixels within `min_gap` (Chebyshev) of an already placed object
    let mut blocked = vec![false; w * h];
    let mut mask = BinaryMask::empty(w, h);
    let mut centroids = Vec::with_capacity(target);
    let gap = spec.min_gap as isize;
    for k in 0..target {
        let mut placed = false;
        for _ in 0..spec.max_attempts {
            let prim = random_primitive(spec, &mut rng);
            if !fully_inside(spec, &prim) {
                continue;
            }
            let Ok(pixels) = set.footprint(&prim) else {
                continue;
            };
            if pixels.is_empty() || pixels.iter().any(|&(x, y)| blocked[y * w + x]) {
                continue;
            }
            let n = pixels.len() as f64;
            let (sx, sy) = pixels
                .iter()
                .fold((0.0, 0.0), |(a, b), &(x, y)| (a + x as f64, b + y as f64));
            centroids.push((sx / n, sy / n));
            for &(x, y) in &pixels {
                mask.set(x, y, true);
                for dy in -gap..=gap {
                    for dx in -gap..=gap {
                        let (nx, ny) = (x as isize + dx, y as isize + dy);
                        if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                            blocked[ny as usize * w + nx as usize] = true;
                        }
                    }
                }
            }
            set.primitives.push(prim);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Placement(format!(
                "image {id}: object {} of {target} did not fit after {} attempts",
                k + 1,
                spec.max_attempts
            )));
        }
    }

    let image = paint(spec, &mask, &mut rng);
    Ok(Scene {
        image,
        annotation: set,
        mask,
        centroids,
    })
}

fn paint(spec: &SyntheticSceneSpec, mask: &BinaryMask, rng: &mut ChaCha8Rng) -> RasterImage {
    let (w, h, c) = (spec.width, spec.height, spec.channels);
    let palette = spec.profile.palette();
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("finite sigma");
    // three random gratings make a smooth, non-periodic-looking texture
    let gratings: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let a = rng.gen_range(0.0..std::f64::consts::PI);
            let freq = rng.gen_range(0.02..0.08);
            (a.cos() * freq, a.sin() * freq, rng.gen_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let channel_of = |ch: usize| if c == 1 { 1 } else { ch };
    let mut data = vec![0u8; w * h * c];
    for y in 0..h {
        for x in 0..w {
            let texture: f64 = gratings
                .iter()
                .map(|&(fx, fy, p)| (fx * x as f64 + fy * y as f64 + p).sin())
                .sum::<f64>()
                * palette.texture
                / 3.0;
            let base = if mask.get(x, y) {
                &palette.object
            } else {
                &palette.background
            };
            for ch in 0..c {
                let v = base[channel_of(ch)] + texture + noise.sample(rng);
                data[(y * w + x) * c + ch] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    RasterImage::new(w, h, c, data).expect("sized buffer")
}

/// Writes `images/`, `annotations/`, `masks/` and `manifest.json` under
/// `out_dir` and returns the manifest.
pub fn write_dataset(spec: &SyntheticSceneSpec, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    use rayon::prelude::*;

    spec.validate()?;
    let out = out_dir.as_ref();
    for sub in ["images", "annotations", "masks"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let records = (0..spec.image_count())
        .into_par_iter()
        .map(|i| {
            let scene = generate_scene(spec, i)?;
            let id = image_id(spec, i);
            let rel = |dir: &str, ext: &str| PathBuf::from(dir).join(format!("{id}.{ext}"));
            let (image, annotation, mask) = (rel("images", "png"), rel("annotations", "json"), rel("masks", "png"));
            write_image(&scene.image, out.join(&image))?;
            scene.annotation.save(out.join(&annotation))?;
            write_mask(&scene.mask, out.join(&mask))?;
            Ok(ImageRecord {
                id,
                image,
                annotation: Some(annotation),
                mask: Some(mask),
                split: spec.split_of(i),
                object_count: Some(scene.annotation.count_objects()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        name: spec.name.clone(),
        params: spec.dataset_params(),
        records,
        base_dir: out.to_path_buf(),
    };
    manifest.save(out.join("manifest.json"))?;
    let spec_path = out.join("synth_spec.json");
    let text = serde_json::to_string_pretty(spec).expect("specs serialize");
    std::fs::write(&spec_path, text + "\n").map_err(|e| Error::io(&spec_path, e))?;
    Ok(manifest)
}
