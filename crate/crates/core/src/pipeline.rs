//! End-to-end steps shared by the CLI and the tests: training patch sets
//! per evaluation mode, tiled segmentation, post-processing, analysis and
//! evaluation against a manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{analyze_mask, region_label, AnalysisParams, AnalysisReport};
use crate::augment::augment_all;
use crate::error::{Error, Result};
use crate::imaging::{
    binarize_probability, median_filter_3x3, read_mask, write_image, write_mask, BinaryMask, ProbabilityMap,
    RasterImage,
};
use crate::manifest::{DatasetManifest, ImageRecord, Split};
use crate::metrics::{evaluate_image, EvaluationReport, ImageEvaluation};
use crate::nn::{train, NetworkConfig, NetworkModel, TrainConfig, TrainReport, TrainingSample};
use crate::patching::{extract_patches, grid_origins, random_origins, recompose, Patch, PatchSpec, ProbabilityTile};

/// Number of training images used by the `5-*` modes.
pub const FIVE_IMAGE_SUBSET: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    /// Adjacent patches covering the first five training images.
    #[serde(rename = "5-cover")]
    FiveCover,
    /// As `5-cover`, with every patch augmented into four.
    #[serde(rename = "5-cover-da")]
    FiveCoverDa,
    /// Adjacent patches covering every training image.
    #[serde(rename = "all-cover")]
    AllCover,
    /// Random patches from every training image, augmented into four.
    #[serde(rename = "all-rand-da")]
    AllRandDa,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [Self::FiveCover, Self::FiveCoverDa, Self::AllCover, Self::AllRandDa];

    pub fn name(self) -> &'static str {
        match self {
            Self::FiveCover => "5-cover",
            Self::FiveCoverDa => "5-cover-da",
            Self::AllCover => "all-cover",
            Self::AllRandDa => "all-rand-da",
        }
    }

    pub fn augmented(self) -> bool {
        matches!(self, Self::FiveCoverDa | Self::AllRandDa)
    }

    pub fn random(self) -> bool {
        self == Self::AllRandDa
    }

    /// How many of `available` training images the mode draws from.
    pub fn image_count(self, available: usize) -> Result<usize> {
        match self {
            Self::FiveCover | Self::FiveCoverDa if available < FIVE_IMAGE_SUBSET => Err(Error::InvalidInput(format!(
                "{} needs {FIVE_IMAGE_SUBSET} training images, manifest has {available}",
                self.name()
            ))),
            Self::FiveCover | Self::FiveCoverDa => Ok(FIVE_IMAGE_SUBSET),
            Self::AllCover | Self::AllRandDa if available == 0 => Err(Error::EmptyTrainingSet),
            Self::AllCover | Self::AllRandDa => Ok(available),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown training mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tiling {
    Adjacent,
    Overlap50,
}

impl Tiling {
    pub fn patch_spec(self, side: usize) -> PatchSpec {
        match self {
            Tiling::Adjacent => PatchSpec::grid(side),
            Tiling::Overlap50 => PatchSpec::overlap50(side),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tiling::Adjacent => "adjacent",
            Tiling::Overlap50 => "overlap50",
        }
    }
}

impl fmt::Display for Tiling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tiling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Tiling::Adjacent, Tiling::Overlap50]
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown tiling {s:?}")))
    }
}

/// Seed of image `index`'s random patch positions.
fn image_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Patches one mode yields for images of the given sizes, without reading pixels.
pub fn mode_patch_count(sizes: &[(usize, usize)], mode: TrainMode, patch_size: usize, random_count: usize) -> Result<usize> {
    let n = mode.image_count(sizes.len())?;
    let per_image = sizes[..n]
        .iter()
        .map(|&(w, h)| {
            if mode.random() {
                PatchSpec::random(patch_size, random_count).validate()?;
                Ok(random_count)
            } else {
                grid_origins(w, h, &PatchSpec::grid(patch_size)).map(|o| o.len())
            }
        })
        .sum::<Result<usize>>()?;
    Ok(if mode.augmented() { per_image * 4 } else { per_image })
}

/// Training patches of one mode from `images` (each with its mask), in image order.
pub fn mode_patches(
    images: &[(RasterImage, BinaryMask)],
    mode: TrainMode,
    patch_size: usize,
    random_count: usize,
    seed: u64,
) -> Result<Vec<Patch>> {
    let n = mode.image_count(images.len())?;
    let mut patches = Vec::new();
    for (i, (img, mask)) in images[..n].iter().enumerate() {
        let origins = if mode.random() {
            random_origins(img.width(), img.height(), &PatchSpec::random(patch_size, random_count), image_seed(seed, i))?
        } else {
            grid_origins(img.width(), img.height(), &PatchSpec::grid(patch_size))?
        };
        patches.extend(extract_patches(img, Some(mask), &origins, patch_size)?);
    }
    if mode.augmented() {
        patches = augment_all(patches, seed)?;
    }
    Ok(patches)
}

/// Training images with ground truth, in manifest order.
pub fn training_images(manifest: &DatasetManifest) -> Result<Vec<(RasterImage, BinaryMask)>> {
    manifest
        .records_in(Split::Train)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|r| {
            let img = manifest.load_image(r)?;
            let mask = manifest.ground_truth(r)?;
            if (img.width(), img.height()) != (mask.width(), mask.height()) {
                return Err(Error::InvalidInput(format!(
                    "image {:?} is {}×{} but its ground truth is {}×{}",
                    r.id,
                    img.width(),
                    img.height(),
                    mask.width(),
                    mask.height()
                )));
            }
            Ok((img, mask))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub mode: TrainMode,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub random_count: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: NetworkModel,
    pub report: TrainReport,
    pub patch_count: usize,
}

/// Builds the mode's patch set and trains a freshly initialized network on it.
/// The configured seed drives initialization, patch sampling, augmentation and shuffling.
pub fn train_on_images(
    images: &[(RasterImage, BinaryMask)],
    opts: &TrainOptions,
    on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    let channels = opts.network.input_channels;
    if let Some((i, _)) = images.iter().enumerate().find(|(_, (img, _))| img.channels() != channels) {
        return Err(Error::ShapeMismatch(format!(
            "training image {i} has {} channels, network expects {channels}",
            images[i].0.channels()
        )));
    }
    let patches = mode_patches(images, opts.mode, opts.network.input_side, opts.random_count, opts.train.seed)?;
    let samples = patches
        .into_iter()
        .map(TrainingSample::from_patch)
        .collect::<Result<Vec<_>>>()?;
    let mut model = NetworkModel::new(opts.network.clone(), opts.train.seed)?;
    let report = train(&mut model, &samples, &opts.train, on_epoch)?;
    Ok(TrainOutcome {
        model,
        report,
        patch_count: samples.len(),
    })
}

pub fn train_from_manifest(
    manifest: &DatasetManifest,
    opts: &TrainOptions,
    on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    train_on_images(&training_images(manifest)?, opts, on_epoch)
}

/// Tiles `img`, maps every patch to background probabilities with `predict`
/// (in parallel) and recomposes the tiles in origin order.
pub fn segment_with<F>(img: &RasterImage, side: usize, tiling: Tiling, predict: F) -> Result<ProbabilityMap>
where
    F: Fn(&RasterImage) -> Result<Vec<f64>> + Sync,
{
    let origins = grid_origins(img.width(), img.height(), &tiling.patch_spec(side))?;
    let tiles = origins
        .par_iter()
        .map(|&(x, y)| {
            Ok(ProbabilityTile {
                origin: (x, y),
                size: side,
                values: predict(&img.crop(x, y, side, side)?)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    recompose(img.width(), img.height(), &tiles)
}

pub fn segment_image(model: &NetworkModel, img: &RasterImage, tiling: Tiling) -> Result<ProbabilityMap> {
    segment_with(img, model.config().input_side, tiling, |p| model.predict_patch(p))
}

/// Binarization followed by one 3×3 median pass.
pub fn postprocess(map: &ProbabilityMap, threshold: u8) -> BinaryMask {
    median_filter_3x3(&binarize_probability(map, threshold))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentedImage {
    pub id: String,
    pub probability: PathBuf,
    pub mask: PathBuf,
    pub tiles: usize,
}

/// Segments `records` and writes `probabilities/<id>.png` and `masks/<id>.png` under `out_dir`.
pub fn segment_records(
    model: &NetworkModel,
    manifest: &DatasetManifest,
    records: &[&ImageRecord],
    tiling: Tiling,
    threshold: u8,
    out_dir: &Path,
) -> Result<Vec<SegmentedImage>> {
    let (prob_dir, mask_dir) = (out_dir.join("probabilities"), out_dir.join("masks"));
    for d in [&prob_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let side = model.config().input_side;
    let channels = model.config().input_channels;
    records
        .iter()
        .map(|r| {
            let img = manifest.load_image(r)?;
            if img.channels() != channels {
                return Err(Error::ShapeMismatch(format!(
                    "image {:?} has {} channels, model expects {channels}",
                    r.id,
                    img.channels()
                )));
            }
            let tiles = grid_origins(img.width(), img.height(), &tiling.patch_spec(side))
                .map_err(|e| Error::InvalidInput(format!("image {:?}: {e}", r.id)))?
                .len();
            let map = segment_image(model, &img, tiling)?;
            let probability = prob_dir.join(format!("{}.png", r.id));
            let mask = mask_dir.join(format!("{}.png", r.id));
            write_image(&map.to_grayscale(), &probability)?;
            write_mask(&postprocess(&map, threshold), &mask)?;
            Ok(SegmentedImage {
                id: r.id.clone(),
                probability,
                mask,
                tiles,
            })
        })
        .collect()
}

/// Object centroids as used for matching. Ground truth keeps every
/// annotated object; predictions drop regions below `min_region_size`.
pub fn centroids(mask: &BinaryMask, min_region_size: usize) -> Vec<(f64, f64)> {
    region_label(mask, &AnalysisParams::new(min_region_size, 1.0))
        .into_iter()
        .map(|o| o.centroid)
        .collect()
}

/// Scores `(id, prediction, truth)` triples in the given order.
pub fn evaluate_pairs(
    pairs: &[(String, BinaryMask, BinaryMask)],
    min_region_size: usize,
    tolerance: f64,
) -> Result<EvaluationReport> {
    let rows = pairs
        .par_iter()
        .map(|(id, pred, truth)| {
            evaluate_image(id, pred, truth, &centroids(pred, min_region_size), &centroids(truth, 1), tolerance)
        })
        .collect::<Result<Vec<ImageEvaluation>>>()?;
    EvaluationReport::from_rows(rows, tolerance)
}

/// `<stem> → path` for every PNG in `dir`.
pub fn masks_in_dir(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Evaluates the predicted masks in `pred_dir` against the manifest's
/// evaluation split. Every prediction must name a manifest image and every
/// evaluation image must have a prediction.
pub fn evaluate_dir(
    manifest: &DatasetManifest,
    pred_dir: &Path,
    min_region_size: usize,
    tolerance: f64,
) -> Result<EvaluationReport> {
    let predictions = masks_in_dir(pred_dir)?;
    if let Some(id) = predictions.keys().find(|id| manifest.record(id).is_none()) {
        return Err(Error::UnpairedImage(id.clone()));
    }
    let pairs = manifest
        .records_in(Split::Eval)
        .map(|r| {
            let path = predictions.get(&r.id).ok_or_else(|| Error::UnpairedImage(r.id.clone()))?;
            Ok((r.id.clone(), read_mask(path)?, manifest.ground_truth(r)?))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_pairs(&pairs, min_region_size, tolerance)
}

/// Analysis reports for `(id, mask)` pairs, in input order.
pub fn analyze_masks(
    masks: &[(String, BinaryMask)],
    params: &AnalysisParams,
    pedicels: bool,
) -> Result<Vec<AnalysisReport>> {
    masks
        .par_iter()
        .map(|(id, mask)| analyze_mask(id, mask, params, pedicels))
        .collect()
}
