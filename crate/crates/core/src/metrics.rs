//! Segmentation (per-class IoU, mIoU) and detection (centroid matching,
//! precision/recall/F1) scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::BinaryMask;

fn check_dims(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::ShapeMismatch(format!(
            "cannot compare a {}×{} mask with a {}×{} mask",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// `|A ∩ B| / |A ∪ B|` over the object pixels; two empty sets score 1.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_dims(a, b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// IoU of class `class` (0 = object, 1 = background).
pub fn class_iou(prediction: &BinaryMask, truth: &BinaryMask, class: usize) -> Result<f64> {
    match class {
        0 => iou(prediction, truth),
        1 => iou(&prediction.complement(), &truth.complement()),
        _ => Err(Error::InvalidParameter(format!("no class {class}; classes are 0 and 1"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScore {
    pub iou_object: f64,
    pub iou_background: f64,
    pub miou: f64,
}

impl SegmentationScore {
    pub fn compute(prediction: &BinaryMask, truth: &BinaryMask) -> Result<Self> {
        let iou_object = class_iou(prediction, truth, 0)?;
        let iou_background = class_iou(prediction, truth, 1)?;
        Ok(Self {
            iou_object,
            iou_background,
            miou: (iou_object + iou_background) / 2.0,
        })
    }
}

/// Mean of the per-image mIoU values.
pub fn dataset_miou(scores: &[SegmentationScore]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("dataset mIoU needs at least one image".into()));
    }
    Ok(scores.iter().map(|s| s.miou).sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl DetectionScore {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }
}

/// One-to-one greedy matching: all pairs closer than `tolerance`, taken
/// nearest first (ties by predicted then true index), each endpoint used once.
pub fn match_pairs(predicted: &[(f64, f64)], truth: &[(f64, f64)], tolerance: f64) -> Result<Vec<(usize, usize)>> {
    if !(tolerance > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "match tolerance must be positive, got {tolerance}"
        )));
    }
    let mut pairs = Vec::new();
    for (i, p) in predicted.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            let d = (p.0 - t.0).hypot(p.1 - t.1);
            if d < tolerance {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; predicted.len()];
    let mut used_t = vec![false; truth.len()];
    let mut matched = Vec::new();
    for (_, i, j) in pairs {
        if !used_p[i] && !used_t[j] {
            used_p[i] = true;
            used_t[j] = true;
            matched.push((i, j));
        }
    }
    Ok(matched)
}

pub fn match_objects(predicted: &[(f64, f64)], truth: &[(f64, f64)], tolerance: f64) -> Result<DetectionScore> {
    let tp = match_pairs(predicted, truth, tolerance)?.len();
    Ok(DetectionScore::from_counts(tp, predicted.len() - tp, truth.len() - tp))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEvaluation {
    pub image_id: String,
    #[serde(flatten)]
    pub segmentation: SegmentationScore,
    #[serde(flatten)]
    pub detection: DetectionScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanScores {
    pub iou0: f64,
    pub iou1: f64,
    pub miou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub tolerance: f64,
    pub images: Vec<ImageEvaluation>,
    /// Arithmetic means of the per-image rows.
    pub mean: MeanScores,
    /// Scores from counts summed over all images.
    pub pooled: DetectionScore,
}

pub const CSV_HEADER: &str = "image_id,iou0,iou1,miou,tp,fp,fn,precision,recall,f1";

impl EvaluationReport {
    /// Aggregates per-image rows (in the given order).
    pub fn from_rows(images: Vec<ImageEvaluation>, tolerance: f64) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidInput("no images to evaluate".into()));
        }
        let n = images.len() as f64;
        let mean_of = |f: &dyn Fn(&ImageEvaluation) -> f64| images.iter().map(f).sum::<f64>() / n;
        let mean = MeanScores {
            iou0: mean_of(&|r| r.segmentation.iou_object),
            iou1: mean_of(&|r| r.segmentation.iou_background),
            miou: mean_of(&|r| r.segmentation.miou),
            precision: mean_of(&|r| r.detection.precision),
            recall: mean_of(&|r| r.detection.recall),
            f1: mean_of(&|r| r.detection.f1),
        };
        let sum = |f: &dyn Fn(&DetectionScore) -> usize| images.iter().map(|r| f(&r.detection)).sum();
        let pooled = DetectionScore::from_counts(sum(&|d| d.tp), sum(&|d| d.fp), sum(&|d| d.fn_));
        Ok(Self {
            tolerance,
            images,
            mean,
            pooled,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.images {
            let (s, d) = (&r.segmentation, &r.detection);
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.image_id, s.iou_object, s.iou_background, s.miou, d.tp, d.fp, d.fn_, d.precision, d.recall, d.f1
            ));
        }
        out
    }
}

/// Scores one predicted mask against its ground truth. Object centroids come
/// from `centroids`, which the caller derives with its analysis parameters.
pub fn evaluate_image(
    image_id: &str,
    prediction: &BinaryMask,
    truth: &BinaryMask,
    predicted_centroids: &[(f64, f64)],
    true_centroids: &[(f64, f64)],
    tolerance: f64,
) -> Result<ImageEvaluation> {
    Ok(ImageEvaluation {
        image_id: image_id.to_string(),
        segmentation: SegmentationScore::compute(prediction, truth)?,
        detection: match_objects(predicted_centroids, true_centroids, tolerance)?,
    })
}
