//! Dataset manifests: image records with split tags and per-dataset parameters.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotation::{AnnotationSet, PrimitiveKind};
use crate::error::{Error, Result};
use crate::imaging::{read_image, read_mask, BinaryMask, RasterImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    /// Paths are relative to the manifest's directory unless absolute.
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    pub split: Split,
    /// Object count recorded by the generator, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_count: Option<usize>,
}

impl ImageRecord {
    pub fn has_ground_truth(&self) -> bool {
        self.annotation.is_some() || self.mask.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<PrimitiveKind>,
    /// Circle annotation radius r.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stroke_width: Option<f64>,
    pub min_region_size: usize,
    pub cluster_distance_threshold: f64,
    /// Centroid match tolerance t.
    pub tolerance: f64,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub params: DatasetParams,
    pub records: Vec<ImageRecord>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifests serialize");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Validation(format!("duplicate image id {:?}", r.id)));
            }
            if r.split != Split::Test && !r.has_ground_truth() {
                return Err(Error::Validation(format!(
                    "{:?} record {:?} has neither annotation nor mask",
                    r.split, r.id
                )));
            }
        }
        if !matches!(self.params.channels, 1 | 3 | 4) {
            return Err(Error::Validation(format!(
                "unsupported channel count {}",
                self.params.channels
            )));
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn record(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn load_image(&self, r: &ImageRecord) -> Result<RasterImage> {
        read_image(self.resolve(&r.image))
    }

    pub fn load_annotation(&self, r: &ImageRecord) -> Result<Option<AnnotationSet>> {
        let Some(path) = &r.annotation else {
            return Ok(None);
        };
        let mut set = AnnotationSet::load(self.resolve(path))?;
        if set.radius.is_none() {
            set.radius = self.params.radius;
        }
        if set.stroke_width.is_none() {
            set.stroke_width = self.params.stroke_width;
        }
        Ok(Some(set))
    }

    /// Ground-truth mask: the stored mask if present, else the rasterized annotation.
    pub fn ground_truth(&self, r: &ImageRecord) -> Result<BinaryMask> {
        if let Some(path) = &r.mask {
            return read_mask(self.resolve(path));
        }
        match self.load_annotation(r)? {
            Some(set) => set.rasterize(),
            None => Err(Error::InvalidInput(format!("image {:?} has no ground truth", r.id))),
        }
    }
}
