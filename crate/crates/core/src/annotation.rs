//! Annotation primitives (fixed-radius circles, polygons, stroked lines) and
//! their rasterization into binary ground-truth masks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{mask_from_image, BinaryMask, RasterImage};

/// Stroke width used for line annotations when the file does not set one.
pub const DEFAULT_STROKE_WIDTH: f64 = 3.0;

const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Circle,
    Polygon,
    Line,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnnotationPrimitive {
    Circle {
        center: [f64; 2],
    },
    Polygon {
        vertices: Vec<[f64; 2]>,
    },
    Line {
        from: [f64; 2],
        to: [f64; 2],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stroke_width: Option<f64>,
    },
}

impl AnnotationPrimitive {
    pub fn kind(&self) -> PrimitiveKind {
        match self {
            Self::Circle { .. } => PrimitiveKind::Circle,
            Self::Polygon { .. } => PrimitiveKind::Polygon,
            Self::Line { .. } => PrimitiveKind::Line,
        }
    }

    fn anchor_points(&self) -> Vec<[f64; 2]> {
        match self {
            Self::Circle { center } => vec![*center],
            Self::Polygon { vertices } => vertices.clone(),
            Self::Line { from, to, .. } => vec![*from, *to],
        }
    }
}

/// All annotations of one image. Every primitive shares the set's kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub kind: PrimitiveKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stroke_width: Option<f64>,
    pub primitives: Vec<AnnotationPrimitive>,
}

impl AnnotationSet {
    pub fn new(image: impl Into<String>, width: usize, height: usize, kind: PrimitiveKind) -> Self {
        Self {
            image: image.into(),
            width,
            height,
            kind,
            radius: None,
            stroke_width: None,
            primitives: Vec::new(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("annotation sets serialize");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Object diameter `2r + 1` for circle annotations.
    pub fn diameter(&self) -> Option<f64> {
        self.radius.map(|r| 2.0 * r + 1.0)
    }

    fn circle_radius(&self) -> Result<f64> {
        let r = self
            .radius
            .ok_or_else(|| Error::Validation("circle annotations need a radius".into()))?;
        if !(r >= 0.0) {
            return Err(Error::Validation(format!("negative circle radius {r}")));
        }
        Ok(r)
    }

    /// Pixels covered by one primitive, clipped to the image.
    pub fn footprint(&self, prim: &AnnotationPrimitive) -> Result<Vec<(usize, usize)>> {
        let mut pixels = Vec::new();
        match prim {
            AnnotationPrimitive::Circle { center } => {
                let r = self.circle_radius()?;
                let [cx, cy] = *center;
                for (x, y) in self.window(cx - r, cy - r, cx + r, cy + r) {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    if dx * dx + dy * dy <= r * r + EPS {
                        pixels.push((x, y));
                    }
                }
            }
            AnnotationPrimitive::Polygon { vertices } => {
                if vertices.len() < 3 || polygon_area(vertices).abs() < EPS {
                    return Err(Error::Validation("degenerate polygon".into()));
                }
                let (lo, hi) = bounds(vertices);
                for (x, y) in self.window(lo[0], lo[1], hi[0], hi[1]) {
                    let p = [x as f64, y as f64];
                    if point_in_polygon(p, vertices) || on_polygon_boundary(p, vertices) {
                        pixels.push((x, y));
                    }
                }
            }
            AnnotationPrimitive::Line {
                from,
                to,
                stroke_width,
            } => {
                let width = stroke_width
                    .or(self.stroke_width)
                    .unwrap_or(DEFAULT_STROKE_WIDTH);
                if !(width > 0.0) {
                    return Err(Error::Validation(format!("stroke width {width} must be > 0")));
                }
                let half = width / 2.0;
                let (lo, hi) = bounds(&[*from, *to]);
                for (x, y) in self.window(lo[0] - half, lo[1] - half, hi[0] + half, hi[1] + half) {
                    if segment_distance([x as f64, y as f64], *from, *to) <= half + EPS {
                        pixels.push((x, y));
                    }
                }
            }
        }
        Ok(pixels)
    }

    fn window(
        &self,
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
    ) -> impl Iterator<Item = (usize, usize)> {
        let clamp = |v: f64, n: usize| v.clamp(0.0, (n as f64 - 1.0).max(0.0));
        let (xa, xb) = (clamp(x0.floor(), self.width) as usize, clamp(x1.ceil(), self.width) as usize);
        let (ya, yb) = (clamp(y0.floor(), self.height) as usize, clamp(y1.ceil(), self.height) as usize);
        let empty = self.width == 0 || self.height == 0;
        (ya..=yb)
            .filter(move |_| !empty)
            .flat_map(move |y| (xa..=xb).map(move |x| (x, y)))
    }

    /// Checks kinds, bounds, geometry and pairwise disjointness.
    pub fn validate(&self) -> Result<()> {
        self.rasterize().map(|_| ())
    }

    /// Ground-truth mask: exactly the pixels covered by some primitive.
    pub fn rasterize(&self) -> Result<BinaryMask> {
        let (w, h) = (self.width, self.height);
        let mut owner: Vec<Option<usize>> = vec![None; w * h];
        for (i, prim) in self.primitives.iter().enumerate() {
            if prim.kind() != self.kind {
                return Err(Error::Validation(format!(
                    "primitive {i} is a {:?} in a {:?} set",
                    prim.kind(),
                    self.kind
                )));
            }
            for [x, y] in prim.anchor_points() {
                if !(x >= 0.0 && y >= 0.0 && x <= w as f64 - 1.0 && y <= h as f64 - 1.0) {
                    return Err(Error::Validation(format!(
                        "primitive {i} point ({x}, {y}) outside {w}×{h} image"
                    )));
                }
            }
            for (x, y) in self.footprint(prim)? {
                let slot = &mut owner[y * w + x];
                match *slot {
                    Some(j) if j != i => {
                        return Err(Error::Validation(format!(
                            "primitives {j} and {i} overlap at ({x}, {y})"
                        )))
                    }
                    _ => *slot = Some(i),
                }
            }
        }
        let bits = owner.into_iter().map(|o| o.is_some()).collect();
        BinaryMask::new(w, h, bits)
    }

    pub fn count_objects(&self) -> usize {
        self.primitives.len()
    }
}

/// Min / max / mean object counts over a collection of annotated images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectCountSummary {
    pub images: usize,
    pub min: usize,
    pub max: usize,
    pub mean: f64,
}

impl ObjectCountSummary {
    pub fn from_counts(counts: &[usize]) -> Option<Self> {
        let min = *counts.iter().min()?;
        let max = *counts.iter().max()?;
        let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
        Some(Self {
            images: counts.len(),
            min,
            max,
            mean,
        })
    }
}

/// Recovers a mask from an image whose objects were painted in near-black:
/// a pixel is an object iff its brightest channel is at most `darkness_threshold`.
pub fn binarize_annotated_image(img: &RasterImage, darkness_threshold: u8) -> BinaryMask {
    mask_from_image(img, darkness_threshold).expect("dimensions come from a valid image")
}

fn bounds(points: &[[f64; 2]]) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in points {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (lo, hi)
}

fn polygon_area(v: &[[f64; 2]]) -> f64 {
    let n = v.len();
    (0..n)
        .map(|i| {
            let (a, b) = (v[i], v[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        / 2.0
}

/// Even-odd crossing test.
fn point_in_polygon(p: [f64; 2], v: &[[f64; 2]]) -> bool {
    let n = v.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (v[i], v[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn on_polygon_boundary(p: [f64; 2], v: &[[f64; 2]]) -> bool {
    let n = v.len();
    (0..n).any(|i| segment_distance(p, v[i], v[(i + 1) % n]) <= EPS)
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - qx).powi(2) + (p[1] - qy).powi(2)).sqrt()
}
