//! Object detection on post-processed masks: 8-connected region labeling,
//! centroid clustering and pedicel lengths.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_x: usize,
    pub min_y: usize,
    pub max_x: usize,
    pub max_y: usize,
}

impl BoundingBox {
    /// Euclidean length of the box diagonal measured between pixel centers.
    pub fn diagonal(&self) -> f64 {
        let dx = (self.max_x - self.min_x) as f64;
        let dy = (self.max_y - self.min_y) as f64;
        dx.hypot(dy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedObject {
    /// 1-based, in raster order of each component's first pixel.
    pub label: u32,
    pub pixel_count: usize,
    pub centroid: (f64, f64),
    pub bbox: BoundingBox,
}

/// How many of the longest pedicels to average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TopN {
    Count(usize),
    All,
}

impl fmt::Display for TopN {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopN::Count(n) => write!(f, "{n}"),
            TopN::All => f.write_str("all"),
        }
    }
}

impl TryFrom<String> for TopN {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<TopN> for String {
    fn from(t: TopN) -> String {
        t.to_string()
    }
}

impl std::str::FromStr for TopN {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(TopN::All);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(TopN::Count(n)),
            _ => Err(format!("expected a positive count or \"all\", got {s:?}")),
        }
    }
}

pub const DEFAULT_TOP_N: [TopN; 4] = [TopN::Count(1), TopN::Count(10), TopN::Count(15), TopN::All];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisParams {
    pub min_region_size: usize,
    pub cluster_distance_threshold: f64,
    pub pedicel_top_n: Vec<TopN>,
}

impl AnalysisParams {
    pub fn new(min_region_size: usize, cluster_distance_threshold: f64) -> Self {
        Self {
            min_region_size,
            cluster_distance_threshold,
            pedicel_top_n: DEFAULT_TOP_N.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cluster_distance_threshold > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "cluster distance threshold must be positive, got {}",
                self.cluster_distance_threshold
            )));
        }
        Ok(())
    }
}

/// Per-pixel component labels (0 = not part of a kept object).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub objects: Vec<DetectedObject>,
}

fn find(parent: &mut [u32], mut i: u32) -> u32 {
    while parent[i as usize] != i {
        let grand = parent[parent[i as usize] as usize];
        parent[i as usize] = grand;
        i = grand;
    }
    i
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    // the smaller provisional label (earlier in raster order) stays the root
    if ra < rb {
        parent[rb as usize] = ra;
    } else if rb < ra {
        parent[ra as usize] = rb;
    }
}

/// Two-pass union-find labeling with 8-connectivity; components smaller
/// than `min_region_size` pixels are discarded.
pub fn label_regions(mask: &BinaryMask, min_region_size: usize) -> LabelMap {
    let (w, h) = (mask.width(), mask.height());
    let bits = mask.bits();
    let mut prov = vec![0u32; w * h];
    let mut parent: Vec<u32> = vec![0];

    for y in 0..h {
        for x in 0..w {
            if !bits[y * w + x] {
                continue;
            }
            // already-visited neighbours: W, NW, N, NE
            let mut neigh = [0u32; 4];
            let mut n = 0;
            if x > 0 && prov[y * w + x - 1] != 0 {
                neigh[n] = prov[y * w + x - 1];
                n += 1;
            }
            if y > 0 {
                let row = (y - 1) * w;
                if x > 0 && prov[row + x - 1] != 0 {
                    neigh[n] = prov[row + x - 1];
                    n += 1;
                }
                if prov[row + x] != 0 {
                    neigh[n] = prov[row + x];
                    n += 1;
                }
                if x + 1 < w && prov[row + x + 1] != 0 {
                    neigh[n] = prov[row + x + 1];
                    n += 1;
                }
            }
            let label = if n == 0 {
                let l = parent.len() as u32;
                parent.push(l);
                l
            } else {
                let first = neigh[0];
                for &other in &neigh[1..n] {
                    union(&mut parent, first, other);
                }
                first
            };
            prov[y * w + x] = label;
        }
    }

    struct Acc {
        count: usize,
        sx: f64,
        sy: f64,
        bbox: BoundingBox,
    }
    // roots are visited in raster order of their first pixel because a root is
    // always the smallest provisional label of its component
    let mut slot = vec![u32::MAX; parent.len()];
    let mut accs: Vec<Acc> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let p = prov[y * w + x];
            if p == 0 {
                continue;
            }
            let root = find(&mut parent, p) as usize;
            if slot[root] == u32::MAX {
                slot[root] = accs.len() as u32;
                accs.push(Acc {
                    count: 0,
                    sx: 0.0,
                    sy: 0.0,
                    bbox: BoundingBox {
                        min_x: x,
                        min_y: y,
                        max_x: x,
                        max_y: y,
                    },
                });
            }
            let a = &mut accs[slot[root] as usize];
            a.count += 1;
            a.sx += x as f64;
            a.sy += y as f64;
            a.bbox.min_x = a.bbox.min_x.min(x);
            a.bbox.max_x = a.bbox.max_x.max(x);
            a.bbox.max_y = y;
            prov[y * w + x] = slot[root] + 1;
        }
    }

    let mut final_label = vec![0u32; accs.len() + 1];
    let mut objects = Vec::new();
    for (i, a) in accs.iter().enumerate() {
        if a.count < min_region_size.max(1) {
            continue;
        }
        let label = objects.len() as u32 + 1;
        final_label[i + 1] = label;
        objects.push(DetectedObject {
            label,
            pixel_count: a.count,
            centroid: (a.sx / a.count as f64, a.sy / a.count as f64),
            bbox: a.bbox,
        });
    }
    for l in prov.iter_mut() {
        *l = final_label[*l as usize];
    }
    LabelMap {
        width: w,
        height: h,
        labels: prov,
        objects,
    }
}

pub fn region_label(mask: &BinaryMask, params: &AnalysisParams) -> Vec<DetectedObject> {
    label_regions(mask, params.min_region_size).objects
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterResult {
    /// Cluster id of each input object, in input order.
    pub assignments: Vec<usize>,
    pub cluster_count: usize,
    pub member_counts: Vec<usize>,
}

/// Single-linkage clusters of centroids: two objects share a cluster iff a
/// chain of centroid distances each strictly below `threshold` joins them.
/// Cluster ids follow the smallest member label.
pub fn cluster_objects(objects: &[DetectedObject], threshold: f64) -> Result<ClusterResult> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "cluster distance threshold must be positive, got {threshold}"
        )));
    }
    let n = objects.len();
    let mut parent: Vec<u32> = (0..n as u32).collect();
    for i in 0..n {
        let (xi, yi) = objects[i].centroid;
        for j in i + 1..n {
            let (xj, yj) = objects[j].centroid;
            if (xi - xj).hypot(yi - yj) < threshold {
                union(&mut parent, i as u32, j as u32);
            }
        }
    }
    let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i as u32) as usize).collect();
    let mut min_label = vec![u32::MAX; n];
    for (i, &r) in roots.iter().enumerate() {
        min_label[r] = min_label[r].min(objects[i].label);
    }
    let mut order: Vec<(u32, usize)> = (0..n)
        .filter(|&r| roots[r] == r)
        .map(|r| (min_label[r], r))
        .collect();
    order.sort_unstable();
    let mut id_of_root = vec![0usize; n];
    for (id, &(_, r)) in order.iter().enumerate() {
        id_of_root[r] = id;
    }
    let assignments: Vec<usize> = roots.iter().map(|&r| id_of_root[r]).collect();
    let mut member_counts = vec![0; order.len()];
    for &a in &assignments {
        member_counts[a] += 1;
    }
    Ok(ClusterResult {
        assignments,
        cluster_count: order.len(),
        member_counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PedicelMean {
    pub n: TopN,
    /// Number of objects actually averaged (`n` capped at the object count).
    pub used: usize,
    pub mean_length: f64,
}

/// Mean bounding-box diagonal of the `n` longest objects for each requested `n`.
pub fn pedicel_lengths(objects: &[DetectedObject], top_n: &[TopN]) -> Vec<PedicelMean> {
    let mut lengths: Vec<f64> = objects.iter().map(|o| o.bbox.diagonal()).collect();
    lengths.sort_by(|a, b| b.total_cmp(a));
    top_n
        .iter()
        .map(|&n| {
            let used = match n {
                TopN::Count(k) => k.min(lengths.len()),
                TopN::All => lengths.len(),
            };
            let mean_length = if used == 0 {
                0.0
            } else {
                lengths[..used].iter().sum::<f64>() / used as f64
            };
            PedicelMean {
                n,
                used,
                mean_length,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster_count: usize,
    pub member_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzedObject {
    #[serde(flatten)]
    pub object: DetectedObject,
    pub cluster: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub image_id: String,
    pub object_count: usize,
    pub objects: Vec<AnalyzedObject>,
    pub clusters: ClusterSummary,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pedicels: Option<Vec<PedicelMean>>,
}

/// Full per-image analysis; the pedicel table is included when `pedicels` is set.
pub fn analyze_mask(
    image_id: &str,
    mask: &BinaryMask,
    params: &AnalysisParams,
    pedicels: bool,
) -> Result<AnalysisReport> {
    params.validate()?;
    let objects = region_label(mask, params);
    let clusters = cluster_objects(&objects, params.cluster_distance_threshold)?;
    let pedicels = pedicels.then(|| pedicel_lengths(&objects, &params.pedicel_top_n));
    Ok(AnalysisReport {
        image_id: image_id.to_string(),
        object_count: objects.len(),
        objects: objects
            .into_iter()
            .zip(&clusters.assignments)
            .map(|(object, &cluster)| AnalyzedObject { object, cluster })
            .collect(),
        clusters: ClusterSummary {
            cluster_count: clusters.cluster_count,
            member_counts: clusters.member_counts,
        },
        pedicels,
    })
}
