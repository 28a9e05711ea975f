//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod gradcheck;

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vitiseg::analysis::{BoundingBox, ClusterResult, DetectedObject};
use vitiseg::imaging::BinaryMask;
use vitiseg::nn::Tensor;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Relative error with an absolute floor so that two values that are both
/// numerically zero do not blow up the ratio.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    rel_err_floor(analytic, numeric, 1e-6)
}

pub fn rel_err_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Through a deep network, a central difference with h = 1e-5 on an O(1)
/// loss cannot resolve derivatives much below this (rounding in the loss is
/// a few ulps, divided by 2h).
pub const NETWORK_FD_FLOOR: f64 = 1e-5;

/// Central difference of `f` with respect to `values[i]`.
pub fn central_diff(values: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = values[i];
    values[i] = orig + h;
    let up = f(values);
    values[i] = orig - h;
    let down = f(values);
    values[i] = orig;
    (up - down) / (2.0 * h)
}

/// Direct cross-correlation: out[o][y][x] = b[o] + Σ w[o][c][i][j]·x[c][y·s+i−p][x·s+j−p].
pub fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (c, h, wd) = x.chw().unwrap();
    let (oc, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let (xv, wv) = (x.values(), w.values());
    let mut out = vec![0.0; oc * oh * ow];
    for o in 0..oc {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.map_or(0.0, |b| b.values()[o]);
                for ci in 0..c {
                    for i in 0..k {
                        for j in 0..k {
                            let iy = (oy * stride + i) as isize - pad as isize;
                            let ix = (ox * stride + j) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += wv[((o * c + ci) * k + i) * k + j]
                                * xv[(ci * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::from_vec(&[oc, oh, ow], out).unwrap()
}

/// Direct transposed convolution: every input value scatters a scaled copy
/// of its kernel slice into the (cropped) output.
pub fn naive_deconv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (c, h, wd) = x.chw().unwrap();
    let (oc, k) = (w.shape()[1], w.shape()[2]);
    let oh = (h - 1) * stride + k - 2 * pad;
    let ow = (wd - 1) * stride + k - 2 * pad;
    let (xv, wv) = (x.values(), w.values());
    let mut out = vec![0.0; oc * oh * ow];
    for o in 0..oc {
        let bias = b.map_or(0.0, |b| b.values()[o]);
        out[o * oh * ow..(o + 1) * oh * ow].fill(bias);
    }
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..wd {
                let v = xv[(ci * h + y) * wd + xx];
                for o in 0..oc {
                    for i in 0..k {
                        for j in 0..k {
                            let ty = (y * stride + i) as isize - pad as isize;
                            let tx = (xx * stride + j) as isize - pad as isize;
                            if ty < 0 || tx < 0 || ty >= oh as isize || tx >= ow as isize {
                                continue;
                            }
                            out[(o * oh + ty as usize) * ow + tx as usize] +=
                                v * wv[((ci * oc + o) * k + i) * k + j];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[oc, oh, ow], out).unwrap()
}

pub fn naive_pool(x: &Tensor) -> Tensor {
    let (c, h, w) = x.chw().unwrap();
    let xv = x.values();
    let mut out = Vec::new();
    for ch in 0..c {
        for y in (0..h).step_by(2) {
            for xx in (0..w).step_by(2) {
                let at = |dy: usize, dx: usize| xv[(ch * h + y + dy) * w + xx + dx];
                out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
            }
        }
    }
    Tensor::from_vec(&[c, h / 2, w / 2], out).unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, density: f64) -> BinaryMask {
    let bits = (0..w * h).map(|_| rng.gen_bool(density)).collect();
    BinaryMask::new(w, h, bits).unwrap()
}

/// 8-connected components by explicit stack flood fill, as sets of pixels.
pub fn flood_fill_components(mask: &BinaryMask) -> BTreeSet<BTreeSet<(usize, usize)>> {
    let (w, h) = (mask.width(), mask.height());
    let mut seen = vec![false; w * h];
    let mut out = BTreeSet::new();
    for sy in 0..h {
        for sx in 0..w {
            if !mask.get(sx, sy) || seen[sy * w + sx] {
                continue;
            }
            let mut comp = BTreeSet::new();
            let mut stack = vec![(sx, sy)];
            seen[sy * w + sx] = true;
            while let Some((x, y)) = stack.pop() {
                comp.insert((x, y));
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let nx = x as isize + dx;
                        let ny = y as isize + dy;
                        if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                            continue;
                        }
                        let (nx, ny) = (nx as usize, ny as usize);
                        if mask.get(nx, ny) && !seen[ny * w + nx] {
                            seen[ny * w + nx] = true;
                            stack.push((nx, ny));
                        }
                    }
                }
            }
            out.insert(comp);
        }
    }
    out
}

pub fn pixel_set(mask: &BinaryMask, object: bool) -> BTreeSet<(usize, usize)> {
    let mut s = BTreeSet::new();
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) == object {
                s.insert((x, y));
            }
        }
    }
    s
}

pub fn set_iou(a: &BTreeSet<(usize, usize)>, b: &BTreeSet<(usize, usize)>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Maximum number of one-to-one pairs closer than `t`, by exhaustive search.
pub fn brute_force_matching(pred: &[(f64, f64)], truth: &[(f64, f64)], t: f64) -> usize {
    fn go(i: usize, pred: &[(f64, f64)], truth: &[(f64, f64)], used: &mut Vec<bool>, t: f64) -> usize {
        if i == pred.len() {
            return 0;
        }
        let mut best = go(i + 1, pred, truth, used, t);
        for j in 0..truth.len() {
            if used[j] {
                continue;
            }
            let d = ((pred[i].0 - truth[j].0).powi(2) + (pred[i].1 - truth[j].1).powi(2)).sqrt();
            if d < t {
                used[j] = true;
                best = best.max(1 + go(i + 1, pred, truth, used, t));
                used[j] = false;
            }
        }
        best
    }
    go(0, pred, truth, &mut vec![false; truth.len()], t)
}

/// Greedy matching by repeated exhaustive search: among all still-unmatched
/// pairs closer than `t`, take the nearest (ties by lower predicted, then
/// true index) until none is left.
pub fn exhaustive_greedy_pairs(pred: &[(f64, f64)], truth: &[(f64, f64)], t: f64) -> Vec<(usize, usize)> {
    let mut used_p = vec![false; pred.len()];
    let mut used_t = vec![false; truth.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, p) in pred.iter().enumerate() {
            for (j, q) in truth.iter().enumerate() {
                if used_p[i] || used_t[j] {
                    continue;
                }
                let d = ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
                if d < t && best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, i, j));
                }
            }
        }
        let Some((_, i, j)) = best else {
            return out;
        };
        used_p[i] = true;
        used_t[j] = true;
        out.push((i, j));
    }
}

/// Instances at the density of the synthetic disc scenes: tolerance t = d = 9,
/// r = 4 discs with the 4 px gap of the end-to-end scenes (true centroids at
/// least 13 apart), about 40
/// discs per 256² (8 objects on a 115 px canvas). Each truth is detected with
/// probability 0.9, its centroid displaced uniformly within the tolerance
/// disc, and up to two spurious detections are added.
pub fn detection_instance(rng: &mut ChaCha8Rng) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
    const T: f64 = 9.0;
    const CANVAS: f64 = 115.0;
    const SEP: f64 = 13.0;
    let nt = rng.gen_range(0..=8);
    let mut truth: Vec<(f64, f64)> = Vec::new();
    while truth.len() < nt {
        let p = (rng.gen_range(0.0..CANVAS), rng.gen_range(0.0..CANVAS));
        if truth.iter().all(|q: &(f64, f64)| (p.0 - q.0).hypot(p.1 - q.1) >= SEP) {
            truth.push(p);
        }
    }
    let mut pred = Vec::new();
    for &(x, y) in &truth {
        if rng.gen_bool(0.9) {
            let r = T * rng.gen_range(0.0f64..1.0).sqrt();
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            pred.push((x + r * a.cos(), y + r * a.sin()));
        }
    }
    for _ in 0..rng.gen_range(0..=2) {
        if pred.len() < 8 {
            pred.push((rng.gen_range(0.0..CANVAS), rng.gen_range(0.0..CANVAS)));
        }
    }
    (pred, truth)
}

/// Point-like objects at the given centroids, labeled 1.. in order.
pub fn objects_at(points: &[(f64, f64)]) -> Vec<DetectedObject> {
    points
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| DetectedObject {
            label: i as u32 + 1,
            pixel_count: 1,
            centroid: (x, y),
            bbox: BoundingBox {
                min_x: x as usize,
                min_y: y as usize,
                max_x: x as usize,
                max_y: y as usize,
            },
        })
        .collect()
}

/// Partition as a set of label sets, independent of id assignment.
pub fn partition(objs: &[DetectedObject], r: &ClusterResult) -> BTreeSet<BTreeSet<u32>> {
    let mut groups = vec![BTreeSet::new(); r.cluster_count];
    for (o, &c) in objs.iter().zip(&r.assignments) {
        groups[c].insert(o.label);
    }
    groups.into_iter().collect()
}

