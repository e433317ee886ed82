//! Discovery of shape prototypes.
//!
//! All routines work on plain points (`Vec<f64>`) under the Euclidean
//! metric, so they serve both the 30-day shape vectors and small test
//! fixtures. [`shape_points`] converts shapes into points, dropping
//! degenerate ones. Ties are always resolved toward the lowest index.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{shape_area, ShapeVector};
use crate::{Error, Result, HORIZON};

pub const DEFAULT_MAX_ITER: usize = 300;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_RESTARTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl KMeansParams {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            restarts: DEFAULT_RESTARTS,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanShiftParams {
    pub bandwidth: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl MeanShiftParams {
    pub fn new(bandwidth: f64) -> Self {
        Self {
            bandwidth,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum ClusterParams {
    KMeans(KMeansParams),
    MeanShift(MeanShiftParams),
}

impl ClusterParams {
    pub fn method_name(&self) -> &'static str {
        match self {
            ClusterParams::KMeans(_) => "kmeans",
            ClusterParams::MeanShift(_) => "meanshift",
        }
    }
}

/// Prototype library plus the label of every clustered point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeModel {
    pub params: ClusterParams,
    pub prototypes: Vec<Vec<f64>>,
    /// Prototype index for each input point, in input order.
    pub labels: Vec<usize>,
    pub seed: u64,
    /// Whether points carried the shape area as an extra trailing coordinate.
    pub area_feature: bool,
    /// Iterations used (best restart for k-means, slowest point for mean shift).
    pub iterations: usize,
}

impl ShapeModel {
    pub fn n_prototypes(&self) -> usize {
        self.prototypes.len()
    }

    /// The prototype as a 30-day shape (any area coordinate stripped).
    pub fn prototype_shape(&self, index: usize) -> Result<ShapeVector> {
        let p = self
            .prototypes
            .get(index)
            .ok_or_else(|| Error::invalid("prototype index", format!("{index} out of range")))?;
        ShapeVector::from_prototype(&p[..HORIZON])
    }

    /// Nearest-prototype labels for shapes; degenerate shapes get `None`.
    pub fn assign_shapes(&self, shapes: &[ShapeVector]) -> Result<Vec<Option<usize>>> {
        let (points, kept) = shape_points(shapes, self.area_feature)?;
        let labels = assign_to_prototypes(self, &points)?;
        let mut out = vec![None; shapes.len()];
        for (idx, label) in kept.into_iter().zip(labels) {
            out[idx] = Some(label);
        }
        Ok(out)
    }
}

/// Points for clustering: the 30 shape values, optionally followed by the
/// shape area. Returns the points and the indices of the non-degenerate
/// shapes they came from.
pub fn shape_points(shapes: &[ShapeVector], with_area: bool) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut points = Vec::with_capacity(shapes.len());
    let mut kept = Vec::with_capacity(shapes.len());
    for (i, s) in shapes.iter().enumerate() {
        if s.is_degenerate() {
            continue;
        }
        let mut p = s.values().to_vec();
        if with_area {
            p.push(shape_area(s)?);
        }
        points.push(p);
        kept.push(i);
    }
    Ok((points, kept))
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance if it does not exceed `limit`.
#[inline]
fn sq_dist_within(a: &[f64], b: &[f64], limit: f64) -> Option<f64> {
    let mut acc = 0.0;
    for (ca, cb) in a.chunks(8).zip(b.chunks(8)) {
        acc += ca.iter().zip(cb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        if acc > limit {
            return None;
        }
    }
    Some(acc)
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(points: &[Vec<f64>], centers: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    points.iter().map(|p| nearest(p, centers)).unzip()
}

fn check_points(points: &[Vec<f64>]) -> Result<usize> {
    let first = points.first().ok_or(Error::EmptyInput)?;
    let d = first.len();
    if d == 0 {
        return Err(Error::invalid("points", "zero-dimensional"));
    }
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::invalid("points", "inconsistent dimensions"));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("points"));
    }
    Ok(d)
}

/// Result of one Lloyd run.
#[derive(Debug, Clone)]
pub struct LloydRun {
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// WSS under nearest assignment: initial centroids, then after each update.
    pub wss_trace: Vec<f64>,
    pub iterations: usize,
}

impl LloydRun {
    pub fn wss(&self) -> f64 {
        *self.wss_trace.last().expect("trace holds the initial WSS")
    }
}

/// Lloyd iterations from the given centroids. A cluster that loses all its
/// points is reseeded at the point farthest from its current centroid.
pub fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iter: usize, tol: f64) -> LloydRun {
    let d = points[0].len();
    let k = centroids.len();
    let (mut labels, mut dists) = assign(points, &centroids);
    let mut wss_trace = vec![dists.iter().sum::<f64>()];
    let mut iterations = 0;

    while iterations < max_iter {
        iterations += 1;
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut next = centroids.clone();
        for j in 0..k {
            if counts[j] > 0 {
                let n = counts[j] as f64;
                next[j] = sums[j].iter().map(|s| s / n).collect();
            }
        }
        for j in (0..k).filter(|&j| counts[j] == 0) {
            let mut far = 0;
            for i in 1..points.len() {
                if dists[i] > dists[far] {
                    far = i;
                }
            }
            next[j] = points[far].clone();
            dists[far] = 0.0;
            labels[far] = j;
        }

        let shift = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| sq_dist(a, b))
            .fold(0.0, f64::max)
            .sqrt();
        centroids = next;
        let (new_labels, new_dists) = assign(points, &centroids);
        wss_trace.push(new_dists.iter().sum());
        let changed = new_labels != labels;
        labels = new_labels;
        dists = new_dists;
        if shift < tol || !changed {
            break;
        }
    }

    LloydRun {
        centroids,
        labels,
        wss_trace,
        iterations,
    }
}

/// k-means++ seeding: first centre uniform, the rest proportional to the
/// squared distance to the nearest chosen centre.
fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave the target just past the running sum
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(pick);
        for (slot, p) in d2.iter_mut().zip(points) {
            *slot = slot.min(sq_dist(p, &points[pick]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

fn validate_kmeans(points: &[Vec<f64>], params: &KMeansParams) -> Result<()> {
    check_points(points)?;
    if params.k == 0 || params.k > points.len() {
        return Err(Error::invalid(
            "k",
            format!("must lie in 1..={}, got {}", points.len(), params.k),
        ));
    }
    if params.restarts == 0 {
        return Err(Error::invalid("restarts", "must be at least 1"));
    }
    Ok(())
}

/// Best-of-restarts k-means; also returns every restart's run.
pub fn kmeans_traced(
    points: &[Vec<f64>],
    params: &KMeansParams,
    seed: u64,
) -> Result<(ShapeModel, Vec<LloydRun>)> {
    validate_kmeans(points, params)?;
    let runs: Vec<LloydRun> = (0..params.restarts as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r));
            let init = kmeans_plus_plus(points, params.k, &mut rng);
            lloyd(points, init, params.max_iter, params.tol)
        })
        .collect();
    let mut best = 0;
    for (i, run) in runs.iter().enumerate() {
        if run.wss() < runs[best].wss() {
            best = i;
        }
    }
    let run = &runs[best];
    let model = ShapeModel {
        params: ClusterParams::KMeans(*params),
        prototypes: run.centroids.clone(),
        labels: run.labels.clone(),
        seed,
        area_feature: false,
        iterations: run.iterations,
    };
    Ok((model, runs))
}

pub fn kmeans(points: &[Vec<f64>], params: &KMeansParams, seed: u64) -> Result<ShapeModel> {
    kmeans_traced(points, params, seed).map(|(model, _)| model)
}

/// Within-cluster sum of squared distances to the assigned prototypes.
pub fn wss(points: &[Vec<f64>], model: &ShapeModel) -> Result<f64> {
    if model.labels.len() < points.len() {
        return Err(Error::UnlabeledPoint(model.labels.len()));
    }
    let mut total = 0.0;
    for (i, (p, &l)) in points.iter().zip(&model.labels).enumerate() {
        let c = model.prototypes.get(l).ok_or(Error::UnlabeledPoint(i))?;
        total += sq_dist(p, c);
    }
    Ok(total)
}

/// Best-of-restarts WSS for every k in `1..=k_max` (`params.k` is ignored).
pub fn elbow_sweep(
    points: &[Vec<f64>],
    k_max: usize,
    params: &KMeansParams,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    validate_kmeans(points, &KMeansParams { k: k_max, ..*params })?;
    (1..=k_max)
        .into_par_iter()
        .map(|k| {
            let model = kmeans(points, &KMeansParams { k, ..*params }, seed)?;
            Ok((k, wss(points, &model)?))
        })
        .collect()
}

/// Pairwise Euclidean distances, row-major `n × n`.
fn distance_matrix(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| points.iter().map(|q| sq_dist(&points[i], q).sqrt()).collect())
        .collect();
    rows.concat()
}

fn silhouette_from_distances(n: usize, dist: &[f64], labels: &[usize]) -> Result<f64> {
    let ids: BTreeMap<usize, usize> = labels
        .iter()
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(compact, label)| (label, compact))
        .collect();
    if ids.len() < 2 {
        return Err(Error::TooFewClusters(ids.len()));
    }
    let cluster: Vec<usize> = labels.iter().map(|l| ids[l]).collect();
    let mut sizes = vec![0usize; ids.len()];
    for &c in &cluster {
        sizes[c] += 1;
    }

    let scores: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = cluster[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; sizes.len()];
            for (j, &c) in cluster.iter().enumerate() {
                if j != i {
                    sums[c] += dist[i * n + j];
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..sizes.len())
                .filter(|&c| c != own)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom > 0.0 {
                (b - a) / denom
            } else {
                0.0
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / n as f64)
}

/// Mean silhouette coefficient. Points in singleton clusters score 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_points(points)?;
    if labels.len() != points.len() {
        return Err(Error::LengthMismatch {
            left: points.len(),
            right: labels.len(),
        });
    }
    silhouette_from_distances(points.len(), &distance_matrix(points), labels)
}

/// Silhouette of the k-means solution for every k in `k_min..=k_max`.
pub fn silhouette_sweep(
    points: &[Vec<f64>],
    k_min: usize,
    k_max: usize,
    params: &KMeansParams,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    if k_min < 2 {
        return Err(Error::TooFewClusters(k_min));
    }
    validate_kmeans(points, &KMeansParams { k: k_max, ..*params })?;
    let dist = distance_matrix(points);
    (k_min..=k_max)
        .map(|k| {
            let model = kmeans(points, &KMeansParams { k, ..*params }, seed)?;
            Ok((k, silhouette_from_distances(points.len(), &dist, &model.labels)?))
        })
        .collect()
}

/// Flat-kernel mean shift.
///
/// Every point climbs to a mode by repeatedly moving to the mean of all
/// points within `bandwidth`. Modes closer than `bandwidth / 2` to an
/// earlier mode are merged into it; modes left without any nearest point
/// are dropped.
pub fn mean_shift(points: &[Vec<f64>], params: &MeanShiftParams, seed: u64) -> Result<ShapeModel> {
    let d = check_points(points)?;
    if !(params.bandwidth > 0.0) || !params.bandwidth.is_finite() {
        return Err(Error::invalid("bandwidth", "must be positive"));
    }
    let radius2 = params.bandwidth * params.bandwidth;

    let climbed: Vec<(Vec<f64>, usize)> = points
        .par_iter()
        .map(|start| {
            let mut x = start.clone();
            let mut iterations = 0;
            while iterations < params.max_iter {
                iterations += 1;
                let mut sum = vec![0.0; d];
                let mut count = 0usize;
                for q in points {
                    if sq_dist_within(&x, q, radius2).is_some() {
                        count += 1;
                        for (s, v) in sum.iter_mut().zip(q) {
                            *s += v;
                        }
                    }
                }
                // the neighbourhood mean always keeps at least one point in range
                let n = count.max(1) as f64;
                let mean: Vec<f64> = sum.into_iter().map(|s| s / n).collect();
                let shift = sq_dist(&mean, &x).sqrt();
                x = mean;
                if shift < params.tol {
                    break;
                }
            }
            (x, iterations)
        })
        .collect();

    let merge2 = 0.25 * radius2;
    let mut modes: Vec<Vec<f64>> = Vec::new();
    for (m, _) in &climbed {
        if !modes.iter().any(|kept| sq_dist(kept, m) <= merge2) {
            modes.push(m.clone());
        }
    }

    let labels = loop {
        let (labels, _) = assign(points, &modes);
        let mut counts = vec![0usize; modes.len()];
        for &l in &labels {
            counts[l] += 1;
        }
        if counts.iter().all(|&c| c > 0) {
            break labels;
        }
        let mut idx = 0;
        modes.retain(|_| {
            let keep = counts[idx] > 0;
            idx += 1;
            keep
        });
    };

    Ok(ShapeModel {
        params: ClusterParams::MeanShift(*params),
        prototypes: modes,
        labels,
        seed,
        area_feature: false,
        iterations: climbed.iter().map(|(_, it)| *it).max().unwrap_or(0),
    })
}

/// Runs the configured method.
pub fn cluster(points: &[Vec<f64>], params: &ClusterParams, seed: u64) -> Result<ShapeModel> {
    match params {
        ClusterParams::KMeans(p) => kmeans(points, p, seed),
        ClusterParams::MeanShift(p) => mean_shift(points, p, seed),
    }
}

/// Clusters the non-degenerate shapes. The returned model's labels align
/// with the returned indices into `shapes`.
pub fn cluster_shapes(
    shapes: &[ShapeVector],
    params: &ClusterParams,
    with_area: bool,
    seed: u64,
) -> Result<(ShapeModel, Vec<usize>)> {
    let (points, kept) = shape_points(shapes, with_area)?;
    let mut model = cluster(&points, params, seed)?;
    model.area_feature = with_area;
    Ok((model, kept))
}

/// Nearest-prototype labels.
pub fn assign_to_prototypes(model: &ShapeModel, points: &[Vec<f64>]) -> Result<Vec<usize>> {
    let d = model
        .prototypes
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::invalid("shape model", "has no prototypes"))?;
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::invalid(
            "points",
            format!("dimension differs from the prototypes ({d})"),
        ));
    }
    Ok(points.iter().map(|p| nearest(p, &model.prototypes).0).collect())
}
