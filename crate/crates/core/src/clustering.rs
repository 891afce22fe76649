//! Budget-driven k-means over per-point features, cluster-center selection,
//! and propagation of clicked labels to whole clusters.
//!
//! [`kmeans`] runs k-means++ seeding followed by Lloyd iterations. The
//! assignment step skips distance evaluations with triangle-inequality bounds
//! (per-center lower bounds when they fit in memory, a single second-closest
//! bound otherwise); the resulting assignments are those of plain Lloyd.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frame::{Frame, UNLABELED};
use crate::labels::{LabelSource, PseudoLabels};

pub const CLUSTERING_MAGIC: &[u8; 4] = b"MLNC";
pub const CLUSTERING_VERSION: u32 = 1;

/// Above this many point-center pairs the per-center bounds are replaced by a single bound.
const MAX_CENTER_BOUNDS: usize = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub max_iters: usize,
    /// Convergence threshold on the summed squared centroid movement.
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

/// Output of [`kmeans`].
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub k: usize,
    pub dim: usize,
    pub assignments: Vec<u32>,
    /// Row-major k×D centroids.
    pub centroids: Vec<f64>,
    /// Within-cluster sum of squares after each update step.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
}

impl KMeans {
    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(0.0)
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        let d = x - y;
        tail += d * d;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn check_matrix(data: &[f32], dim: usize) -> Result<usize> {
    if dim == 0 || data.len() % dim != 0 {
        return Err(Error::LengthMismatch {
            what: "feature matrix",
            expected: dim,
            found: data.len(),
        });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite feature value"));
    }
    Ok(data.len() / dim)
}

/// k-means with default parameters (100 iterations, tolerance 1e-6).
pub fn kmeans(data: &[f32], dim: usize, k: usize, seed: u64) -> Result<KMeans> {
    kmeans_with(data, dim, k, seed, &KMeansParams::default())
}

pub fn kmeans_with(
    data: &[f32],
    dim: usize,
    k: usize,
    seed: u64,
    params: &KMeansParams,
) -> Result<KMeans> {
    let m = check_matrix(data, dim)?;
    if k == 0 || k > m {
        return Err(Error::BadK { k, points: m });
    }
    let x: Vec<f64> = data.iter().map(|&v| v as f64).collect();
    let point = |i: usize| &x[i * dim..(i + 1) * dim];

    let mut centroids = plus_plus_init(&x, dim, k, seed);
    let mut solver = if m.saturating_mul(k) <= MAX_CENTER_BOUNDS {
        Bounds::PerCenter(vec![0.0; m * k])
    } else {
        Bounds::Single(vec![0.0; m])
    };
    let mut assign = vec![0u32; m];
    let mut upper = vec![0.0f64; m];
    solver.full_assign(&x, dim, &centroids, k, &mut assign, &mut upper);

    let mut trace = Vec::new();
    let mut converged = false;
    for iter in 0..params.max_iters.max(1) {
        let moved = repair_empty(&x, dim, k, &centroids, &mut assign, &mut upper);
        solver.forget(&moved);

        let new_centroids = update_centroids(&x, dim, k, &assign);
        let moves: Vec<f64> = (0..k)
            .map(|c| {
                sq_dist(
                    &centroids[c * dim..(c + 1) * dim],
                    &new_centroids[c * dim..(c + 1) * dim],
                )
                .sqrt()
            })
            .collect();
        let shift: f64 = moves.iter().map(|d| d * d).sum();
        centroids = new_centroids;

        upper
            .par_iter_mut()
            .zip(assign.par_iter())
            .enumerate()
            .for_each(|(i, (u, &a))| {
                let a = a as usize;
                *u = sq_dist(point(i), &centroids[a * dim..(a + 1) * dim]).sqrt();
            });
        trace.push(upper.iter().map(|u| u * u).sum());

        if shift < params.tol {
            converged = true;
            break;
        }
        if iter + 1 == params.max_iters {
            break;
        }
        solver.shift_lower(&moves, &assign);
        solver.assign(&x, dim, &centroids, k, &mut assign, &mut upper);
    }

    Ok(KMeans {
        k,
        dim,
        assignments: assign,
        centroids,
        objective_trace: trace,
        converged,
    })
}

/// D²-weighted seeding. Falls back to uniform choice among unused points when
/// every remaining point coincides with a chosen center.
fn plus_plus_init(x: &[f64], dim: usize, k: usize, seed: u64) -> Vec<f64> {
    let m = x.len() / dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; m];
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..m);
    chosen[first] = true;
    centroids.extend_from_slice(&x[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = x
        .par_chunks_exact(dim)
        .map(|p| sq_dist(p, &centroids[..dim]))
        .collect();

    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            let mut last_positive = 0;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    last_positive = i;
                    acc += w;
                    if acc > target {
                        pick = Some(i);
                        break;
                    }
                }
            }
            pick.unwrap_or(last_positive)
        } else {
            let unused: Vec<usize> = (0..m).filter(|&i| !chosen[i]).collect();
            unused[rng.random_range(0..unused.len())]
        };
        chosen[next] = true;
        let c = &x[next * dim..(next + 1) * dim];
        centroids.extend_from_slice(c);
        d2.par_iter_mut()
            .zip(x.par_chunks_exact(dim))
            .for_each(|(w, p)| *w = w.min(sq_dist(p, c)));
    }
    centroids
}

fn update_centroids(x: &[f64], dim: usize, k: usize, assign: &[u32]) -> Vec<f64> {
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (p, &a) in x.chunks_exact(dim).zip(assign) {
        let a = a as usize;
        counts[a] += 1;
        for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        debug_assert!(n > 0, "empty cluster survived repair");
        let inv = n as f64;
        sums[c * dim..(c + 1) * dim].iter_mut().for_each(|s| *s /= inv);
    }
    sums
}

/// Moves the point farthest from its centroid into each empty cluster and
/// returns the moved points. `upper` must hold exact distances to the current centroids.
fn repair_empty(
    x: &[f64],
    dim: usize,
    k: usize,
    centroids: &[f64],
    assign: &mut [u32],
    upper: &mut [f64],
) -> Vec<usize> {
    let mut moved = Vec::new();
    let mut counts = vec![0usize; k];
    for &a in assign.iter() {
        counts[a as usize] += 1;
    }
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let mut best: Option<usize> = None;
        for (i, &a) in assign.iter().enumerate() {
            if counts[a as usize] > 1 && best.is_none_or(|b| upper[i] > upper[b]) {
                best = Some(i);
            }
        }
        // k <= M guarantees a donor cluster with at least two members
        let i = best.expect("no donor for empty cluster");
        counts[assign[i] as usize] -= 1;
        counts[empty] += 1;
        assign[i] = empty as u32;
        upper[i] = sq_dist(
            &x[i * dim..(i + 1) * dim],
            &centroids[empty * dim..(empty + 1) * dim],
        )
        .sqrt();
        moved.push(i);
    }
    moved
}

enum Bounds {
    /// Lower bound on the distance to every center (M×k).
    PerCenter(Vec<f64>),
    /// Lower bound on the distance to the second-closest center.
    Single(Vec<f64>),
}

impl Bounds {
    fn full_assign(
        &mut self,
        x: &[f64],
        dim: usize,
        centroids: &[f64],
        k: usize,
        assign: &mut [u32],
        upper: &mut [f64],
    ) {
        let nearest = |p: &[f64], lower_row: Option<&mut [f64]>| {
            let mut best = (f64::INFINITY, 0usize);
            let mut second = f64::INFINITY;
            let mut row = lower_row;
            for c in 0..k {
                let d = sq_dist(p, &centroids[c * dim..(c + 1) * dim]).sqrt();
                if let Some(r) = row.as_deref_mut() {
                    r[c] = d;
                }
                if d < best.0 {
                    second = best.0;
                    best = (d, c);
                } else if d < second {
                    second = d;
                }
            }
            (best, second)
        };
        match self {
            Bounds::PerCenter(lower) => {
                assign
                    .par_iter_mut()
                    .zip(upper.par_iter_mut())
                    .zip(lower.par_chunks_mut(k))
                    .zip(x.par_chunks_exact(dim))
                    .for_each(|(((a, u), row), p)| {
                        let ((d, c), _) = nearest(p, Some(row));
                        *a = c as u32;
                        *u = d;
                    });
            }
            Bounds::Single(lower) => {
                assign
                    .par_iter_mut()
                    .zip(upper.par_iter_mut())
                    .zip(lower.par_iter_mut())
                    .zip(x.par_chunks_exact(dim))
                    .for_each(|(((a, u), l), p)| {
                        let ((d, c), second) = nearest(p, None);
                        *a = c as u32;
                        *u = d;
                        *l = second;
                    });
            }
        }
    }

    /// Drops the bounds of points whose assignment changed outside the assignment step.
    fn forget(&mut self, points: &[usize]) {
        if let Bounds::Single(lower) = self {
            for &i in points {
                lower[i] = 0.0;
            }
        }
    }

    fn shift_lower(&mut self, moves: &[f64], assign: &[u32]) {
        match self {
            Bounds::PerCenter(lower) => {
                let k = moves.len();
                lower.par_chunks_mut(k).for_each(|row| {
                    for (l, m) in row.iter_mut().zip(moves) {
                        *l = (*l - m).max(0.0);
                    }
                });
            }
            Bounds::Single(lower) => {
                // the second-closest center may be any center other than the assigned one
                let (mut top, mut top_idx, mut runner) = (0.0f64, usize::MAX, 0.0f64);
                for (c, &m) in moves.iter().enumerate() {
                    if m > top {
                        runner = top;
                        top = m;
                        top_idx = c;
                    } else if m > runner {
                        runner = m;
                    }
                }
                lower
                    .par_iter_mut()
                    .zip(assign.par_iter())
                    .for_each(|(l, &a)| {
                        let m = if a as usize == top_idx { runner } else { top };
                        *l = (*l - m).max(0.0);
                    });
            }
        }
    }

    /// Lloyd assignment step. On entry `upper` holds exact distances to the assigned centers.
    fn assign(
        &mut self,
        x: &[f64],
        dim: usize,
        centroids: &[f64],
        k: usize,
        assign: &mut [u32],
        upper: &mut [f64],
    ) {
        let center = |c: usize| &centroids[c * dim..(c + 1) * dim];
        // half distance between centers, and half distance to the nearest other center
        let mut half_cc = vec![0.0f64; k * k];
        half_cc.par_chunks_mut(k).enumerate().for_each(|(a, row)| {
            for (b, v) in row.iter_mut().enumerate() {
                if a != b {
                    *v = 0.5 * sq_dist(center(a), center(b)).sqrt();
                }
            }
        });
        let half_nearest: Vec<f64> = half_cc
            .chunks_exact(k)
            .enumerate()
            .map(|(a, row)| {
                row.iter()
                    .enumerate()
                    .filter(|&(b, _)| b != a)
                    .map(|(_, &v)| v)
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();

        match self {
            Bounds::PerCenter(lower) => {
                assign
                    .par_iter_mut()
                    .zip(upper.par_iter_mut())
                    .zip(lower.par_chunks_mut(k))
                    .zip(x.par_chunks_exact(dim))
                    .for_each(|(((a_ref, u_ref), row), p)| {
                        let mut a = *a_ref as usize;
                        let mut u = *u_ref;
                        row[a] = u;
                        if u <= half_nearest[a] {
                            return;
                        }
                        for c in 0..k {
                            if c == a || u <= row[c] || u <= half_cc[a * k + c] {
                                continue;
                            }
                            let d = sq_dist(p, center(c)).sqrt();
                            row[c] = d;
                            if d < u || (d == u && c < a) {
                                a = c;
                                u = d;
                            }
                        }
                        *a_ref = a as u32;
                        *u_ref = u;
                    });
            }
            Bounds::Single(lower) => {
                assign
                    .par_iter_mut()
                    .zip(upper.par_iter_mut())
                    .zip(lower.par_iter_mut())
                    .zip(x.par_chunks_exact(dim))
                    .for_each(|(((a_ref, u_ref), l), p)| {
                        let a = *a_ref as usize;
                        if *u_ref <= half_nearest[a].max(*l) {
                            return;
                        }
                        let mut best = (f64::INFINITY, 0usize);
                        let mut second = f64::INFINITY;
                        for c in 0..k {
                            let d = sq_dist(p, center(c)).sqrt();
                            if d < best.0 {
                                second = best.0;
                                best = (d, c);
                            } else if d < second {
                                second = d;
                            }
                        }
                        *a_ref = best.1 as u32;
                        *u_ref = best.0;
                        *l = second;
                    });
            }
        }
    }
}

/// Per-frame cluster count rule: `k = max(ceil(alpha * M), min_factor * num_classes)`, clamped to M.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterBudget {
    alpha: f64,
    min_factor: usize,
    clicks: Option<(u64, u64)>,
}

impl ClusterBudget {
    pub const DEFAULT_MIN_FACTOR: usize = 10;

    pub fn new(alpha: f64, min_factor: usize) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1], got {alpha}")));
        }
        if min_factor == 0 {
            return Err(Error::Config("min_factor must be positive".into()));
        }
        Ok(Self {
            alpha,
            min_factor,
            clicks: None,
        })
    }

    /// Budget of `clicks` labeled points over `total_points` points: alpha = N / M.
    pub fn from_clicks(clicks: u64, total_points: u64, min_factor: usize) -> Result<Self> {
        if total_points == 0 || clicks > total_points {
            return Err(Error::Config(format!(
                "click budget {clicks} invalid for {total_points} points"
            )));
        }
        let mut b = Self::new(clicks as f64 / total_points as f64, min_factor)?;
        b.clicks = Some((clicks, total_points));
        Ok(b)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn min_factor(&self) -> usize {
        self.min_factor
    }

    /// The (N, M) pair this budget was derived from, if any.
    pub fn click_budget(&self) -> Option<(u64, u64)> {
        self.clicks
    }

    pub fn k_for(&self, frame_points: usize, num_classes: usize) -> usize {
        budget_to_k(self, frame_points, num_classes)
    }
}

pub fn budget_to_k(budget: &ClusterBudget, frame_points: usize, num_classes: usize) -> usize {
    // shave representation error so e.g. 0.01 * 100000 stays 1000
    let scaled = budget.alpha * frame_points as f64;
    let by_alpha = (scaled - scaled * 1e-12).ceil() as usize;
    by_alpha
        .max(budget.min_factor * num_classes)
        .min(frame_points)
        .max(1)
}

/// Member of each cluster closest to its centroid; ties go to the lowest point index.
pub fn cluster_centers(km: &KMeans, data: &[f32], dim: usize) -> Result<Vec<u32>> {
    let m = check_matrix(data, dim)?;
    if dim != km.dim {
        return Err(Error::DimMismatch {
            expected: km.dim,
            found: dim,
        });
    }
    if m != km.assignments.len() {
        return Err(Error::LengthMismatch {
            what: "assignments",
            expected: m,
            found: km.assignments.len(),
        });
    }
    let mut best: Vec<Option<(f64, u32)>> = vec![None; km.k];
    let mut buf = vec![0.0f64; dim];
    for (i, (row, &a)) in data.chunks_exact(dim).zip(&km.assignments).enumerate() {
        buf.iter_mut().zip(row).for_each(|(b, &v)| *b = v as f64);
        let d = sq_dist(&buf, km.centroid(a as usize));
        let slot = &mut best[a as usize];
        if slot.is_none_or(|(bd, _)| d < bd) {
            *slot = Some((d, i as u32));
        }
    }
    best.into_iter()
        .enumerate()
        .map(|(c, b)| b.map(|(_, i)| i).ok_or(Error::EmptyCluster(c)))
        .collect()
}

/// Per-point cluster assignments plus the clicked center point of every cluster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clustering {
    assignments: Vec<u32>,
    center_points: Vec<u32>,
}

impl Clustering {
    pub fn new(assignments: Vec<u32>, center_points: Vec<u32>) -> Result<Self> {
        let m = assignments.len();
        let k = center_points.len();
        if k == 0 || k > m {
            return Err(Error::BadK { k, points: m });
        }
        if let Some(&bad) = assignments.iter().find(|&&a| a as usize >= k) {
            return Err(Error::Config(format!("cluster id {bad} out of range for k={k}")));
        }
        for (c, &p) in center_points.iter().enumerate() {
            if p as usize >= m {
                return Err(Error::InvalidPoint {
                    index: p as usize,
                    points: m,
                });
            }
            if assignments[p as usize] as usize != c {
                return Err(Error::Config(format!(
                    "center point {p} of cluster {c} belongs to cluster {}",
                    assignments[p as usize]
                )));
            }
        }
        Ok(Self {
            assignments,
            center_points,
        })
    }

    pub fn from_kmeans(km: &KMeans, data: &[f32], dim: usize) -> Result<Self> {
        let centers = cluster_centers(km, data, dim)?;
        Self::new(km.assignments.clone(), centers)
    }

    pub fn k(&self) -> usize {
        self.center_points.len()
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn assignments(&self) -> &[u32] {
        &self.assignments
    }

    pub fn center_points(&self) -> &[u32] {
        &self.center_points
    }

    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignments
            .iter()
            .enumerate()
            .filter(move |(_, &a)| a as usize == cluster)
            .map(|(i, _)| i)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * (self.len() + self.k()));
        out.extend_from_slice(CLUSTERING_MAGIC);
        out.write_u32::<LittleEndian>(CLUSTERING_VERSION).unwrap();
        out.write_u64::<LittleEndian>(self.len() as u64).unwrap();
        out.write_u32::<LittleEndian>(self.k() as u32).unwrap();
        for &a in self.assignments.iter().chain(&self.center_points) {
            out.write_u32::<LittleEndian>(a).unwrap();
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::malformed(path, reason);
        if bytes.len() < 20 || &bytes[..4] != CLUSTERING_MAGIC {
            return Err(bad("bad magic or truncated header".into()));
        }
        let version = LittleEndian::read_u32(&bytes[4..8]);
        if version != CLUSTERING_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let m = LittleEndian::read_u64(&bytes[8..16]);
        let k = LittleEndian::read_u32(&bytes[16..20]) as u64;
        let expected = m
            .checked_add(k)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(20));
        if expected != Some(bytes.len() as u64) {
            return Err(bad(format!("length {} does not match M={m}, k={k}", bytes.len())));
        }
        let (m, k) = (m as usize, k as usize);
        let mut assignments = vec![0u32; m];
        let mut centers = vec![0u32; k];
        LittleEndian::read_u32_into(&bytes[20..20 + 4 * m], &mut assignments);
        LittleEndian::read_u32_into(&bytes[20 + 4 * m..], &mut centers);
        Self::new(assignments, centers).map_err(|e| bad(e.to_string()))
    }
}

pub fn save_clustering(c: &Clustering, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&c.encode())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_clustering(path: impl AsRef<Path>) -> Result<Clustering> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Clustering::decode(&bytes, path)
}

/// Every point takes the class clicked on its cluster's center. A center
/// answered with [`UNLABELED`] (e.g. an ignored class) leaves its cluster unlabeled.
pub fn propagate_labels(
    frame_id: &str,
    clustering: &Clustering,
    center_labels: &[u32],
    num_classes: usize,
) -> Result<PseudoLabels> {
    if center_labels.len() != clustering.k() {
        return Err(Error::LengthMismatch {
            what: "center labels",
            expected: clustering.k(),
            found: center_labels.len(),
        });
    }
    let labels: Vec<u32> = clustering
        .assignments
        .iter()
        .map(|&a| center_labels[a as usize])
        .collect();
    let mut source: Vec<LabelSource> = labels
        .iter()
        .map(|&l| {
            if l == UNLABELED {
                LabelSource::Unlabeled
            } else {
                LabelSource::Propagated
            }
        })
        .collect();
    for &p in &clustering.center_points {
        if labels[p as usize] != UNLABELED {
            source[p as usize] = LabelSource::Clicked;
        }
    }
    PseudoLabels::new(frame_id, labels, source, num_classes)
}

/// Which per-point vectors drive the clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    #[default]
    Features,
    /// xyz coordinates instead of learned features (ablation).
    Coords,
}

impl FeatureSource {
    pub fn view<'a>(&self, frame: &'a Frame) -> (&'a [f32], usize) {
        match self {
            FeatureSource::Features => (frame.features(), frame.dim()),
            FeatureSource::Coords => (frame.points().as_flattened(), 3),
        }
    }
}

impl std::str::FromStr for FeatureSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "features" => Ok(Self::Features),
            "coords" => Ok(Self::Coords),
            other => Err(Error::Config(format!(
                "unknown feature source {other:?}; expected features or coords"
            ))),
        }
    }
}

/// Clusters one frame under a budget and picks the cluster centers.
pub fn cluster_frame(
    frame: &Frame,
    budget: &ClusterBudget,
    num_classes: usize,
    source: FeatureSource,
    seed: u64,
) -> Result<Clustering> {
    let (data, dim) = source.view(frame);
    let k = budget.k_for(frame.len(), num_classes);
    let km = kmeans(data, dim, k, seed)?;
    Clustering::from_kmeans(&km, data, dim)
}
