//! Diversity-based frame selection.
//!
//! Each frame is summarized by the k-means centers of its point features
//! (k = number of classes). With `dissim(u, v) = 1 - cos(u, v)`:
//!
//! - `d_i`  = mean dissimilarity over unordered pairs of centers of frame i,
//! - `d_ij` = mean dissimilarity over all cross pairs of centers of frames i and j,
//! - `score_i = (1 / (|F| - 1)) * sum_{j != i} d_i * d_j * d_ij`,
//!
//! and the `S` highest-scoring frames are selected.
//!
//! Since cosine similarity is a dot product of unit vectors, the mean over
//! cross pairs factorizes: `d_ij = 1 - u_i · u_j` where `u_i` is the mean of
//! the normalized centers of frame i. [`diversity_scores`] uses that form so the
//! all-pairs pass costs O(|F|² D) instead of O(|F|² C² D).

use rayon::prelude::*;

use crate::clustering::kmeans;
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::pruning::cosine_similarity;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSignature {
    pub frame_id: String,
    centers: Vec<f64>,
    dim: usize,
}

impl SceneSignature {
    /// `centers` is a row-major C×D matrix.
    pub fn new(frame_id: impl Into<String>, centers: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || centers.is_empty() || centers.len() % dim != 0 {
            return Err(Error::LengthMismatch {
                what: "signature centers",
                expected: dim,
                found: centers.len(),
            });
        }
        if centers.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("non-finite signature center"));
        }
        Ok(Self {
            frame_id: frame_id.into(),
            centers,
            dim,
        })
    }

    pub fn num_centers(&self) -> usize {
        self.centers.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn center(&self, i: usize) -> &[f64] {
        &self.centers[i * self.dim..(i + 1) * self.dim]
    }

    pub fn centers(&self) -> impl Iterator<Item = &[f64]> {
        self.centers.chunks_exact(self.dim)
    }

    /// Mean of the unit-normalized centers.
    fn mean_direction(&self) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.dim];
        for c in self.centers() {
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroVector);
            }
            acc.iter_mut().zip(c).for_each(|(a, v)| *a += v / norm);
        }
        let n = self.num_centers() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }
}

/// Clusters a frame's features into `num_centers` groups and keeps the centroids.
pub fn scene_signature(frame: &Frame, num_centers: usize, seed: u64) -> Result<SceneSignature> {
    if num_centers == 0 {
        return Err(Error::Config("signature needs at least one center".into()));
    }
    if frame.len() < num_centers {
        return Err(Error::TooFewPoints {
            points: frame.len(),
            clusters: num_centers,
        });
    }
    let km = kmeans(frame.features(), frame.dim(), num_centers, seed)?;
    SceneSignature::new(frame.frame_id.clone(), km.centroids, frame.dim())
}

fn dissim(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine_similarity(a, b)?)
}

/// Mean pairwise dissimilarity between the centers of one scene (`d_i`).
pub fn intra_scene_diversity(sig: &SceneSignature) -> Result<f64> {
    let c = sig.num_centers();
    if c < 2 {
        return Err(Error::Degenerate("intra-scene diversity needs at least two centers"));
    }
    let mut sum = 0.0;
    for a in 0..c {
        for b in a + 1..c {
            sum += dissim(sig.center(a), sig.center(b))?;
        }
    }
    Ok(sum / (c * (c - 1) / 2) as f64)
}

/// Mean dissimilarity over all cross pairs of centers of two scenes (`d_ij`).
pub fn inter_scene_diversity(a: &SceneSignature, b: &SceneSignature) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::DimMismatch {
            expected: a.dim,
            found: b.dim,
        });
    }
    let mut sum = 0.0;
    for u in a.centers() {
        for v in b.centers() {
            sum += dissim(u, v)?;
        }
    }
    Ok(sum / (a.num_centers() * b.num_centers()) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiversityScore {
    pub frame_id: String,
    pub score: f64,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Diversity score of every frame against all others.
///
/// Each score is a sequential sum over `j` in input order, so the result does
/// not depend on the number of threads.
pub fn diversity_scores(sigs: &[SceneSignature]) -> Result<Vec<DiversityScore>> {
    let n = sigs.len();
    if n < 2 {
        return Err(Error::TooFewFrames(n));
    }
    let dim = sigs[0].dim;
    if let Some(bad) = sigs.iter().find(|s| s.dim != dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            found: bad.dim,
        });
    }
    let intra: Vec<f64> = sigs
        .par_iter()
        .map(intra_scene_diversity)
        .collect::<Result<_>>()?;
    let directions: Vec<Vec<f64>> = sigs
        .par_iter()
        .map(SceneSignature::mean_direction)
        .collect::<Result<_>>()?;

    let scores: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let di = intra[i];
            let ui = &directions[i];
            let mut sum = 0.0;
            for (j, (dj, uj)) in intra.iter().zip(&directions).enumerate() {
                if j != i {
                    let dij = 1.0 - dot(ui, uj);
                    sum += di * dj * dij;
                }
            }
            sum / (n - 1) as f64
        })
        .collect();

    Ok(sigs
        .iter()
        .zip(scores)
        .map(|(s, score)| DiversityScore {
            frame_id: s.frame_id.clone(),
            score,
        })
        .collect())
}

/// The `budget` highest-scoring frame ids, best first; ties by ascending frame id.
pub fn select_frames(scores: &[DiversityScore], budget: usize) -> Result<Vec<String>> {
    if budget == 0 {
        return Err(Error::Config("frame budget must be positive".into()));
    }
    if budget > scores.len() {
        return Err(Error::BudgetExceedsPool {
            budget,
            pool: scores.len(),
        });
    }
    let mut ranked: Vec<&DiversityScore> = scores.iter().collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.frame_id.cmp(&b.frame_id))
    });
    Ok(ranked
        .into_iter()
        .take(budget)
        .map(|s| s.frame_id.clone())
        .collect())
}
