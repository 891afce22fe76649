//! Removal of near-duplicate consecutive frames within a sequence.
//!
//! The first frame is the base. Following frames are dropped while their
//! descriptor's cosine similarity to the base is at least `tau`; the first
//! frame below `tau` is kept and becomes the new base.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frame::FrameDescriptor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneConfig {
    tau: f64,
}

impl PruneConfig {
    pub const SEMANTIC_KITTI_TAU: f64 = 0.95;
    pub const NUSCENES_TAU: f64 = 0.92;

    pub fn new(tau: f64) -> Result<Self> {
        if !tau.is_finite() || !(-1.0..=1.0).contains(&tau) {
            return Err(Error::Config(format!("tau must lie in [-1, 1], got {tau}")));
        }
        Ok(Self { tau })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

/// `a·b / (|a| |b|)`, clamped to [-1, 1].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    // one sqrt of the product keeps cos(a, a) exactly 1
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Indices of the frames kept by the base-frame sweep, strictly increasing.
pub fn prune_sequence(descriptors: &[FrameDescriptor], cfg: PruneConfig) -> Result<Vec<usize>> {
    if descriptors.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut kept = vec![0];
    let mut base = &descriptors[0].vector;
    for (i, d) in descriptors.iter().enumerate().skip(1) {
        // keep strictly below tau
        if cosine_similarity(base, &d.vector)? < cfg.tau {
            kept.push(i);
            base = &d.vector;
        }
    }
    Ok(kept)
}

/// Prunes several sequences independently; output order follows input order.
pub fn prune_sequences(
    sequences: &[Vec<FrameDescriptor>],
    cfg: PruneConfig,
) -> Result<Vec<Vec<usize>>> {
    sequences
        .par_iter()
        .map(|seq| prune_sequence(seq, cfg))
        .collect()
}
