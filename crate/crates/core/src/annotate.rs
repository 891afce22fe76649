//! Collecting one click per cluster and turning the answers into pseudo-labels.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clustering::{propagate_labels, Clustering};
use crate::error::{Error, Result};
use crate::frame::{Frame, UNLABELED};
use crate::labels::PseudoLabels;

/// Class chosen for each clicked point.
pub type Responses = BTreeMap<u32, u32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionStatus {
    Pending,
    Complete,
}

/// Clicks requested for one frame: the cluster centers, in cluster-id order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationSession {
    pub frame_id: String,
    click_queue: Vec<u32>,
    responses: Responses,
}

impl AnnotationSession {
    pub fn new(frame_id: impl Into<String>, clustering: &Clustering) -> Self {
        Self {
            frame_id: frame_id.into(),
            click_queue: clustering.center_points().to_vec(),
            responses: Responses::new(),
        }
    }

    pub fn click_queue(&self) -> &[u32] {
        &self.click_queue
    }

    pub fn responses(&self) -> &Responses {
        &self.responses
    }

    pub fn record(&mut self, point: u32, class: u32) -> Result<()> {
        if !self.click_queue.contains(&point) {
            return Err(Error::Config(format!("point {point} is not queued for labeling")));
        }
        self.responses.insert(point, class);
        Ok(())
    }

    pub fn status(&self) -> SessionStatus {
        if self.click_queue.iter().all(|p| self.responses.contains_key(p)) {
            SessionStatus::Complete
        } else {
            SessionStatus::Pending
        }
    }
}

/// Something that answers a queue of clicks on a frame.
pub trait Annotator {
    fn annotate(&mut self, frame: &Frame, queue: &[u32]) -> Result<Responses>;
}

/// Ground-truth replay: every click is answered with the true label.
pub fn oracle_annotate(frame: &Frame, queue: &[u32]) -> Result<Responses> {
    let gt = frame
        .gt_labels()
        .ok_or_else(|| Error::NoGroundTruth(frame.frame_id.clone()))?;
    queue
        .iter()
        .map(|&i| {
            gt.get(i as usize)
                .map(|&l| (i, l))
                .ok_or(Error::InvalidPoint {
                    index: i as usize,
                    points: gt.len(),
                })
        })
        .collect()
}

/// Oracle annotator, optionally replacing each answer with a random wrong
/// class with probability `noise`.
#[derive(Debug, Clone)]
pub struct OracleAnnotator {
    num_classes: usize,
    noise: f64,
    rng: ChaCha8Rng,
}

impl OracleAnnotator {
    pub fn exact(num_classes: usize) -> Self {
        Self {
            num_classes,
            noise: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn noisy(num_classes: usize, noise: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&noise) {
            return Err(Error::Config(format!("noise must lie in [0, 1], got {noise}")));
        }
        Ok(Self {
            num_classes,
            noise,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl Annotator for OracleAnnotator {
    fn annotate(&mut self, frame: &Frame, queue: &[u32]) -> Result<Responses> {
        let mut responses = oracle_annotate(frame, queue)?;
        // ignored ground truth is skipped rather than answered
        for class in responses.values_mut() {
            if *class as usize >= self.num_classes {
                *class = UNLABELED;
            }
        }
        if self.noise > 0.0 && self.num_classes > 1 {
            for class in responses.values_mut() {
                if (*class as usize) < self.num_classes && self.rng.random::<f64>() < self.noise {
                    let shift = self.rng.random_range(1..self.num_classes as u32);
                    *class = (*class + shift) % self.num_classes as u32;
                }
            }
        }
        Ok(responses)
    }
}

/// Answers recorded elsewhere (e.g. a human session), replayed as-is.
#[derive(Debug, Clone)]
pub struct RecordedAnnotator {
    responses: Responses,
}

impl RecordedAnnotator {
    pub fn new(responses: Responses) -> Self {
        Self { responses }
    }
}

impl From<&AnnotationSession> for RecordedAnnotator {
    fn from(s: &AnnotationSession) -> Self {
        Self::new(s.responses.clone())
    }
}

impl Annotator for RecordedAnnotator {
    fn annotate(&mut self, frame: &Frame, queue: &[u32]) -> Result<Responses> {
        let answered = queue.iter().filter(|p| self.responses.contains_key(p)).count();
        if answered < queue.len() {
            return Err(Error::SessionIncomplete {
                frame_id: frame.frame_id.clone(),
                answered,
                queued: queue.len(),
            });
        }
        Ok(queue.iter().map(|p| (*p, self.responses[p])).collect())
    }
}

/// Asks for one class per cluster center and propagates it to the cluster.
pub fn annotate_frame(
    frame: &Frame,
    clustering: &Clustering,
    annotator: &mut dyn Annotator,
    num_classes: usize,
) -> Result<PseudoLabels> {
    if clustering.len() != frame.len() {
        return Err(Error::LengthMismatch {
            what: "clustering",
            expected: frame.len(),
            found: clustering.len(),
        });
    }
    let queue = clustering.center_points();
    let responses = annotator.annotate(frame, queue)?;
    let center_labels: Vec<u32> = queue
        .iter()
        .map(|p| {
            responses.get(p).copied().ok_or(Error::SessionIncomplete {
                frame_id: frame.frame_id.clone(),
                answered: responses.len(),
                queued: queue.len(),
            })
        })
        .collect::<Result<_>>()?;
    propagate_labels(&frame.frame_id, clustering, &center_labels, num_classes)
}
