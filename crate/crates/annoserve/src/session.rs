//! Annotation sessions and their on-disk state.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use milliseg_core::annotate::{annotate_frame, RecordedAnnotator, Responses};
use milliseg_core::clustering::Clustering;
use milliseg_core::labels::{save_pseudo_labels, PseudoLabels};
use milliseg_core::Frame;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

/// Order in which cluster centers are asked for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueueOrder {
    /// Cluster-id order.
    #[default]
    Cluster,
    /// Greedy nearest-neighbour walk over center coordinates, starting at cluster 0.
    Spatial,
}

/// One queued click.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueItem {
    pub point: u32,
    pub cluster: u32,
}

/// Persisted state of one frame's annotation session.
///
/// `responses` doubles as the undo stack: the cursor is its length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub frame_id: String,
    pub queue: Vec<QueueItem>,
    pub responses: Vec<(u32, u32)>,
}

impl SessionState {
    pub fn new(frame_id: &str, frame: &Frame, clustering: &Clustering, order: QueueOrder) -> Self {
        let centers = clustering.center_points();
        let mut ids: Vec<usize> = (0..centers.len()).collect();
        if order == QueueOrder::Spatial {
            ids = spatial_order(frame, centers);
        }
        Self {
            session_id: session_id_for(frame_id),
            frame_id: frame_id.to_string(),
            queue: ids
                .into_iter()
                .map(|c| QueueItem {
                    point: centers[c],
                    cluster: c as u32,
                })
                .collect(),
            responses: Vec::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.queue.len()
    }

    pub fn cursor(&self) -> usize {
        self.responses.len()
    }

    pub fn is_done(&self) -> bool {
        self.cursor() == self.k()
    }

    pub fn current(&self) -> Option<QueueItem> {
        self.queue.get(self.cursor()).copied()
    }

    /// Validates a response against the queue without applying it.
    pub fn check_submit(&self, point: u32, class: u32, num_classes: usize) -> Result<(), ApiError> {
        match self.current() {
            Some(item) if item.point == point => {}
            expected => {
                return Err(ApiError::OutOfOrder {
                    expected: expected.map(|i| i.point),
                    got: point,
                })
            }
        }
        if class as usize >= num_classes {
            return Err(ApiError::InvalidClass { class, num_classes });
        }
        Ok(())
    }

    pub fn responses_map(&self) -> Responses {
        self.responses.iter().copied().collect()
    }

    /// Pseudo-labels from the recorded answers, exactly as the oracle path builds them.
    pub fn pseudo_labels(
        &self,
        frame: &Frame,
        clustering: &Clustering,
        num_classes: usize,
    ) -> milliseg_core::Result<PseudoLabels> {
        let mut annotator = RecordedAnnotator::new(self.responses_map());
        annotate_frame(frame, clustering, &mut annotator, num_classes)
    }
}

/// Sessions are keyed by frame, so recreating one after a restart finds the old state.
pub fn session_id_for(frame_id: &str) -> String {
    frame_id.to_string()
}

fn spatial_order(frame: &Frame, centers: &[u32]) -> Vec<usize> {
    let xyz = |c: usize| frame.points()[centers[c] as usize];
    let mut left: Vec<usize> = (1..centers.len()).collect();
    let mut order = Vec::with_capacity(centers.len());
    if centers.is_empty() {
        return order;
    }
    order.push(0);
    while !left.is_empty() {
        let here = xyz(*order.last().unwrap());
        let (pos, _) = left
            .iter()
            .enumerate()
            .map(|(pos, &c)| {
                let p = xyz(c);
                let d: f32 = (0..3).map(|j| (p[j] - here[j]).powi(2)).sum();
                (pos, d)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .unwrap();
        order.push(left.remove(pos));
    }
    order
}

/// Writes through a temporary file and a rename, so a crash leaves either
/// the old or the new content.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)
}

pub fn session_path(dir: &Path, session_id: &str) -> PathBuf {
    dir.join(format!("{session_id}.json"))
}

pub fn save_session(dir: &Path, state: &SessionState) -> std::io::Result<()> {
    let bytes = serde_json::to_vec_pretty(state).expect("session state serializes");
    write_atomic(&session_path(dir, &state.session_id), &bytes)
}

pub fn load_session(dir: &Path, session_id: &str) -> std::io::Result<Option<SessionState>> {
    let path = session_path(dir, session_id);
    match fs::read(&path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e),
    }
}

/// Writes the pseudo-label file for a finished session.
pub fn write_labels(path: &Path, labels: &PseudoLabels) -> milliseg_core::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| milliseg_core::Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    save_pseudo_labels(labels, &tmp)?;
    fs::rename(&tmp, path).map_err(|e| milliseg_core::Error::io(path, e))
}
