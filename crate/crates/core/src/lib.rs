//! Milli-annotation toolkit for lidar semantic segmentation.
//!
//! Starting from precomputed per-point features, the pipeline prunes
//! near-duplicate scans, selects a diverse subset of frames, over-segments each
//! selected frame with k-means, asks for one class per cluster center, spreads
//! that class over the cluster, and trains a pointwise classifier on the
//! resulting pseudo-labels with a teacher-student second stage.

pub mod annotate;
pub mod clustering;
pub mod error;
pub mod frame;
pub mod labels;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod pruning;
pub mod selection;
pub mod semisup;
pub mod synthetic;

pub use error::{Error, ErrorClass, Result};
pub use frame::{Frame, FrameDescriptor, UNLABELED};
pub use labels::{LabelSource, PseudoLabels};
pub use manifest::DatasetManifest;
