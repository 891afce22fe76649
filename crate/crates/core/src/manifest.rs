//! Dataset manifest: class list, feature dimension, and sequences of frame files.
//!
//! ```toml
//! num_classes = 3
//! class_names = ["road", "car", "vegetation"]
//! feature_dim = 64
//! ignore_label = 255          # optional
//!
//! [[sequences]]
//! id = "00"
//! frames = ["00/000000.mlnf", "00/000001.mlnf"]
//! ```
//!
//! Relative frame paths resolve against the manifest's directory.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{load_frame_with_dim, Frame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub id: String,
    pub frames: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub feature_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ignore_label: Option<u32>,
    pub sequences: Vec<Sequence>,
    #[serde(skip)]
    base_dir: PathBuf,
}

/// Where a frame lives in the manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameRef {
    pub sequence_id: String,
    pub frame_id: String,
    pub path: PathBuf,
}

impl DatasetManifest {
    pub fn new(
        num_classes: usize,
        class_names: Vec<String>,
        feature_dim: usize,
        ignore_label: Option<u32>,
        sequences: Vec<Sequence>,
    ) -> Result<Self> {
        let m = Self {
            num_classes,
            class_names,
            feature_dim,
            ignore_label,
            sequences,
            base_dir: PathBuf::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = toml::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()
            .map_err(|e| Error::malformed(path, e.to_string()))?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.class_names.len() != self.num_classes {
            return Err(Error::Config(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if let Some(ig) = self.ignore_label {
            if (ig as usize) < self.num_classes {
                return Err(Error::Config(format!(
                    "ignore_label {ig} collides with a class id"
                )));
            }
        }
        let mut seen = HashMap::new();
        for seq in &self.sequences {
            for f in &seq.frames {
                let id = frame_id_of(f);
                if let Some(prev) = seen.insert(id.clone(), seq.id.clone()) {
                    return Err(Error::Config(format!(
                        "frame id {id} appears in sequences {prev} and {}",
                        seq.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn set_base_dir(&mut self, dir: impl Into<PathBuf>) {
        self.base_dir = dir.into();
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// All frames in manifest order (sequence order, then acquisition order).
    pub fn frames(&self) -> Vec<FrameRef> {
        self.sequences
            .iter()
            .flat_map(|s| {
                s.frames.iter().map(move |p| FrameRef {
                    sequence_id: s.id.clone(),
                    frame_id: frame_id_of(p),
                    path: self.resolve(p),
                })
            })
            .collect()
    }

    pub fn find(&self, frame_id: &str) -> Result<FrameRef> {
        self.frames()
            .into_iter()
            .find(|f| f.frame_id == frame_id)
            .ok_or_else(|| Error::UnknownFrame(frame_id.to_string()))
    }

    /// Loads a frame, checking its dimension and labels against the manifest.
    pub fn load_frame(&self, r: &FrameRef) -> Result<Frame> {
        let mut frame = load_frame_with_dim(&r.path, self.feature_dim)?;
        frame.sequence_id = r.sequence_id.clone();
        frame.frame_id = r.frame_id.clone();
        frame
            .validate_labels(self.num_classes, self.ignore_label)
            .map_err(|e| Error::malformed(&r.path, e.to_string()))?;
        Ok(frame)
    }

    pub fn load_frame_by_id(&self, frame_id: &str) -> Result<Frame> {
        self.load_frame(&self.find(frame_id)?)
    }
}

pub fn frame_id_of(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}
