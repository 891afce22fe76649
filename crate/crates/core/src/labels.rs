//! Pseudo-labels produced by click propagation and their file format.
//!
//! Layout (little-endian): `"MLNL" | version u32 = 1 | M u64 | labels u32[M] | source u8[M]`,
//! with source 0 = unlabeled, 1 = clicked, 2 = propagated.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use crate::error::{Error, Result};
use crate::frame::UNLABELED;

pub const LABELS_MAGIC: &[u8; 4] = b"MLNL";
pub const LABELS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum LabelSource {
    Unlabeled = 0,
    Clicked = 1,
    Propagated = 2,
}

impl LabelSource {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Self::Unlabeled),
            1 => Some(Self::Clicked),
            2 => Some(Self::Propagated),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabels {
    pub frame_id: String,
    labels: Vec<u32>,
    source: Vec<LabelSource>,
}

impl PseudoLabels {
    /// Builds pseudo-labels, checking that sources and label values agree.
    pub fn new(
        frame_id: impl Into<String>,
        labels: Vec<u32>,
        source: Vec<LabelSource>,
        num_classes: usize,
    ) -> Result<Self> {
        if labels.len() != source.len() {
            return Err(Error::LengthMismatch {
                what: "label sources",
                expected: labels.len(),
                found: source.len(),
            });
        }
        for (&l, &s) in labels.iter().zip(&source) {
            match s {
                LabelSource::Unlabeled if l != UNLABELED => {
                    return Err(Error::Config(format!(
                        "unlabeled entry carries class {l} instead of the sentinel"
                    )))
                }
                LabelSource::Clicked | LabelSource::Propagated if l as usize >= num_classes => {
                    return Err(Error::InvalidClass {
                        class: l,
                        num_classes,
                    })
                }
                _ => {}
            }
        }
        Ok(Self {
            frame_id: frame_id.into(),
            labels,
            source,
        })
    }

    pub fn unlabeled(frame_id: impl Into<String>, len: usize) -> Self {
        Self {
            frame_id: frame_id.into(),
            labels: vec![UNLABELED; len],
            source: vec![LabelSource::Unlabeled; len],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn source(&self) -> &[LabelSource] {
        &self.source
    }

    pub fn clicked_count(&self) -> usize {
        self.count(LabelSource::Clicked)
    }

    pub fn count(&self, which: LabelSource) -> usize {
        self.source.iter().filter(|&&s| s == which).count()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.len() * 5);
        out.extend_from_slice(LABELS_MAGIC);
        out.write_u32::<LittleEndian>(LABELS_VERSION).unwrap();
        out.write_u64::<LittleEndian>(self.len() as u64).unwrap();
        for &l in &self.labels {
            out.write_u32::<LittleEndian>(l).unwrap();
        }
        out.extend(self.source.iter().map(|&s| s as u8));
        out
    }

    pub fn decode(bytes: &[u8], frame_id: &str, num_classes: usize, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::malformed(path, reason);
        if bytes.len() < 16 || &bytes[..4] != LABELS_MAGIC {
            return Err(bad("bad magic or truncated header".into()));
        }
        let version = LittleEndian::read_u32(&bytes[4..8]);
        if version != LABELS_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let m = LittleEndian::read_u64(&bytes[8..16]);
        let expected = m.checked_mul(5).and_then(|b| b.checked_add(16));
        if expected != Some(bytes.len() as u64) {
            return Err(bad(format!("length {} does not match M={m}", bytes.len())));
        }
        let m = m as usize;
        let mut labels = vec![0u32; m];
        LittleEndian::read_u32_into(&bytes[16..16 + 4 * m], &mut labels);
        let source = bytes[16 + 4 * m..]
            .iter()
            .map(|&b| LabelSource::from_byte(b).ok_or_else(|| bad(format!("bad source flag {b}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(frame_id, labels, source, num_classes).map_err(|e| bad(e.to_string()))
    }
}

pub fn save_pseudo_labels(pl: &PseudoLabels, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&pl.encode())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Loads pseudo-labels; the frame id is the file stem.
pub fn load_pseudo_labels(path: impl AsRef<Path>, num_classes: usize) -> Result<PseudoLabels> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let frame_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    PseudoLabels::decode(&bytes, &frame_id, num_classes, path)
}
