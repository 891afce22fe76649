//! Lidar frames, their descriptors, and the binary frame file format.
//!
//! Frame file layout (little-endian):
//!
//! ```text
//! "MLNF" | version u32 = 1 | M u64 | D u32 | flags u32 (bit0 = has_labels)
//! points f32[M*3] | features f32[M*D] | labels u32[M] (only if has_labels)
//! ```
//!
//! The frame id is not stored in the file; it is the file stem.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub const FRAME_MAGIC: &[u8; 4] = b"MLNF";
pub const FRAME_VERSION: u32 = 1;
const FLAG_HAS_LABELS: u32 = 1;
const HEADER_LEN: u64 = 4 + 4 + 8 + 4 + 4;

/// Label value meaning "no label". All ones in the u32 label width.
pub const UNLABELED: u32 = u32::MAX;

/// One lidar scan: coordinates, per-point features, optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub frame_id: String,
    pub sequence_id: String,
    points: Vec<[f32; 3]>,
    features: Vec<f32>,
    dim: usize,
    gt_labels: Option<Vec<u32>>,
}

impl Frame {
    pub fn new(
        frame_id: impl Into<String>,
        sequence_id: impl Into<String>,
        points: Vec<[f32; 3]>,
        features: Vec<f32>,
        dim: usize,
        gt_labels: Option<Vec<u32>>,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Degenerate("frame has no points"));
        }
        if dim == 0 {
            return Err(Error::Degenerate("feature dimension is zero"));
        }
        if features.len() != points.len() * dim {
            return Err(Error::LengthMismatch {
                what: "feature matrix",
                expected: points.len() * dim,
                found: features.len(),
            });
        }
        if let Some(labels) = &gt_labels {
            if labels.len() != points.len() {
                return Err(Error::LengthMismatch {
                    what: "ground-truth labels",
                    expected: points.len(),
                    found: labels.len(),
                });
            }
        }
        Ok(Self {
            frame_id: frame_id.into(),
            sequence_id: sequence_id.into(),
            points,
            features,
            dim,
            gt_labels,
        })
    }

    /// Number of points M.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Feature dimension D.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[[f32; 3]] {
        &self.points
    }

    /// Row-major M×D feature matrix.
    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn gt_labels(&self) -> Option<&[u32]> {
        self.gt_labels.as_deref()
    }

    pub fn has_ground_truth(&self) -> bool {
        self.gt_labels.is_some()
    }

    /// Checks every ground-truth label against the class count, allowing `ignore`.
    pub fn validate_labels(&self, num_classes: usize, ignore: Option<u32>) -> Result<()> {
        if let Some(labels) = &self.gt_labels {
            for &l in labels {
                if (l as usize) >= num_classes && Some(l) != ignore {
                    return Err(Error::InvalidClass {
                        class: l,
                        num_classes,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn descriptor(&self) -> FrameDescriptor {
        frame_descriptor(self)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    fn encoded_len(&self) -> usize {
        let m = self.len();
        HEADER_LEN as usize
            + m * 12
            + m * self.dim * 4
            + if self.gt_labels.is_some() { m * 4 } else { 0 }
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(FRAME_MAGIC)?;
        w.write_u32::<LittleEndian>(FRAME_VERSION)?;
        w.write_u64::<LittleEndian>(self.len() as u64)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        let flags = if self.gt_labels.is_some() {
            FLAG_HAS_LABELS
        } else {
            0
        };
        w.write_u32::<LittleEndian>(flags)?;
        for p in &self.points {
            for &c in p {
                w.write_f32::<LittleEndian>(c)?;
            }
        }
        for &f in &self.features {
            w.write_f32::<LittleEndian>(f)?;
        }
        if let Some(labels) = &self.gt_labels {
            for &l in labels {
                w.write_u32::<LittleEndian>(l)?;
            }
        }
        Ok(())
    }
}

/// Mean feature vector of a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDescriptor {
    pub frame_id: String,
    pub vector: Vec<f64>,
}

/// Arithmetic mean of the raw feature rows, accumulated in f64.
pub fn frame_descriptor(frame: &Frame) -> FrameDescriptor {
    let dim = frame.dim();
    let mut sum = vec![0.0f64; dim];
    for row in frame.features().chunks_exact(dim) {
        for (s, &v) in sum.iter_mut().zip(row) {
            *s += v as f64;
        }
    }
    let m = frame.len() as f64;
    sum.iter_mut().for_each(|s| *s /= m);
    FrameDescriptor {
        frame_id: frame.frame_id.clone(),
        vector: sum,
    }
}

pub fn save_frame(frame: &Frame, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    frame
        .write_to(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Reads a frame file. The frame id is the file stem; the sequence id is empty.
pub fn load_frame(path: impl AsRef<Path>) -> Result<Frame> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let frame_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_frame(BufReader::new(file), file_len, frame_id, path)
}

/// Like [`load_frame`] but rejects files whose feature dimension differs from `expected_dim`.
pub fn load_frame_with_dim(path: impl AsRef<Path>, expected_dim: usize) -> Result<Frame> {
    let frame = load_frame(path)?;
    if frame.dim() != expected_dim {
        return Err(Error::DimMismatch {
            expected: expected_dim,
            found: frame.dim(),
        });
    }
    Ok(frame)
}

/// Decodes a frame from an in-memory buffer.
pub fn decode_frame_bytes(bytes: &[u8], frame_id: &str) -> Result<Frame> {
    decode_frame(bytes, bytes.len() as u64, frame_id.to_string(), Path::new("<memory>"))
}

fn decode_frame<R: Read>(mut r: R, total_len: u64, frame_id: String, path: &Path) -> Result<Frame> {
    let bad = |reason: &str| Error::malformed(path, reason);
    if total_len < HEADER_LEN {
        return Err(bad("truncated header"));
    }
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != FRAME_MAGIC {
        return Err(bad("bad magic"));
    }
    let header = (|| -> std::io::Result<(u32, u64, u32, u32)> {
        Ok((
            r.read_u32::<LittleEndian>()?,
            r.read_u64::<LittleEndian>()?,
            r.read_u32::<LittleEndian>()?,
            r.read_u32::<LittleEndian>()?,
        ))
    })()
    .map_err(|_| bad("truncated header"))?;
    let (version, m, d, flags) = header;
    if version != FRAME_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    if flags & !FLAG_HAS_LABELS != 0 {
        return Err(bad(&format!("unknown flags {flags:#x}")));
    }
    if m == 0 || d == 0 {
        return Err(bad("empty frame"));
    }
    let has_labels = flags & FLAG_HAS_LABELS != 0;
    let body = m
        .checked_mul(12)
        .and_then(|p| m.checked_mul(d as u64 * 4).map(|f| (p, f)))
        .and_then(|(p, f)| p.checked_add(f))
        .and_then(|b| b.checked_add(if has_labels { m * 4 } else { 0 }))
        .ok_or_else(|| bad("size overflow"))?;
    if HEADER_LEN + body != total_len {
        return Err(bad(&format!(
            "expected {} bytes for M={m}, D={d}, labels={has_labels}; file has {total_len}",
            HEADER_LEN + body
        )));
    }
    let m = m as usize;
    let d = d as usize;
    let mut coords = vec![0f32; m * 3];
    let mut features = vec![0f32; m * d];
    r.read_f32_into::<LittleEndian>(&mut coords)
        .and_then(|_| r.read_f32_into::<LittleEndian>(&mut features))
        .map_err(|_| bad("truncated body"))?;
    let labels = if has_labels {
        let mut labels = vec![0u32; m];
        r.read_u32_into::<LittleEndian>(&mut labels)
            .map_err(|_| bad("truncated labels"))?;
        Some(labels)
    } else {
        None
    };
    let points = coords.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Frame::new(frame_id, "", points, features, d, labels).map_err(|e| bad(&e.to_string()))
}
