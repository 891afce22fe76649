//! Synthetic datasets standing in for pretrained point features.
//!
//! `sigma` is the within-class standard deviation of the feature vector, i.e.
//! the RMS distance of a point to its class mean; each coordinate gets
//! independent noise of std `sigma / sqrt(D)`.
//!
//! Gaussian layout: class means sit on scaled coordinate axes so every pair of
//! classes is `separation * sigma` apart. A per-sequence random walk shifts
//! whole frames over time so consecutive frames are similar but not identical.
//! Coordinates are uniform in a box and carry no class information.
//!
//! Moons layout: the classic two interleaved half circles in the first two
//! feature dimensions, remaining dimensions pure noise.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{save_frame, Frame};
use crate::manifest::{DatasetManifest, Sequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    #[default]
    Gaussian,
    Moons,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub layout: Layout,
    pub num_classes: usize,
    pub points_per_frame: usize,
    pub sequences: usize,
    pub frames_per_sequence: usize,
    pub feature_dim: usize,
    /// Distance between class means, in units of `sigma`.
    pub separation: f64,
    /// Within-class RMS distance to the class mean.
    pub sigma: f64,
    /// Per-frame random-walk step, in the same units as `sigma`.
    pub drift: f64,
    /// Norm of a constant offset shared by all features, in units of `sigma`.
    pub offset: f64,
    /// Every frame of a sequence is a copy of its first frame.
    pub duplicate_frames: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            layout: Layout::Gaussian,
            num_classes: 8,
            points_per_frame: 10_000,
            sequences: 1,
            frames_per_sequence: 20,
            feature_dim: 64,
            separation: 4.0,
            sigma: 1.0,
            drift: 0.1,
            offset: 4.0,
            duplicate_frames: false,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_classes == 0 || self.points_per_frame == 0 || self.feature_dim == 0 {
            return bad("classes, points per frame and feature dim must be positive");
        }
        if self.sequences == 0 || self.frames_per_sequence == 0 {
            return bad("need at least one sequence with one frame");
        }
        match self.layout {
            Layout::Gaussian if self.feature_dim < self.num_classes => {
                bad("gaussian layout needs feature_dim >= num_classes")
            }
            Layout::Moons if self.num_classes != 2 || self.feature_dim < 2 => {
                bad("moons layout needs 2 classes and feature_dim >= 2")
            }
            _ if !(self.separation >= 0.0 && self.sigma > 0.0 && self.drift >= 0.0) => {
                bad("separation, sigma and drift must be non-negative (sigma positive)")
            }
            _ => Ok(()),
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes).map(|c| format!("class{c}")).collect()
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Generates all frames in sequence order. Frame ids are `s{seq}_{index}`.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<Frame>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.feature_dim;
    let sigma = spec.sigma;
    let coord_std = sigma / (d as f64).sqrt();
    let mut offset: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
    let norm = offset.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    offset.iter_mut().for_each(|v| *v *= spec.offset * sigma / norm);
    let axis_scale = spec.separation * sigma / 2f64.sqrt();

    let mut frames = Vec::with_capacity(spec.sequences * spec.frames_per_sequence);
    for s in 0..spec.sequences {
        let seq_id = format!("s{s:02}");
        let mut walk = vec![0.0f64; d];
        let mut first: Option<Frame> = None;
        for t in 0..spec.frames_per_sequence {
            let frame_id = format!("{seq_id}_{t:06}");
            if spec.duplicate_frames {
                if let Some(f) = &first {
                    let mut copy = f.clone();
                    copy.frame_id = frame_id;
                    frames.push(copy);
                    continue;
                }
            }
            if t > 0 {
                walk.iter_mut()
                    .for_each(|w| *w += spec.drift * coord_std * normal(&mut rng));
            }
            let m = spec.points_per_frame;
            let mut points = Vec::with_capacity(m);
            let mut features = Vec::with_capacity(m * d);
            let mut labels = Vec::with_capacity(m);
            for _ in 0..m {
                let class = rng.random_range(0..spec.num_classes);
                points.push([
                    rng.random_range(-50.0f32..50.0),
                    rng.random_range(-50.0f32..50.0),
                    rng.random_range(-2.0f32..2.0),
                ]);
                let mut mean = vec![0.0; d];
                match spec.layout {
                    Layout::Gaussian => mean[class] = axis_scale,
                    Layout::Moons => {
                        let angle = rng.random_range(0.0..PI);
                        let (x, y) = if class == 0 {
                            (angle.cos(), angle.sin())
                        } else {
                            (1.0 - angle.cos(), 0.5 - angle.sin())
                        };
                        mean[0] = x * spec.separation * sigma;
                        mean[1] = y * spec.separation * sigma;
                    }
                }
                for j in 0..d {
                    let v = offset[j] + walk[j] + mean[j] + coord_std * normal(&mut rng);
                    features.push(v as f32);
                }
                labels.push(class as u32);
            }
            let frame = Frame::new(frame_id, seq_id.clone(), points, features, d, Some(labels))?;
            if first.is_none() {
                first = Some(frame.clone());
            }
            frames.push(frame);
        }
    }
    Ok(frames)
}

/// Writes frames under `dir/<sequence>/<frame_id>.mlnf` plus `dir/manifest.toml`.
pub fn write_dataset(spec: &SyntheticSpec, frames: &[Frame], dir: &Path) -> Result<PathBuf> {
    let mut sequences: Vec<Sequence> = Vec::new();
    for f in frames {
        let rel = PathBuf::from(&f.sequence_id).join(format!("{}.mlnf", f.frame_id));
        let abs = dir.join(&rel);
        if let Some(parent) = abs.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        save_frame(f, &abs)?;
        match sequences.last_mut() {
            Some(s) if s.id == f.sequence_id => s.frames.push(rel),
            _ => sequences.push(Sequence {
                id: f.sequence_id.clone(),
                frames: vec![rel],
            }),
        }
    }
    let manifest = DatasetManifest::new(
        spec.num_classes,
        spec.class_names(),
        spec.feature_dim,
        None,
        sequences,
    )?;
    let path = dir.join("manifest.toml");
    manifest.save(&path)?;
    Ok(path)
}

/// Generates a dataset and writes it to disk; returns the manifest path.
pub fn gen_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<PathBuf> {
    let frames = generate(spec)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_dataset(spec, &frames, dir)
}

/// Like [`gen_synthetic`], but each sequence runs `validation_frames` frames
/// longer and those trailing frames go to a second manifest under
/// `dir/validation`. Both share the class means and the feature offset.
pub fn gen_synthetic_split(
    spec: &SyntheticSpec,
    dir: &Path,
    validation_frames: usize,
) -> Result<(PathBuf, PathBuf)> {
    if validation_frames == 0 {
        return Err(Error::Config("validation_frames must be positive".into()));
    }
    let long = SyntheticSpec {
        frames_per_sequence: spec.frames_per_sequence + validation_frames,
        ..spec.clone()
    };
    let frames = generate(&long)?;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for seq in frames.chunks(long.frames_per_sequence) {
        let (t, v) = seq.split_at(spec.frames_per_sequence);
        train.extend_from_slice(t);
        val.extend_from_slice(v);
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let train_path = write_dataset(spec, &train, dir)?;
    let val_path = write_dataset(spec, &val, &dir.join("validation"))?;
    Ok((train_path, val_path))
}
