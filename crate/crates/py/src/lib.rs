//! Python module `milliseg`.
//!
//! Arrays cross the boundary as flat lists (row-major); frames, clusterings
//! and pseudo-labels are wrapped as classes with load/save helpers.

use std::collections::BTreeMap;
use std::path::PathBuf;

use milliseg_core::annotate::{annotate_frame, OracleAnnotator};
use milliseg_core::clustering::{self, ClusterBudget, FeatureSource};
use milliseg_core::frame::{self, FrameDescriptor};
use milliseg_core::labels::{self, LabelSource};
use milliseg_core::pipeline::{self as pl, PipelineConfig, Stage};
use milliseg_core::selection::{self, SceneSignature};
use milliseg_core::semisup;
use milliseg_core::synthetic::{self, Layout, SyntheticSpec};
use milliseg_core::{metrics, pruning, Error, ErrorClass};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

create_exception!(milliseg, MillisegError, PyException, "Base error of the milliseg module.");
create_exception!(milliseg, ConfigError, MillisegError, "Invalid configuration or arguments.");
create_exception!(milliseg, DataError, MillisegError, "Missing, malformed or inconsistent input data.");
create_exception!(milliseg, StageError, MillisegError, "A processing stage failed.");

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.class() {
        ErrorClass::Config => ConfigError::new_err(msg),
        ErrorClass::Data => DataError::new_err(msg),
        ErrorClass::Stage => StageError::new_err(msg),
    }
}

fn pipeline_err(e: pl::PipelineError) -> PyErr {
    let msg = e.to_string();
    match e.source.class() {
        ErrorClass::Config => ConfigError::new_err(msg),
        ErrorClass::Data => DataError::new_err(msg),
        ErrorClass::Stage => StageError::new_err(msg),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for milliseg_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// One lidar scan: xyz points, per-point features, optional ground truth.
#[pyclass(name = "Frame", module = "milliseg", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyFrame {
    inner: frame::Frame,
}

#[pymethods]
impl PyFrame {
    #[new]
    #[pyo3(signature = (frame_id, sequence_id, points, features, dim, labels=None))]
    fn new(
        frame_id: String,
        sequence_id: String,
        points: Vec<[f32; 3]>,
        features: Vec<f32>,
        dim: usize,
        labels: Option<Vec<u32>>,
    ) -> PyResult<Self> {
        Ok(Self {
            inner: frame::Frame::new(frame_id, sequence_id, points, features, dim, labels).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: frame::load_frame(path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        frame::save_frame(&self.inner, path).py()
    }

    #[getter]
    fn frame_id(&self) -> String {
        self.inner.frame_id.clone()
    }

    #[getter]
    fn sequence_id(&self) -> String {
        self.inner.sequence_id.clone()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn points(&self) -> Vec<[f32; 3]> {
        self.inner.points().to_vec()
    }

    #[getter]
    fn features(&self) -> Vec<f32> {
        self.inner.features().to_vec()
    }

    #[getter]
    fn labels(&self) -> Option<Vec<u32>> {
        self.inner.gt_labels().map(<[u32]>::to_vec)
    }

    /// Mean feature vector used for pruning.
    fn descriptor(&self) -> Vec<f64> {
        self.inner.descriptor().vector
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Frame({:?}, points={}, dim={})", self.inner.frame_id, self.inner.len(), self.inner.dim())
    }
}

/// Cluster assignment of every point plus the point chosen as each center.
#[pyclass(name = "Clustering", module = "milliseg", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyClustering {
    inner: clustering::Clustering,
}

#[pymethods]
impl PyClustering {
    #[new]
    fn new(assignments: Vec<u32>, center_points: Vec<u32>) -> PyResult<Self> {
        Ok(Self {
            inner: clustering::Clustering::new(assignments, center_points).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: clustering::load_clustering(path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        clustering::save_clustering(&self.inner, path).py()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn assignments(&self) -> Vec<u32> {
        self.inner.assignments().to_vec()
    }

    #[getter]
    fn center_points(&self) -> Vec<u32> {
        self.inner.center_points().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Per-point labels with their origin: "unlabeled", "clicked" or "propagated".
#[pyclass(name = "PseudoLabels", module = "milliseg", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyPseudoLabels {
    inner: labels::PseudoLabels,
}

fn source_name(s: LabelSource) -> &'static str {
    match s {
        LabelSource::Unlabeled => "unlabeled",
        LabelSource::Clicked => "clicked",
        LabelSource::Propagated => "propagated",
    }
}

#[pymethods]
impl PyPseudoLabels {
    #[staticmethod]
    fn load(path: PathBuf, num_classes: usize) -> PyResult<Self> {
        Ok(Self {
            inner: labels::load_pseudo_labels(path, num_classes).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        labels::save_pseudo_labels(&self.inner, path).py()
    }

    #[getter]
    fn labels(&self) -> Vec<u32> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn sources(&self) -> Vec<&'static str> {
        self.inner.source().iter().map(|s| source_name(*s)).collect()
    }

    #[getter]
    fn clicked(&self) -> usize {
        self.inner.clicked_count()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Cosine similarity of two vectors.
#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    pruning::cosine_similarity(&a, &b).py()
}

/// Indices of the frames kept when pruning one sequence of descriptors.
#[pyfunction]
#[pyo3(signature = (descriptors, tau=0.95))]
fn prune_sequence(descriptors: Vec<Vec<f64>>, tau: f64) -> PyResult<Vec<usize>> {
    let cfg = pruning::PruneConfig::new(tau).py()?;
    let d: Vec<FrameDescriptor> = descriptors
        .into_iter()
        .enumerate()
        .map(|(i, vector)| FrameDescriptor {
            frame_id: i.to_string(),
            vector,
        })
        .collect();
    pruning::prune_sequence(&d, cfg).py()
}

/// Scene signature of a frame: the centroids of `num_centers` feature clusters.
#[pyfunction]
#[pyo3(signature = (frame, num_centers, seed=0))]
fn scene_signature(frame: &PyFrame, num_centers: usize, seed: u64) -> PyResult<(String, Vec<f64>, usize)> {
    let s = selection::scene_signature(&frame.inner, num_centers, seed).py()?;
    Ok((s.frame_id.clone(), s.centers().flatten().copied().collect(), s.dim()))
}

/// Diversity score per frame, from `(frame_id, flat centers, dim)` signatures.
#[pyfunction]
fn diversity_scores(signatures: Vec<(String, Vec<f64>, usize)>) -> PyResult<Vec<(String, f64)>> {
    let sigs = signatures
        .into_iter()
        .map(|(id, centers, dim)| SceneSignature::new(id, centers, dim))
        .collect::<milliseg_core::Result<Vec<_>>>()
        .py()?;
    Ok(selection::diversity_scores(&sigs)
        .py()?
        .into_iter()
        .map(|s| (s.frame_id, s.score))
        .collect())
}

/// The `budget` best frame ids, highest score first.
#[pyfunction]
fn select_frames(scores: Vec<(String, f64)>, budget: usize) -> PyResult<Vec<String>> {
    let s: Vec<selection::DiversityScore> = scores
        .into_iter()
        .map(|(frame_id, score)| selection::DiversityScore { frame_id, score })
        .collect();
    selection::select_frames(&s, budget).py()
}

/// k-means on row-major data; returns (assignments, flat centroids, objective).
#[pyfunction]
#[pyo3(signature = (data, dim, k, seed=0))]
fn kmeans(py: Python<'_>, data: Vec<f32>, dim: usize, k: usize, seed: u64) -> PyResult<(Vec<u32>, Vec<f64>, f64)> {
    let km = py.detach(|| clustering::kmeans(&data, dim, k, seed)).py()?;
    let objective = km.objective();
    Ok((km.assignments, km.centroids, objective))
}

/// Number of clicks for a frame of `points` points.
#[pyfunction]
#[pyo3(signature = (points, num_classes, alpha, min_factor=10))]
fn budget_to_k(points: usize, num_classes: usize, alpha: f64, min_factor: usize) -> PyResult<usize> {
    let b = ClusterBudget::new(alpha, min_factor).py()?;
    Ok(clustering::budget_to_k(&b, points, num_classes))
}

fn feature_source(name: &str) -> PyResult<FeatureSource> {
    name.parse().py()
}

/// Over-segments a frame into one cluster per click.
#[pyfunction]
#[pyo3(signature = (frame, num_classes, alpha, min_factor=10, source="features", seed=0))]
fn cluster_frame(
    py: Python<'_>,
    frame: &PyFrame,
    num_classes: usize,
    alpha: f64,
    min_factor: usize,
    source: &str,
    seed: u64,
) -> PyResult<PyClustering> {
    let b = ClusterBudget::new(alpha, min_factor).py()?;
    let src = feature_source(source)?;
    let inner = py
        .detach(|| clustering::cluster_frame(&frame.inner, &b, num_classes, src, seed))
        .py()?;
    Ok(PyClustering { inner })
}

/// Spreads one class per cluster center over the cluster.
#[pyfunction]
fn propagate_labels(
    frame_id: String,
    clustering: &PyClustering,
    center_labels: Vec<u32>,
    num_classes: usize,
) -> PyResult<PyPseudoLabels> {
    Ok(PyPseudoLabels {
        inner: clustering::propagate_labels(&frame_id, &clustering.inner, &center_labels, num_classes).py()?,
    })
}

/// Answers every center from ground truth (with optional noise) and propagates.
#[pyfunction]
#[pyo3(signature = (frame, clustering, num_classes, noise=0.0, seed=0))]
fn annotate_oracle(
    frame: &PyFrame,
    clustering: &PyClustering,
    num_classes: usize,
    noise: f64,
    seed: u64,
) -> PyResult<PyPseudoLabels> {
    let mut oracle = OracleAnnotator::noisy(num_classes, noise, seed).py()?;
    Ok(PyPseudoLabels {
        inner: annotate_frame(&frame.inner, &clustering.inner, &mut oracle, num_classes).py()?,
    })
}

/// Per-class accuracy (None for absent classes) and their mean.
#[pyfunction]
fn classwise_accuracy(pseudo: Vec<u32>, gt: Vec<u32>, num_classes: usize) -> PyResult<(Vec<Option<f64>>, f64)> {
    let r = metrics::classwise_accuracy(&pseudo, &gt, num_classes).py()?;
    Ok((r.per_class, r.average))
}

#[pyfunction]
#[pyo3(signature = (pred, gt, num_classes, ignore=Vec::new()))]
fn miou(pred: Vec<u32>, gt: Vec<u32>, num_classes: usize, ignore: Vec<u32>) -> PyResult<f64> {
    metrics::miou(&pred, &gt, num_classes, &ignore).py()
}

/// Row-wise tempered softmax of a flat `n x k` logit array.
#[pyfunction]
#[pyo3(signature = (logits, k, temperature=1.0))]
fn softmax(logits: Vec<f64>, k: usize, temperature: f64) -> PyResult<Vec<f64>> {
    if k == 0 || logits.len() % k != 0 || temperature <= 0.0 {
        return Err(PyValueError::new_err("need k > 0 dividing len(logits) and temperature > 0"));
    }
    Ok(semisup::softmax_rows(&logits, k, temperature))
}

/// Lovasz-softmax loss of flat `n x k` probabilities.
#[pyfunction]
fn lovasz_softmax(probs: Vec<f64>, k: usize, labels: Vec<u32>) -> PyResult<f64> {
    semisup::lovasz_softmax(&probs, k, &labels).py()
}

/// KL(teacher || student) on tempered distributions, averaged over rows.
#[pyfunction]
fn kl_distill(student: Vec<f64>, teacher: Vec<f64>, k: usize, temperature: f64) -> PyResult<f64> {
    semisup::kl_distill(&student, &teacher, k, temperature).py()
}

/// Supervised loss and its gradient w.r.t. the logits.
#[pyfunction]
#[pyo3(signature = (logits, k, labels, ce=0.5, lovasz=1.0))]
fn supervised_loss(logits: Vec<f64>, k: usize, labels: Vec<u32>, ce: f64, lovasz: f64) -> PyResult<(f64, Vec<f64>)> {
    let w = semisup::LossWeights { ce, lovasz, kl: 0.0 };
    let l = semisup::supervised_loss(&logits, k, &labels, &w).py()?;
    Ok((l.value, l.grad))
}

/// Returns `beta * teacher + (1 - beta) * student`.
#[pyfunction]
fn ema_update(mut teacher: Vec<f64>, student: Vec<f64>, beta: f64) -> PyResult<Vec<f64>> {
    semisup::ema_update(&mut teacher, &student, beta).py()?;
    Ok(teacher)
}

/// Writes a synthetic dataset and returns the manifest path, plus the
/// validation manifest when `validation_frames > 0`.
#[pyfunction]
#[pyo3(signature = (
    out_dir, *, layout="gaussian", num_classes=8, points_per_frame=10_000, frames=20, sequences=1,
    feature_dim=64, separation=4.0, sigma=1.0, drift=0.1, offset=4.0, duplicate_frames=false,
    validation_frames=0, seed=0
))]
#[allow(clippy::too_many_arguments)]
fn gen_synthetic(
    out_dir: PathBuf,
    layout: &str,
    num_classes: usize,
    points_per_frame: usize,
    frames: usize,
    sequences: usize,
    feature_dim: usize,
    separation: f64,
    sigma: f64,
    drift: f64,
    offset: f64,
    duplicate_frames: bool,
    validation_frames: usize,
    seed: u64,
) -> PyResult<(PathBuf, Option<PathBuf>)> {
    let layout = match layout {
        "gaussian" => Layout::Gaussian,
        "moons" => Layout::Moons,
        other => return Err(ConfigError::new_err(format!("unknown layout {other:?}"))),
    };
    let spec = SyntheticSpec {
        layout,
        num_classes,
        points_per_frame,
        sequences,
        frames_per_sequence: frames,
        feature_dim,
        separation,
        sigma,
        drift,
        offset,
        duplicate_frames,
        seed,
    };
    if validation_frames > 0 {
        let (t, v) = synthetic::gen_synthetic_split(&spec, &out_dir, validation_frames).py()?;
        Ok((t, Some(v)))
    } else {
        Ok((synthetic::gen_synthetic(&spec, &out_dir).py()?, None))
    }
}

fn load_config(path: PathBuf, out_dir: Option<PathBuf>) -> PyResult<PipelineConfig> {
    let mut cfg = PipelineConfig::load(path).py()?;
    if let Some(d) = out_dir {
        cfg.out_dir = d;
    }
    Ok(cfg)
}

/// Runs the whole pipeline from a TOML config; returns the report as TOML text.
#[pyfunction]
#[pyo3(signature = (config, out_dir=None))]
fn run_pipeline(py: Python<'_>, config: PathBuf, out_dir: Option<PathBuf>) -> PyResult<String> {
    let cfg = load_config(config, out_dir)?;
    let report = py.detach(|| pl::run_pipeline(&cfg)).map_err(pipeline_err)?;
    Ok(report.to_toml())
}

/// Runs a single stage (`prune`, `select`, `cluster`, `annotate`, `train`, `eval`);
/// returns its wall time in seconds.
#[pyfunction]
#[pyo3(signature = (config, stage, out_dir=None))]
fn run_stage(py: Python<'_>, config: PathBuf, stage: &str, out_dir: Option<PathBuf>) -> PyResult<f64> {
    let stage = Stage::ALL
        .into_iter()
        .find(|s| s.name() == stage)
        .ok_or_else(|| ConfigError::new_err(format!("unknown stage {stage:?}")))?;
    let cfg = load_config(config, out_dir)?;
    py.detach(|| pl::run_stage(&cfg, stage)).map_err(pipeline_err)
}

/// Per-class propagation accuracy from a run's annotation report.
#[pyfunction]
fn annotation_accuracy(run_dir: PathBuf) -> PyResult<BTreeMap<String, f64>> {
    let path = pl::RunLayout::new(run_dir).annotation_report();
    Ok(pl::AnnotationReport::load(path).py()?.per_class)
}

#[pymodule]
fn milliseg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("MillisegError", py.get_type::<MillisegError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("DataError", py.get_type::<DataError>())?;
    m.add("StageError", py.get_type::<StageError>())?;
    m.add("UNLABELED", milliseg_core::UNLABELED)?;
    m.add_class::<PyFrame>()?;
    m.add_class::<PyClustering>()?;
    m.add_class::<PyPseudoLabels>()?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(prune_sequence, m)?)?;
    m.add_function(wrap_pyfunction!(scene_signature, m)?)?;
    m.add_function(wrap_pyfunction!(diversity_scores, m)?)?;
    m.add_function(wrap_pyfunction!(select_frames, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(budget_to_k, m)?)?;
    m.add_function(wrap_pyfunction!(cluster_frame, m)?)?;
    m.add_function(wrap_pyfunction!(propagate_labels, m)?)?;
    m.add_function(wrap_pyfunction!(annotate_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(classwise_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(lovasz_softmax, m)?)?;
    m.add_function(wrap_pyfunction!(kl_distill, m)?)?;
    m.add_function(wrap_pyfunction!(supervised_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ema_update, m)?)?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(run_stage, m)?)?;
    m.add_function(wrap_pyfunction!(annotation_accuracy, m)?)?;
    Ok(())
}
