//! File-based orchestration: prune -> select -> cluster -> annotate -> train -> eval.
//!
//! Stages talk to each other only through files in the run directory. Each
//! finished stage leaves a marker with its wall time; rerunning with the same
//! configuration skips marked stages, so the final report is reproduced
//! exactly. Changing the configuration invalidates every marker.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::annotate::{annotate_frame, OracleAnnotator};
use crate::clustering::{cluster_frame, load_clustering, save_clustering, ClusterBudget, FeatureSource};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::labels::{load_pseudo_labels, save_pseudo_labels, PseudoLabels};
use crate::manifest::{DatasetManifest, FrameRef};
use crate::metrics::{ClasswiseCounts, ClasswiseReport, ConfusionMatrix};
use crate::pruning::{prune_sequences, PruneConfig};
use crate::selection::{diversity_scores, scene_signature, select_frames, DiversityScore};
use crate::semisup::{
    load_model, save_model, trace_csv, train_two_stage, ModelSpec, PointwiseClassifier,
    SemiSupConfig, TrainSet,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prune,
    Select,
    Cluster,
    Annotate,
    Train,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Prune,
        Stage::Select,
        Stage::Cluster,
        Stage::Annotate,
        Stage::Train,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prune => "prune",
            Stage::Select => "select",
            Stage::Cluster => "cluster",
            Stage::Annotate => "annotate",
            Stage::Train => "train",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A stage failure; earlier artifacts stay on disk.
#[derive(Debug, thiserror::Error)]
#[error("stage {stage} failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationMode {
    /// Clicks answered from ground truth.
    #[default]
    Oracle,
    /// Pseudo-labels written by the annotation server are picked up from the run directory.
    Serve,
}

fn default_tau() -> f64 {
    PruneConfig::SEMANTIC_KITTI_TAU
}

fn default_min_factor() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub manifest: PathBuf,
    /// Frames scored by the eval stage; the training manifest when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Must match the manifest when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    /// Fraction of each selected frame's points to click. Exclusive with `clicks`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Total click budget over the selected frames. Exclusive with `alpha`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clicks: Option<u64>,
    /// Number of frames to select; every kept frame when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_frames: Option<usize>,
    #[serde(default = "default_min_factor")]
    pub min_factor: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub feature_source: FeatureSource,
    #[serde(default)]
    pub annotation: AnnotationMode,
    /// Oracle noise: probability of answering a random wrong class.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub semisup: SemiSupConfig,
    #[serde(default)]
    pub model: ModelSpec,
}

impl PipelineConfig {
    pub fn new(manifest: impl Into<PathBuf>, out_dir: impl Into<PathBuf>, alpha: f64) -> Self {
        Self {
            manifest: manifest.into(),
            validation_manifest: None,
            out_dir: out_dir.into(),
            tau: default_tau(),
            num_classes: None,
            alpha: Some(alpha),
            clicks: None,
            budget_frames: None,
            min_factor: default_min_factor(),
            seed: 0,
            feature_source: FeatureSource::Features,
            annotation: AnnotationMode::Oracle,
            noise: 0.0,
            semisup: SemiSupConfig::default(),
            model: ModelSpec::default(),
        }
    }

    /// Reads a TOML config; relative paths are taken relative to its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.manifest);
        fix(&mut cfg.out_dir);
        if let Some(v) = cfg.validation_manifest.as_mut() {
            fix(v);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match (self.alpha, self.clicks) {
            (Some(_), Some(_)) | (None, None) => {
                return bad("exactly one of alpha and clicks must be set".into())
            }
            (Some(a), None) if !(a > 0.0 && a <= 1.0) => {
                return bad(format!("alpha must lie in (0, 1], got {a}"))
            }
            (None, Some(0)) => return bad("clicks must be positive".into()),
            _ => {}
        }
        if self.budget_frames == Some(0) {
            return bad("budget_frames must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad(format!("noise must lie in [0, 1], got {}", self.noise));
        }
        PruneConfig::new(self.tau)?;
        self.semisup.validate()
    }

    pub fn layout(&self) -> RunLayout {
        RunLayout::new(&self.out_dir)
    }
}

/// Paths of every artifact inside a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn kept(&self) -> PathBuf {
        self.root.join("kept.txt")
    }

    pub fn pool(&self) -> PathBuf {
        self.root.join("pool.toml")
    }

    pub fn selection(&self) -> PathBuf {
        self.root.join("selection.txt")
    }

    pub fn clusters_dir(&self) -> PathBuf {
        self.root.join("clusters")
    }

    pub fn clustering(&self, frame_id: &str) -> PathBuf {
        self.clusters_dir().join(format!("{frame_id}.mlnc"))
    }

    pub fn labels_dir(&self) -> PathBuf {
        self.root.join("labels")
    }

    pub fn labels(&self, frame_id: &str) -> PathBuf {
        self.labels_dir().join(format!("{frame_id}.mlnl"))
    }

    pub fn annotation_report(&self) -> PathBuf {
        self.root.join("annotation.toml")
    }

    pub fn stage1_model(&self) -> PathBuf {
        self.root.join("model_stage1.mlnm")
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model.mlnm")
    }

    pub fn trace(&self) -> PathBuf {
        self.root.join("trace.csv")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval.toml")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.toml")
    }

    pub fn marker(&self, stage: Stage) -> PathBuf {
        self.root.join("stages").join(format!("{stage}.done"))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Config(e.to_string()))?;
    write_text(path, &text)
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    toml::from_str(&read_text(path)?).map_err(|e| Error::malformed(path, e.to_string()))
}

/// Writes `sequence_id frame_id` lines in sweep order.
pub fn write_kept(path: &Path, kept: &[FrameRef]) -> Result<()> {
    let text: String = kept
        .iter()
        .map(|r| format!("{} {}\n", r.sequence_id, r.frame_id))
        .collect();
    write_text(path, &text)
}

/// Reads a kept list back as `(sequence_id, frame_id)` pairs.
pub fn read_kept(path: &Path) -> Result<Vec<(String, String)>> {
    read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut parts = l.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(s), Some(f), None) => Ok((s.to_string(), f.to_string())),
                _ => Err(Error::malformed(path, format!("bad kept line {l:?}"))),
            }
        })
        .collect()
}

/// Writes `frame_id score` lines, highest score first.
pub fn write_selection(path: &Path, selected: &[DiversityScore]) -> Result<()> {
    let text: String = selected
        .iter()
        .map(|s| format!("{} {}\n", s.frame_id, s.score))
        .collect();
    write_text(path, &text)
}

pub fn read_selection(path: &Path) -> Result<Vec<DiversityScore>> {
    read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut parts = l.split_whitespace();
            let parsed = match (parts.next(), parts.next(), parts.next()) {
                (Some(f), Some(s), None) => s.parse::<f64>().ok().map(|score| DiversityScore {
                    frame_id: f.to_string(),
                    score,
                }),
                _ => None,
            };
            parsed.ok_or_else(|| Error::malformed(path, format!("bad selection line {l:?}")))
        })
        .collect()
}

/// Size of the whole training pool before pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolStats {
    pub frames: usize,
    pub points: u64,
}

/// Prunes every sequence of a manifest; returns kept frames in manifest order.
pub fn prune_manifest(
    manifest: &DatasetManifest,
    cfg: PruneConfig,
) -> Result<(Vec<FrameRef>, PoolStats)> {
    let mut by_seq: Vec<Vec<FrameRef>> = Vec::new();
    for r in manifest.frames() {
        match by_seq.last_mut() {
            Some(seq) if seq[0].sequence_id == r.sequence_id => seq.push(r),
            _ => by_seq.push(vec![r]),
        }
    }
    let loaded: Vec<Vec<(crate::frame::FrameDescriptor, usize)>> = by_seq
        .par_iter()
        .map(|seq| {
            seq.iter()
                .map(|r| manifest.load_frame(r).map(|f| (f.descriptor(), f.len())))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let stats = PoolStats {
        frames: loaded.iter().map(Vec::len).sum(),
        points: loaded.iter().flatten().map(|(_, n)| *n as u64).sum(),
    };
    let descriptors: Vec<Vec<_>> = loaded
        .into_iter()
        .map(|seq| seq.into_iter().map(|(d, _)| d).collect())
        .collect();
    let kept = prune_sequences(&descriptors, cfg)?;
    let refs = by_seq
        .into_iter()
        .zip(kept)
        .flat_map(|(seq, idx)| idx.into_iter().map(move |i| seq[i].clone()))
        .collect();
    Ok((refs, stats))
}

/// Scores the given frames and returns the `budget` most diverse, best first.
/// A lone frame has no diversity to compare and is selected with score 0.
pub fn select_diverse(
    manifest: &DatasetManifest,
    frame_ids: &[String],
    num_classes: usize,
    budget: usize,
    seed: u64,
) -> Result<Vec<DiversityScore>> {
    if let [only] = frame_ids {
        manifest.find(only)?;
        return Ok(vec![DiversityScore { frame_id: only.clone(), score: 0.0 }]);
    }
    let sigs = frame_ids
        .par_iter()
        .map(|id| scene_signature(&manifest.load_frame_by_id(id)?, num_classes, seed))
        .collect::<Result<Vec<_>>>()?;
    let scores = diversity_scores(&sigs)?;
    let chosen = select_frames(&scores, budget)?;
    let by_id: BTreeMap<&str, f64> = scores.iter().map(|s| (s.frame_id.as_str(), s.score)).collect();
    Ok(chosen
        .into_iter()
        .map(|id| DiversityScore {
            score: by_id[id.as_str()],
            frame_id: id,
        })
        .collect())
}

/// Per-class propagation accuracy with class names, as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationReport {
    pub frames: usize,
    pub clicks: u64,
    /// Points of the whole training pool.
    pub points: u64,
    pub percent_labels: f64,
    /// Mean accuracy over present classes; NaN without ground truth.
    pub average: f64,
    /// Present classes only.
    pub per_class: BTreeMap<String, f64>,
}

impl AnnotationReport {
    pub fn new(report: &ClasswiseReport, class_names: &[String], clicks: u64, points: u64, frames: usize) -> Self {
        let per_class = report
            .per_class
            .iter()
            .zip(class_names)
            .filter_map(|(a, name)| a.map(|a| (name.clone(), a)))
            .collect();
        Self {
            frames,
            clicks,
            points,
            percent_labels: 100.0 * clicks as f64 / points as f64,
            average: report.average,
            per_class,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_toml(path.as_ref())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub frames: usize,
    pub stage1_miou: f64,
    pub stage2_miou: f64,
}

/// mIoU of a model over frames with ground truth; NaN when none has any.
pub fn evaluate_model(
    model: &PointwiseClassifier,
    frames: &[Frame],
    num_classes: usize,
    ignore: &[u32],
) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(num_classes, ignore);
    let mut any = false;
    for f in frames {
        if let Some(gt) = f.gt_labels() {
            cm.add(&model.predict_frame(f)?, gt)?;
            any = true;
        }
    }
    Ok(if any { cm.miou() } else { f64::NAN })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub seconds: f64,
}

/// Summary of a run, rebuilt from the artifacts in the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub frames_total: usize,
    pub frames_kept: usize,
    pub frames_selected: usize,
    pub points_total: u64,
    pub clicks: u64,
    /// Clicks over pool points.
    pub label_ratio: f64,
    pub percent_labels: f64,
    pub propagation_accuracy: f64,
    pub stage1_miou: f64,
    pub stage2_miou: f64,
    pub per_class_accuracy: BTreeMap<String, f64>,
    /// Wall time per stage, in seconds.
    pub stage_seconds: BTreeMap<String, f64>,
}

impl RunReport {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_toml(path.as_ref())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }
}

struct Context {
    cfg: PipelineConfig,
    layout: RunLayout,
    manifest: DatasetManifest,
    ignore: Vec<u32>,
}

impl Context {
    fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    fn selected_frames(&self) -> Result<Vec<Frame>> {
        read_selection(&self.layout.selection())?
            .iter()
            .map(|s| self.manifest.load_frame_by_id(&s.frame_id))
            .collect()
    }

    fn eval_frames(&self) -> Result<Vec<Frame>> {
        let m = match &self.cfg.validation_manifest {
            Some(p) => DatasetManifest::load(p)?,
            None => self.manifest.clone(),
        };
        if m.num_classes != self.num_classes() || m.feature_dim != self.manifest.feature_dim {
            return Err(Error::Config(
                "validation manifest disagrees with the training manifest on classes or feature dim"
                    .into(),
            ));
        }
        m.frames().iter().map(|r| m.load_frame(r)).collect()
    }

    fn run_stage(&self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Prune => self.prune(),
            Stage::Select => self.select(),
            Stage::Cluster => self.cluster(),
            Stage::Annotate => self.annotate(),
            Stage::Train => self.train(),
            Stage::Eval => self.eval(),
        }
    }

    fn prune(&self) -> Result<()> {
        let (kept, stats) = prune_manifest(&self.manifest, PruneConfig::new(self.cfg.tau)?)?;
        write_kept(&self.layout.kept(), &kept)?;
        write_toml(&self.layout.pool(), &stats)
    }

    fn select(&self) -> Result<()> {
        let kept: Vec<String> = read_kept(&self.layout.kept())?
            .into_iter()
            .map(|(_, f)| f)
            .collect();
        let budget = self.cfg.budget_frames.unwrap_or(kept.len());
        let chosen = select_diverse(&self.manifest, &kept, self.num_classes(), budget, self.cfg.seed)?;
        write_selection(&self.layout.selection(), &chosen)
    }

    fn budget(&self, frames: &[Frame]) -> Result<ClusterBudget> {
        match (self.cfg.alpha, self.cfg.clicks) {
            (Some(a), _) => ClusterBudget::new(a, self.cfg.min_factor),
            (None, Some(n)) => {
                let points = frames.iter().map(|f| f.len() as u64).sum();
                ClusterBudget::from_clicks(n, points, self.cfg.min_factor)
            }
            (None, None) => Err(Error::Config("no click budget".into())),
        }
    }

    fn cluster(&self) -> Result<()> {
        let frames = self.selected_frames()?;
        let budget = self.budget(&frames)?;
        let dir = self.layout.clusters_dir();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let k = self.num_classes();
        frames.par_iter().try_for_each(|f| {
            let c = cluster_frame(f, &budget, k, self.cfg.feature_source, self.cfg.seed)?;
            save_clustering(&c, self.layout.clustering(&f.frame_id))
        })
    }

    fn annotate(&self) -> Result<()> {
        let frames = self.selected_frames()?;
        let k = self.num_classes();
        let dir = self.layout.labels_dir();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut clicks = 0u64;
        let mut counts = ClasswiseCounts::new(k);
        let mut any_gt = false;
        for (i, f) in frames.iter().enumerate() {
            let clustering = load_clustering(self.layout.clustering(&f.frame_id))?;
            clicks += clustering.k() as u64;
            let path = self.layout.labels(&f.frame_id);
            let pl = match self.cfg.annotation {
                AnnotationMode::Oracle => {
                    let mut oracle =
                        OracleAnnotator::noisy(k, self.cfg.noise, self.cfg.seed.wrapping_add(i as u64))?;
                    let pl = annotate_frame(f, &clustering, &mut oracle, k)?;
                    save_pseudo_labels(&pl, &path)?;
                    pl
                }
                AnnotationMode::Serve => {
                    if !path.exists() {
                        return Err(Error::MissingArtifact(path));
                    }
                    load_pseudo_labels(&path, k)?
                }
            };
            if pl.len() != f.len() {
                return Err(Error::LengthMismatch {
                    what: "pseudo-labels",
                    expected: f.len(),
                    found: pl.len(),
                });
            }
            if let Some(gt) = f.gt_labels() {
                counts.add(pl.labels(), gt)?;
                any_gt = true;
            }
        }
        let pool: PoolStats = read_toml(&self.layout.pool())?;
        let mut report = counts.report();
        if !any_gt {
            report.average = f64::NAN;
        }
        let out = AnnotationReport::new(&report, &self.manifest.class_names, clicks, pool.points, frames.len());
        write_toml(&self.layout.annotation_report(), &out)
    }

    fn train(&self) -> Result<()> {
        let k = self.num_classes();
        let selection = read_selection(&self.layout.selection())?;
        let chosen: BTreeSet<&str> = selection.iter().map(|s| s.frame_id.as_str()).collect();
        let mut labeled: Vec<(Frame, PseudoLabels)> = Vec::with_capacity(selection.len());
        for s in &selection {
            let f = self.manifest.load_frame_by_id(&s.frame_id)?;
            let pl = load_pseudo_labels(self.layout.labels(&s.frame_id), k)?;
            labeled.push((f, pl));
        }
        let unlabeled: Vec<Frame> = read_kept(&self.layout.kept())?
            .iter()
            .filter(|(_, f)| !chosen.contains(f.as_str()))
            .map(|(_, f)| self.manifest.load_frame_by_id(f))
            .collect::<Result<_>>()?;
        let validation = match &self.cfg.validation_manifest {
            Some(_) => self.eval_frames()?,
            None => Vec::new(),
        };
        let data = TrainSet {
            labeled: &labeled,
            unlabeled: &unlabeled,
            validation: &validation,
            num_classes: k,
            ignore: &self.ignore,
        };
        let out = train_two_stage(&data, &self.cfg.model, &self.cfg.semisup, self.cfg.seed)?;
        save_model(&out.stage1, &self.layout.stage1_model())?;
        save_model(&out.student, &self.layout.model())?;
        write_text(&self.layout.trace(), &trace_csv(&out.trace))
    }

    fn eval(&self) -> Result<()> {
        let frames = self.eval_frames()?;
        let k = self.num_classes();
        let stage1 = load_model(&self.layout.stage1_model())?;
        let stage2 = load_model(&self.layout.model())?;
        let result = EvalResult {
            frames: frames.len(),
            stage1_miou: evaluate_model(&stage1, &frames, k, &self.ignore)?,
            stage2_miou: evaluate_model(&stage2, &frames, k, &self.ignore)?,
        };
        write_toml(&self.layout.eval(), &result)
    }
}

/// Assembles the run report from the artifacts of a finished run.
pub fn build_report(layout: &RunLayout) -> Result<RunReport> {
    let pool: PoolStats = read_toml(&layout.pool())?;
    let kept = read_kept(&layout.kept())?;
    let annotation: AnnotationReport = read_toml(&layout.annotation_report())?;
    let eval: EvalResult = read_toml(&layout.eval())?;
    let mut stage_seconds = BTreeMap::new();
    for stage in Stage::ALL {
        let rec: StageRecord = read_toml(&layout.marker(stage))?;
        stage_seconds.insert(stage.name().to_string(), rec.seconds);
    }
    Ok(RunReport {
        frames_total: pool.frames,
        frames_kept: kept.len(),
        frames_selected: annotation.frames,
        points_total: pool.points,
        clicks: annotation.clicks,
        label_ratio: annotation.clicks as f64 / pool.points as f64,
        percent_labels: annotation.percent_labels,
        propagation_accuracy: annotation.average,
        stage1_miou: eval.stage1_miou,
        stage2_miou: eval.stage2_miou,
        per_class_accuracy: annotation.per_class,
        stage_seconds,
    })
}

fn at(stage: Stage) -> impl Fn(Error) -> PipelineError {
    move |source| PipelineError { stage, source }
}

/// Validates the config against the manifest and records it in the run
/// directory. A config different from the recorded one clears every marker.
fn prepare(cfg: &PipelineConfig, first: Stage) -> Result<Context, PipelineError> {
    cfg.validate().map_err(at(first))?;
    let manifest = DatasetManifest::load(&cfg.manifest).map_err(at(first))?;
    if let Some(c) = cfg.num_classes {
        if c != manifest.num_classes {
            return Err(at(first)(Error::Config(format!(
                "num_classes {c} disagrees with the manifest's {}",
                manifest.num_classes
            ))));
        }
    }
    let layout = cfg.layout();
    let config_text = cfg.to_toml();
    let previous = fs::read_to_string(layout.config()).ok();
    if previous.as_deref() != Some(config_text.as_str()) {
        for stage in Stage::ALL {
            let _ = fs::remove_file(layout.marker(stage));
        }
        write_text(&layout.config(), &config_text).map_err(at(first))?;
    }
    Ok(Context {
        ignore: manifest.ignore_label.into_iter().collect(),
        cfg: cfg.clone(),
        layout,
        manifest,
    })
}

fn execute(ctx: &Context, stage: Stage) -> Result<f64, PipelineError> {
    info!(%stage, "running");
    let start = Instant::now();
    ctx.run_stage(stage).map_err(at(stage))?;
    let seconds = start.elapsed().as_secs_f64();
    write_toml(&ctx.layout.marker(stage), &StageRecord { seconds }).map_err(at(stage))?;
    info!(%stage, seconds, "done");
    Ok(seconds)
}

/// Runs one stage unconditionally from the artifacts already on disk and
/// clears the markers of every later stage. Returns its wall time.
pub fn run_stage(cfg: &PipelineConfig, stage: Stage) -> Result<f64, PipelineError> {
    let ctx = prepare(cfg, stage)?;
    for later in Stage::ALL.into_iter().filter(|s| *s > stage) {
        let _ = fs::remove_file(ctx.layout.marker(later));
    }
    execute(&ctx, stage)
}

/// Runs every stage not already completed under the same configuration and
/// writes `report.toml`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport, PipelineError> {
    let ctx = prepare(cfg, Stage::Prune)?;
    let layout = &ctx.layout;
    let mut invalidate = false;
    for stage in Stage::ALL {
        let marker = layout.marker(stage);
        if invalidate {
            let _ = fs::remove_file(&marker);
        }
        if marker.exists() {
            info!(%stage, "already complete, skipping");
            continue;
        }
        invalidate = true;
        execute(&ctx, stage)?;
    }

    let report = build_report(layout).map_err(at(Stage::Eval))?;
    write_text(&layout.report(), &report.to_toml()).map_err(at(Stage::Eval))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{gen_synthetic, SyntheticSpec};

    fn dataset(dir: &Path, spec: SyntheticSpec) -> PathBuf {
        gen_synthetic(&spec, &dir.join("data")).unwrap()
    }

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 3,
            points_per_frame: 300,
            frames_per_sequence: 4,
            sequences: 2,
            feature_dim: 6,
            drift: 3.0,
            seed: 2,
            ..Default::default()
        }
    }

    fn quick(cfg: &mut PipelineConfig) {
        cfg.semisup.stage1_epochs = 3;
        cfg.semisup.stage2_epochs = 2;
        cfg.semisup.batch = 64;
    }

    #[test]
    fn kept_and_selection_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let refs = vec![
            FrameRef { sequence_id: "s0".into(), frame_id: "a".into(), path: "x".into() },
            FrameRef { sequence_id: "s1".into(), frame_id: "b".into(), path: "y".into() },
        ];
        let p = dir.path().join("kept.txt");
        write_kept(&p, &refs).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "s0 a\ns1 b\n");
        assert_eq!(read_kept(&p).unwrap()[1], ("s1".to_string(), "b".to_string()));

        let sel = vec![
            DiversityScore { frame_id: "b".into(), score: 0.1 + 0.2 },
            DiversityScore { frame_id: "a".into(), score: 1e-300 },
        ];
        let p = dir.path().join("sel.txt");
        write_selection(&p, &sel).unwrap();
        assert_eq!(read_selection(&p).unwrap(), sel);
        fs::write(&p, "a b c\n").unwrap();
        assert!(read_selection(&p).is_err());
        assert!(matches!(read_kept(&dir.path().join("none")), Err(Error::MissingArtifact(_))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = PipelineConfig::new("m.toml", "out", 0.01);
        assert!(cfg.validate().is_ok());
        cfg.clicks = Some(10);
        assert!(cfg.validate().is_err());
        cfg.alpha = None;
        assert!(cfg.validate().is_ok());
        cfg.clicks = None;
        assert!(cfg.validate().is_err());
        let back: PipelineConfig = toml::from_str(&PipelineConfig::new("m", "o", 0.5).to_toml()).unwrap();
        assert_eq!(back, PipelineConfig::new("m", "o", 0.5));
    }

    #[test]
    fn full_run_then_resume_gives_identical_report() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dataset(dir.path(), small_spec());
        let mut cfg = PipelineConfig::new(&manifest, dir.path().join("run"), 0.05);
        cfg.budget_frames = Some(3);
        cfg.tau = 1.0;
        quick(&mut cfg);
        let report = run_pipeline(&cfg).unwrap();
        assert_eq!(report.frames_total, 8);
        assert_eq!(report.frames_kept, 8);
        assert_eq!(report.frames_selected, 3);
        assert_eq!(report.clicks, 3 * 30);
        assert_eq!(report.points_total, 2400);
        assert!((report.percent_labels - 100.0 * 90.0 / 2400.0).abs() < 1e-12);
        assert!(report.stage1_miou.is_finite());
        let layout = cfg.layout();
        let first = fs::read_to_string(layout.report()).unwrap();
        let model_bytes = fs::read(layout.model()).unwrap();

        let again = run_pipeline(&cfg).unwrap();
        assert_eq!(again.to_toml(), first);
        assert_eq!(fs::read(layout.model()).unwrap(), model_bytes);

        // a config change reruns everything; the run stays deterministic
        cfg.semisup.lr = 0.05;
        run_pipeline(&cfg).unwrap();
        cfg.semisup.lr = 0.1;
        let rerun = run_pipeline(&cfg).unwrap();
        assert_eq!(fs::read(layout.model()).unwrap(), model_bytes);
        assert_eq!(rerun.clicks, report.clicks);
        assert_eq!(rerun.stage2_miou.to_bits(), report.stage2_miou.to_bits());
    }

    #[test]
    fn full_annotation_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dataset(dir.path(), small_spec());
        let mut cfg = PipelineConfig::new(&manifest, dir.path().join("run"), 1.0);
        cfg.tau = 1.0;
        quick(&mut cfg);
        let report = run_pipeline(&cfg).unwrap();
        assert_eq!(report.frames_selected, 8);
        assert_eq!(report.percent_labels, 100.0);
        assert_eq!(report.propagation_accuracy, 1.0);
        assert!(report.per_class_accuracy.values().all(|&a| a == 1.0));
    }

    #[test]
    fn missing_ground_truth_fails_at_annotate_and_keeps_earlier_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let manifest_path = dataset(dir.path(), small_spec());
        let manifest = DatasetManifest::load(&manifest_path).unwrap();
        for r in manifest.frames() {
            let mut f = manifest.load_frame(&r).unwrap();
            f = Frame::new(f.frame_id.clone(), f.sequence_id.clone(), f.points().to_vec(), f.features().to_vec(), f.dim(), None).unwrap();
            crate::frame::save_frame(&f, &r.path).unwrap();
        }
        let mut cfg = PipelineConfig::new(&manifest_path, dir.path().join("run"), 0.05);
        cfg.tau = 1.0;
        let err = run_pipeline(&cfg).unwrap_err();
        assert_eq!(err.stage, Stage::Annotate);
        assert!(matches!(err.source, Error::NoGroundTruth(_)));
        let layout = cfg.layout();
        assert!(layout.kept().exists() && layout.selection().exists());
        assert!(layout.marker(Stage::Cluster).exists());
        assert!(!layout.marker(Stage::Annotate).exists());
    }

    #[test]
    fn single_stages_compose_into_a_run() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dataset(dir.path(), small_spec());
        let mut cfg = PipelineConfig::new(&manifest, dir.path().join("run"), 0.05);
        cfg.tau = 1.0;
        quick(&mut cfg);
        assert_eq!(run_stage(&cfg, Stage::Select).unwrap_err().stage, Stage::Select);
        for stage in Stage::ALL {
            run_stage(&cfg, stage).unwrap();
        }
        let layout = cfg.layout();
        assert!(Stage::ALL.iter().all(|s| layout.marker(*s).exists()));
        run_stage(&cfg, Stage::Cluster).unwrap();
        assert!(layout.marker(Stage::Select).exists());
        assert!(!layout.marker(Stage::Annotate).exists());
        let report = run_pipeline(&cfg).unwrap();
        assert_eq!(report.frames_selected, 8);
    }

    #[test]
    fn serve_mode_requires_server_labels() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dataset(dir.path(), small_spec());
        let mut cfg = PipelineConfig::new(&manifest, dir.path().join("run"), 0.05);
        cfg.tau = 1.0;
        cfg.annotation = AnnotationMode::Serve;
        let err = run_pipeline(&cfg).unwrap_err();
        assert_eq!(err.stage, Stage::Annotate);
        assert!(matches!(err.source, Error::MissingArtifact(_)));
    }

    #[test]
    fn duplicate_sequences_prune_to_one_frame_each() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { duplicate_frames: true, ..small_spec() };
        let manifest = DatasetManifest::load(dataset(dir.path(), spec)).unwrap();
        let (kept, stats) = prune_manifest(&manifest, PruneConfig::new(0.95).unwrap()).unwrap();
        assert_eq!(stats, PoolStats { frames: 8, points: 2400 });
        let ids: Vec<_> = kept.iter().map(|r| r.frame_id.as_str()).collect();
        assert_eq!(ids, vec!["s00_000000", "s01_000000"]);
    }
}
