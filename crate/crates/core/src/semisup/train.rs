//! Two-stage training: supervised on pseudo-labels, then EMA teacher-student.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::losses::{combined_loss, ema_update, kl_distill, supervised_loss, LossWeights};
use super::model::{ModelSpec, PointwiseClassifier};
use crate::error::{Error, Result};
use crate::frame::{Frame, UNLABELED};
use crate::labels::PseudoLabels;
use crate::metrics::ConfusionMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemiSupConfig {
    pub lambda_ce: f64,
    pub lambda_lovasz: f64,
    /// Distillation weight; `0.5 * T^2` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_kl: Option<f64>,
    /// Distillation temperature `T`.
    pub temperature: f64,
    /// EMA rate of the teacher.
    pub beta: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Std of the Gaussian noise added to standardized inputs in stage 2,
    /// drawn independently for teacher and student.
    pub jitter: f64,
}

impl Default for SemiSupConfig {
    fn default() -> Self {
        Self {
            lambda_ce: 0.5,
            lambda_lovasz: 1.0,
            lambda_kl: None,
            temperature: 4.0,
            beta: 0.99,
            stage1_epochs: 20,
            stage2_epochs: 10,
            lr: 0.1,
            batch: 256,
            jitter: 0.0,
        }
    }
}

impl SemiSupConfig {
    pub fn lambda_kl(&self) -> f64 {
        self.lambda_kl
            .unwrap_or(0.5 * self.temperature * self.temperature)
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            ce: self.lambda_ce,
            lovasz: self.lambda_lovasz,
            kl: self.lambda_kl(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.temperature > 1.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be > 1, got {}", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch == 0 {
            return bad("lr and batch must be positive".into());
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return bad(format!("jitter must be >= 0, got {}", self.jitter));
        }
        Ok(())
    }
}

/// Training inputs. Unlabeled points of labeled frames join the unlabeled pool.
#[derive(Debug, Clone, Copy)]
pub struct TrainSet<'a> {
    pub labeled: &'a [(Frame, PseudoLabels)],
    pub unlabeled: &'a [Frame],
    /// Frames with ground truth scored after every epoch.
    pub validation: &'a [Frame],
    pub num_classes: usize,
    pub ignore: &'a [u32],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub stage: u8,
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    /// mIoU against the pseudo-labels of the labeled points.
    pub train_miou: f64,
    /// mIoU against validation ground truth; NaN without validation frames.
    pub val_miou: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model at the end of stage 1.
    pub stage1: PointwiseClassifier,
    pub student: PointwiseClassifier,
    pub trace: Vec<EpochStats>,
}

/// Writes the trace as CSV with a header row.
pub fn trace_csv(trace: &[EpochStats]) -> String {
    let mut out = String::from("stage,epoch,loss,train_miou,val_miou\n");
    for s in trace {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.stage, s.epoch, s.loss, s.train_miou, s.val_miou
        ));
    }
    out
}

fn sgd(model: &mut PointwiseClassifier, grad: &[f64], lr: f64, stage: u8) -> Result<()> {
    let mut finite = true;
    for (p, g) in model.params_mut().iter_mut().zip(grad) {
        *p -= lr * g;
        finite &= p.is_finite();
    }
    // bounded losses can stay finite while the weights blow up
    if finite {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { stage, epoch: 0 })
    }
}

fn check_finite(value: f64, stage: u8, epoch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { stage, epoch })
    }
}

/// One gradient step on the supervised loss; returns the batch loss.
pub fn supervised_step(
    student: &mut PointwiseClassifier,
    x: &[f64],
    labels: &[u32],
    cfg: &SemiSupConfig,
) -> Result<f64> {
    let cache = student.forward_cached(x)?;
    let loss = supervised_loss(cache.logits(), student.num_classes(), labels, &cfg.weights())?;
    check_finite(loss.value, 1, 0)?;
    let grad = student.backward(&cache, &loss.grad)?;
    sgd(student, &grad, cfg.lr, 1)?;
    Ok(loss.value)
}

/// Loss and distillation term of one teacher-student step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Unweighted KL before the step.
    pub kl: f64,
}

/// One student gradient step on the combined loss followed by the EMA
/// teacher update.
pub fn distill_step(
    student: &mut PointwiseClassifier,
    teacher: &mut PointwiseClassifier,
    x_student: &[f64],
    x_teacher: &[f64],
    labels: &[u32],
    cfg: &SemiSupConfig,
) -> Result<StepStats> {
    let k = student.num_classes();
    let cache = student.forward_cached(x_student)?;
    let teacher_logits = teacher.forward(x_teacher)?;
    let kl = kl_distill(cache.logits(), &teacher_logits, k, cfg.temperature)?;
    let loss = combined_loss(
        cache.logits(),
        &teacher_logits,
        k,
        labels,
        &cfg.weights(),
        cfg.temperature,
    )?;
    check_finite(loss.value, 2, 0)?;
    let grad = student.backward(&cache, &loss.grad)?;
    sgd(student, &grad, cfg.lr, 2)?;
    ema_update(teacher.params_mut(), student.params(), cfg.beta)?;
    Ok(StepStats {
        loss: loss.value,
        kl,
    })
}

/// Flattened training points with per-dimension standardization.
struct Pool {
    dim: usize,
    features: Vec<f32>,
    labels: Vec<u32>,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Pool {
    fn build(data: &TrainSet) -> Result<Self> {
        let first = data.labeled.first().ok_or(Error::NoLabeledData)?;
        let dim = first.0.dim();
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (frame, pl) in data.labeled {
            if pl.len() != frame.len() {
                return Err(Error::LengthMismatch {
                    what: "pseudo-labels",
                    expected: frame.len(),
                    found: pl.len(),
                });
            }
            if let Some(&c) = pl
                .labels()
                .iter()
                .find(|&&c| c != UNLABELED && c as usize >= data.num_classes)
            {
                return Err(Error::InvalidClass {
                    class: c,
                    num_classes: data.num_classes,
                });
            }
            Self::push_frame(frame, dim, &mut features)?;
            labels.extend_from_slice(pl.labels());
        }
        if labels.iter().all(|&l| l == UNLABELED) {
            return Err(Error::NoLabeledData);
        }
        for frame in data.unlabeled {
            Self::push_frame(frame, dim, &mut features)?;
            labels.extend(std::iter::repeat_n(UNLABELED, frame.len()));
        }
        for frame in data.validation {
            if frame.dim() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    found: frame.dim(),
                });
            }
        }

        let n = labels.len() as f64;
        let mut mean = vec![0.0; dim];
        for row in features.chunks_exact(dim) {
            mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v as f64);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for row in features.chunks_exact(dim) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v as f64 - m).powi(2);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-8 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self {
            dim,
            features,
            labels,
            mean,
            scale,
        })
    }

    fn push_frame(frame: &Frame, dim: usize, out: &mut Vec<f32>) -> Result<()> {
        if frame.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                found: frame.dim(),
            });
        }
        out.extend_from_slice(frame.features());
        Ok(())
    }

    fn gather(&self, idx: &[usize], jitter: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let d = self.dim;
        let mut x = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            let row = &self.features[i * d..(i + 1) * d];
            for j in 0..d {
                let mut v = (row[j] as f64 - self.mean[j]) / self.scale[j];
                if jitter > 0.0 {
                    let n: f64 = StandardNormal.sample(rng);
                    v += jitter * n;
                }
                x.push(v);
            }
        }
        x
    }

    fn labels_of(&self, idx: &[usize]) -> Vec<u32> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }
}

fn evaluate(
    model: &PointwiseClassifier,
    pool: &Pool,
    data: &TrainSet,
    stage: u8,
    epoch: usize,
    loss: f64,
) -> Result<EpochStats> {
    let raw = model.fold_input_standardization(&pool.mean, &pool.scale)?;
    let k = data.num_classes;
    let d = pool.dim;
    let mut train = ConfusionMatrix::new(k, data.ignore);
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for (i, &l) in pool.labels.iter().enumerate().filter(|(_, &l)| l != UNLABELED) {
        feats.extend_from_slice(&pool.features[i * d..(i + 1) * d]);
        labels.push(l);
    }
    train.add(&raw.predict(&feats)?, &labels)?;

    let mut val = ConfusionMatrix::new(k, data.ignore);
    let mut any = false;
    for f in data.validation {
        if let Some(gt) = f.gt_labels() {
            val.add(&raw.predict_frame(f)?, gt)?;
            any = true;
        }
    }
    Ok(EpochStats {
        stage,
        epoch,
        loss,
        train_miou: train.miou(),
        val_miou: if any { val.miou() } else { f64::NAN },
    })
}

/// Stage 1 trains on the pseudo-labeled points only; stage 2 starts the
/// teacher from the stage-1 weights and trains the student on every point.
/// Returned models take raw features.
pub fn train_two_stage(
    data: &TrainSet,
    model: &ModelSpec,
    cfg: &SemiSupConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let pool = Pool::build(data)?;
    let k = data.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut student = PointwiseClassifier::init(model.layer_sizes(pool.dim, k), &mut rng)?;
    let mut trace = Vec::with_capacity(cfg.stage1_epochs + cfg.stage2_epochs);

    let mut labeled: Vec<usize> = (0..pool.labels.len())
        .filter(|&i| pool.labels[i] != UNLABELED)
        .collect();
    for epoch in 0..cfg.stage1_epochs {
        labeled.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in labeled.chunks(cfg.batch) {
            let x = pool.gather(idx, 0.0, &mut rng);
            let loss = supervised_step(&mut student, &x, &pool.labels_of(idx), cfg)
                .map_err(|e| with_epoch(e, 1, epoch))?;
            total += loss;
            batches += 1;
        }
        trace.push(evaluate(&student, &pool, data, 1, epoch, total / batches as f64)?);
    }
    let stage1 = student.clone();

    let mut teacher = student.clone();
    let mut all: Vec<usize> = (0..pool.labels.len()).collect();
    for epoch in 0..cfg.stage2_epochs {
        all.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in all.chunks(cfg.batch) {
            let xs = pool.gather(idx, cfg.jitter, &mut rng);
            let xt = pool.gather(idx, cfg.jitter, &mut rng);
            let step = distill_step(&mut student, &mut teacher, &xs, &xt, &pool.labels_of(idx), cfg)
                .map_err(|e| with_epoch(e, 2, epoch))?;
            total += step.loss;
            batches += 1;
        }
        trace.push(evaluate(&student, &pool, data, 2, epoch, total / batches as f64)?);
    }

    Ok(TrainOutcome {
        stage1: stage1.fold_input_standardization(&pool.mean, &pool.scale)?,
        student: student.fold_input_standardization(&pool.mean, &pool.scale)?,
        trace,
    })
}

fn with_epoch(e: Error, stage: u8, epoch: usize) -> Error {
    match e {
        Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { stage, epoch },
        other => other,
    }
}
