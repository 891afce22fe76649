//! Training losses and their gradients with respect to logits.
//!
//! Logit and probability batches are row-major `n × k` slices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::UNLABELED;

const PROB_FLOOR: f64 = 1e-12;

/// Tempered softmax of one row, stabilized by subtracting the max logit.
pub fn softmax_t(logits: &[f64], temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, temperature, &mut out);
    out
}

fn softmax_into(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = ((z - max) / temperature).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Row-wise tempered softmax over an `n × k` batch.
pub fn softmax_rows(logits: &[f64], k: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (row, o) in logits.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        softmax_into(row, temperature, o);
    }
    out
}

fn log_softmax_into(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .sum::<f64>()
        .ln();
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max) / temperature - lse;
    }
}

/// `-ln p_y`, with probabilities floored at 1e-12.
pub fn cross_entropy(p: &[f64], y: usize) -> f64 {
    -p[y].max(PROB_FLOOR).ln()
}

/// A loss value with its gradient with respect to the input batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Jaccard-extension weights for errors already sorted in decreasing order.
fn lovasz_grad(fg_sorted: &[bool]) -> Vec<f64> {
    let gts = fg_sorted.iter().filter(|&&f| f).count() as f64;
    let mut cum_fg = 0.0;
    let mut cum_bg = 0.0;
    let mut prev = 0.0;
    fg_sorted
        .iter()
        .map(|&f| {
            if f {
                cum_fg += 1.0;
            } else {
                cum_bg += 1.0;
            }
            let jaccard = 1.0 - (gts - cum_fg) / (gts + cum_bg);
            let g = jaccard - prev;
            prev = jaccard;
            g
        })
        .collect()
}

/// Lovász-softmax over the rows whose label is a valid class, averaged over
/// the classes present in those labels. Gradient is with respect to `probs`;
/// the sort permutation is held fixed.
pub fn lovasz_softmax_grad(probs: &[f64], k: usize, labels: &[u32]) -> Result<LossGrad> {
    let n = labels.len();
    if probs.len() != n * k {
        return Err(Error::LengthMismatch {
            what: "probabilities",
            expected: n * k,
            found: probs.len(),
        });
    }
    let rows: Vec<usize> = (0..n).filter(|&i| (labels[i] as usize) < k).collect();
    let mut present = vec![false; k];
    for &i in &rows {
        present[labels[i] as usize] = true;
    }
    let num_present = present.iter().filter(|&&p| p).count();
    if num_present == 0 {
        return Err(Error::Degenerate("no class present for the Lovász loss"));
    }

    let mut grad = vec![0.0; probs.len()];
    let mut total = 0.0;
    let mut errors: Vec<(f64, usize, bool)> = Vec::with_capacity(rows.len());
    for c in (0..k).filter(|&c| present[c]) {
        errors.clear();
        errors.extend(rows.iter().map(|&i| {
            let fg = labels[i] as usize == c;
            let p = probs[i * k + c];
            (if fg { 1.0 - p } else { p }, i, fg)
        }));
        // decreasing error; stable on ties
        errors.sort_by(|a, b| b.0.total_cmp(&a.0));
        let fg_sorted: Vec<bool> = errors.iter().map(|e| e.2).collect();
        let weights = lovasz_grad(&fg_sorted);
        for (&(err, i, fg), &w) in errors.iter().zip(&weights) {
            total += err * w;
            grad[i * k + c] += if fg { -w } else { w };
        }
    }
    let scale = 1.0 / num_present as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok(LossGrad {
        value: total * scale,
        grad,
    })
}

pub fn lovasz_softmax(probs: &[f64], k: usize, labels: &[u32]) -> Result<f64> {
    lovasz_softmax_grad(probs, k, labels).map(|l| l.value)
}

/// Pulls a gradient with respect to tempered-softmax outputs back to the logits.
fn softmax_backward(probs: &[f64], grad_probs: &[f64], k: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; probs.len()];
    for ((p, g), o) in probs
        .chunks_exact(k)
        .zip(grad_probs.chunks_exact(k))
        .zip(out.chunks_exact_mut(k))
    {
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for j in 0..k {
            o[j] = p[j] * (g[j] - dot) / temperature;
        }
    }
    out
}

/// `KL(teacher || student)` of the tempered distributions, averaged over rows;
/// gradient with respect to the student logits.
pub fn kl_distill_grad(
    student_logits: &[f64],
    teacher_logits: &[f64],
    k: usize,
    temperature: f64,
) -> Result<LossGrad> {
    if student_logits.len() != teacher_logits.len() || student_logits.len() % k != 0 {
        return Err(Error::LengthMismatch {
            what: "teacher logits",
            expected: student_logits.len(),
            found: teacher_logits.len(),
        });
    }
    let n = student_logits.len() / k;
    let mut grad = vec![0.0; student_logits.len()];
    if n == 0 {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let mut log_s = vec![0.0; k];
    let mut log_t = vec![0.0; k];
    let mut total = 0.0;
    for ((s, t), g) in student_logits
        .chunks_exact(k)
        .zip(teacher_logits.chunks_exact(k))
        .zip(grad.chunks_exact_mut(k))
    {
        log_softmax_into(s, temperature, &mut log_s);
        log_softmax_into(t, temperature, &mut log_t);
        for j in 0..k {
            let pt = log_t[j].exp();
            if pt > 0.0 {
                total += pt * (log_t[j] - log_s[j]);
            }
            g[j] = (log_s[j].exp() - pt) / (temperature * n as f64);
        }
    }
    Ok(LossGrad {
        value: (total / n as f64).max(0.0),
        grad,
    })
}

pub fn kl_distill(
    student_logits: &[f64],
    teacher_logits: &[f64],
    k: usize,
    temperature: f64,
) -> Result<f64> {
    kl_distill_grad(student_logits, teacher_logits, k, temperature).map(|l| l.value)
}

/// Loss weights for one training stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ce: f64,
    pub lovasz: f64,
    /// Weight of the distillation term; unused by the supervised loss.
    #[serde(default)]
    pub kl: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("ce", self.ce), ("lovasz", self.lovasz), ("kl", self.kl)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Cross-entropy (mean over labeled rows) plus Lovász-softmax, on untempered
/// probabilities. Rows labeled [`UNLABELED`] contribute nothing.
pub fn supervised_loss(
    logits: &[f64],
    k: usize,
    labels: &[u32],
    weights: &LossWeights,
) -> Result<LossGrad> {
    if logits.len() != labels.len() * k {
        return Err(Error::LengthMismatch {
            what: "logits",
            expected: labels.len() * k,
            found: logits.len(),
        });
    }
    let labeled: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] != UNLABELED)
        .collect();
    if labeled.is_empty() {
        return Err(Error::AllUnlabeled);
    }
    if let Some(&i) = labeled.iter().find(|&&i| labels[i] as usize >= k) {
        return Err(Error::InvalidClass {
            class: labels[i],
            num_classes: k,
        });
    }
    let probs = softmax_rows(logits, k, 1.0);
    let mut grad = vec![0.0; logits.len()];
    let mut value = 0.0;

    if weights.ce > 0.0 {
        let scale = weights.ce / labeled.len() as f64;
        let mut logp = vec![0.0; k];
        for &i in &labeled {
            let y = labels[i] as usize;
            log_softmax_into(&logits[i * k..(i + 1) * k], 1.0, &mut logp);
            let ce = -logp[y].max(PROB_FLOOR.ln());
            value += scale * ce;
            if logp[y] > PROB_FLOOR.ln() {
                for j in 0..k {
                    let onehot = if j == y { 1.0 } else { 0.0 };
                    grad[i * k + j] += scale * (probs[i * k + j] - onehot);
                }
            }
        }
    }
    if weights.lovasz > 0.0 {
        let lov = lovasz_softmax_grad(&probs, k, labels)?;
        value += weights.lovasz * lov.value;
        let back = softmax_backward(&probs, &lov.grad, k, 1.0);
        grad.iter_mut()
            .zip(back)
            .for_each(|(g, b)| *g += weights.lovasz * b);
    }
    Ok(LossGrad { value, grad })
}

/// Supervised terms over labeled rows plus `weights.kl` times the tempered
/// distillation term over all rows. An all-unlabeled batch keeps only the
/// distillation term.
pub fn combined_loss(
    student_logits: &[f64],
    teacher_logits: &[f64],
    k: usize,
    labels: &[u32],
    weights: &LossWeights,
    temperature: f64,
) -> Result<LossGrad> {
    let mut out = match supervised_loss(student_logits, k, labels, weights) {
        Ok(l) => l,
        Err(Error::AllUnlabeled) => LossGrad {
            value: 0.0,
            grad: vec![0.0; student_logits.len()],
        },
        Err(e) => return Err(e),
    };
    if weights.kl > 0.0 {
        let kl = kl_distill_grad(student_logits, teacher_logits, k, temperature)?;
        out.value += weights.kl * kl.value;
        out.grad
            .iter_mut()
            .zip(kl.grad)
            .for_each(|(g, d)| *g += weights.kl * d);
    }
    Ok(out)
}

/// `teacher <- beta * teacher + (1 - beta) * student`, elementwise.
pub fn ema_update(teacher: &mut [f64], student: &[f64], beta: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::LengthMismatch {
            what: "student parameters",
            expected: teacher.len(),
            found: student.len(),
        });
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("EMA rate must lie in [0, 1], got {beta}")));
    }
    for (t, &s) in teacher.iter_mut().zip(student) {
        *t = beta * *t + (1.0 - beta) * s;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_examples() {
        for t in [1.0, 4.0, 100.0] {
            for p in softmax_t(&[0.0, 0.0, 0.0], t) {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        let p = softmax_t(&[10.0, 0.0], 1000.0);
        assert!((p[0] - 0.5).abs() < 0.01 && (p[1] - 0.5).abs() < 0.01);
        let p = softmax_t(&[1.0, 2.0, 3.0], 1.0);
        for (got, want) in p.iter().zip([0.0900, 0.2447, 0.6652]) {
            assert!((got - want).abs() < 1e-4);
        }
        let p = softmax_t(&[1000.0, -1000.0, 999.0], 1.0);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], 1), 0.0);
        let k = 5;
        assert!((cross_entropy(&vec![1.0 / k as f64; k], 2) - (k as f64).ln()).abs() < 1e-12);
        assert!((cross_entropy(&[0.7, 0.3], 1) - 1.20397).abs() < 1e-5);
        assert!((cross_entropy(&[1.0, 0.0], 1) - 1e-12f64.ln().abs()).abs() < 1e-9);
    }

    #[test]
    fn lovasz_examples() {
        let labels = vec![0, 1, 2, 1];
        let onehot: Vec<f64> = labels
            .iter()
            .flat_map(|&l| (0..3).map(move |c| if c == l { 1.0 } else { 0.0 }))
            .collect();
        assert_eq!(lovasz_softmax(&onehot, 3, &labels).unwrap(), 0.0);

        // class 1: gt {0, 1}, predicted {1, 2}: J = 1/3. class 0: gt {2, 3}, predicted {0, 3}: J = 1/3
        let gt = vec![1, 1, 0, 0];
        let pred = [0usize, 1, 1, 0];
        let probs: Vec<f64> = pred
            .iter()
            .flat_map(|&p| (0..2).map(move |c| if c == p { 1.0 } else { 0.0 }))
            .collect();
        let v = lovasz_softmax(&probs, 2, &gt).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-12);

        // only class 1 present in gt; J(class 1) = |{1}| / |{0, 1}| = 0.5
        let gt = vec![1, 1];
        let probs = vec![1.0, 0.0, 0.0, 1.0];
        assert!((lovasz_softmax(&probs, 2, &gt).unwrap() - 0.5).abs() < 1e-12);

        assert!(matches!(
            lovasz_softmax(&[0.5, 0.5], 2, &[UNLABELED]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn kl_examples() {
        let z = [0.3, -1.0, 2.0];
        assert!(kl_distill(&z, &z, 3, 4.0).unwrap().abs() < 1e-15);

        // teacher (20, -20) at T=4 is softmax(5, -5); student uniform
        let kl = kl_distill(&[0.0, 0.0], &[20.0, -20.0], 2, 4.0).unwrap();
        let p1 = 1.0 / (1.0 + (-10.0f64).exp());
        let p2 = 1.0 - p1;
        let hand = p1 * (p1 / 0.5).ln() + p2 * (p2 / 0.5).ln();
        assert!((kl - hand).abs() < 1e-12);
        assert!((kl - 0.692_648).abs() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let s: Vec<f64> = (0..4).map(|_| rng.random_range(-10.0..10.0)).collect();
            let t: Vec<f64> = (0..4).map(|_| rng.random_range(-10.0..10.0)).collect();
            assert!(kl_distill(&s, &t, 4, rng.random_range(1.0..8.0)).unwrap() >= 0.0);
        }
    }

    fn hand_batch() -> (Vec<f64>, Vec<u32>) {
        (
            vec![2.0, 0.0, -1.0, 0.5, 0.1, 1.5, -0.3, 0.2, 0.9, 0.0, 0.0, 0.0],
            vec![0, 2, 1, UNLABELED],
        )
    }

    #[test]
    fn supervised_loss_is_sum_of_parts() {
        let (logits, labels) = hand_batch();
        let w = LossWeights { ce: 0.5, lovasz: 1.0, kl: 0.0 };
        let probs = softmax_rows(&logits, 3, 1.0);
        let ce: f64 = (0..3)
            .map(|i| cross_entropy(&probs[i * 3..i * 3 + 3], labels[i] as usize))
            .sum::<f64>()
            / 3.0;
        let lov = lovasz_softmax(&probs, 3, &labels).unwrap();
        let got = supervised_loss(&logits, 3, &labels, &w).unwrap().value;
        assert!((got - (0.5 * ce + lov)).abs() < 1e-12);

        let pure = LossWeights { ce: 0.0, lovasz: 1.0, kl: 0.0 };
        assert!((supervised_loss(&logits, 3, &labels, &pure).unwrap().value - lov).abs() < 1e-15);

        let perfect = vec![50.0, 0.0, 0.0, 0.0, 0.0, 50.0];
        let v = supervised_loss(&perfect, 3, &[0, 2], &w).unwrap().value;
        assert!(v.abs() < 1e-12);
        assert!(matches!(
            supervised_loss(&logits[..3], 3, &[UNLABELED], &w),
            Err(Error::AllUnlabeled)
        ));
    }

    #[test]
    fn combined_loss_cases() {
        let (logits, labels) = hand_batch();
        let teacher: Vec<f64> = logits.iter().map(|z| 0.5 * z + 0.1).collect();
        let w = LossWeights { ce: 0.5, lovasz: 1.0, kl: 8.0 };
        let sup = supervised_loss(&logits, 3, &labels, &w).unwrap().value;
        let kl = kl_distill(&logits, &teacher, 3, 4.0).unwrap();
        let got = combined_loss(&logits, &teacher, 3, &labels, &w, 4.0).unwrap().value;
        assert!((got - (sup + 8.0 * kl)).abs() < 1e-12);

        let no_kl = LossWeights { kl: 0.0, ..w };
        let got = combined_loss(&logits, &teacher, 3, &labels, &no_kl, 4.0).unwrap().value;
        assert!((got - sup).abs() < 1e-15);

        let unl = vec![UNLABELED; 4];
        let got = combined_loss(&logits, &teacher, 3, &unl, &w, 4.0).unwrap().value;
        assert!((got - 8.0 * kl).abs() < 1e-12);
    }

    #[test]
    fn ema_contract() {
        let student = vec![1.0, -2.0, 3.0];
        let mut t = vec![0.0; 3];
        ema_update(&mut t, &student, 0.0).unwrap();
        assert_eq!(t, student);
        let mut t = vec![5.0, 5.0, 5.0];
        ema_update(&mut t, &student, 1.0).unwrap();
        assert_eq!(t, vec![5.0; 3]);
        assert!(ema_update(&mut t, &student[..2], 0.5).is_err());
    }
}
