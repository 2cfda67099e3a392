//! Distillation losses: angular distance, the contrastive loss over
//! teacher negatives, tempered KL and cross-entropy prediction losses,
//! their regression substitutes, the Euclidean baseline, and the
//! weighted combiner.
//!
//! Teacher-side inputs are passed as constant tensors (detached), so
//! gradients flow only into student-side arguments.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};
use serde::{Deserialize, Serialize};

/// Training stage annotation carried by [`LossReport`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Stage1,
    Stage2,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Stage1 => write!(f, "stage1"),
            Stage::Stage2 => write!(f, "stage2"),
        }
    }
}

/// Weights of the combined objective plus the softmax temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64, tau: f64) -> Result<LossWeights> {
        if !(tau > 0.0) {
            return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
        }
        if alpha < 0.0 || beta < 0.0 || gamma < 0.0 {
            return Err(Error::Parameter("loss weights must be non-negative".into()));
        }
        if alpha == 0.0 && beta == 0.0 && gamma == 0.0 {
            return Err(Error::Parameter("at least one loss weight must be positive".into()));
        }
        Ok(LossWeights { alpha, beta, gamma, tau })
    }
}

/// Per-step decomposition of the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_transformer: f64,
    pub l_soft: f64,
    pub l_hard: f64,
    pub l_total: f64,
    pub stage: Stage,
}

/// Angular distance `1 - cos(x, y)`, in `[0, 2]`.
///
/// Differentiable with respect to both inputs. Zero-norm inputs are a
/// numeric-domain error; callers must not produce zero vectors.
pub fn angular_distance(tape: &Tape, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (sx, sy) = (x.shape(), y.shape());
    if sx != sy {
        return Err(Error::Dimension { op: "angular_distance", lhs: sx, rhs: sy });
    }
    let norm_sq = |t: &Tensor| t.data().iter().map(|&v| v * v).sum::<f64>();
    if norm_sq(x) == 0.0 || norm_sq(y) == 0.0 {
        return Err(Error::Numeric("angular distance of a zero-norm vector is undefined".into()));
    }
    let dot = tape.sum(&tape.mul(x, y)?)?;
    let nx = tape.norm(x)?;
    let ny = tape.norm(y)?;
    let cos = tape.div(&dot, &tape.mul(&nx, &ny)?)?;
    tape.add_scalar(&tape.scale(&cos, -1.0)?, 1.0)
}

/// Contrastive intermediate-layer loss over `K` teacher negatives:
///
/// `sum_i (2 - (g(n_i, z_s) - g(z_t, z_s))) / (2K) + g(z_t, z_s)`
///
/// Pulls the student representation toward the teacher's output for the
/// same input while pushing it away from the teacher's outputs for the
/// negatives. Value lies in `[0, 4]`.
pub fn cos_nce(
    tape: &Tape,
    student: &Tensor,
    teacher: &Tensor,
    negatives: &[Tensor],
) -> Result<Tensor> {
    if negatives.is_empty() {
        return Err(Error::Parameter("contrastive loss requires at least one negative".into()));
    }
    let s_shape = student.shape();
    for other in std::iter::once(teacher).chain(negatives.iter()) {
        if other.shape() != s_shape {
            return Err(Error::Dimension {
                op: "cos_nce",
                lhs: s_shape,
                rhs: other.shape(),
            });
        }
    }
    let g_pos = angular_distance(tape, teacher, student)?;
    let mut acc: Option<Tensor> = None;
    for neg in negatives {
        let g_neg = angular_distance(tape, neg, student)?;
        // 2 - (g_neg - g_pos)
        let term = tape.add_scalar(&tape.scale(&tape.sub(&g_neg, &g_pos)?, -1.0)?, 2.0)?;
        acc = Some(match acc {
            Some(a) => tape.add(&a, &term)?,
            None => term,
        });
    }
    let pushed = tape.scale(&acc.expect("at least one negative"), 1.0 / (2.0 * negatives.len() as f64))?;
    tape.add(&pushed, &g_pos)
}

/// Tempered softmax of a plain slice; used to build constant target
/// distributions from teacher logits and labels. Mirrors the tape op
/// exactly: scale by `1/tau`, then max-stabilized softmax.
pub(crate) fn softmax_values(logits: &[f64], tau: f64) -> Vec<f64> {
    let inv = 1.0 / tau;
    let scaled: Vec<f64> = logits.iter().map(|&v| inv * v).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// KL divergence between the tempered teacher and student prediction
/// distributions, summed over classes. Gradient flows to the student
/// logits only.
pub fn soft_loss(tape: &Tape, student_logits: &Tensor, teacher_logits: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    let (ss, st) = (student_logits.shape(), teacher_logits.shape());
    if ss != st {
        return Err(Error::Dimension { op: "soft_loss", lhs: ss, rhs: st });
    }
    if student_logits.numel() < 2 {
        return Err(Error::Parameter("soft loss needs at least two classes".into()));
    }
    let target = softmax_values(&teacher_logits.value(), tau);
    let log_target: Vec<f64> = target.iter().map(|&p| p.ln()).collect();
    let target_t = Tensor::new(target, &ss)?;
    let log_target_t = Tensor::new(log_target, &ss)?;

    let student_probs = tape.softmax(student_logits, tau)?;
    let log_student = tape.log(&student_probs)?;
    let diff = tape.sub(&log_target_t, &log_student)?;
    tape.sum(&tape.mul(&target_t, &diff)?)
}

fn validate_onehot(onehot: &Tensor) -> Result<usize> {
    let data = onehot.value();
    let ones = data.iter().filter(|&&v| v == 1.0).count();
    let zeros = data.iter().filter(|&&v| v == 0.0).count();
    if ones != 1 || ones + zeros != data.len() {
        return Err(Error::Input(format!(
            "expected a one-hot vector (exactly one 1.0, rest 0.0), got {data:?}"
        )));
    }
    Ok(data.iter().position(|&v| v == 1.0).expect("one-hot has a 1"))
}

/// Cross-entropy of the student prediction against a tempered-softmaxed
/// one-hot label: the target is `softmax(onehot / tau)`, a smoothed label
/// distribution, while the student side is an untempered softmax.
pub fn hard_loss(tape: &Tape, student_logits: &Tensor, onehot: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    let (ss, so) = (student_logits.shape(), onehot.shape());
    if ss != so {
        return Err(Error::Dimension { op: "hard_loss", lhs: ss, rhs: so });
    }
    validate_onehot(onehot)?;
    let target = Tensor::new(softmax_values(&onehot.value(), tau), &ss)?;
    cross_entropy_with_target(tape, student_logits, &target)
}

/// Plain one-hot cross-entropy, the conventional alternative to the
/// smoothed-target form above.
pub fn hard_loss_plain(tape: &Tape, student_logits: &Tensor, onehot: &Tensor) -> Result<Tensor> {
    let (ss, so) = (student_logits.shape(), onehot.shape());
    if ss != so {
        return Err(Error::Dimension { op: "hard_loss_plain", lhs: ss, rhs: so });
    }
    validate_onehot(onehot)?;
    cross_entropy_with_target(tape, student_logits, onehot)
}

fn cross_entropy_with_target(tape: &Tape, logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let probs = tape.softmax(logits, 1.0)?;
    let log_probs = tape.log(&probs)?;
    tape.scale(&tape.sum(&tape.mul(target, &log_probs)?)?, -1.0)
}

/// Squared-error substitutes for the prediction losses on regression
/// tasks: `((y_s - y_t)^2, (y_s - y)^2)`.
pub fn regression_losses(
    tape: &Tape,
    student_pred: &Tensor,
    teacher_pred: f64,
    label: f64,
) -> Result<(Tensor, Tensor)> {
    if !student_pred.is_scalar() {
        return Err(Error::Contract(format!(
            "regression losses expect a scalar prediction, got shape {:?}",
            student_pred.shape()
        )));
    }
    let ds = tape.add_scalar(student_pred, -teacher_pred)?;
    let soft = tape.mul(&ds, &ds)?;
    let dh = tape.add_scalar(student_pred, -label)?;
    let hard = tape.mul(&dh, &dh)?;
    Ok((soft, hard))
}

/// Mean squared element difference; the Euclidean baseline for
/// intermediate-layer distillation.
pub fn mse_layer_loss(tape: &Tape, student_proj: &Tensor, teacher_out: &Tensor) -> Result<Tensor> {
    let (ss, st) = (student_proj.shape(), teacher_out.shape());
    if ss != st {
        return Err(Error::Dimension { op: "mse_layer_loss", lhs: ss, rhs: st });
    }
    let d = tape.sub(student_proj, teacher_out)?;
    tape.mean(&tape.mul(&d, &d)?)
}

/// Weighted total `alpha*l_transformer + beta*l_soft + gamma*l_hard`,
/// returned both as a differentiable node and as a plain [`LossReport`].
pub fn combine(
    tape: &Tape,
    l_transformer: &Tensor,
    l_soft: &Tensor,
    l_hard: &Tensor,
    weights: &LossWeights,
    stage: Stage,
) -> Result<(Tensor, LossReport)> {
    for (name, t) in [
        ("l_transformer", l_transformer),
        ("l_soft", l_soft),
        ("l_hard", l_hard),
    ] {
        if !t.is_scalar() {
            return Err(Error::Contract(format!("{name} must be scalar")));
        }
        if !t.item().is_finite() {
            return Err(Error::Numeric(format!("{name} is not finite: {}", t.item())));
        }
    }
    let wt = tape.scale(l_transformer, weights.alpha)?;
    let ws = tape.scale(l_soft, weights.beta)?;
    let wh = tape.scale(l_hard, weights.gamma)?;
    let total = tape.add(&tape.add(&wt, &ws)?, &wh)?;
    let report = LossReport {
        l_transformer: l_transformer.item(),
        l_soft: l_soft.item(),
        l_hard: l_hard.item(),
        l_total: total.item(),
        stage,
    };
    Ok((total, report))
}
