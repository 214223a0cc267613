//! Soft cross entropy, the α-mixed distillation target, and squared error.

use crate::error::{Error, Result};
use crate::tensor::{log_softmax, softmax_rows, Tensor};

/// Soft-label target: `(1 − α)·softmax(teacher_logits) + α·onehot(ground_truth)`.
///
/// The teacher logits are normalized before mixing so the mixture is a
/// probability vector. α = 1 ignores the teacher entirely. The weight
/// `1 − α` comes from [`complement`].
#[derive(Debug, Clone, PartialEq)]
pub struct DistillTarget {
    alpha: f64,
    teacher_logits: Tensor,
    ground_truth: usize,
}

impl DistillTarget {
    pub fn new(alpha: f64, teacher_logits: Tensor, ground_truth: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Validation(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        if teacher_logits.rank() != 1 {
            return Err(Error::dim(format!("teacher logits must be a vector, got shape {:?}", teacher_logits.shape())));
        }
        if ground_truth >= teacher_logits.len() {
            return Err(Error::Index(format!(
                "class {ground_truth} out of range for {} classes",
                teacher_logits.len()
            )));
        }
        Ok(Self { alpha, teacher_logits, ground_truth })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// `1 − α` rounded once from the exact decimal complement of α's shortest
/// decimal form: 0.8 pairs with fl(0.2), not with 1 − fl(0.8).
pub fn complement(alpha: f64) -> f64 {
    if alpha <= 0.0 {
        return 1.0;
    }
    if alpha >= 1.0 {
        return 0.0;
    }
    // Display gives the shortest round-trip digits and never an exponent.
    let text = alpha.to_string();
    let frac = text.strip_prefix("0.").expect("alpha in (0, 1)");
    let mut digits: Vec<u8> = frac.bytes().map(|b| 9 - (b - b'0')).collect();
    for d in digits.iter_mut().rev() {
        if *d == 9 {
            *d = 0;
        } else {
            *d += 1;
            break;
        }
    }
    let rest: String = digits.iter().map(|d| char::from(b'0' + d)).collect();
    format!("0.{rest}").parse().expect("decimal digits")
}

pub fn one_hot(num_classes: usize, class: usize) -> Tensor {
    let mut t = Tensor::zeros(&[num_classes]);
    t.data_mut()[class] = 1.0;
    t
}

pub fn distill_target(d: &DistillTarget) -> Tensor {
    let teacher = softmax_rows(&d.teacher_logits);
    let truth = one_hot(d.teacher_logits.len(), d.ground_truth);
    let (a, b) = (d.alpha, complement(d.alpha));
    teacher.zip_map(&truth, |t, g| b * t + a * g).expect("same length")
}

fn check_distribution(target: &Tensor, n: usize) -> Result<()> {
    if target.shape() != [n] {
        return Err(Error::Validation(format!("target shape {:?} does not match {n} logits", target.shape())));
    }
    if target.data().iter().any(|&t| t < 0.0) {
        return Err(Error::Validation("target has a negative entry".into()));
    }
    let sum: f64 = target.data().iter().sum();
    if (sum - 1.0).abs() > 1e-8 {
        return Err(Error::Validation(format!("target sums to {sum}, not 1")));
    }
    Ok(())
}

/// `−Σ_c target[c] · log softmax(logits)[c]`.
pub fn soft_cross_entropy(logits: &Tensor, target: &Tensor) -> Result<f64> {
    if logits.rank() != 1 {
        return Err(Error::dim(format!("logits must be a vector, got {:?}", logits.shape())));
    }
    check_distribution(target, logits.len())?;
    let logp = log_softmax(logits.data());
    Ok(-target.data().iter().zip(&logp).filter(|(&t, _)| t != 0.0).map(|(t, lp)| t * lp).sum::<f64>())
}

/// Gradient of [`soft_cross_entropy`] with respect to the logits: `softmax(logits) − target`.
pub fn soft_cross_entropy_grad(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_distribution(target, logits.len())?;
    softmax_rows(logits).zip_map(target, |p, t| p - t)
}

/// `−Σ t log t`, with `0 log 0 = 0`.
pub fn entropy(p: &Tensor) -> f64 {
    -p.data().iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

pub fn mse_loss(prediction: f64, target: f64) -> f64 {
    (prediction - target).powi(2)
}

pub fn mse_grad(prediction: f64, target: f64) -> f64 {
    2.0 * (prediction - target)
}

/// A loss applied to the classifier logits.
#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    /// Soft cross entropy against a probability vector.
    SoftCrossEntropy(Tensor),
    /// Squared error between logit 0 and a real target.
    Mse(f64),
}

impl LossSpec {
    pub fn hard_label(num_classes: usize, class: usize) -> Self {
        LossSpec::SoftCrossEntropy(one_hot(num_classes, class))
    }

    pub fn value(&self, logits: &Tensor) -> Result<f64> {
        match self {
            LossSpec::SoftCrossEntropy(t) => soft_cross_entropy(logits, t),
            LossSpec::Mse(y) => Ok(mse_loss(logits.data()[0], *y)),
        }
    }

    pub fn value_and_grad(&self, logits: &Tensor) -> Result<(f64, Tensor)> {
        match self {
            LossSpec::SoftCrossEntropy(t) => Ok((soft_cross_entropy(logits, t)?, soft_cross_entropy_grad(logits, t)?)),
            LossSpec::Mse(y) => {
                let mut g = Tensor::zeros(logits.shape());
                g.data_mut()[0] = mse_grad(logits.data()[0], *y);
                Ok((mse_loss(logits.data()[0], *y), g))
            }
        }
    }
}
