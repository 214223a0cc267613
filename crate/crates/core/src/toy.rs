//! Synthetic sequence-classification task for end-to-end training checks.
//!
//! Each example is a seeded random sequence of [`SEQ_LEN`] tokens drawn from
//! the first [`TASK_VOCAB`] ids; its label is `[id(t₀) + id(t₁) ≥ TASK_VOCAB]`,
//! a fixed linear threshold on two token identities. Training draws a fresh
//! minibatch every step; loss is reported on a fixed held-out set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::grad::{backward_with_mode, sgd_step, Example, GradientSet, Mode};
use crate::losses::{distill_target, DistillTarget, LossSpec};
use crate::model::{build_model, forward, ModelWeights};

pub const TASK_VOCAB: usize = 8;
pub const SEQ_LEN: usize = 2;
pub const EVAL_SIZE: usize = 256;
pub const BATCH: usize = 64;
pub const TEACHER_STEPS: usize = 200;
pub const DEFAULT_LR: f64 = 0.2;

// ChaCha stream ids, so each consumer of a seed draws independently.
const STREAM_EVAL: u64 = 1;
const STREAM_BATCH: u64 = 2;
const STREAM_DROPOUT: u64 = 3;
const STREAM_TEACHER: u64 = 4;
const STREAM_TEACHER_BATCH: u64 = 5;
const STREAM_TEACHER_DROPOUT: u64 = 6;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub example: Example,
    pub label: usize,
}

pub fn label_of(tokens: &[usize]) -> usize {
    usize::from(tokens[0] + tokens[1] >= TASK_VOCAB)
}

pub fn sample_examples(rng: &mut ChaCha8Rng, n: usize) -> Vec<LabeledExample> {
    (0..n)
        .map(|_| {
            let tokens: Vec<usize> = (0..SEQ_LEN).map(|_| rng.random_range(0..TASK_VOCAB)).collect();
            let label = label_of(&tokens);
            LabeledExample { example: Example::new(tokens), label }
        })
        .collect()
}

/// The fixed evaluation set for `seed`.
pub fn eval_set(seed: u64) -> Vec<LabeledExample> {
    sample_examples(&mut rng(seed, STREAM_EVAL), EVAL_SIZE)
}

pub fn toy_config() -> ModelConfig {
    ModelConfig::preset("tiny").expect("tiny preset")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyReport {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub alpha: Option<f64>,
    /// Mean minibatch loss at each step, before the update.
    pub train_loss: Vec<f64>,
    /// Mean hard-label cross entropy on the eval split, before step 0 and after every step.
    pub eval_loss: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_accuracy: f64,
}

impl ToyReport {
    /// Fraction of the initial eval loss removed by training.
    pub fn reduction(&self) -> f64 {
        1.0 - self.final_loss / self.initial_loss
    }
}

pub fn eval_loss(model: &ModelWeights, data: &[LabeledExample], num_classes: usize) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for ex in data {
        let logits = forward(model, &ex.example.token_ids, &ex.example.segment_ids, None)?;
        loss += LossSpec::hard_label(num_classes, ex.label).value(&logits)?;
        let pred = logits.data().iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        correct += usize::from(pred == ex.label);
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

struct Streams {
    batch: u64,
    dropout: u64,
}

/// Plain SGD on fresh minibatches; `target` builds each example's loss.
#[allow(clippy::too_many_arguments)]
fn train_loop(
    config: &ModelConfig,
    model: &mut ModelWeights,
    eval: &[LabeledExample],
    steps: usize,
    lr: f64,
    seed: u64,
    streams: Streams,
    mut target: impl FnMut(&LabeledExample) -> Result<LossSpec>,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Validation(format!("learning rate must be positive, got {lr}")));
    }
    let mut batch_rng = rng(seed, streams.batch);
    let mut drop_rng = rng(seed, streams.dropout);
    let mut train_curve = Vec::with_capacity(steps);
    let mut eval_curve = Vec::with_capacity(steps + 1);
    eval_curve.push(eval_loss(model, eval, config.num_classes)?.0);
    for _ in 0..steps {
        let mut grads = GradientSet::zeros_like(model);
        let mut batch_loss = 0.0;
        for ex in sample_examples(&mut batch_rng, BATCH) {
            let spec = target(&ex)?;
            let (l, g) = backward_with_mode(model, config, &ex.example, &spec, &mut Mode::Train(&mut drop_rng))?;
            batch_loss += l;
            grads.add_scaled(&g, 1.0 / BATCH as f64);
        }
        train_curve.push(batch_loss / BATCH as f64);
        sgd_step(model, &grads, lr);
        eval_curve.push(eval_loss(model, eval, config.num_classes)?.0);
    }
    let acc = eval_loss(model, eval, config.num_classes)?.1;
    Ok((train_curve, eval_curve, acc))
}

fn report(steps: usize, lr: f64, seed: u64, alpha: Option<f64>, curves: (Vec<f64>, Vec<f64>, f64)) -> ToyReport {
    let (train_loss, eval_loss, final_accuracy) = curves;
    ToyReport {
        steps,
        lr,
        seed,
        alpha,
        initial_loss: eval_loss[0],
        final_loss: *eval_loss.last().unwrap(),
        train_loss,
        eval_loss,
        final_accuracy,
    }
}

/// Trains a freshly initialized tiny model on hard labels.
pub fn train_toy(steps: usize, lr: f64, seed: u64) -> Result<ToyReport> {
    let config = toy_config();
    let eval = eval_set(seed);
    let mut model = build_model(&config, seed)?;
    let n = config.num_classes;
    let streams = Streams { batch: STREAM_BATCH, dropout: STREAM_DROPOUT };
    let curves =
        train_loop(&config, &mut model, &eval, steps, lr, seed, streams, |ex| Ok(LossSpec::hard_label(n, ex.label)))?;
    Ok(report(steps, lr, seed, None, curves))
}

/// The frozen teacher: a tiny model with its own init and batch order,
/// trained for [`TEACHER_STEPS`] on hard labels.
pub fn train_teacher(config: &ModelConfig, lr: f64, seed: u64) -> Result<ModelWeights> {
    let mut teacher = build_model(config, rng(seed, STREAM_TEACHER).random())?;
    let n = config.num_classes;
    let streams = Streams { batch: STREAM_TEACHER_BATCH, dropout: STREAM_TEACHER_DROPOUT };
    train_loop(config, &mut teacher, &eval_set(seed), TEACHER_STEPS, lr, seed, streams, |ex| {
        Ok(LossSpec::hard_label(n, ex.label))
    })?;
    Ok(teacher)
}

/// Trains a student exactly as [`train_toy`] does, but against
/// `(1 − α)·softmax(teacher) + α·onehot(label)`.
pub fn distill_toy(alpha: f64, steps: usize, lr: f64, seed: u64) -> Result<ToyReport> {
    let config = toy_config();
    let teacher = train_teacher(&config, lr, seed)?;
    let eval = eval_set(seed);
    let mut model = build_model(&config, seed)?;
    let streams = Streams { batch: STREAM_BATCH, dropout: STREAM_DROPOUT };
    let curves = train_loop(&config, &mut model, &eval, steps, lr, seed, streams, |ex| {
        let t = forward(&teacher, &ex.example.token_ids, &ex.example.segment_ids, None)?;
        Ok(LossSpec::SoftCrossEntropy(distill_target(&DistillTarget::new(alpha, t, ex.label)?)))
    })?;
    Ok(report(steps, lr, seed, Some(alpha), curves))
}
