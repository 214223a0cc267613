//! Embedding, encoder blocks, pooler and classifier assembled from a
//! [`ModelConfig`].
//!
//! Block topology is post-LN:
//!
//! ```text
//! h   = LN_attn(x + FFN₁(MHA(x)))
//! out = LN_out(h + FFN₃(GELU(FFN₂(h))))
//! ```
//!
//! FFN₁ is the attention output projection. The pooler is `tanh(dense(·))`
//! on position 0 and the classifier is one dense layer on top.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{attend_heads, key_padding_mask, project_qkv, AttentionWeights};
use crate::config::{LayerRole, ModelConfig};
use crate::error::{Error, Result};
use crate::layers::{grouped_conv1d, EmbeddingTables, LayerWeights};
use crate::tensor::{gelu, LayerNormParams, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlockWeights {
    pub attn: AttentionWeights,
    pub ffn1: LayerWeights,
    pub ffn2: LayerWeights,
    pub ffn3: LayerWeights,
    pub ln_attn: LayerNormParams,
    pub ln_out: LayerNormParams,
}

impl EncoderBlockWeights {
    pub fn layer(&self, role: LayerRole) -> &LayerWeights {
        match role {
            LayerRole::Query => &self.attn.q_proj,
            LayerRole::Key => &self.attn.k_proj,
            LayerRole::Value => &self.attn.v_proj,
            LayerRole::Ffn1 => &self.ffn1,
            LayerRole::Ffn2 => &self.ffn2,
            LayerRole::Ffn3 => &self.ffn3,
        }
    }

    fn layer_mut(&mut self, role: LayerRole) -> &mut LayerWeights {
        match role {
            LayerRole::Query => &mut self.attn.q_proj,
            LayerRole::Key => &mut self.attn.k_proj,
            LayerRole::Value => &mut self.attn.v_proj,
            LayerRole::Ffn1 => &mut self.ffn1,
            LayerRole::Ffn2 => &mut self.ffn2,
            LayerRole::Ffn3 => &mut self.ffn3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub embeddings: EmbeddingTables,
    pub blocks: Vec<EncoderBlockWeights>,
    pub pooler: LayerWeights,
    pub classifier: LayerWeights,
}

impl ModelWeights {
    /// Assembles weights from named tensors, checking every name and shape
    /// against `config`. Missing, extra or misshapen tensors are consistency errors.
    pub fn from_named(config: &ModelConfig, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        for (name, shape) in config.parameter_shapes() {
            match tensors.get(&name) {
                None => {
                    return Err(Error::Consistency { tensor: name, msg: "missing".into() });
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Consistency {
                        tensor: name,
                        msg: format!("expected shape {shape:?}, found {:?}", t.shape()),
                    });
                }
                Some(_) => {}
            }
        }
        if tensors.len() != config.parameter_shapes().len() {
            let known: std::collections::BTreeSet<String> =
                config.parameter_shapes().into_iter().map(|(n, _)| n).collect();
            let extra = tensors.keys().find(|k| !known.contains(*k)).unwrap().clone();
            return Err(Error::Consistency { tensor: extra, msg: "not part of this configuration".into() });
        }

        let t = &mut tensors;
        let eps = config.ln_eps;
        let embeddings = EmbeddingTables {
            token_table: take(t, "embeddings.token_table"),
            position_table: take(t, "embeddings.position_table"),
            segment_table: take(t, "embeddings.segment_table"),
            norm: take_ln(t, "embeddings.ln", eps),
        };
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for b in 0..config.num_blocks {
            let mut l = |role: LayerRole| {
                take_layer(t, &format!("blocks.{b}.{}", role.name()), config.layer_shape(role).groups)
            };
            let (q, k, v) = (l(LayerRole::Query)?, l(LayerRole::Key)?, l(LayerRole::Value)?);
            let (ffn1, ffn2, ffn3) = (l(LayerRole::Ffn1)?, l(LayerRole::Ffn2)?, l(LayerRole::Ffn3)?);
            blocks.push(EncoderBlockWeights {
                attn: AttentionWeights::new(q, k, v, config.num_heads)?,
                ffn1,
                ffn2,
                ffn3,
                ln_attn: take_ln(t, &format!("blocks.{b}.ln_attn"), eps),
                ln_out: take_ln(t, &format!("blocks.{b}.ln_out"), eps),
            });
        }
        let pooler = take_layer(t, "pooler", 1)?;
        let classifier = take_layer(t, "classifier", 1)?;
        Ok(Self { embeddings, blocks, pooler, classifier })
    }

    /// Every parameter tensor with its canonical name, in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embeddings.token_table".into(), &self.embeddings.token_table),
            ("embeddings.position_table".into(), &self.embeddings.position_table),
            ("embeddings.segment_table".into(), &self.embeddings.segment_table),
            ("embeddings.ln.gamma".into(), &self.embeddings.norm.gamma),
            ("embeddings.ln.beta".into(), &self.embeddings.norm.beta),
        ];
        for (b, block) in self.blocks.iter().enumerate() {
            for role in LayerRole::ALL {
                let l = block.layer(role);
                out.push((format!("blocks.{b}.{}.kernel", role.name()), l.kernel()));
                out.push((format!("blocks.{b}.{}.bias", role.name()), l.bias()));
            }
            for (n, ln) in [("ln_attn", &block.ln_attn), ("ln_out", &block.ln_out)] {
                out.push((format!("blocks.{b}.{n}.gamma"), &ln.gamma));
                out.push((format!("blocks.{b}.{n}.beta"), &ln.beta));
            }
        }
        for (n, l) in [("pooler", &self.pooler), ("classifier", &self.classifier)] {
            out.push((format!("{n}.kernel"), l.kernel()));
            out.push((format!("{n}.bias"), l.bias()));
        }
        out
    }

    /// Mutable access to one parameter tensor by canonical name.
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let mut parts = name.split('.');
        match (parts.next()?, parts.next()?) {
            ("embeddings", "token_table") => Some(&mut self.embeddings.token_table),
            ("embeddings", "position_table") => Some(&mut self.embeddings.position_table),
            ("embeddings", "segment_table") => Some(&mut self.embeddings.segment_table),
            ("embeddings", "ln") => ln_field(&mut self.embeddings.norm, parts.next()?),
            ("pooler", field) => layer_field(&mut self.pooler, field),
            ("classifier", field) => layer_field(&mut self.classifier, field),
            ("blocks", idx) => {
                let block = self.blocks.get_mut(idx.parse::<usize>().ok()?)?;
                let rest: Vec<&str> = parts.collect();
                match rest.as_slice() {
                    ["ln_attn", f] => ln_field(&mut block.ln_attn, f),
                    ["ln_out", f] => ln_field(&mut block.ln_out, f),
                    [a, b, f] => {
                        let role = LayerRole::ALL.into_iter().find(|r| r.name() == format!("{a}.{b}"))?;
                        layer_field(block.layer_mut(role), f)
                    }
                    [a, f] => {
                        let role = LayerRole::ALL.into_iter().find(|r| r.name() == *a)?;
                        layer_field(block.layer_mut(role), f)
                    }
                    _ => None,
                }
            }
            _ => None,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.named_tensors().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Total stored parameter elements, counted by walking every tensor.
    pub fn enumerate_params(&self) -> u64 {
        self.named_tensors().iter().map(|(_, t)| t.len() as u64).sum()
    }

    /// Copy with every grouped layer replaced by its block-diagonal dense equivalent.
    pub fn densified(&self) -> Self {
        let mut out = self.clone();
        for block in &mut out.blocks {
            for role in LayerRole::ALL {
                let dense = block.layer(role).to_dense();
                *block.layer_mut(role) = dense;
            }
        }
        out
    }
}

fn take(t: &mut BTreeMap<String, Tensor>, name: &str) -> Tensor {
    t.remove(name).expect("presence checked by from_named")
}

fn take_ln(t: &mut BTreeMap<String, Tensor>, prefix: &str, eps: f64) -> LayerNormParams {
    LayerNormParams { gamma: take(t, &format!("{prefix}.gamma")), beta: take(t, &format!("{prefix}.beta")), eps }
}

fn take_layer(t: &mut BTreeMap<String, Tensor>, prefix: &str, groups: usize) -> Result<LayerWeights> {
    LayerWeights::new(take(t, &format!("{prefix}.kernel")), take(t, &format!("{prefix}.bias")), groups)
}

fn ln_field<'a>(ln: &'a mut LayerNormParams, field: &str) -> Option<&'a mut Tensor> {
    match field {
        "gamma" => Some(&mut ln.gamma),
        "beta" => Some(&mut ln.beta),
        _ => None,
    }
}

fn layer_field<'a>(l: &'a mut LayerWeights, field: &str) -> Option<&'a mut Tensor> {
    match field {
        "kernel" => Some(l.kernel_mut()),
        "bias" => Some(l.bias_mut()),
        _ => None,
    }
}

/// Normal(0, std) truncated at two standard deviations by resampling.
pub(crate) fn truncated_normal(rng: &mut impl Rng, std: f64, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("valid std");
    (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}

/// Deterministic initialization: tables and kernels truncated-normal with
/// std 0.02, biases and β zero, γ one. Tensors are drawn in canonical order
/// from one ChaCha8 stream seeded with `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut named = BTreeMap::new();
    for (name, shape) in config.parameter_shapes() {
        let n = shape.iter().product();
        let data = if name.ends_with(".bias") || name.ends_with(".beta") {
            vec![0.0; n]
        } else if name.ends_with(".gamma") {
            vec![1.0; n]
        } else {
            truncated_normal(&mut rng, INIT_STD, n)
        };
        named.insert(name, Tensor::from_parts(shape, data));
    }
    ModelWeights::from_named(config, named)
}

/// Coarse stages of a forward pass, used for timing breakdowns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Embedding,
    QkvProjection,
    AttentionMatmul,
    Ffn,
    Classifier,
}

impl Stage {
    pub const ALL: [Stage; 5] =
        [Stage::Embedding, Stage::QkvProjection, Stage::AttentionMatmul, Stage::Ffn, Stage::Classifier];

    pub fn key(self) -> &'static str {
        match self {
            Stage::Embedding => "embedding",
            Stage::QkvProjection => "qkv_fc",
            Stage::AttentionMatmul => "attention_matmul",
            Stage::Ffn => "ffn_fc",
            Stage::Classifier => "classifier",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Stage::Embedding => "Embedding",
            Stage::QkvProjection => "FC in self-attention modules",
            Stage::AttentionMatmul => "softmax(QK^T/sqrt(d_k))V",
            Stage::Ffn => "FC in feed-forward network layers",
            Stage::Classifier => "FC layers in final classifier",
        }
    }
}

/// Accumulated wall time per [`Stage`]. Residual adds, GELU and the
/// block layer norms are charged to [`Stage::Ffn`].
#[derive(Debug, Clone, Default)]
pub struct StageTimes {
    pub times: BTreeMap<Stage, Duration>,
}

impl StageTimes {
    fn time<T>(clock: &mut Option<&mut StageTimes>, stage: Stage, f: impl FnOnce() -> T) -> T {
        match clock {
            None => f(),
            Some(c) => {
                let start = Instant::now();
                let out = f();
                *c.times.entry(stage).or_default() += start.elapsed();
                out
            }
        }
    }

    pub fn get(&self, stage: Stage) -> Duration {
        self.times.get(&stage).copied().unwrap_or_default()
    }
}

fn block_forward_impl(
    x: &Tensor,
    w: &EncoderBlockWeights,
    mask: Option<&Tensor>,
    clock: &mut Option<&mut StageTimes>,
) -> Result<Tensor> {
    let (q, k, v) = StageTimes::time(clock, Stage::QkvProjection, || project_qkv(x, &w.attn))?;
    let heads = StageTimes::time(clock, Stage::AttentionMatmul, || attend_heads(&q, &k, &v, w.attn.num_heads(), mask))?;
    StageTimes::time(clock, Stage::Ffn, || {
        let h = w.ln_attn.apply(&x.add(&grouped_conv1d(&heads, &w.ffn1)?)?)?;
        let inner = gelu(&grouped_conv1d(&h, &w.ffn2)?);
        w.ln_out.apply(&h.add(&grouped_conv1d(&inner, &w.ffn3)?)?)
    })
}

pub fn encoder_block_forward(x: &Tensor, w: &EncoderBlockWeights, mask: Option<&Tensor>) -> Result<Tensor> {
    block_forward_impl(x, w, mask, &mut None)
}

/// `tanh(pooler(x₀))`: the pooled representation of position 0.
pub fn pool(model: &ModelWeights, features: &Tensor) -> Result<Tensor> {
    let first = Tensor::new(vec![1, features.dims2()?.1], features.row(0).to_vec())?;
    Ok(grouped_conv1d(&first, &model.pooler)?.map(f64::tanh))
}

fn forward_impl(
    model: &ModelWeights,
    token_ids: &[usize],
    segment_ids: &[usize],
    visible: Option<&[bool]>,
    mut clock: Option<&mut StageTimes>,
) -> Result<Tensor> {
    let mask = match visible {
        Some(v) if v.len() != token_ids.len() => {
            return Err(Error::dim(format!("mask has {} entries for {} tokens", v.len(), token_ids.len())));
        }
        Some(v) => Some(key_padding_mask(v)),
        None => None,
    };
    let mut x = StageTimes::time(&mut clock, Stage::Embedding, || {
        crate::layers::embed(token_ids, segment_ids, &model.embeddings)
    })?;
    for block in &model.blocks {
        x = block_forward_impl(&x, block, mask.as_ref(), &mut clock)?;
    }
    StageTimes::time(&mut clock, Stage::Classifier, || {
        let pooled = pool(model, &x)?;
        let logits = grouped_conv1d(&pooled, &model.classifier)?;
        Tensor::vector(logits.into_data())
    })
}

/// Inference-mode forward pass returning `num_classes` logits.
/// `visible[p] == false` marks position `p` as padding that no query may attend to.
pub fn forward(
    model: &ModelWeights,
    token_ids: &[usize],
    segment_ids: &[usize],
    visible: Option<&[bool]>,
) -> Result<Tensor> {
    forward_impl(model, token_ids, segment_ids, visible, None)
}

/// [`forward`] with per-stage wall times added into `times`.
pub fn forward_timed(
    model: &ModelWeights,
    token_ids: &[usize],
    segment_ids: &[usize],
    visible: Option<&[bool]>,
    times: &mut StageTimes,
) -> Result<Tensor> {
    forward_impl(model, token_ids, segment_ids, visible, Some(times))
}
