//! Reverse-mode gradients for the fixed encoder operator set, and a
//! central-difference checker that certifies them.
//!
//! The forward pass used here records only what the reverse sweep cannot
//! cheaply rebuild (layer inputs, pre-activation values, attention
//! probabilities, dropout masks). Layer-norm statistics are recomputed.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{attention_probs, key_padding_mask, project_qkv};
use crate::config::{LayerRole, ModelConfig};
use crate::error::{Error, Result};
use crate::layers::{grouped_conv1d, LayerWeights};
use crate::losses::LossSpec;
use crate::model::{EncoderBlockWeights, ModelWeights};
use crate::tensor::{gelu_grad_scalar, gelu_scalar, matmul, row_stats, LayerNormParams, Tensor};

/// One input sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub visible: Option<Vec<bool>>,
}

impl Example {
    pub fn new(token_ids: Vec<usize>) -> Self {
        let n = token_ids.len();
        Self { token_ids, segment_ids: vec![0; n], visible: None }
    }
}

/// Gradient tensors keyed by canonical parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    grads: BTreeMap<String, Tensor>,
}

impl GradientSet {
    pub fn zeros_like(model: &ModelWeights) -> Self {
        let grads = model.named_tensors().into_iter().map(|(n, t)| (n, Tensor::zeros(t.shape()))).collect();
        Self { grads }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.grads.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &GradientSet, scale: f64) {
        for (name, g) in &mut self.grads {
            let o = &other.grads[name];
            for (a, b) in g.data_mut().iter_mut().zip(o.data()) {
                *a += scale * b;
            }
        }
    }

    fn acc(&mut self, name: &str, delta: &[f64]) {
        let g = self.grads.get_mut(name).unwrap_or_else(|| panic!("no gradient slot `{name}`"));
        for (a, b) in g.data_mut().iter_mut().zip(delta) {
            *a += b;
        }
    }

    fn acc_layer(&mut self, prefix: &str, lg: LayerGrads) {
        self.acc(&format!("{prefix}.kernel"), lg.kernel.data());
        self.acc(&format!("{prefix}.bias"), lg.bias.data());
    }

    fn acc_ln(&mut self, prefix: &str, dgamma: &[f64], dbeta: &[f64]) {
        self.acc(&format!("{prefix}.gamma"), dgamma);
        self.acc(&format!("{prefix}.beta"), dbeta);
    }
}

/// Parameter gradients of one layer plus the gradient of its input.
pub struct LayerGrads {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub input: Tensor,
}

/// Backward of [`grouped_conv1d`] given its input `f` and upstream gradient `dout`.
pub fn grouped_conv1d_backward(f: &Tensor, w: &LayerWeights, dout: &Tensor) -> Result<LayerGrads> {
    let (p, c_in) = f.dims2()?;
    let (pd, c_out) = dout.dims2()?;
    if pd != p || c_out != w.out_channels() || c_in != w.in_channels() {
        return Err(Error::dim(format!(
            "backward shapes: input {:?}, upstream {:?}, layer {}→{}",
            f.shape(),
            dout.shape(),
            w.in_channels(),
            w.out_channels()
        )));
    }
    let (g, k) = (w.groups(), w.kernel_size());
    let (cin_g, cout_g) = (c_in / g, c_out / g);
    let off = (k - 1) / 2;
    let (fd, dd, kd) = (f.data(), dout.data(), w.kernel().data());

    let mut dbias = vec![0.0; c_out];
    for pos in 0..p {
        for c in 0..c_out {
            dbias[c] += dd[pos * c_out + c];
        }
    }
    let mut dkernel = vec![0.0; kd.len()];
    let mut dinput = vec![0.0; p * c_in];
    for pos in 0..p {
        for c in 0..c_out {
            let up = dd[pos * c_out + c];
            let base = (c / cout_g) * cin_g;
            for i in 0..cin_g {
                for t in 0..k {
                    let Some(src) = (pos + t).checked_sub(off).filter(|&s| s < p) else {
                        continue;
                    };
                    let widx = (c * cin_g + i) * k + t;
                    dkernel[widx] += up * fd[src * c_in + base + i];
                    dinput[src * c_in + base + i] += up * kd[widx];
                }
            }
        }
    }
    Ok(LayerGrads {
        kernel: Tensor::from_parts(w.kernel().shape().to_vec(), dkernel),
        bias: Tensor::from_parts(vec![c_out], dbias),
        input: Tensor::from_parts(vec![p, c_in], dinput),
    })
}

/// Backward of the ungrouped `K = 1` layer written as matrix products:
/// `dW = doutᵀ·f`, `df = dout·W`, `db = Σ_p dout`.
pub fn positionwise_fc_backward(f: &Tensor, w: &LayerWeights, dout: &Tensor) -> Result<LayerGrads> {
    if w.groups() != 1 || w.kernel_size() != 1 {
        return Err(Error::config("position-wise FC backward needs G=1, K=1"));
    }
    let (c_out, c_in) = (w.out_channels(), w.in_channels());
    let wm = Tensor::new(vec![c_out, c_in], w.kernel().data().to_vec())?;
    let dw = matmul(&dout.transpose()?, f)?;
    let df = matmul(dout, &wm)?;
    let (p, _) = dout.dims2()?;
    let mut db = vec![0.0; c_out];
    for pos in 0..p {
        for (b, d) in db.iter_mut().zip(dout.row(pos)) {
            *b += d;
        }
    }
    Ok(LayerGrads {
        kernel: Tensor::from_parts(vec![c_out, c_in, 1], dw.into_data()),
        bias: Tensor::from_parts(vec![c_out], db),
        input: df,
    })
}

/// Backward of [`crate::tensor::layer_norm`]; returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(x: &Tensor, ln: &LayerNormParams, dout: &Tensor) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (p, c) = x.dims2()?;
    let n = c as f64;
    let gamma = ln.gamma.data();
    let mut dx = vec![0.0; p * c];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for r in 0..p {
        let row = x.row(r);
        let dy = dout.row(r);
        let (mean, var) = row_stats(row);
        let inv = 1.0 / (var + ln.eps).sqrt();
        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
        let dxhat: Vec<f64> = (0..c).map(|j| dy[j] * gamma[j]).collect();
        for j in 0..c {
            dgamma[j] += dy[j] * xhat[j];
            dbeta[j] += dy[j];
        }
        let sum_d: f64 = dxhat.iter().sum();
        let sum_dx: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
        for j in 0..c {
            dx[r * c + j] = inv / n * (n * dxhat[j] - sum_d - xhat[j] * sum_dx);
        }
    }
    Ok((Tensor::from_parts(vec![p, c], dx), dgamma, dbeta))
}

/// Dropout behaviour of a forward pass.
pub enum Mode<'a> {
    /// No dropout; the pass is deterministic.
    Eval,
    /// Inverted dropout with the configured rates, masks drawn from `rng`.
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    fn mask(&mut self, shape: &[usize], rate: f64) -> Option<Tensor> {
        match self {
            Mode::Train(rng) if rate > 0.0 => {
                let keep = 1.0 / (1.0 - rate);
                let n = shape.iter().product();
                let data = (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
                Some(Tensor::from_parts(shape.to_vec(), data))
            }
            _ => None,
        }
    }
}

fn apply_mask(x: Tensor, mask: &Option<Tensor>) -> Tensor {
    match mask {
        Some(m) => x.zip_map(m, |a, b| a * b).expect("mask shape"),
        None => x,
    }
}

struct HeadTrace {
    probs: Tensor,
    drop: Option<Tensor>,
}

struct BlockTrace {
    x: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: Vec<HeadTrace>,
    attn_out: Tensor,
    drop1: Option<Tensor>,
    pre_ln_attn: Tensor,
    h: Tensor,
    z2: Tensor,
    g: Tensor,
    drop3: Option<Tensor>,
    pre_ln_out: Tensor,
}

struct Trace {
    embed_sum: Tensor,
    drop_embed: Option<Tensor>,
    blocks: Vec<BlockTrace>,
    final_features: Tensor,
    pooled: Tensor,
    drop_final: Option<Tensor>,
    classifier_in: Tensor,
    logits: Tensor,
}

fn block_forward_traced(
    x: Tensor,
    w: &EncoderBlockWeights,
    mask: Option<&Tensor>,
    config: &ModelConfig,
    mode: &mut Mode,
) -> Result<(Tensor, BlockTrace)> {
    let (q, k, v) = project_qkv(&x, &w.attn)?;
    let (p, c) = x.dims2()?;
    let d = w.attn.head_dim();
    let mut heads = Vec::with_capacity(w.attn.num_heads());
    let mut outs = Vec::with_capacity(w.attn.num_heads());
    for h in 0..w.attn.num_heads() {
        let probs = attention_probs(&q.column_slice(h * d, d)?, &k.column_slice(h * d, d)?, mask)?;
        let drop = mode.mask(&[p, p], config.dropout_encoder);
        outs.push(matmul(&apply_mask(probs.clone(), &drop), &v.column_slice(h * d, d)?)?);
        heads.push(HeadTrace { probs, drop });
    }
    let attn_out = Tensor::concat_columns(&outs)?;
    let drop1 = mode.mask(&[p, c], config.dropout_encoder);
    let a1 = apply_mask(grouped_conv1d(&attn_out, &w.ffn1)?, &drop1);
    let pre_ln_attn = x.add(&a1)?;
    let h = w.ln_attn.apply(&pre_ln_attn)?;
    let z2 = grouped_conv1d(&h, &w.ffn2)?;
    let g = z2.map(gelu_scalar);
    let drop3 = mode.mask(&[p, c], config.dropout_encoder);
    let z3 = apply_mask(grouped_conv1d(&g, &w.ffn3)?, &drop3);
    let pre_ln_out = h.add(&z3)?;
    let out = w.ln_out.apply(&pre_ln_out)?;
    let trace = BlockTrace { x, q, k, v, heads, attn_out, drop1, pre_ln_attn, h, z2, g, drop3, pre_ln_out };
    Ok((out, trace))
}

fn forward_traced(model: &ModelWeights, config: &ModelConfig, ex: &Example, mode: &mut Mode) -> Result<Trace> {
    let mask = match &ex.visible {
        Some(v) if v.len() != ex.token_ids.len() => {
            return Err(Error::dim("mask length differs from token count"));
        }
        Some(v) => Some(key_padding_mask(v)),
        None => None,
    };
    let embed_sum = model.embeddings.summed(&ex.token_ids, &ex.segment_ids)?;
    let x0 = model.embeddings.norm.apply(&embed_sum)?;
    let drop_embed = mode.mask(x0.shape(), config.dropout_encoder);
    let mut x = apply_mask(x0, &drop_embed);
    let mut blocks = Vec::with_capacity(model.blocks.len());
    for w in &model.blocks {
        let (out, t) = block_forward_traced(x, w, mask.as_ref(), config, mode)?;
        blocks.push(t);
        x = out;
    }
    let c = x.dims2()?.1;
    let first = Tensor::from_parts(vec![1, c], x.row(0).to_vec());
    let pooled = grouped_conv1d(&first, &model.pooler)?.map(f64::tanh);
    let drop_final = mode.mask(&[1, c], config.dropout_final);
    let classifier_in = apply_mask(pooled.clone(), &drop_final);
    let logits = grouped_conv1d(&classifier_in, &model.classifier)?;
    Ok(Trace {
        embed_sum,
        drop_embed,
        blocks,
        final_features: x,
        pooled,
        drop_final,
        classifier_in,
        logits: Tensor::from_parts(vec![model.classifier.out_channels()], logits.into_data()),
    })
}

fn block_backward(
    b: usize,
    w: &EncoderBlockWeights,
    t: &BlockTrace,
    dout: Tensor,
    grads: &mut GradientSet,
) -> Result<Tensor> {
    let prefix = format!("blocks.{b}");
    let (ds2, dg_out, db_out) = layer_norm_backward(&t.pre_ln_out, &w.ln_out, &dout)?;
    grads.acc_ln(&format!("{prefix}.ln_out"), &dg_out, &db_out);

    let mut dh = ds2.clone();
    let dz3 = apply_mask(ds2, &t.drop3);
    let l3 = grouped_conv1d_backward(&t.g, &w.ffn3, &dz3)?;
    let dz2 = l3.input.zip_map(&t.z2, |dg, z| dg * gelu_grad_scalar(z))?;
    grads.acc_layer(&format!("{prefix}.ffn3"), LayerGrads { input: Tensor::zeros(&[1]), ..l3 });
    let l2 = grouped_conv1d_backward(&t.h, &w.ffn2, &dz2)?;
    dh = dh.add(&l2.input)?;
    grads.acc_layer(&format!("{prefix}.ffn2"), l2);

    let (ds1, dg_attn, db_attn) = layer_norm_backward(&t.pre_ln_attn, &w.ln_attn, &dh)?;
    grads.acc_ln(&format!("{prefix}.ln_attn"), &dg_attn, &db_attn);
    let mut dx = ds1.clone();
    let da1 = apply_mask(ds1, &t.drop1);
    let l1 = grouped_conv1d_backward(&t.attn_out, &w.ffn1, &da1)?;
    let dheads = l1.input.clone();
    grads.acc_layer(&format!("{prefix}.ffn1"), l1);

    let d = w.attn.head_dim();
    let scale = (d as f64).sqrt();
    let (mut dq_parts, mut dk_parts, mut dv_parts) = (Vec::new(), Vec::new(), Vec::new());
    for (h, ht) in t.heads.iter().enumerate() {
        let (qh, kh, vh) = (t.q.column_slice(h * d, d)?, t.k.column_slice(h * d, d)?, t.v.column_slice(h * d, d)?);
        let d_o = dheads.column_slice(h * d, d)?;
        let used = apply_mask(ht.probs.clone(), &ht.drop);
        dv_parts.push(matmul(&used.transpose()?, &d_o)?);
        let dprobs = apply_mask(matmul(&d_o, &vh.transpose()?)?, &ht.drop);
        // Softmax Jacobian, row by row: dS = P ⊙ (dP − Σ_j dP·P).
        let (p, _) = ht.probs.dims2()?;
        let mut ds = ht.probs.clone();
        for r in 0..p {
            let dot: f64 = dprobs.row(r).iter().zip(ht.probs.row(r)).map(|(a, b)| a * b).sum();
            for (s, dp) in ds.row_mut(r).iter_mut().zip(dprobs.row(r)) {
                *s *= dp - dot;
            }
        }
        let ds = ds.scale(1.0 / scale);
        dq_parts.push(matmul(&ds, &kh)?);
        dk_parts.push(matmul(&ds.transpose()?, &qh)?);
    }
    for (role, parts) in [(LayerRole::Query, dq_parts), (LayerRole::Key, dk_parts), (LayerRole::Value, dv_parts)] {
        let dproj = Tensor::concat_columns(&parts)?;
        let lg = grouped_conv1d_backward(&t.x, w.layer(role), &dproj)?;
        dx = dx.add(&lg.input)?;
        grads.acc_layer(&format!("{prefix}.{}", role.name()), lg);
    }
    Ok(dx)
}

/// Loss and exact gradients with respect to every parameter, in eval mode.
pub fn backward(
    model: &ModelWeights,
    config: &ModelConfig,
    ex: &Example,
    loss: &LossSpec,
) -> Result<(f64, GradientSet)> {
    backward_with_mode(model, config, ex, loss, &mut Mode::Eval)
}

pub fn backward_with_mode(
    model: &ModelWeights,
    config: &ModelConfig,
    ex: &Example,
    loss: &LossSpec,
    mode: &mut Mode,
) -> Result<(f64, GradientSet)> {
    let trace = forward_traced(model, config, ex, mode)?;
    let (value, dlogits) = loss.value_and_grad(&trace.logits)?;
    let mut grads = GradientSet::zeros_like(model);

    let n = dlogits.len();
    let dlogits = Tensor::from_parts(vec![1, n], dlogits.into_data());
    let lc = grouped_conv1d_backward(&trace.classifier_in, &model.classifier, &dlogits)?;
    let dpooled = apply_mask(lc.input.clone(), &trace.drop_final);
    grads.acc_layer("classifier", lc);
    let du = dpooled.zip_map(&trace.pooled, |d, t| d * (1.0 - t * t))?;
    let c = model.pooler.in_channels();
    let first = Tensor::from_parts(vec![1, c], trace.final_features.row(0).to_vec());
    let lp = grouped_conv1d_backward(&first, &model.pooler, &du)?;
    let (p, _) = trace.final_features.dims2()?;
    let mut dx = Tensor::zeros(&[p, c]);
    dx.row_mut(0).copy_from_slice(lp.input.data());
    grads.acc_layer("pooler", lp);

    for (b, (w, t)) in model.blocks.iter().zip(&trace.blocks).enumerate().rev() {
        dx = block_backward(b, w, t, dx, &mut grads)?;
    }

    let dx0 = apply_mask(dx, &trace.drop_embed);
    let (de, dgamma, dbeta) = layer_norm_backward(&trace.embed_sum, &model.embeddings.norm, &dx0)?;
    grads.acc_ln("embeddings.ln", &dgamma, &dbeta);
    for (pos, (&tok, &seg)) in ex.token_ids.iter().zip(&ex.segment_ids).enumerate() {
        let row = de.row(pos);
        for (table, r) in [("token_table", tok), ("position_table", pos), ("segment_table", seg)] {
            let g = grads.get_mut(&format!("embeddings.{table}")).unwrap();
            for (a, b) in g.row_mut(r).iter_mut().zip(row) {
                *a += b;
            }
        }
    }
    Ok((value, grads))
}

/// Inference-mode loss.
pub fn loss_value(model: &ModelWeights, ex: &Example, loss: &LossSpec) -> Result<f64> {
    let logits = crate::model::forward(model, &ex.token_ids, &ex.segment_ids, ex.visible.as_deref())?;
    loss.value(&logits)
}

/// Plain SGD: `θ ← θ − lr · ∇θ`.
pub fn sgd_step(model: &mut ModelWeights, grads: &GradientSet, lr: f64) {
    for (name, g) in grads.iter() {
        let t = model.tensor_mut(name).expect("gradient names match parameters");
        for (p, d) in t.data_mut().iter_mut().zip(g.data()) {
            *p -= lr * d;
        }
    }
}

/// Scale of the uniform jitter [`probe_model`] adds to freshly initialized weights.
pub const PROBE_JITTER: f64 = 0.5;

/// A gradient-check instance: the seeded initialization plus uniform
/// `±PROBE_JITTER` noise on every parameter. At the 0.02 init scale many
/// gradients sit near 1e-9, below the finite-difference roundoff floor.
pub fn probe_model(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    let mut model = crate::model::build_model(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    for name in names {
        for v in model.tensor_mut(&name).unwrap().data_mut() {
            *v += rng.random_range(-PROBE_JITTER..PROBE_JITTER);
        }
    }
    Ok(model)
}

/// A seeded input of `min(6, max_positions)` tokens with mixed segments and
/// the last position masked out.
pub fn probe_example(config: &ModelConfig, seed: u64) -> Example {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let n = config.max_positions.min(6);
    let token_ids = (0..n).map(|_| rng.random_range(0..config.vocab_size)).collect();
    let segment_ids = (0..n).map(|p| usize::from(p >= n / 2)).collect();
    let mut visible = vec![true; n];
    if n > 1 {
        visible[n - 1] = false;
    }
    Example { token_ids, segment_ids, visible: Some(visible) }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Models above this many parameters are checked on a random sample.
    pub full_scan_limit: usize,
    pub sample_fraction: f64,
    pub sample_seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tol: 1e-4, full_scan_limit: 20_000, sample_fraction: 0.01, sample_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub elements_checked: usize,
    pub max_rel_error: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub passed: bool,
    pub tolerance: f64,
    pub step: f64,
    pub elements_checked: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn failing(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(move |p| !(p.max_rel_error < self.tolerance))
    }

    pub fn to_table(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        let w = self.params.iter().map(|p| p.name.len()).max().unwrap_or(9).max(9);
        writeln!(s, "{:<w$}  {:>8}  {:>12}  status", "parameter", "checked", "max_rel_err").unwrap();
        for p in &self.params {
            let ok = if p.max_rel_error < self.tolerance { "ok" } else { "FAIL" };
            writeln!(s, "{:<w$}  {:>8}  {:>12.3e}  {ok}", p.name, p.elements_checked, p.max_rel_error).unwrap();
        }
        writeln!(
            s,
            "{} elements checked, step {:e}, tolerance {:e}: {}",
            self.elements_checked,
            self.step,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
        .unwrap();
        s
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `grads` against central differences `(L(θ+h) − L(θ−h)) / 2h`.
pub fn compare_gradients(
    model: &ModelWeights,
    ex: &Example,
    loss: &LossSpec,
    grads: &GradientSet,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(opts.step > 0.0) || !(opts.tol > 0.0) {
        return Err(Error::Validation("step and tolerance must be positive".into()));
    }
    let total = model.enumerate_params() as usize;
    let sampled = total > opts.full_scan_limit;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.sample_seed);
    let mut probe = model.clone();
    let mut params = Vec::new();
    for (name, tensor) in model.named_tensors() {
        let n = tensor.len();
        let indices: Vec<usize> = if sampled {
            let k = ((n as f64 * opts.sample_fraction).ceil() as usize).clamp(1, n);
            let mut v = sample(&mut rng, n, k).into_vec();
            v.sort_unstable();
            v
        } else {
            (0..n).collect()
        };
        let analytic = grads.get(&name).ok_or_else(|| Error::Validation(format!("no gradient for `{name}`")))?;
        let mut check = ParamCheck {
            name: name.clone(),
            elements_checked: indices.len(),
            max_rel_error: 0.0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for idx in indices {
            let orig = tensor.data()[idx];
            let (hi, lo) = (orig + opts.step, orig - opts.step);
            let mut eval = |v: f64| -> Result<f64> {
                probe.tensor_mut(&name).unwrap().data_mut()[idx] = v;
                let l = loss_value(&probe, ex, loss)?;
                if !l.is_finite() {
                    return Err(Error::Numeric { param: name.clone(), msg: format!("loss {l} at element {idx}") });
                }
                Ok(l)
            };
            let up = eval(hi)?;
            let down = eval(lo)?;
            probe.tensor_mut(&name).unwrap().data_mut()[idx] = orig;
            // The realised step hi − lo differs from 2h by the rounding of θ ± h.
            let numeric = (up - down) / (hi - lo);
            let a = analytic.data()[idx];
            let err = relative_error(a, numeric);
            if err > check.max_rel_error || err.is_nan() {
                check.max_rel_error = err;
                check.worst_analytic = a;
                check.worst_numeric = numeric;
            }
        }
        params.push(check);
    }
    let passed = params.iter().all(|p| p.max_rel_error < opts.tol);
    let elements_checked = params.iter().map(|p| p.elements_checked).sum();
    Ok(GradCheckReport { params, passed, tolerance: opts.tol, step: opts.step, elements_checked })
}

/// Runs [`backward`] in eval mode and certifies it with [`compare_gradients`].
pub fn finite_diff_check(
    model: &ModelWeights,
    config: &ModelConfig,
    ex: &Example,
    loss: &LossSpec,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, grads) = backward(model, config, ex, loss)?;
    compare_gradients(model, ex, loss, &grads, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::positionwise_fc;
    use crate::losses::one_hot;
    use crate::model::build_model;
    use crate::tensor::softmax_rows;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn tiny(groups: usize, seed: u64) -> (ModelConfig, ModelWeights) {
        let cfg = ModelConfig::tiny_grouped(groups).unwrap();
        let m = build_model(&cfg, seed).unwrap();
        (cfg, m)
    }

    fn example() -> Example {
        Example {
            token_ids: vec![1, 17, 42, 5, 63],
            segment_ids: vec![0, 0, 1, 1, 1],
            visible: Some(vec![true, true, true, true, false]),
        }
    }

    #[test]
    fn layer_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = LayerWeights::new(random(&mut rng, &[6, 2, 3]), random(&mut rng, &[6]), 2).unwrap();
        let f = random(&mut rng, &[5, 4]);
        let r = random(&mut rng, &[5, 6]);
        let lossf = |f: &Tensor, w: &LayerWeights| -> f64 {
            grouped_conv1d(f, w).unwrap().data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let lg = grouped_conv1d_backward(&f, &w, &r).unwrap();
        let h = 1e-6;
        for idx in 0..f.len() {
            let (mut a, mut b) = (f.clone(), f.clone());
            a.data_mut()[idx] += h;
            b.data_mut()[idx] -= h;
            let fd = (lossf(&a, &w) - lossf(&b, &w)) / (2.0 * h);
            assert!((fd - lg.input.data()[idx]).abs() < 1e-8);
        }
        for idx in 0..w.kernel_len() {
            let (mut a, mut b) = (w.clone(), w.clone());
            a.kernel_mut().data_mut()[idx] += h;
            b.kernel_mut().data_mut()[idx] -= h;
            let fd = (lossf(&f, &a) - lossf(&f, &b)) / (2.0 * h);
            assert!((fd - lg.kernel.data()[idx]).abs() < 1e-8);
        }
        for c in 0..6 {
            let want: f64 = (0..5).map(|p| r.get2(p, c)).sum();
            assert!((lg.bias.data()[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn grouped_weight_grad_is_block_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = LayerWeights::new(random(&mut rng, &[6, 2, 1]), random(&mut rng, &[6]), 3).unwrap();
        let f = random(&mut rng, &[4, 6]);
        let dout = random(&mut rng, &[4, 6]);
        let lg = grouped_conv1d_backward(&f, &w, &dout).unwrap();
        // Dense-embedded gradient: off-block entries computed by the dense layer must
        // be exactly what the grouped layer never stores, i.e. the dense kernel's
        // in-block entries equal the grouped gradient.
        let dense = w.to_dense();
        let dg = grouped_conv1d_backward(&f, &dense, &dout).unwrap();
        for c in 0..6 {
            let g = w.group_of_output(c);
            for i in 0..2 {
                assert_eq!(lg.kernel.data()[c * 2 + i], dg.kernel.data()[c * 6 + g * 2 + i]);
            }
        }
        // Perturbing an input channel outside group g leaves group-g weight grads unchanged.
        let mut f2 = f.clone();
        for p in 0..4 {
            f2.data_mut()[p * 6 + 5] += 3.0;
        }
        let lg2 = grouped_conv1d_backward(&f2, &w, &dout).unwrap();
        for c in 0..4 {
            for i in 0..2 {
                assert_eq!(lg.kernel.data()[c * 2 + i], lg2.kernel.data()[c * 2 + i]);
            }
        }
    }

    #[test]
    fn g1_backward_equals_dense_backward_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (p, ci, co) = (rng.random_range(1..7), rng.random_range(1..9), rng.random_range(1..9));
            let w = LayerWeights::new(random(&mut rng, &[co, ci, 1]), random(&mut rng, &[co]), 1).unwrap();
            let f = random(&mut rng, &[p, ci]);
            let dout = random(&mut rng, &[p, co]);
            let a = grouped_conv1d_backward(&f, &w, &dout).unwrap();
            let b = positionwise_fc_backward(&f, &w, &dout).unwrap();
            assert!(a.kernel.bitwise_eq(&b.kernel));
            assert!(a.bias.bitwise_eq(&b.bias));
            assert!(a.input.bitwise_eq(&b.input));
            assert!(positionwise_fc(&f, &w).unwrap().bitwise_eq(&grouped_conv1d(&f, &w).unwrap()));
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, &[3, 5]);
        let ln = LayerNormParams { gamma: random(&mut rng, &[5]), beta: random(&mut rng, &[5]), eps: 1e-5 };
        let r = random(&mut rng, &[3, 5]);
        let lossf = |x: &Tensor| -> f64 { ln.apply(x).unwrap().data().iter().zip(r.data()).map(|(a, b)| a * b).sum() };
        let (dx, _, _) = layer_norm_backward(&x, &ln, &r).unwrap();
        for idx in 0..x.len() {
            let (mut a, mut b) = (x.clone(), x.clone());
            a.data_mut()[idx] += 1e-6;
            b.data_mut()[idx] -= 1e-6;
            let fd = (lossf(&a) - lossf(&b)) / 2e-6;
            assert!((fd - dx.data()[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn classifier_bias_gradient_is_p_minus_t() {
        let (cfg, m) = tiny(1, 5);
        let ex = example();
        let (_, grads) = backward(&m, &cfg, &ex, &LossSpec::hard_label(2, 1)).unwrap();
        let logits = crate::model::forward(&m, &ex.token_ids, &ex.segment_ids, ex.visible.as_deref()).unwrap();
        let p = softmax_rows(&logits);
        let want = p.zip_map(&one_hot(2, 1), |a, b| a - b).unwrap();
        assert!(grads.get("classifier.bias").unwrap().max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn unused_embedding_rows_have_zero_gradient() {
        let (cfg, m) = tiny(1, 6);
        let ex = example();
        let (_, grads) = backward(&m, &cfg, &ex, &LossSpec::Mse(0.3)).unwrap();
        let tok = grads.get("embeddings.token_table").unwrap();
        assert!(tok.row(2).iter().all(|&v| v == 0.0));
        assert!(tok.row(17).iter().any(|&v| v != 0.0));
        let pos = grads.get("embeddings.position_table").unwrap();
        assert!(pos.row(9).iter().all(|&v| v == 0.0));
        let cls = grads.get("classifier.kernel").unwrap();
        // Only logit 0 feeds the squared error.
        assert!(cls.data()[8..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_set_keys_match_parameters() {
        let (cfg, m) = tiny(2, 7);
        let (_, grads) = backward(&m, &cfg, &example(), &LossSpec::hard_label(2, 0)).unwrap();
        let names: Vec<_> = m.named_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        assert_eq!(grads.len(), names.len());
        for (n, s) in names {
            assert_eq!(grads.get(&n).unwrap().shape(), s.as_slice());
        }
    }

    #[test]
    fn flat_loss_passes_trivially() {
        let (cfg, mut m) = tiny(1, 8);
        m.classifier.kernel_mut().data_mut().fill(0.0);
        // Logit 0 = bias, so the squared error ignores everything upstream.
        let loss = LossSpec::Mse(m.classifier.bias().data()[0]);
        let report = finite_diff_check(&m, &cfg, &example(), &loss, &GradCheckOptions::default()).unwrap();
        assert!(report.passed);
        for p in &report.params {
            if p.name != "classifier.kernel" {
                assert_eq!(p.max_rel_error, 0.0, "{}", p.name);
            }
        }
    }

    #[test]
    fn corrupted_gradient_is_caught_and_named() {
        let cfg = ModelConfig::tiny_grouped(2).unwrap();
        let m = probe_model(&cfg, 0).unwrap();
        let ex = probe_example(&cfg, 0);
        let loss = LossSpec::hard_label(2, 1);
        let (_, mut grads) = backward(&m, &cfg, &ex, &loss).unwrap();
        let g = grads.get_mut("blocks.1.ffn2.kernel").unwrap();
        let idx = g.data().iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap().0;
        g.data_mut()[idx] *= 2.0;
        let report = compare_gradients(&m, &ex, &loss, &grads, &GradCheckOptions::default()).unwrap();
        assert!(!report.passed);
        let failing: Vec<_> = report.failing().map(|p| p.name.as_str()).collect();
        assert_eq!(failing, vec!["blocks.1.ffn2.kernel"]);
    }

    #[test]
    fn dropout_masks_change_training_loss_only() {
        let mut cfg = ModelConfig::tiny_grouped(2).unwrap();
        cfg.dropout_encoder = 0.3;
        cfg.dropout_final = 0.2;
        let m = build_model(&cfg, 10).unwrap();
        let ex = example();
        let loss = LossSpec::hard_label(2, 0);
        let (eval_loss, _) = backward(&m, &cfg, &ex, &loss).unwrap();
        assert!((eval_loss - loss_value(&m, &ex, &loss).unwrap()).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (train_loss, _) = backward_with_mode(&m, &cfg, &ex, &loss, &mut Mode::Train(&mut rng)).unwrap();
        assert_ne!(train_loss, eval_loss);
    }

    #[test]
    fn dropout_backward_matches_fixed_mask_finite_differences() {
        // With the rng reseeded for each evaluation the masks are identical, so
        // the training-mode loss is a deterministic function of the weights.
        let mut cfg = ModelConfig::tiny_grouped(2).unwrap();
        cfg.dropout_encoder = 0.25;
        cfg.dropout_final = 0.25;
        let m = probe_model(&cfg, 1).unwrap();
        let ex = probe_example(&cfg, 1);
        let loss = LossSpec::hard_label(2, 1);
        let run = |m: &ModelWeights| {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            backward_with_mode(m, &cfg, &ex, &loss, &mut Mode::Train(&mut rng)).unwrap()
        };
        let (_, grads) = run(&m);
        for name in ["blocks.0.attn.q.kernel", "blocks.1.ffn3.kernel", "pooler.kernel", "embeddings.token_table"] {
            let n = m.tensor(name).unwrap().len();
            for idx in (0..n).step_by(7) {
                let (mut a, mut b) = (m.clone(), m.clone());
                a.tensor_mut(name).unwrap().data_mut()[idx] += 1e-5;
                b.tensor_mut(name).unwrap().data_mut()[idx] -= 1e-5;
                let fd = (run(&a).0 - run(&b).0) / 2e-5;
                let an = grads.get(name).unwrap().data()[idx];
                assert!(relative_error(an, fd) < 1e-4, "{name}[{idx}]: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn probe_point_passes_full_scan() {
        for g in [1, 2] {
            let cfg = ModelConfig::tiny_grouped(g).unwrap();
            let m = probe_model(&cfg, 0).unwrap();
            let ex = probe_example(&cfg, 0);
            for loss in [LossSpec::hard_label(2, 0), LossSpec::Mse(-0.4)] {
                let r = finite_diff_check(&m, &cfg, &ex, &loss, &GradCheckOptions::default()).unwrap();
                assert_eq!(r.elements_checked as u64, m.enumerate_params());
                assert!(r.passed, "groups {g}\n{}", r.to_table());
            }
        }
    }

    #[test]
    fn large_models_are_sampled() {
        let cfg = ModelConfig { vocab_size: 3000, ..ModelConfig::tiny_grouped(2).unwrap() };
        let m = probe_model(&cfg, 3).unwrap();
        let ex = probe_example(&cfg, 3);
        let r = finite_diff_check(&m, &cfg, &ex, &LossSpec::hard_label(2, 1), &GradCheckOptions::default()).unwrap();
        let total = m.enumerate_params() as usize;
        assert!(total > 20_000);
        assert!(r.elements_checked < total / 20);
        assert!(r.params.iter().all(|p| p.elements_checked >= 1));
    }

    #[test]
    fn sgd_descends() {
        let (cfg, m0) = tiny(2, 12);
        let ex = example();
        let loss = LossSpec::hard_label(2, 1);
        let mut m = m0.clone();
        let mut curve = Vec::new();
        for _ in 0..20 {
            let (l, g) = backward(&m, &cfg, &ex, &loss).unwrap();
            curve.push(l);
            sgd_step(&mut m, &g, 1e-3);
        }
        let smooth: Vec<f64> = curve.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
        assert!(smooth.windows(2).all(|w| w[1] <= w[0]), "{curve:?}");
        assert!(curve.last().unwrap() < &curve[0]);
    }
}
