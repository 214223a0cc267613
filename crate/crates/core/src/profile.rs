//! Analytic MAC/parameter accounting and a sequential latency harness.
//!
//! Only multiply-accumulates are counted. Embedding lookups, softmax,
//! GELU, layer norm, residual and bias adds cost nothing. One MAC is two FLOPs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{LayerRole, ModelConfig};
use crate::error::{Error, Result};
use crate::model::{forward_timed, ModelWeights, Stage, StageTimes};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageFlops {
    pub stage: &'static str,
    pub macs: u64,
    pub flops: u64,
    pub flop_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopReport {
    pub config: ModelConfig,
    pub seq_len: usize,
    /// One row per [`Stage`], in [`Stage::ALL`] order.
    pub stages: Vec<StageFlops>,
    /// MACs of each layer role inside one encoder block (all blocks are identical).
    pub block_layer_macs: BTreeMap<&'static str, u64>,
    pub total_macs: u64,
    pub total_flops: u64,
    pub gflops: f64,
}

impl FlopReport {
    pub fn stage(&self, stage: Stage) -> &StageFlops {
        &self.stages[Stage::ALL.iter().position(|s| *s == stage).unwrap()]
    }
}

/// Attention-matmul MACs of one block: `P²·C` for QKᵀ plus `P²·C` for A·V, summed over heads.
pub fn attention_macs(config: &ModelConfig, seq_len: usize) -> u64 {
    2 * (seq_len * seq_len * config.channels) as u64
}

pub fn count_flops(config: &ModelConfig, seq_len: usize) -> Result<FlopReport> {
    config.validate()?;
    if seq_len == 0 || seq_len > config.max_positions {
        return Err(Error::config(format!("seq_len {seq_len} outside 1..={} (max_positions)", config.max_positions)));
    }
    let blocks = config.num_blocks as u64;
    let block_layer_macs: BTreeMap<&'static str, u64> =
        LayerRole::ALL.iter().map(|&r| (r.name(), config.layer_shape(r).macs(seq_len))).collect();
    let role = |r: LayerRole| block_layer_macs[r.name()];
    let qkv = blocks * (role(LayerRole::Query) + role(LayerRole::Key) + role(LayerRole::Value));
    let ffn = blocks * (role(LayerRole::Ffn1) + role(LayerRole::Ffn2) + role(LayerRole::Ffn3));
    let attn = blocks * attention_macs(config, seq_len);
    // The pooler reads only position 0.
    let head = config.pooler_shape().macs(1) + config.classifier_shape().macs(1);
    let per_stage = [
        (Stage::Embedding, 0),
        (Stage::QkvProjection, qkv),
        (Stage::AttentionMatmul, attn),
        (Stage::Ffn, ffn),
        (Stage::Classifier, head),
    ];
    let total_macs: u64 = per_stage.iter().map(|(_, m)| m).sum();
    let stages = per_stage
        .iter()
        .map(|&(stage, macs)| StageFlops {
            stage: stage.key(),
            macs,
            flops: 2 * macs,
            flop_pct: 100.0 * macs as f64 / total_macs as f64,
        })
        .collect();
    Ok(FlopReport {
        config: config.clone(),
        seq_len,
        stages,
        block_layer_macs,
        total_macs,
        total_flops: 2 * total_macs,
        gflops: 2.0 * total_macs as f64 / 1e9,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamReport {
    pub embeddings: u64,
    /// Per block: kernel+bias count of each layer role, plus `ln_attn` and `ln_out`.
    pub blocks: Vec<BTreeMap<&'static str, u64>>,
    pub pooler: u64,
    pub classifier: u64,
    pub total: u64,
}

impl ParamReport {
    pub fn millions(&self) -> f64 {
        self.total as f64 / 1e6
    }
}

/// Closed-form parameter count, written independently of the tensor inventory.
pub fn count_params(config: &ModelConfig) -> Result<ParamReport> {
    config.validate()?;
    let c = config.channels as u64;
    let embeddings = (config.vocab_size as u64 + config.max_positions as u64 + 2) * c + 2 * c;
    let layer = |c_in: usize, c_out: usize, g: usize| (c_out * c_in / g + c_out) as u64;
    let (ci, f) = (config.channels, config.ffn_inner);
    let block: BTreeMap<&'static str, u64> = [
        ("attn.q", layer(ci, ci, config.groups_qkv)),
        ("attn.k", layer(ci, ci, config.groups_qkv)),
        ("attn.v", layer(ci, ci, config.groups_qkv)),
        ("ffn1", layer(ci, ci, config.groups_ffn1)),
        ("ffn2", layer(ci, f, config.groups_ffn2)),
        ("ffn3", layer(f, ci, config.groups_ffn3)),
        ("ln_attn", 2 * c),
        ("ln_out", 2 * c),
    ]
    .into_iter()
    .collect();
    let blocks = vec![block; config.num_blocks];
    let pooler = layer(ci, ci, 1);
    let classifier = layer(ci, config.num_classes, 1);
    let total = embeddings + blocks.iter().flat_map(|b| b.values()).sum::<u64>() + pooler + classifier;
    Ok(ParamReport { embeddings, blocks, pooler, classifier, total })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub config: ModelConfig,
    pub seq_len: usize,
    pub runs: usize,
    pub warmup: usize,
    pub seed: u64,
    pub run_ms: Vec<f64>,
    pub mean_ms: f64,
    pub std_ms: f64,
    /// Mean per-run time of each stage, keyed by [`Stage::key`].
    pub stage_mean_ms: BTreeMap<&'static str, f64>,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Fixed seeded token ids for timing runs.
pub fn bench_tokens(config: &ModelConfig, seq_len: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..seq_len).map(|_| rng.random_range(0..config.vocab_size)).collect()
}

/// `warmup` untimed passes, then `runs` timed passes, one after another on
/// the calling thread.
pub fn benchmark_latency(
    config: &ModelConfig,
    model: &ModelWeights,
    seq_len: usize,
    runs: usize,
    warmup: usize,
    seed: u64,
) -> Result<LatencyReport> {
    if runs == 0 {
        return Err(Error::Validation("runs must be at least 1".into()));
    }
    if seq_len == 0 || seq_len > config.max_positions {
        return Err(Error::config(format!("seq_len {seq_len} outside 1..={}", config.max_positions)));
    }
    let tokens = bench_tokens(config, seq_len, seed);
    let segments = vec![0; seq_len];
    let mut scratch = StageTimes::default();
    for _ in 0..warmup {
        forward_timed(model, &tokens, &segments, None, &mut scratch)?;
    }
    let mut stage_totals = StageTimes::default();
    let mut run_ms = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        std::hint::black_box(forward_timed(model, &tokens, &segments, None, &mut stage_totals)?);
        run_ms.push(ms(start.elapsed()));
    }
    let n = runs as f64;
    let mean_ms = run_ms.iter().sum::<f64>() / n;
    let std_ms =
        if runs > 1 { (run_ms.iter().map(|t| (t - mean_ms).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    let stage_mean_ms = Stage::ALL.iter().map(|&s| (s.key(), ms(stage_totals.get(s)) / n)).collect();
    Ok(LatencyReport { config: config.clone(), seq_len, runs, warmup, seed, run_ms, mean_ms, std_ms, stage_mean_ms })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BreakdownRow {
    pub stage: &'static str,
    #[serde(skip)]
    pub label: &'static str,
    pub macs: u64,
    pub flops: u64,
    pub flop_pct: f64,
    pub time_ms: Option<f64>,
    pub time_pct: Option<f64>,
}

/// The five stage rows, with time columns when `latency` is given.
pub fn breakdown_rows(flops: &FlopReport, latency: Option<&LatencyReport>) -> Result<Vec<BreakdownRow>> {
    if let Some(lat) = latency {
        if lat.config != flops.config || lat.seq_len != flops.seq_len {
            return Err(Error::Validation(format!(
                "latency report (seq_len {}) and FLOP report (seq_len {}) describe different configurations",
                lat.seq_len, flops.seq_len
            )));
        }
    }
    let stage_time_total: f64 = latency.map(|l| l.stage_mean_ms.values().sum()).unwrap_or(0.0);
    Ok(Stage::ALL
        .iter()
        .map(|&s| {
            let f = flops.stage(s);
            let time_ms = latency.map(|l| l.stage_mean_ms[s.key()]);
            BreakdownRow {
                stage: s.key(),
                label: s.label(),
                macs: f.macs,
                flops: f.flops,
                flop_pct: f.flop_pct,
                time_ms,
                time_pct: time_ms.map(|t| if stage_time_total > 0.0 { 100.0 * t / stage_time_total } else { 0.0 }),
            }
        })
        .collect())
}

/// `x` with three significant digits; zero prints as `0.00`.
pub fn sig3(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x:.2}");
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (2 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

/// Aligned text table in the layout of a stage-by-stage cost breakdown.
pub fn stage_breakdown(flops: &FlopReport, latency: Option<&LatencyReport>) -> Result<String> {
    let rows = breakdown_rows(flops, latency)?;
    let w = rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
    let mut s = String::new();
    let timed = latency.is_some();
    write!(s, "{:<w$}  {:>8}", "Stage", "FLOPs").unwrap();
    if timed {
        write!(s, "  {:>8}  {:>10}", "Time", "Time (ms)").unwrap();
    }
    s.push('\n');
    for r in &rows {
        write!(s, "{:<w$}  {:>7}%", r.label, sig3(r.flop_pct)).unwrap();
        if let (Some(t), Some(p)) = (r.time_ms, r.time_pct) {
            write!(s, "  {:>7}%  {:>10}", sig3(p), sig3(t)).unwrap();
        }
        s.push('\n');
    }
    Ok(s)
}
