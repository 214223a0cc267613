//! Randomized equivalence suites over the three layer implementations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::LayerShape;
use crate::error::Result;
use crate::layers::{conv1d, grouped_conv1d, positionwise_fc, LayerWeights};
use crate::tensor::Tensor;

pub const SPLIT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivCase {
    pub name: String,
    pub instances: usize,
    /// `None` when the comparison must be bitwise.
    pub tolerance: Option<f64>,
    pub max_abs_diff: f64,
    pub failures: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivReport {
    pub seed: u64,
    pub cases: Vec<EquivCase>,
    pub passed: bool,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_layer(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, groups: usize, k: usize) -> LayerWeights {
    let kernel = random_tensor(rng, &[c_out, c_in / groups, k]);
    let bias = random_tensor(rng, &[c_out]);
    LayerWeights::new(kernel, bias, groups).unwrap()
}

/// Runs each group as its own dense [`conv1d`] on its input slice and
/// concatenates the outputs.
pub fn split_run_concat(f: &Tensor, w: &LayerWeights) -> Result<Tensor> {
    let g = w.groups();
    let (cin_g, cout_g, k) = (w.in_channels() / g, w.out_channels() / g, w.kernel_size());
    let mut parts = Vec::with_capacity(g);
    for gi in 0..g {
        let rows = cout_g * cin_g * k;
        let kernel = Tensor::new(vec![cout_g, cin_g, k], w.kernel().data()[gi * rows..(gi + 1) * rows].to_vec())?;
        let bias = Tensor::new(vec![cout_g], w.bias().data()[gi * cout_g..(gi + 1) * cout_g].to_vec())?;
        let part = LayerWeights::new(kernel, bias, 1)?;
        parts.push(conv1d(&f.column_slice(gi * cin_g, cin_g)?, &part)?);
    }
    Tensor::concat_columns(&parts)
}

struct Tally {
    case: EquivCase,
}

impl Tally {
    fn new(name: impl Into<String>, tolerance: Option<f64>) -> Self {
        Self {
            case: EquivCase {
                name: name.into(),
                instances: 0,
                tolerance,
                max_abs_diff: 0.0,
                failures: 0,
                passed: true,
            },
        }
    }

    fn record(&mut self, a: &Tensor, b: &Tensor) {
        let diff = a.max_abs_diff(b);
        let ok = match self.case.tolerance {
            None => a.bitwise_eq(b),
            Some(t) => diff <= t,
        };
        self.case.instances += 1;
        self.case.max_abs_diff = self.case.max_abs_diff.max(diff);
        if !ok {
            self.case.failures += 1;
            self.case.passed = false;
        }
    }

    fn record_exact(&mut self, ok: bool) {
        self.case.instances += 1;
        if !ok {
            self.case.failures += 1;
            self.case.passed = false;
        }
    }
}

/// Bitwise and tolerance equivalences between the layer kinds, plus exact
/// 1/G cost scaling, over `instances` random shapes per case.
pub fn equivalence_suite(seed: u64, instances: usize) -> Result<EquivReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();

    let mut t = Tally::new("positionwise_fc == conv1d(K=1)", None);
    for _ in 0..instances {
        let (p, ci, co) = (rng.random_range(1..17), rng.random_range(1..25), rng.random_range(1..25));
        let w = random_layer(&mut rng, ci, co, 1, 1);
        let f = random_tensor(&mut rng, &[p, ci]);
        t.record(&positionwise_fc(&f, &w)?, &conv1d(&f, &w)?);
    }
    cases.push(t.case);

    let mut t = Tally::new("grouped_conv1d(G=1) == conv1d", None);
    for _ in 0..instances {
        let (p, ci, co) = (rng.random_range(1..17), rng.random_range(1..25), rng.random_range(1..25));
        let k = [1, 3, 5][rng.random_range(0..3)];
        let w = random_layer(&mut rng, ci, co, 1, k);
        let f = random_tensor(&mut rng, &[p, ci]);
        t.record(&grouped_conv1d(&f, &w)?, &conv1d(&f, &w)?);
    }
    cases.push(t.case);

    for g in [2, 4] {
        let mut split = Tally::new(format!("grouped_conv1d(G={g}) ~ split-run-concat"), Some(SPLIT_TOLERANCE));
        let mut dense = Tally::new(format!("grouped_conv1d(G={g}) ~ block-diagonal dense"), Some(SPLIT_TOLERANCE));
        for _ in 0..instances {
            let (ci, co) = (g * rng.random_range(1..7), g * rng.random_range(1..7));
            let p = rng.random_range(1..17);
            let k = [1, 3][rng.random_range(0..2)];
            let w = random_layer(&mut rng, ci, co, g, k);
            let f = random_tensor(&mut rng, &[p, ci]);
            let out = grouped_conv1d(&f, &w)?;
            split.record(&out, &split_run_concat(&f, &w)?);
            dense.record(&out, &conv1d(&f, &w.to_dense())?);
        }
        cases.push(split.case);
        cases.push(dense.case);
    }

    for g in [2, 3, 4, 6] {
        let mut t = Tally::new(format!("G={g} weights and MACs are dense/G"), Some(0.0));
        for _ in 0..instances.max(50) {
            let (ci, co) = (g * rng.random_range(1..65), g * rng.random_range(1..65));
            let k = [1, 3, 5][rng.random_range(0..3)];
            let p = rng.random_range(1..257);
            let grouped = LayerShape { c_in: ci, c_out: co, groups: g, kernel_size: k };
            let full = LayerShape { groups: 1, ..grouped };
            let weights_ok = grouped.kernel_len() * g == full.kernel_len();
            let macs_ok = grouped.macs(p) * g as u64 == full.macs(p);
            let stored =
                LayerWeights::zeros(ci, co, g, k)?.kernel_len() * g == LayerWeights::zeros(ci, co, 1, k)?.kernel_len();
            t.record_exact(weights_ok && macs_ok && stored);
        }
        cases.push(t.case);
    }

    let passed = cases.iter().all(|c| c.passed);
    Ok(EquivReport { seed, cases, passed })
}

impl EquivReport {
    pub fn to_table(&self) -> String {
        use std::fmt::Write as _;
        let w = self.cases.iter().map(|c| c.name.len()).max().unwrap_or(4);
        let mut s = String::new();
        for c in &self.cases {
            let bound = match c.tolerance {
                None => "bitwise".to_string(),
                Some(0.0) => "exact".to_string(),
                Some(t) => format!("<= {t:e}"),
            };
            writeln!(
                s,
                "{:<w$}  {:>4} instances  {:>10}  max |diff| {:.3e}  {}",
                c.name,
                c.instances,
                bound,
                c.max_abs_diff,
                if c.passed { "PASS" } else { "FAIL" }
            )
            .unwrap();
        }
        writeln!(s, "equivalence suite (seed {}): {}", self.seed, if self.passed { "PASS" } else { "FAIL" }).unwrap();
        s
    }
}
