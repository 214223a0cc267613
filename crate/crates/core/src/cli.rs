//! Command-line front end. Exit codes: 0 success, 1 verification failure,
//! 2 usage or configuration error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::checkpoint;
use crate::config::ModelConfig;
use crate::error::Error;
use crate::grad::{finite_diff_check, probe_example, probe_model, GradCheckOptions};
use crate::losses::LossSpec;
use crate::model::{build_model, forward};
use crate::profile::{benchmark_latency, breakdown_rows, count_flops, count_params, sig3, stage_breakdown};
use crate::toy::{distill_toy, train_toy, ToyReport, DEFAULT_LR};
use crate::verify::equivalence_suite;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Machine,
}

#[derive(Debug, Parser)]
#[command(
    name = "gconv",
    version,
    about = "Grouped-convolution self-attention encoder: profiling, verification and toy training"
)]
pub struct Cli {
    /// Output format.
    #[arg(long, value_enum, default_value_t = Format::Table, global = true)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
#[group(required = false, multiple = false)]
pub struct ModelSource {
    /// Named preset: bert-base, squeezebert or tiny.
    #[arg(long)]
    pub preset: Option<String>,
    /// Path to a `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ModelSource {
    fn resolve(&self, default: &str) -> Result<ModelConfig, Error> {
        match (&self.preset, &self.config) {
            (Some(name), _) => ModelConfig::preset(name),
            (None, Some(path)) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
                ModelConfig::from_text(&text)
            }
            (None, None) => ModelConfig::preset(default),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Analytic FLOP and parameter counts with the per-stage breakdown.
    Profile {
        #[command(flatten)]
        source: ModelSource,
        #[arg(long, default_value_t = 128)]
        seq_len: usize,
        /// Also time this many forward passes and add time columns.
        #[arg(long, default_value_t = 0)]
        latency_runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Mean forward latency over sequential timed runs.
    Bench {
        #[command(flatten)]
        source: ModelSource,
        #[arg(long, default_value_t = 128)]
        seq_len: usize,
        #[arg(long, default_value_t = 40)]
        runs: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Position-wise FC / conv / grouped conv equivalence suites.
    Equiv {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Certify analytic gradients against central finite differences.
    Gradcheck {
        #[command(flatten)]
        source: ModelSource,
        /// Group count for Q/K/V, FFN2 and FFN3.
        #[arg(long, default_value_t = 1)]
        groups: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = LossChoice::Both)]
        loss: LossChoice,
    },
    /// Train the tiny model on the synthetic task and print the loss curve.
    TrainToy {
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = DEFAULT_LR)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a student against a frozen toy-trained teacher.
    DistillToy {
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = DEFAULT_LR)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build a seeded model and write it as a checkpoint.
    Save {
        #[command(flatten)]
        source: ModelSource,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Read a checkpoint, check it re-serializes byte-identically, and run one forward pass.
    Load {
        path: PathBuf,
        #[arg(long, default_value_t = 8)]
        seq_len: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossChoice {
    Ce,
    Mse,
    Both,
}

struct Outcome {
    text: String,
    machine: serde_json::Value,
    ok: bool,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Validation(_) => EXIT_USAGE,
        _ => EXIT_VERIFY,
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                EXIT_OK
            } else {
                let _ = write!(err, "{}", e.render());
                EXIT_USAGE
            };
        }
    };
    match execute(&cli.command) {
        Ok(o) => {
            let body = match cli.format {
                Format::Table => o.text,
                Format::Machine => format!("{}\n", serde_json::to_string_pretty(&o.machine).unwrap()),
            };
            let _ = out.write_all(body.as_bytes());
            if o.ok {
                EXIT_OK
            } else {
                EXIT_VERIFY
            }
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cmd: &Command) -> Result<Outcome, Error> {
    match cmd {
        Command::Profile { source, seq_len, latency_runs, seed } => profile(source, *seq_len, *latency_runs, *seed),
        Command::Bench { source, seq_len, runs, warmup, seed } => {
            let config = source.resolve("bert-base")?;
            let model = build_model(&config, *seed)?;
            let lat = benchmark_latency(&config, &model, *seq_len, *runs, *warmup, *seed)?;
            let mut text = String::new();
            writeln!(text, "runs {} (warmup {}), seq_len {}", lat.runs, lat.warmup, lat.seq_len).unwrap();
            writeln!(text, "mean {} ms, std {} ms", sig3(lat.mean_ms), sig3(lat.std_ms)).unwrap();
            for (stage, t) in &lat.stage_mean_ms {
                writeln!(text, "  {stage:<18} {:>10} ms", sig3(*t)).unwrap();
            }
            Ok(Outcome { text, machine: serde_json::to_value(&lat).unwrap(), ok: true })
        }
        Command::Equiv { seed, instances } => {
            let r = equivalence_suite(*seed, *instances)?;
            Ok(Outcome { text: r.to_table(), machine: serde_json::to_value(&r).unwrap(), ok: r.passed })
        }
        Command::Gradcheck { source, groups, tol, step, seed, loss } => {
            let base = source.resolve("tiny")?;
            let config = ModelConfig { groups_qkv: *groups, groups_ffn2: *groups, groups_ffn3: *groups, ..base };
            config.validate()?;
            let model = probe_model(&config, *seed)?;
            let ex = probe_example(&config, *seed);
            let opts = GradCheckOptions { step: *step, tol: *tol, sample_seed: *seed, ..Default::default() };
            let mut specs = Vec::new();
            if matches!(loss, LossChoice::Ce | LossChoice::Both) {
                specs.push(("soft_cross_entropy", LossSpec::hard_label(config.num_classes, 0)));
            }
            if matches!(loss, LossChoice::Mse | LossChoice::Both) {
                specs.push(("mse", LossSpec::Mse(0.5)));
            }
            let mut text = String::new();
            let mut reports = Vec::new();
            let mut ok = true;
            for (name, spec) in specs {
                let r = finite_diff_check(&model, &config, &ex, &spec, &opts)?;
                writeln!(text, "== loss: {name} ==\n{}", r.to_table()).unwrap();
                ok &= r.passed;
                reports.push(json!({ "loss": name, "report": r }));
            }
            Ok(Outcome {
                text,
                machine: json!({ "groups": groups, "seed": seed, "checks": reports, "passed": ok }),
                ok,
            })
        }
        Command::TrainToy { steps, lr, seed } => Ok(toy_outcome(train_toy(*steps, *lr, *seed)?)),
        Command::DistillToy { alpha, steps, lr, seed } => Ok(toy_outcome(distill_toy(*alpha, *steps, *lr, *seed)?)),
        Command::Save { source, seed, out } => {
            let config = source.resolve("tiny")?;
            let model = build_model(&config, *seed)?;
            let bytes = checkpoint::save(&config, &model, out)?;
            let text = format!("wrote {bytes} bytes to {}\n", out.display());
            Ok(Outcome { text, machine: json!({ "path": out, "bytes": bytes }), ok: true })
        }
        Command::Load { path, seq_len } => {
            let (config, model) = checkpoint::load(path)?;
            let on_disk = std::fs::read(path).map_err(|source| Error::Storage { path: path.clone(), source })?;
            let idempotent = checkpoint::to_bytes(&config, &model)? == on_disk;
            let p = (*seq_len).clamp(1, config.max_positions);
            let tokens: Vec<usize> = (0..p).map(|i| i % config.vocab_size).collect();
            let logits = forward(&model, &tokens, &vec![0; p], None)?;
            let params = model.enumerate_params();
            let mut text = String::new();
            writeln!(text, "loaded {} ({} bytes, {params} parameters)", path.display(), on_disk.len()).unwrap();
            writeln!(text, "re-serialization byte-identical: {idempotent}").unwrap();
            writeln!(text, "logits on tokens 0..{p}: {:?}", logits.data()).unwrap();
            let machine = json!({
                "path": path,
                "bytes": on_disk.len(),
                "parameters": params,
                "idempotent": idempotent,
                "logits": logits.data(),
                "config": config,
            });
            Ok(Outcome { text, machine, ok: idempotent })
        }
    }
}

fn profile(source: &ModelSource, seq_len: usize, latency_runs: usize, seed: u64) -> Result<Outcome, Error> {
    let config = source.resolve("bert-base")?;
    let flops = count_flops(&config, seq_len)?;
    let params = count_params(&config)?;
    let latency = if latency_runs > 0 {
        let model = build_model(&config, seed)?;
        Some(benchmark_latency(&config, &model, seq_len, latency_runs, 1, seed)?)
    } else {
        None
    };
    let mut text = String::new();
    writeln!(text, "seq_len {seq_len}: {} GFLOPs, {}M parameters", sig3(flops.gflops), sig3(params.millions()))
        .unwrap();
    text.push_str(&stage_breakdown(&flops, latency.as_ref())?);
    let rows = breakdown_rows(&flops, latency.as_ref())?;
    let machine = json!({
        "seq_len": seq_len,
        "total_macs": flops.total_macs,
        "total_flops": flops.total_flops,
        "gflops": flops.gflops,
        "stages": rows,
        "block_layer_macs": flops.block_layer_macs,
        "params": params,
        "mean_latency_ms": latency.as_ref().map(|l| l.mean_ms),
    });
    Ok(Outcome { text, machine, ok: true })
}

fn toy_outcome(r: ToyReport) -> Outcome {
    let mut text = String::new();
    writeln!(text, "{:>5}  {:>10}  {:>10}", "step", "train", "eval").unwrap();
    let every = (r.steps / 20).max(1);
    for (i, e) in r.eval_loss.iter().enumerate() {
        if i % every == 0 || i == r.steps {
            let train = r.train_loss.get(i).map_or(String::from("-"), |t| format!("{t:.6}"));
            writeln!(text, "{i:>5}  {train:>10}  {e:>10.6}").unwrap();
        }
    }
    writeln!(
        text,
        "eval loss {:.6} -> {:.6} ({:.1}% reduction), accuracy {:.3}",
        r.initial_loss,
        r.final_loss,
        100.0 * r.reduction(),
        r.final_accuracy
    )
    .unwrap();
    let mut machine = serde_json::to_value(&r).unwrap();
    machine["reduction"] = json!(r.reduction());
    Outcome { text, machine, ok: true }
}
