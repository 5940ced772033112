//! `hgf`: train, evaluate, export and analyse Hybrid Gated Flow models.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hgf_core::analysis::{calculator_report, loss_curve_csv};
use hgf_core::checkpoint::write_atomic;
use hgf_core::data::{synthetic_stories, Batcher, Corpus};
use hgf_core::gradcheck::gradcheck;
use hgf_core::quant::{pack_trits, unpack_trits};
use hgf_core::training::evaluate;
use hgf_core::{ArchMode, Checkpoint, HgfModel, MetricsRecord, ModelConfig, PackingMode, RunConfig, Trainer};

/// Bytes of generated stories used when no `--corpus` is given.
const SYNTHETIC_BYTES: usize = 400_000;

#[derive(Parser)]
#[command(
    name = "hgf",
    version,
    about = "Hybrid Gated Flow: ternary transformers with gated low-rank correction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing JSON-lines metrics and checkpoints.
    Train(TrainArgs),
    /// Mean validation loss of a checkpoint, printed as JSON.
    Eval(EvalArgs),
    /// Replace quantized backbone weights by packed trits and freeze gates.
    ExportTernary(ExportArgs),
    /// Memory breakdown and every closed-form calculator, as one JSON document.
    Report(ReportArgs),
    /// Finite-difference gradient checks; exits nonzero on failure.
    Gradcheck(GradcheckArgs),
    /// Pack a whitespace-separated trit file into bytes, or unpack it back.
    Pack(PackArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Flat TOML file of model and training fields. Without it the desk-scale
    /// model (d=64, 2 layers, 2 heads, r=8, byte vocabulary, ctx 64) is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Architecture: baseline, bitnet, diff-only, hgf or hgf-qk.
    #[arg(long)]
    mode: Option<ArchMode>,
    /// Global seed for initialization, the data split and batching.
    #[arg(long)]
    seed: Option<u64>,
}

impl ModelArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_path(p).with_context(|| format!("reading config {}", p.display()))?,
            None => desk_config(),
        };
        if let Some(mode) = self.mode {
            cfg.model.mode = mode;
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn desk_config() -> RunConfig {
    let mut cfg = RunConfig {
        model: ModelConfig::desk(ArchMode::HgfFull),
        ..RunConfig::default()
    };
    cfg.train.total_steps = 500;
    cfg.train.reg_start = 100;
    cfg.train.gate_freeze = 200;
    cfg.train.micro_batch = 8;
    cfg.train.accumulation_steps = 2;
    cfg.train.eval_every = 100;
    cfg
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Number of optimizer steps; overrides `total_steps`.
    #[arg(long)]
    steps: Option<usize>,
    /// Text file to train on, tokenized as bytes. Defaults to generated stories.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// JSON-lines metrics file.
    #[arg(long, default_value = "metrics.jsonl")]
    metrics_out: PathBuf,
    /// Checkpoint path, rewritten every `checkpoint_every` steps and at the end.
    #[arg(long, default_value = "hgf.ckpt")]
    ckpt_out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: PathBuf,
    /// Text file to evaluate on. Defaults to generated stories.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Seed for the split and validation slice; defaults to the checkpoint's.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    ckpt_out: PathBuf,
    /// Trit layout: 2bit or 5pb.
    #[arg(long, default_value = "2bit")]
    packing: PackingMode,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Trit layout used for ternary components: 2bit or 5pb.
    #[arg(long, default_value = "2bit")]
    packing: PackingMode,
    /// Metrics file from `train` to export as a CSV loss curve.
    #[arg(long, requires = "csv_out")]
    metrics: Option<PathBuf>,
    #[arg(long, requires = "metrics")]
    csv_out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Relative tolerance for the finite-difference groups.
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

#[derive(Args)]
struct PackArgs {
    /// Input file: trits as text, or packed bytes with `--unpack`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Trit layout: 2bit or 5pb.
    #[arg(long, default_value = "2bit")]
    packing: PackingMode,
    /// Decode packed bytes back to text; needs `--count`.
    #[arg(long, requires = "count")]
    unpack: bool,
    /// Number of trits held by the packed input.
    #[arg(long)]
    count: Option<usize>,
}

fn load_corpus(path: Option<&Path>, cfg: &RunConfig) -> Result<Corpus> {
    let text = match path {
        Some(p) => std::fs::read(p).with_context(|| format!("reading corpus {}", p.display()))?,
        None => synthetic_stories(SYNTHETIC_BYTES, cfg.train.seed).into_bytes(),
    };
    if cfg.model.vocab_size < hgf_core::data::BYTE_VOCAB {
        bail!("vocab_size {} cannot hold the byte vocabulary", cfg.model.vocab_size);
    }
    Ok(Corpus::from_bytes(
        &text,
        cfg.train.val_fraction,
        cfg.model.ctx_len + 1,
        cfg.train.seed,
    )?)
}

fn metrics_text(records: &[MetricsRecord]) -> String {
    records.iter().map(|r| r.to_json_line() + "\n").collect()
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = args.model.resolve()?;
    if let Some(steps) = args.steps {
        cfg.train.total_steps = steps;
    }
    cfg.validate()?;
    let corpus = load_corpus(args.corpus.as_deref(), &cfg)?;
    let model = HgfModel::init(cfg.model.clone(), cfg.train.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    Checkpoint::from_model(&trainer.model, &cfg.train, 0).save(&args.ckpt_out)?;
    write_atomic(&args.metrics_out, b"")?;

    let every = cfg.train.checkpoint_every;
    let mut so_far: Vec<MetricsRecord> = Vec::new();
    let records = trainer.run(&corpus, |t, rec| {
        so_far.push(rec.clone());
        eprintln!(
            "step {:>5}  loss {:.4}  gate {:.5}{}",
            rec.step,
            rec.train_loss,
            rec.gate_mean,
            rec.val_loss.map(|v| format!("  val {v:.4}")).unwrap_or_default()
        );
        if every > 0 && t.step % every == 0 {
            write_atomic(&args.metrics_out, metrics_text(&so_far).as_bytes())?;
            Checkpoint::from_model(&t.model, &t.cfg, t.step).save(&args.ckpt_out)?;
        }
        Ok(())
    })?;
    write_atomic(&args.metrics_out, metrics_text(&records).as_bytes())?;
    Checkpoint::from_model(&trainer.model, &cfg.train, trainer.step).save(&args.ckpt_out)?;
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt).with_context(|| format!("loading {}", args.ckpt.display()))?;
    let model = ckpt.to_model()?;
    let mut cfg = RunConfig {
        model: ckpt.model.clone(),
        train: ckpt.train.clone(),
    };
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let corpus = load_corpus(args.corpus.as_deref(), &cfg)?;
    let batcher = Batcher {
        ctx_len: cfg.model.ctx_len,
        micro_batch: cfg.train.micro_batch,
    };
    let val = batcher.val_slice(&corpus, cfg.train.seed, cfg.train.eval_batches.max(1))?;
    let loss = evaluate(&model, &val)?;
    let out = serde_json::json!({
        "mean_loss": loss,
        "batches": val.len(),
        "step": ckpt.step,
        "mode": cfg.model.mode,
        "exported": model.is_exported(),
    });
    println!("{out}");
    Ok(())
}

fn export(args: ExportArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt).with_context(|| format!("loading {}", args.ckpt.display()))?;
    let exported = ckpt.to_model()?.export_ternary(args.packing)?;
    Checkpoint::from_model(&exported, &ckpt.train, ckpt.step).save(&args.ckpt_out)?;
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let cfg = args.model.resolve()?;
    let doc = calculator_report(&cfg.model, args.packing)?;
    println!("{}", serde_json::to_string_pretty(&doc)?);
    if let (Some(metrics), Some(csv)) = (args.metrics, args.csv_out) {
        let text = std::fs::read_to_string(&metrics).with_context(|| format!("reading {}", metrics.display()))?;
        let records: Vec<MetricsRecord> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", metrics.display(), i + 1)))
            .collect::<Result<_>>()?;
        write_atomic(&csv, loss_curve_csv(&records).as_bytes())?;
    }
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<()> {
    let cfg = args.model.resolve()?;
    let report = gradcheck(cfg.train.seed, args.tolerance)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    let failures = report.failures();
    if !failures.is_empty() {
        bail!("gradient check failed: {}", failures.join(", "));
    }
    Ok(())
}

fn pack(args: PackArgs) -> Result<()> {
    let input = std::fs::read(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let out = if args.unpack {
        let trits = unpack_trits(&input, args.count.expect("clap requires count"), args.packing)?;
        let words: Vec<String> = trits.iter().map(|t| t.to_string()).collect();
        (words.join(" ") + "\n").into_bytes()
    } else {
        let text = String::from_utf8(input).context("trit file is not text")?;
        let trits = text
            .split_whitespace()
            .enumerate()
            .map(|(i, w)| match w {
                "-1" => Ok(-1),
                "0" => Ok(0),
                "1" | "+1" => Ok(1),
                _ => bail!("token {} ({w:?}) is not a trit", i + 1),
            })
            .collect::<Result<Vec<i8>>>()?;
        pack_trits(&trits, args.packing)?
    };
    write_atomic(&args.output, &out)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::ExportTernary(a) => export(a),
        Command::Report(a) => report(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Pack(a) => pack(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
