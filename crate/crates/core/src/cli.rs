//! Command-line front end: `train`, `eval`, `generate`, `stats`, `merge`.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::analytics::{summarize, summary_csv, summary_table, RoutingTrace};
use crate::checkpoint::{read_checkpoint, save_checkpoint, write_atomic, Checkpoint, Metadata};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::DecoderModel;
use crate::taskgen::{decode, encode, export_tsv, mixture, Split, EOS};
use crate::train::{evaluate, train, EvalMetrics};

#[derive(Debug, Parser)]
#[command(name = "molora", about = "Mixture of LoRA experts on a toy decoder", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train adapters and write a checkpoint plus a metrics CSV.
    Train(TrainArgs),
    /// Report held-out loss and per-task exact match.
    Eval(EvalArgs),
    /// Greedy completion of a prompt.
    Generate(GenerateArgs),
    /// Write routing traces and utilization/affinity summaries.
    Stats(StatsArgs),
    /// Fold attention LoRA into dense weights.
    Merge(MergeArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the training, data and adapter seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable renormalisation of the top-K router weights.
    #[arg(long)]
    pub no_renorm: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Also write a routing trace of the held-out set.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Write a routing trace of the evaluated set to `--out`.
    #[arg(long)]
    pub trace: bool,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Prompt text, e.g. `Cabc=`.
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 16)]
    pub max_new: usize,
    #[arg(long)]
    pub no_renorm: bool,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Require these slots (e.g. `layers.0.ffn.gate`) to be merged.
    #[arg(long = "slot")]
    pub slots: Vec<String>,
}

/// Parse `args` and run the command, writing reports to `out`.
pub fn run<I, S>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            write!(out, "{e}")?;
            return Ok(());
        }
        Err(e) => return Err(Error::config("arguments", e.to_string().trim_end())),
    };
    match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Generate(a) => cmd_generate(&a, out),
        Command::Stats(a) => cmd_stats(&a, out),
        Command::Merge(a) => cmd_merge(&a, out),
    }
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => RunConfig::from_toml(&fs::read_to_string(p)?),
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = load_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.data.seed = seed;
    }
    if common.no_renorm {
        cfg.model.adapter.renormalize = false;
    }
    Ok(cfg)
}

fn corpus(cfg: &RunConfig) -> Result<Split> {
    mixture([cfg.data.samples_per_task; 4], &cfg.data.gen(), cfg.data.seed)
}

/// Restore a checkpoint onto its own base model.
pub fn restore(path: &Path, no_renorm: bool) -> Result<(DecoderModel<f32>, Metadata)> {
    let ckpt = read_checkpoint(path)?;
    let base = DecoderModel::new(ckpt.meta.model.clone(), ckpt.meta.seed)?;
    let mut model = ckpt.restore(&base)?;
    if no_renorm {
        model.set_renormalize(false);
    }
    Ok((model, ckpt.meta))
}

fn write_metrics(out: &mut dyn Write, m: &EvalMetrics) -> Result<()> {
    writeln!(out, "task     n     exact_match")?;
    for (task, em) in &m.exact_match {
        writeln!(out, "{:<8} {:<5} {:.4}", task.name(), m.counts[task], em)?;
    }
    writeln!(
        out,
        "overall  {:<5} {:.4}",
        m.counts.values().sum::<usize>(),
        m.overall_exact_match()
    )?;
    writeln!(out, "loss {:.6}", m.loss)?;
    Ok(())
}

fn write_trace(model: &DecoderModel<f32>, split: &Split, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let trace = RoutingTrace::collect(model, &split.held_out)?;
    let mut buf = Vec::new();
    trace.write_csv(&mut buf)?;
    write_atomic(&dir.join("trace.csv"), &buf)?;
    let rows = summarize(&trace)?;
    let mut csv = Vec::new();
    summary_csv(&rows, &mut csv)?;
    write_atomic(&dir.join("routing_summary.csv"), &csv)?;
    write!(out, "{}", summary_table(&rows))?;
    Ok(())
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve(&a.common)?;
    let split = corpus(&cfg)?;
    let seed = cfg.train.seed;
    let model = DecoderModel::<f32>::new(cfg.model.clone(), seed)?;
    fs::create_dir_all(&a.out)?;
    write_atomic(&a.out.join("config.toml"), cfg.to_toml().as_bytes())?;
    let mut tsv = Vec::new();
    export_tsv(&split.held_out, &mut tsv)?;
    write_atomic(&a.out.join("held_out.tsv"), &tsv)?;
    if cfg.train.epochs > 0 {
        let mut log = BufWriter::new(fs::File::create(a.out.join("metrics.csv"))?);
        let report = train(&model, &split.train, &cfg.train, Some(&mut log))?;
        log.flush()?;
        writeln!(
            out,
            "trained {} steps: loss {:.4} -> {:.4}",
            report.steps.len(),
            report.initial_loss().unwrap_or(f64::NAN),
            report.final_loss(20).unwrap_or(f64::NAN)
        )?;
    } else {
        write_atomic(&a.out.join("metrics.csv"), b"step,lr,loss\n")?;
        writeln!(out, "epochs = 0: saving the initial adapter state")?;
    }
    let ckpt_path = a.out.join("checkpoint.mlra");
    save_checkpoint(&model, &cfg.train, seed, &ckpt_path)?;
    writeln!(out, "checkpoint {}", ckpt_path.display())?;
    write_metrics(out, &evaluate(&model, &split.held_out)?)?;
    if a.trace {
        write_trace(&model, &split, &a.out, out)?;
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve(&a.common)?;
    let (model, _) = restore(&a.checkpoint, a.common.no_renorm)?;
    let split = corpus(&cfg)?;
    write_metrics(out, &evaluate(&model, &split.held_out)?)?;
    if a.trace {
        fs::create_dir_all(&a.out)?;
        write_trace(&model, &split, &a.out, out)?;
    }
    Ok(())
}

fn cmd_generate(a: &GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let (model, _) = restore(&a.checkpoint, a.no_renorm)?;
    let prompt = encode(&a.prompt)?;
    let seq = model.generate(&prompt, a.max_new, Some(EOS))?;
    let mut completion = &seq[prompt.len()..];
    if completion.last() == Some(&EOS) {
        completion = &completion[..completion.len() - 1];
    }
    writeln!(out, "{}", decode(completion))?;
    Ok(())
}

fn cmd_stats(a: &StatsArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve(&a.common)?;
    let (model, _) = restore(&a.checkpoint, a.common.no_renorm)?;
    fs::create_dir_all(&a.out)?;
    write_trace(&model, &corpus(&cfg)?, &a.out, out)
}

fn cmd_merge(a: &MergeArgs, out: &mut dyn Write) -> Result<()> {
    let (model, meta) = restore(&a.checkpoint, false)?;
    let (merged, skipped) = model.merge_lora()?;
    let refused: Vec<String> = a.slots.iter().filter(|s| skipped.contains(s)).cloned().collect();
    if !refused.is_empty() {
        return Err(Error::MergeRefused { slots: refused });
    }
    let dense = merged.dense_slots();
    if let Some(unknown) = a
        .slots
        .iter()
        .find(|s| !dense.iter().any(|(n, _)| n == &format!("{s}.weight")))
    {
        return Err(Error::config("slot", format!("no such slot {unknown}")));
    }
    fs::create_dir_all(&a.out)?;
    let path = a.out.join("merged.mlra");
    write_atomic(&path, &Checkpoint::from_tensors(&dense, meta).to_bytes()?)?;
    writeln!(out, "merged {} attention slots into {}", dense.len(), path.display())?;
    writeln!(
        out,
        "skipped {} MoLoRA slots (token-routed, not mergeable):",
        skipped.len()
    )?;
    for s in skipped {
        writeln!(out, "  {s}")?;
    }
    Ok(())
}
