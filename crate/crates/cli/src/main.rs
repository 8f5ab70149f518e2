//! Command-line front end: pretraining, RTN sweeps, LR-QAT and LSQ runs,
//! fusion, evaluation, memory reports and ablations.

mod options;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use lrqat_core::lrqat::adapter_ratio;
use lrqat_core::nanollm::{load_corpus, synthetic_text, Corpus, Model};
use lrqat_core::trainer::{
    self, evaluate, fuse_model, load_model, memory_report, save_model, write_metrics_csv,
    RunReport, TrainConfig,
};
use serde::Serialize;

use options::{require_file, ConfigArgs};

/// Invalid input (exit code 2) or a failure while running (exit code 1).
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<lrqat_core::Error> for Failure {
    fn from(e: lrqat_core::Error) -> Self {
        match e {
            lrqat_core::Error::Config(msg) => Failure::Usage(msg),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

#[derive(Parser)]
#[command(name = "lrqat", version, about = "Low-rank quantization-aware training on a toy byte-level LM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Outputs {
    /// Write the JSON report here
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write per-step metrics (step,lr,train_loss,val_ppl) here
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-precision model
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint to write
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        outputs: Outputs,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Round-to-nearest with min-max and every Lp estimator
    Rtn {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Write the best RTN model here
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Extended pretraining with LR-QAT; writes the fused model
    TrainLrqat {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the unfused model (adapters and Φ₀)
        #[arg(long)]
        simulated_out: Option<PathBuf>,
        #[command(flatten)]
        outputs: Outputs,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Full-model QAT baseline; writes the fused model
    TrainLsq {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        simulated_out: Option<PathBuf>,
        #[command(flatten)]
        outputs: Outputs,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Validation perplexity of a checkpoint
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fuse a simulated LR-QAT or LSQ checkpoint into integer weights
    Fuse {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic training-memory report for the configured model shapes
    MemReport {
        /// Disable quantizer recomputation in the backward pass
        #[arg(long)]
        no_checkpointing: bool,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// LR-QAT at several ranks
    AblateRank {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
        ranks: Vec<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// LR-QAT for every Φ₀ format with LoRA and LoftQ initialization
    AblateDowncast {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write a synthetic English-like corpus
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1_000_000)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn open_corpus(path: &Path, cfg: &TrainConfig) -> Result<Corpus, Failure> {
    require_file(path, "corpus")?;
    Ok(load_corpus(path, cfg.seq_len, cfg.split_fraction)?)
}

fn open_model(path: &Path) -> Result<Model, Failure> {
    require_file(path, "model checkpoint")?;
    load_model(path)
        .with_context(|| format!("loading {}", path.display()))
        .map_err(Failure::Runtime)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_outputs(outputs: &Outputs, report: &RunReport) -> anyhow::Result<()> {
    if let Some(p) = &outputs.report {
        write_json(p, report)?;
    }
    if let Some(p) = &outputs.metrics {
        write_metrics_csv(p, &report.metrics)?;
    }
    Ok(())
}

fn print_run(report: &RunReport) {
    println!("mode           {}", report.mode);
    println!("steps          {}", report.steps);
    if let Some(e) = &report.estimator {
        println!("estimator      {e}");
    }
    if let Some(p) = report.rtn_ppl {
        println!("rtn ppl        {p:.4}");
    }
    println!("initial ppl    {:.4}", report.initial_ppl);
    println!("final ppl      {:.4}", report.final_ppl);
    if let Some(p) = report.fused_ppl {
        println!("fused ppl      {p:.4}");
    }
    println!("trainable      {}", report.trainable_params);
    println!("elapsed        {:.1}s", report.elapsed_secs);
}

fn model_cfg(args: &ConfigArgs, model: &Model) -> Result<TrainConfig, Failure> {
    let mut cfg = args.resolve()?;
    cfg.model = model.config;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Pretrain {
            corpus,
            out,
            outputs,
            cfg,
        } => {
            let cfg = cfg.resolve()?;
            let corpus = open_corpus(&corpus, &cfg)?;
            let (model, report) = trainer::run_pretrain(&corpus, &cfg)?;
            save_model(&model, &out)?;
            write_outputs(&outputs, &report)?;
            print_run(&report);
        }
        Command::Rtn {
            model,
            corpus,
            out,
            report,
            cfg,
        } => {
            let args = cfg;
            let cfg = args.resolve()?;
            let corpus = open_corpus(&corpus, &cfg)?;
            let fp = open_model(&model)?;
            let cfg = model_cfg(&args, &fp)?;
            let rtn = trainer::run_rtn(&fp, &corpus, &cfg)?;
            for row in &rtn.rows {
                println!("{:<8} ppl {:.4}", row.estimator, row.ppl);
            }
            println!("best     {} ppl {:.4}", rtn.best_label, rtn.best_ppl);
            if let Some(p) = out {
                save_model(&trainer::rtn_model(&fp, &cfg, &rtn.best)?, &p)?;
            }
            if let Some(p) = report {
                write_json(&p, &rtn)?;
            }
        }
        Command::TrainLrqat {
            model,
            corpus,
            out,
            simulated_out,
            outputs,
            cfg,
        } => train_qat(Qat::LrQat, &model, &corpus, &out, simulated_out, &outputs, &cfg)?,
        Command::TrainLsq {
            model,
            corpus,
            out,
            simulated_out,
            outputs,
            cfg,
        } => train_qat(Qat::Lsq, &model, &corpus, &out, simulated_out, &outputs, &cfg)?,
        Command::Eval { model, corpus, cfg } => {
            let args = cfg;
            let m = open_model(&model)?;
            let cfg = model_cfg(&args, &m)?;
            let corpus = open_corpus(&corpus, &cfg)?;
            let ppl = evaluate(&m, &corpus, &cfg)?;
            println!("ppl {ppl}");
        }
        Command::Fuse { model, out } => {
            let m = open_model(&model)?;
            let fused = fuse_model(&m)?;
            save_model(&fused, &out)?;
            println!("fused {} layers into {}", fused.linears().len(), out.display());
        }
        Command::MemReport {
            no_checkpointing,
            report,
            cfg,
        } => {
            let cfg = cfg.resolve()?;
            let shapes: Vec<(usize, usize)> = cfg
                .model
                .linear_shapes()
                .into_iter()
                .map(|(_, m, k)| (m, k))
                .collect();
            let rep = memory_report(&shapes, &cfg.spec(), cfg.rank, !no_checkpointing);
            print!("{}", rep.to_text());
            if let (Some(lr), Some(lsq)) = (
                rep.mode(&format!("lrqat-{}", cfg.downcast_format().label())),
                rep.mode("lsq"),
            ) {
                let ratio = lr.bytes.trainable_and_optimizer() as f64
                    / lsq.bytes.trainable_and_optimizer() as f64;
                println!("lrqat/lsq trainable+optimizer bytes: {:.4}%", 100.0 * ratio);
            }
            println!(
                "adapter ratio r(m+k)/(mk) at m=k=4096, r=32: {}%",
                100.0 * adapter_ratio(4096, 4096, 32)
            );
            if let Some(p) = report {
                write_json(&p, &rep)?;
            }
        }
        Command::AblateRank {
            model,
            corpus,
            ranks,
            report,
            cfg,
        } => {
            let args = cfg;
            let pre = args.resolve()?;
            let corpus = open_corpus(&corpus, &pre)?;
            let fp = open_model(&model)?;
            let cfg = model_cfg(&args, &fp)?;
            for &r in &ranks {
                TrainConfig { rank: r, ..cfg.clone() }.validate()?;
            }
            let rows = trainer::ablate_rank(&fp, &corpus, &cfg, &ranks)?;
            print_ablation(&rows);
            if let Some(p) = report {
                write_json(&p, &rows)?;
            }
        }
        Command::AblateDowncast {
            model,
            corpus,
            report,
            cfg,
        } => {
            let args = cfg;
            let pre = args.resolve()?;
            let corpus = open_corpus(&corpus, &pre)?;
            let fp = open_model(&model)?;
            let cfg = model_cfg(&args, &fp)?;
            let rows = trainer::ablate_downcast(&fp, &corpus, &cfg)?;
            print_ablation(&rows);
            if let Some(p) = report {
                write_json(&p, &rows)?;
            }
        }
        Command::GenCorpus { out, bytes, seed } => {
            fs::write(&out, synthetic_text(seed, bytes))
                .with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {bytes} bytes to {}", out.display());
        }
    }
    Ok(())
}

enum Qat {
    LrQat,
    Lsq,
}

fn train_qat(
    kind: Qat,
    model: &Path,
    corpus: &Path,
    out: &Path,
    simulated_out: Option<PathBuf>,
    outputs: &Outputs,
    args: &ConfigArgs,
) -> Result<(), Failure> {
    let pre = args.resolve()?;
    let corpus = open_corpus(corpus, &pre)?;
    let fp = open_model(model)?;
    let cfg = model_cfg(args, &fp)?;
    let outcome = match kind {
        Qat::LrQat => trainer::run_lrqat(&fp, &corpus, &cfg)?,
        Qat::Lsq => trainer::run_lsq(&fp, &corpus, &cfg)?,
    };
    save_model(&outcome.fused, out)?;
    if let Some(p) = simulated_out {
        save_model(&outcome.simulated, &p)?;
    }
    write_outputs(outputs, &outcome.report)?;
    print_run(&outcome.report);
    Ok(())
}

fn print_ablation(rows: &[trainer::AblationRow]) {
    println!("{:>5} {:>8} {:>12} {:>12} {:>12}", "rank", "downcast", "init", "initial", "final");
    for r in rows {
        println!(
            "{:>5} {:>8} {:>12} {:>12.4} {:>12.4}",
            r.rank, r.downcast, r.init, r.initial_ppl, r.final_ppl
        );
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
