use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moe_lab::harness::config::{ExperimentConfig, Overrides};
use moe_lab::harness::experiment::{analyze, compare, eval_batch, model_flops, train_model};
use moe_lab::harness::model::SeqModel;
use moe_lab::harness::task::Task;
use moe_lab::metrics::{render_report, RunTotals};
use moe_lab::{Checkpoint64, Error, Result};

#[derive(Parser)]
#[command(name = "moe-lab", version, about = "Train and inspect mixture-of-experts models with null experts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
        /// Directory for run.jsonl, report.jsonl and checkpoint.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a baseline and a null-expert configuration on matched seeds.
    Compare {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        adaptive: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Overrides applied to both configurations.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Route held-out data through a checkpoint and report per-token decisions.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Seed of the evaluation sample (defaults to the training seed).
        #[arg(long)]
        eval_seed: Option<u64>,
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Add null experts to every router of a checkpoint.
    ExpandRouter {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct OverrideArgs {
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    alpha1: Option<f64>,
    #[arg(long)]
    alpha2: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
}

impl From<OverrideArgs> for Overrides {
    fn from(a: OverrideArgs) -> Self {
        Overrides { m: a.m, k: a.k, alpha1: a.alpha1, alpha2: a.alpha2, seed: a.seed, steps: a.steps }
    }
}

fn write_or_print(out: Option<&Path>, name: &str, text: &str) -> Result<()> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(name), text)?;
        }
        None => {
            if let Err(e) = io::stdout().lock().write_all(text.as_bytes()) {
                if e.kind() != io::ErrorKind::BrokenPipe {
                    return Err(e.into());
                }
            }
        }
    }
    Ok(())
}

fn run_train(config: &Path, overrides: Overrides, out: Option<&Path>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    cfg.apply(&overrides)?;
    let (mut record, model) = train_model(&cfg)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let path = dir.join("checkpoint.txt");
        model.to_checkpoint(&cfg).save(&path)?;
        record.checkpoint = Some(path.display().to_string());
    }
    write_or_print(out, "run.jsonl", &record.to_jsonl())?;
    if let Some(eval) = &record.final_eval {
        let flops = model_flops(&cfg);
        let baseline = (cfg.router.n_null > 0).then_some((&flops, cfg.router.k.min(cfg.router.n_true)));
        let totals = RunTotals::from_reports(&eval.layers, baseline)?;
        let report = render_report(&eval.layers, &totals);
        match out {
            Some(dir) => fs::write(dir.join("report.jsonl"), report)?,
            None => eprint!("{report}"),
        }
    }
    match record.diverged {
        Some(d) => Err(Error::Diverged { step: d.step, reason: d.reason }),
        None => Ok(()),
    }
}

fn run_compare(
    baseline: &Path,
    adaptive: &Path,
    seeds: usize,
    overrides: Overrides,
    out: Option<&Path>,
) -> Result<()> {
    let mut base = ExperimentConfig::load(baseline)?;
    let mut ada = ExperimentConfig::load(adaptive)?;
    base.apply(&overrides)?;
    ada.apply(&overrides)?;
    let report = compare(&base, &ada, seeds)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        for (seed, (b, a)) in report.seeds.iter().zip(report.baseline.iter().zip(&report.adaptive)) {
            fs::write(dir.join(format!("baseline_seed{seed}.jsonl")), b.to_jsonl())?;
            fs::write(dir.join(format!("adaptive_seed{seed}.jsonl")), a.to_jsonl())?;
        }
    }
    write_or_print(out, "compare.json", &format!("{}\n", report.summary_json()))
}

fn run_analyze(checkpoint: &Path, eval_seed: Option<u64>, sequences: Option<usize>, out: Option<&Path>) -> Result<()> {
    let ck = Checkpoint64::load(checkpoint)?;
    let (model, mut cfg) = SeqModel::from_checkpoint(&ck)?;
    if let Some(s) = eval_seed {
        cfg.optimizer.seed = s;
    }
    if let Some(n) = sequences {
        cfg.eval_sequences = n;
    }
    cfg.validate()?;
    let task = Task::from_config(&cfg.task, cfg.model.vocab)?;
    let flops = model_flops(&cfg);
    let baseline = (cfg.router.n_null > 0).then_some((&flops, cfg.router.k.min(cfg.router.n_true)));
    let report = analyze(&model, &eval_batch(&cfg, &task), baseline)?;
    write_or_print(out, "analysis.jsonl", &render_report(&report.layers, &report.totals))?;
    let tokens: String = report
        .tokens
        .iter()
        .map(|t| serde_json::to_string(t).expect("token route serializes") + "\n")
        .collect();
    write_or_print(out, "tokens.jsonl", &tokens)
}

fn run_expand(checkpoint: &Path, m: usize, k: usize, out: &Path) -> Result<()> {
    let ck = Checkpoint64::load(checkpoint)?;
    let (model, mut cfg) = SeqModel::from_checkpoint(&ck)?;
    let expanded = model.expand_routers(m, k)?;
    cfg.router = expanded.blocks[0].moe.cfg;
    expanded.to_checkpoint(&cfg).save(out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, overrides, out } => run_train(&config, overrides.into(), out.as_deref()),
        Command::Compare { baseline, adaptive, seeds, seed, steps, out } => {
            let overrides = Overrides { seed, steps, ..Default::default() };
            run_compare(&baseline, &adaptive, seeds, overrides, out.as_deref())
        }
        Command::Analyze { checkpoint, eval_seed, sequences, out } => {
            run_analyze(&checkpoint, eval_seed, sequences, out.as_deref())
        }
        Command::ExpandRouter { checkpoint, m, k, out } => run_expand(&checkpoint, m, k, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
