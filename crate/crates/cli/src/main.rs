//! `pdd`: synthesize datasets, train, evaluate and analyze distillation runs.
//!
//! Exit codes: 0 success, 1 domain error (bad data, failed check, locked run
//! directory), 2 usage or configuration error.

mod config;
mod lock;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pdd::corpus::write_corpus;
use pdd::degradation::synthesize_dataset;
use pdd::evalkit::{self, Role};
use pdd::features::FeatureExtractor;
use pdd::models::{Checkpoint, TrainMode};
use pdd::trainer::{self, fit};
use pdd::{gradcheck, PddError};

use crate::config::{AnalyzeConfig, EvalConfig, SynthConfig};
use crate::lock::RunLock;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Domain(String),
}

impl From<PddError> for CliError {
    fn from(e: PddError) -> Self {
        match e {
            PddError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Domain(e.to_string()),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Domain(_) => 1,
            CliError::Usage(_) => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "pdd", version, about = "Pairwise distance distillation for real-world super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Degrade HR images into an (LR, HR) dataset with a manifest
    Synth(SynthArgs),
    /// Train a specialist in one of the coupling modes
    Train(TrainArgs),
    /// Score a checkpoint (or bicubic) on a manifest
    Eval(EvalArgs),
    /// Compare the feature-distribution gap of two checkpoints
    Analyze(AnalyzeArgs),
    /// Check loss gradients against finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config for this command
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory; locked while the command runs
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Override the config's seed
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Override the config's seed
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Override the mode: pdd_static, pdd_ema, single_fixed, naive_distill, supervised_only
    #[arg(long, value_name = "NAME")]
    mode: Option<String>,
    /// Override total_iters (halve_at moves to the midpoint if it no longer fits)
    #[arg(long, value_name = "INT")]
    iters: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Output directory for the pass/fail table
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Seed of the random inputs and networks
    #[arg(long, value_name = "INT", default_value_t = 0)]
    seed: u64,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Domain(format!("cannot write {}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report types serialize")
}

fn synth(args: SynthArgs) -> Result<(), CliError> {
    let mut cfg = SynthConfig::load(&args.common.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let pipeline = cfg.pipeline();
    pipeline.validate()?;
    let out = &args.common.out;
    let _lock = RunLock::acquire(out)?;
    let hr_dir = match (&cfg.hr_dir, &cfg.procedural) {
        (Some(d), _) => d.clone(),
        (None, Some(p)) => {
            let dir = out.join("hr");
            write_corpus(&dir, p.count, p.height, p.width, p.seed)?;
            dir
        }
        (None, None) => unreachable!("validated on load"),
    };
    let manifest = synthesize_dataset(&hr_dir, &pipeline, out, cfg.seed)?;
    println!("wrote {} pairs to {}", manifest.entries.len(), out.join(pdd::degradation::Manifest::FILE_NAME).display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = config::load_train(&args.common.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(m) = &args.mode {
        cfg.mode = m.parse::<TrainMode>()?;
    }
    if let Some(n) = args.iters {
        if n == 0 {
            return Err(CliError::Usage("--iters must be positive".into()));
        }
        cfg.total_iters = n;
        if cfg.halve_at >= n {
            cfg.halve_at = n / 2;
        }
    }
    cfg.validate()?;
    let out = &args.common.out;
    let _lock = RunLock::acquire(out)?;
    let art = fit(&cfg, out)?;
    let last = art.records.last();
    println!(
        "{} steps in {} mode; final total loss {}; checkpoint {}",
        art.records.len(),
        cfg.mode,
        last.map_or("n/a".into(), |r| format!("{:.6}", r.report.total)),
        art.final_checkpoint.display()
    );
    if let Some(p) = art.eval_summary {
        println!("evaluation summary: {}", p.display());
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), CliError> {
    let cfg = EvalConfig::load(&args.common.config)?;
    let out = &args.common.out;
    let _lock = RunLock::acquire(out)?;
    let mut report = evalkit::evaluate(cfg.checkpoint.as_deref(), &cfg.manifest, cfg.role, cfg.color_correction)?;
    if let Some(csv) = &cfg.external_metrics {
        report.merge_csv(csv)?;
    }
    write(&out.join("report.json"), to_json(&report))?;
    for (k, v) in &report.means {
        println!("{k}: {v:.4}");
    }
    Ok(())
}

fn analyze(args: AnalyzeArgs) -> Result<(), CliError> {
    let cfg = AnalyzeConfig::load(&args.common.config)?;
    let out = &args.common.out;
    let _lock = RunLock::acquire(out)?;
    let mut labeled: Vec<_> = evalkit::load_manifest_triples(&cfg.labeled)?.into_iter().map(|(lr, _, _)| lr).collect();
    let mut unlabeled = trainer::load_unlabeled(&cfg.unlabeled)?;
    if let Some(n) = cfg.max_images {
        labeled.truncate(n);
        unlabeled.truncate(n);
    }
    let ex = FeatureExtractor::from_config(&cfg.features)?;
    let gap = |path: &Path| -> Result<evalkit::DomainGap, CliError> {
        let pair = Checkpoint::load(path)?.pair;
        let model = if cfg.role == Role::Generalist { &pair.generalist } else { &pair.specialist };
        Ok(evalkit::model_domain_gap(model, &labeled, &unlabeled, &ex, &cfg.tap)?)
    };
    let before = gap(&cfg.before)?;
    let after = gap(&cfg.after)?;
    let body = serde_json::json!({ "tap": cfg.tap, "before": before, "after": after });
    write(&out.join("analysis.json"), to_json(&body))?;
    write(&out.join("projection.svg"), evalkit::projection_svg(&[("before", &before), ("after", &after)]))?;
    println!("KL(labeled || unlabeled) at {}: before {:.6}, after {:.6}", cfg.tap, before.kl, after.kl);
    Ok(())
}

fn gradcheck_cmd(args: GradcheckArgs) -> Result<(), CliError> {
    let _lock = RunLock::acquire(&args.out)?;
    let rows = gradcheck::run_suite(args.seed)?;
    let table = gradcheck::format_table(&rows);
    write(&args.out.join("gradcheck.txt"), &table)?;
    write(&args.out.join("gradcheck.json"), to_json(&rows))?;
    print!("{table}");
    let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Domain(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Analyze(a) => analyze(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = match &e {
                CliError::Usage(m) | CliError::Domain(m) => m,
            };
            eprintln!("error: {msg}");
            ExitCode::from(e.exit_code())
        }
    }
}
