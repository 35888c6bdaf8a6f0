//! `synergynet` command line: dataset synthesis, training, evaluation,
//! gradient checking and ablation sweeps.
//!
//! Machine-readable records go to stdout as one JSON object per line; a
//! short human summary goes to stderr. Exit codes: 0 success, 1 invalid
//! input or configuration, 2 non-finite numerics, 3 gradient check outside
//! tolerance.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use synergynet::data::{Dataset, SynthSpec};
use synergynet::gradsuite::{run_gradcheck, GradcheckConfig};
use synergynet::run::{ablate_run, eval_run, train_run, Axis, RunConfig};
use synergynet::{Error, Result};

const TOLERANCE_FAILURE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "synergynet",
    version,
    about = "Discrete/continuous latent segmentation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic segmentation dataset.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model, checkpointing after every epoch.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// Sizes of the composed-bottleneck instances; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Train and evaluate once per value of one hyperparameter.
    Ablate {
        /// One of K, dim, heads, fusion, depth.
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. `16,64,256` or `2s2h,8s2h`.
        #[arg(long)]
        values: Option<String>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run sweep points on separate threads.
        #[arg(long)]
        parallel: bool,
    },
}

fn emit(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn synth(spec: &Path, out: &Path) -> Result<ExitCode> {
    let spec: SynthSpec = read_json(spec)?;
    let set = Dataset::generate(&spec)?;
    set.save(out)?;
    let pixels = set.class_pixels();
    let total: u64 = pixels.iter().sum();
    emit(&json!({
        "event": "synth",
        "count": set.len(),
        "class_pixels": pixels,
        "class_fraction": pixels.iter().map(|&p| p as f64 / total as f64).collect::<Vec<_>>(),
    }))?;
    eprintln!("wrote {} samples to {}", set.len(), out.display());
    for (c, p) in pixels.iter().enumerate() {
        eprintln!("  class {c}: {p} px ({:.2}%)", 100.0 * *p as f64 / total as f64);
    }
    Ok(ExitCode::SUCCESS)
}

fn train(config: &Path, out: &Path) -> Result<ExitCode> {
    let cfg = RunConfig::load(config)?;
    let summary = train_run(&cfg, out, |rec| {
        if let Ok(line) = serde_json::to_string(rec) {
            println!("{line}");
        }
        eprintln!(
            "epoch {:>3}  loss {:.5} (seg {:.5}, quant {:.5})  perplexity {:.2}  val dsc {}",
            rec.epoch,
            rec.total,
            rec.seg,
            rec.quant,
            rec.codebook_perplexity,
            fmt_opt(rec.val_dsc)
        );
    })?;
    eprintln!(
        "{} parameters; val dsc {} -> {}",
        summary.param_count,
        fmt_opt(summary.initial_val_dsc),
        fmt_opt(summary.final_report.mean_dsc)
    );
    Ok(ExitCode::SUCCESS)
}

fn eval(checkpoint: &Path, data: &Path, report: &Path, batch_size: usize) -> Result<ExitCode> {
    if batch_size == 0 {
        return Err(Error::Usage("--batch-size must be >= 1".into()));
    }
    let r = eval_run(checkpoint, data, Some(report), batch_size)?;
    let m = &r.metrics;
    emit(&json!({
        "event": "eval",
        "step": r.step,
        "mean_dsc": m.mean_dsc,
        "mean_hd95": m.mean_hd95,
        "mean_iou": m.mean_iou,
        "mean_se": m.mean_se,
        "mean_sp": m.mean_sp,
        "mean_acc": m.mean_acc,
        "codebook_perplexity": r.codebook.perplexity,
    }))?;
    eprintln!(
        "{} cases  dsc {}  hd95 {}  iou {}  report {}",
        m.num_cases,
        fmt_opt(m.mean_dsc),
        fmt_opt(m.mean_hd95),
        fmt_opt(m.mean_iou),
        report.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(config: Option<&Path>, eps: f64, tolerance: f64) -> Result<ExitCode> {
    let cfg: GradcheckConfig = match config {
        Some(p) => read_json(p)?,
        None => GradcheckConfig::default(),
    };
    let results = run_gradcheck(&cfg, eps, tolerance)?;
    let mut failed = 0;
    for r in &results {
        emit(r)?;
        let mark = if r.passed { "ok  " } else { "FAIL" };
        eprintln!("{mark} {:<36} {:.3e}  (< {:.0e})", r.name, r.max_rel_err, r.tolerance);
        failed += usize::from(!r.passed);
    }
    eprintln!("{} checks, {failed} outside tolerance", results.len());
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(TOLERANCE_FAILURE)
    })
}

fn ablate(axis: &str, values: Option<&str>, config: &Path, out: &Path, parallel: bool) -> Result<ExitCode> {
    let axis: Axis = axis.parse()?;
    let values = values
        .or(axis.default_values())
        .ok_or_else(|| Error::Usage(format!("axis {axis} needs --values")))?;
    let values: Vec<String> = values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(String::from)
        .collect();
    let cfg = RunConfig::load(config)?;
    let report = ablate_run(&cfg, axis, &values, out, parallel, |row| {
        if let Ok(line) = serde_json::to_string(row) {
            println!("{line}");
        }
    })?;
    eprintln!(
        "{:<22} {:>9} {:>8} {:>8} {:>8}",
        "variant", "params", "dsc", "hd95", "iou"
    );
    for r in &report.rows {
        eprintln!(
            "{:<22} {:>9} {:>8} {:>8} {:>8}",
            r.label,
            r.param_count,
            fmt_opt(r.mean_dsc),
            fmt_opt(r.mean_hd95),
            fmt_opt(r.mean_iou)
        );
    }
    if let Some(order) = &report.reference_order {
        let verdict = match order.observed_matches {
            Some(true) => "matches",
            Some(false) => "differs from",
            None => "cannot be compared with",
        };
        eprintln!(
            "observed order {verdict} the reference order {}",
            order.expected.join(" > ")
        );
    }
    eprintln!("report written to {}", out.join("ablation.json").display());
    Ok(ExitCode::SUCCESS)
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Synth { spec, out } => synth(&spec, &out),
        Command::Train { config, out } => train(&config, &out),
        Command::Eval {
            checkpoint,
            data,
            report,
            batch_size,
        } => eval(&checkpoint, &data, &report, batch_size),
        Command::Gradcheck { config, eps, tolerance } => gradcheck(config.as_deref(), eps, tolerance),
        Command::Ablate {
            axis,
            values,
            config,
            out,
            parallel,
        } => ablate(&axis, values.as_deref(), &config, &out, parallel),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
