//! Whole-run drivers behind the command line: training with per-epoch
//! checkpoints, evaluation reports and ablation sweeps.
//!
//! Output directory of a training run:
//!
//! ```text
//! out/
//!   log.ndjson                 one EpochRecord per line
//!   summary.json               records, initial and final validation report
//!   checkpoints/epoch_000/     untrained parameters
//!   checkpoints/epoch_NNN/     after epoch NNN
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bottleneck::FusionMode;
use crate::data::{augment, collate, Dataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::quantizer::CodebookStats;
use crate::segnet::ModelConfig;
use crate::train::{check_compatible, evaluate_model, load_checkpoint, OptimConfig, Trainer};

fn default_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    8
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub epochs: usize,
    /// Dataset directory; relative paths resolve against the config file.
    pub train_data: PathBuf,
    /// Defaults to the training set.
    #[serde(default)]
    pub val_data: Option<PathBuf>,
    /// Seed of the data order and augmentation draws.
    pub seed: u64,
    #[serde(default = "default_true")]
    pub augment: bool,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.train_data = base.join(&cfg.train_data);
        cfg.val_data = cfg.val_data.map(|p| base.join(p));
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        for p in std::iter::once(&self.train_data).chain(&self.val_data) {
            if !p.is_dir() {
                return Err(Error::Config(format!("dataset {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted means over the epoch's training batches.
    pub total: f64,
    pub seg: f64,
    pub quant: f64,
    pub codebook_perplexity: f64,
    pub val_dsc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: Vec<EpochRecord>,
    pub initial_val_dsc: Option<f64>,
    pub final_report: MetricReport,
    pub param_count: usize,
}

pub fn checkpoint_dir(out: &Path, epoch: usize) -> PathBuf {
    out.join("checkpoints").join(format!("epoch_{epoch:03}"))
}

fn load_sets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let train = Dataset::load(&cfg.train_data)?;
    let val = match &cfg.val_data {
        Some(p) => Dataset::load(p)?,
        None => train.clone(),
    };
    check_compatible(&cfg.model, &train)?;
    check_compatible(&cfg.model, &val)?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    Ok((train, val))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Trains according to `cfg`, writing checkpoints and logs under `out`.
/// `on_epoch` sees each record as soon as the epoch finishes.
pub fn train_run(cfg: &RunConfig, out: &Path, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainSummary> {
    cfg.validate()?;
    let (train, val) = load_sets(cfg)?;
    fs::create_dir_all(out)?;
    let mut t = Trainer::new(&cfg.model, cfg.optim(), cfg.seed)?;
    t.save_checkpoint(checkpoint_dir(out, 0))?;
    let (initial, _) = evaluate_model(&t.model, &t.store, &val.samples, cfg.batch_size)?;

    let mut log = String::new();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut final_report = initial.clone();
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        t.rng.shuffle(&mut order);
        let mut sums = [0.0; 3];
        let mut stats = CodebookStats::from_counts(vec![0; cfg.model.k]);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    let s = &train.samples[i];
                    if cfg.augment {
                        augment(s, &mut t.rng)
                    } else {
                        s.clone()
                    }
                })
                .collect();
            let refs: Vec<&Sample> = batch.iter().collect();
            let (images, labels) = collate(&refs)?;
            let step = t.train_step(&images, &labels)?;
            let n = chunk.len() as f64;
            sums[0] += step.loss.total * n;
            sums[1] += step.loss.seg * n;
            sums[2] += step.loss.quant * n;
            stats.merge(&step.indices);
        }
        t.save_checkpoint(checkpoint_dir(out, epoch))?;
        let (report, _) = evaluate_model(&t.model, &t.store, &val.samples, cfg.batch_size)?;
        let n = train.len() as f64;
        let rec = EpochRecord {
            epoch,
            total: sums[0] / n,
            seg: sums[1] / n,
            quant: sums[2] / n,
            codebook_perplexity: stats.perplexity,
            val_dsc: report.mean_dsc,
        };
        log += &(serde_json::to_string(&rec)? + "\n");
        fs::write(out.join("log.ndjson"), &log)?;
        on_epoch(&rec);
        records.push(rec);
        final_report = report;
    }
    let summary = TrainSummary {
        epochs: records,
        initial_val_dsc: initial.mean_dsc,
        final_report,
        param_count: t.store.numel(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: u64,
    #[serde(flatten)]
    pub metrics: MetricReport,
    pub codebook: CodebookStats,
}

/// Evaluates a checkpoint on a dataset and writes the report to `report`
/// when given.
pub fn eval_run(checkpoint: &Path, data: &Path, report: Option<&Path>, batch_size: usize) -> Result<EvalReport> {
    let t = load_checkpoint(checkpoint)?;
    let set = Dataset::load(data)?;
    check_compatible(&t.model.config, &set)?;
    let (metrics, codebook) = evaluate_model(&t.model, &t.store, &set.samples, batch_size)?;
    let r = EvalReport {
        step: t.step,
        metrics,
        codebook,
    };
    if let Some(p) = report {
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        write_json(p, &r)?;
    }
    Ok(r)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    #[serde(rename = "K")]
    K,
    Dim,
    Heads,
    Fusion,
    Depth,
}

impl Axis {
    pub const NAMES: &'static str = "K, dim, heads, fusion, depth";

    /// Values swept when none are given.
    pub fn default_values(self) -> Option<&'static str> {
        match self {
            Axis::Fusion => Some("disconx,plain"),
            Axis::Heads => Some("2s2h,8s2h,8s8h"),
            _ => None,
        }
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Axis> {
        Ok(match s {
            "K" | "k" => Axis::K,
            "dim" => Axis::Dim,
            "heads" => Axis::Heads,
            "fusion" => Axis::Fusion,
            "depth" => Axis::Depth,
            _ => return Err(Error::Usage(format!("unknown axis `{s}`; valid axes: {}", Axis::NAMES))),
        })
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::K => "K",
            Axis::Dim => "dim",
            Axis::Heads => "heads",
            Axis::Fusion => "fusion",
            Axis::Depth => "depth",
        })
    }
}

fn parse_count(axis: Axis, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Usage(format!("axis {axis} expects positive integers, got `{v}`")))
}

/// `"8s2h"` → `(8, 2)`.
pub fn parse_heads(v: &str) -> Result<(usize, usize)> {
    let bad = || Error::Usage(format!("heads values look like `8s2h`, got `{v}`"));
    let (s, h) = v.strip_suffix('h').and_then(|r| r.split_once('s')).ok_or_else(bad)?;
    Ok((s.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?))
}

/// The model config of one sweep point and its display label.
pub fn apply_axis(base: &ModelConfig, axis: Axis, value: &str) -> Result<(ModelConfig, String)> {
    let mut m = base.clone();
    let label = match axis {
        Axis::K => {
            m.k = parse_count(axis, value)?;
            format!("K={}", m.k)
        }
        Axis::Dim => {
            m.dim = parse_count(axis, value)?;
            format!("dim={}", m.dim)
        }
        Axis::Heads => {
            (m.h_s, m.h_h) = parse_heads(value)?;
            format!("SynergyNet-{}s{}h", m.h_s, m.h_h)
        }
        Axis::Fusion => match value {
            "disconx" => {
                m.fusion = FusionMode::Disconx;
                "SynergyNet".to_string()
            }
            "plain" => {
                m.fusion = FusionMode::Plain;
                "SynergyNet(Fusion)".to_string()
            }
            _ => {
                return Err(Error::Usage(format!(
                    "fusion values are `disconx` and `plain`, got `{value}`"
                )))
            }
        },
        Axis::Depth => {
            let d = parse_count(axis, value)?;
            if d == 0 {
                return Err(Error::Usage("depth must be >= 1".into()));
            }
            let mut ch = base.encoder_channels.clone();
            ch.truncate(d);
            while ch.len() < d {
                ch.push(2 * ch.last().unwrap());
            }
            m.encoder_channels = ch;
            format!("depth={d}")
        }
    };
    m.validate()?;
    Ok((m, label))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub label: String,
    pub param_count: usize,
    pub final_total: Option<f64>,
    pub mean_dsc: Option<f64>,
    pub mean_hd95: Option<f64>,
    pub mean_iou: Option<f64>,
    pub mean_se: Option<f64>,
    pub mean_sp: Option<f64>,
    pub mean_acc: Option<f64>,
    pub codebook_perplexity: f64,
}

/// An ordering reported for reference and compared against the runs, never
/// enforced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceOrder {
    /// Labels from best to worst mean DSC.
    pub expected: Vec<String>,
    pub observed_matches: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: Axis,
    pub rows: Vec<AblationRow>,
    pub reference_order: Option<ReferenceOrder>,
}

fn ablation_point(
    base: &RunConfig,
    axis: Axis,
    value: &str,
    model: ModelConfig,
    label: String,
    out: &Path,
) -> Result<AblationRow> {
    let cfg = RunConfig { model, ..base.clone() };
    let dir = out.join(format!("{axis}_{value}"));
    let summary = train_run(&cfg, &dir, |_| {})?;
    let val = cfg.val_data.as_ref().unwrap_or(&cfg.train_data);
    let ckpt = checkpoint_dir(&dir, cfg.epochs);
    let r = eval_run(&ckpt, val, Some(&dir.join("eval.json")), cfg.batch_size)?;
    let m = &r.metrics;
    Ok(AblationRow {
        value: value.to_string(),
        label,
        param_count: summary.param_count,
        final_total: summary.epochs.last().map(|e| e.total),
        mean_dsc: m.mean_dsc,
        mean_hd95: m.mean_hd95,
        mean_iou: m.mean_iou,
        mean_se: m.mean_se,
        mean_sp: m.mean_sp,
        mean_acc: m.mean_acc,
        codebook_perplexity: r.codebook.perplexity,
    })
}

/// Runs one training and evaluation per value with everything else,
/// seeds included, held fixed. Each point writes under
/// `out/<axis>_<value>/`. With `parallel` the points run on separate
/// threads; each point is still computed exactly as it would be alone.
pub fn ablate_run(
    base: &RunConfig,
    axis: Axis,
    values: &[String],
    out: &Path,
    parallel: bool,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<AblationReport> {
    if values.is_empty() {
        return Err(Error::Usage(format!("axis {axis} needs at least one value")));
    }
    base.validate()?;
    let points = values
        .iter()
        .map(|v| apply_axis(&base.model, axis, v))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(values.len());
    if parallel {
        let results: Vec<Result<AblationRow>> = std::thread::scope(|s| {
            let handles: Vec<_> = values
                .iter()
                .zip(points)
                .map(|(v, (m, l))| s.spawn(move || ablation_point(base, axis, v, m, l, out)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ablation worker panicked"))
                .collect()
        });
        for r in results {
            let row = r?;
            on_row(&row);
            rows.push(row);
        }
    } else {
        for (value, (model, label)) in values.iter().zip(points) {
            let row = ablation_point(base, axis, value, model, label, out)?;
            on_row(&row);
            rows.push(row);
        }
    }
    let reference_order = (axis == Axis::Fusion).then(|| {
        let dsc = |v: &str| rows.iter().find(|r| r.value == v).and_then(|r| r.mean_dsc);
        ReferenceOrder {
            expected: vec!["SynergyNet".into(), "SynergyNet(Fusion)".into()],
            observed_matches: dsc("disconx").zip(dsc("plain")).map(|(a, b)| a >= b),
        }
    });
    let report = AblationReport {
        axis,
        rows,
        reference_order,
    };
    fs::create_dir_all(out)?;
    write_json(&out.join("ablation.json"), &report)?;
    Ok(report)
}
