use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate_model, run_training, TrainConfig};
use crate::data::{subsample_gold, Dataset};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::topk::KPercent;

/// Loss-weight grid values for both the faithfulness and plausibility weight.
pub const WEIGHT_GRID: [f64; 3] = [0.0, 0.5, 1.0];
/// Gold-annotation fractions.
pub const ANNOTATION_FRACTIONS: [f64; 6] = [0.001, 0.01, 0.1, 0.2, 0.5, 1.0];
/// Evaluation k values for the transfer axis; the model trains at 50.
pub const TRANSFER_KS: [f64; 5] = [20.0, 30.0, 40.0, 50.0, 60.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", rename_all = "kebab-case")]
pub enum Axis {
    /// One run per `(alpha_f, alpha_p)` pair over `values x values`.
    WeightGrid { values: Vec<f64> },
    /// One run per fraction of training examples keeping gold.
    AnnotationFraction { values: Vec<f64> },
    /// One run with k-set `{train_k}`, evaluated at each of `eval_ks`.
    TopkTransfer { train_k: KPercent, eval_ks: Vec<KPercent> },
}

impl Axis {
    pub fn weight_grid() -> Self {
        Axis::WeightGrid {
            values: WEIGHT_GRID.to_vec(),
        }
    }

    pub fn annotation_fraction() -> Self {
        Axis::AnnotationFraction {
            values: ANNOTATION_FRACTIONS.to_vec(),
        }
    }

    pub fn topk_transfer() -> Self {
        Axis::TopkTransfer {
            train_k: KPercent::new(50.0).expect("valid"),
            eval_ks: TRANSFER_KS.iter().map(|&k| KPercent::new(k).expect("valid")).collect(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Axis::WeightGrid { .. } => "weight-grid",
            Axis::AnnotationFraction { .. } => "annotation-fraction",
            Axis::TopkTransfer { .. } => "topk-transfer",
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "weight-grid" => Some(Self::weight_grid()),
            "annotation-fraction" => Some(Self::annotation_fraction()),
            "topk-transfer" => Some(Self::topk_transfer()),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub seed: u64,
    pub alpha_c: f64,
    pub alpha_s: f64,
    pub alpha_p: f64,
    pub gold_fraction: f64,
    pub train_k: Vec<KPercent>,
    pub eval_k: KPercent,
    pub best_epoch: usize,
    pub report: MetricReport,
}

struct Job {
    cfg: TrainConfig,
    fraction: f64,
}

/// Trains and evaluates every configuration of `axis` on `dev`, running up
/// to `jobs` trainings at once. Rows come back in axis order regardless of
/// scheduling.
pub fn run_sweep(base: &TrainConfig, axis: &Axis, train: &Dataset, dev: &Dataset, jobs: usize) -> Result<Vec<SweepRow>> {
    let mut plan = Vec::new();
    match axis {
        Axis::WeightGrid { values } => {
            for &f in values {
                for &p in values {
                    let mut cfg = base.clone();
                    cfg.weights.set_alpha_f(f);
                    cfg.weights.alpha_p = p;
                    plan.push(Job { cfg, fraction: 1.0 });
                }
            }
        }
        Axis::AnnotationFraction { values } => {
            for &f in values {
                plan.push(Job {
                    cfg: base.clone(),
                    fraction: f,
                });
            }
        }
        Axis::TopkTransfer { train_k, .. } => {
            let mut cfg = base.clone();
            cfg.weights.k_set = vec![*train_k];
            plan.push(Job { cfg, fraction: 1.0 });
        }
    }
    if plan.is_empty() {
        return Err(Error::Config("sweep axis has no values".into()));
    }
    let eval_ks = match axis {
        Axis::TopkTransfer { eval_ks, .. } if eval_ks.is_empty() => {
            return Err(Error::Config("sweep axis has no values".into()))
        }
        Axis::TopkTransfer { eval_ks, .. } => Some(eval_ks.clone()),
        _ => None,
    };

    let run = |job: &Job| -> Result<Vec<SweepRow>> {
        let data = if job.fraction < 1.0 {
            subsample_gold(train, job.fraction, job.cfg.seed)?
        } else {
            train.clone()
        };
        let out = run_training(&job.cfg, &data, dev, None)?;
        let ks = eval_ks.clone().unwrap_or_else(|| vec![job.cfg.eval.plaus_k]);
        ks.into_iter()
            .map(|k| {
                let mut eval = job.cfg.eval.clone();
                eval.plaus_k = k;
                let report = evaluate_model(&out.params, dev, &eval, None)?;
                Ok(SweepRow {
                    axis: axis.name().into(),
                    seed: job.cfg.seed,
                    alpha_c: job.cfg.weights.alpha_c,
                    alpha_s: job.cfg.weights.alpha_s,
                    alpha_p: job.cfg.weights.alpha_p,
                    gold_fraction: job.fraction,
                    train_k: job.cfg.weights.k_set.clone(),
                    eval_k: k,
                    best_epoch: out.log.best_epoch,
                    report,
                })
            })
            .collect()
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<Vec<SweepRow>>> = pool.install(|| plan.par_iter().map(run).collect());
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Column order of sweep CSV tables.
pub const CSV_COLUMNS: [&str; 16] = [
    "axis",
    "seed",
    "alpha_c",
    "alpha_s",
    "alpha_p",
    "gold_fraction",
    "train_k",
    "eval_k",
    "best_epoch",
    "suff_aopc",
    "comp_aopc",
    "tf1",
    "auprc",
    "iou_f1",
    "accuracy",
    "macro_f1",
];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn write_csv(rows: &[SweepRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_COLUMNS)?;
    for r in rows {
        let ks: Vec<String> = r.train_k.iter().map(|k| k.to_string()).collect();
        out.write_record([
            r.axis.clone(),
            r.seed.to_string(),
            r.alpha_c.to_string(),
            r.alpha_s.to_string(),
            r.alpha_p.to_string(),
            r.gold_fraction.to_string(),
            ks.join(";"),
            r.eval_k.to_string(),
            r.best_epoch.to_string(),
            r.report.suff_aopc.to_string(),
            r.report.comp_aopc.to_string(),
            opt(r.report.tf1),
            opt(r.report.auprc),
            opt(r.report.iou_f1),
            opt(r.report.accuracy),
            opt(r.report.macro_f1),
        ])?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
