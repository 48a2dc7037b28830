use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Tape, Tensor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{contrast_input, rationale_input};
use crate::metrics::{self, Averaging, ExampleRecord, MetricReport, NrgColumnBounds, NrgRow};
use crate::models::{ModelParams, Role, Variant};
use crate::topk::{topk_mask, KPercent};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskMetric {
    #[default]
    Accuracy,
    MacroF1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Rationale sizes the AOPC metrics average over.
    pub aopc_bins: Vec<KPercent>,
    /// Rationale size scored against gold highlights.
    pub plaus_k: KPercent,
    pub averaging: Averaging,
    /// Task column used for NRG.
    pub task_metric: TaskMetric,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let k = |v| KPercent::new(v).expect("valid");
        Self {
            aopc_bins: vec![k(5.0), k(10.0), k(20.0), k(50.0)],
            plaus_k: k(20.0),
            averaging: Averaging::Micro,
            task_metric: TaskMetric::Accuracy,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.aopc_bins.is_empty() {
            return Err(Error::Config("eval.aopc_bins must not be empty".into()));
        }
        Ok(())
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// Per-example predictions, reduced-input probabilities and selections.
///
/// Probabilities are of the class predicted on the full input. A contrast
/// input with every token removed counts as uninformative, probability `1/M`.
pub fn evaluate_records(params: &ModelParams, dataset: &Dataset, cfg: &EvalConfig) -> Result<Vec<ExampleRecord>> {
    if dataset.is_empty() {
        return Err(Error::degenerate("evaluate_model: empty dataset"));
    }
    let m = params.config.num_classes;
    if let Some(bad) = dataset.iter().find(|e| e.label >= m) {
        return Err(Error::contract(format!("example {}: label {} >= {m}", bad.id, bad.label)));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let base = tape.len();
    let substitution = bound.pooling_is_substitution();
    let shared = params.config.variant == Variant::Shared;
    let mut out = Vec::with_capacity(dataset.len());
    for ex in dataset {
        tape.truncate(base);
        let n = ex.len();
        let h = bound.hidden(&mut tape, Role::Task, &ex.tokens, None)?;
        let ones = tape.constant(Tensor::filled(n, 1, 1.0));
        let z = bound.task_head(&mut tape, h, ones)?;
        let probs = softmax(tape.value(z).values());
        let pred = argmax(&probs);
        let he = if shared {
            h
        } else {
            bound.hidden(&mut tape, Role::Extractor, &ex.tokens, None)?
        };
        let s = bound.extractor_head(&mut tape, he)?;
        let scores = tape.value(s).values().to_vec();

        let prob_reduced = |tape: &mut Tape, bits: &[u8], keep: bool| -> Result<f64> {
            let (_, attend) = if keep {
                rationale_input(&ex.tokens, bits)?
            } else {
                contrast_input(&ex.tokens, bits)?
            };
            if attend.iter().all(|&a| a == 0.0) {
                return Ok(1.0 / m as f64);
            }
            let hr = if substitution {
                h
            } else {
                bound.hidden(tape, Role::Task, &ex.tokens, Some(&attend))?
            };
            let w = tape.constant(Tensor::column(attend));
            let zr = bound.task_head(tape, hr, w)?;
            Ok(softmax(tape.value(zr).values())[pred])
        };
        let mut prob_rationale = Vec::with_capacity(cfg.aopc_bins.len());
        let mut prob_contrast = Vec::with_capacity(cfg.aopc_bins.len());
        for &k in &cfg.aopc_bins {
            let mask = topk_mask(&scores, k)?;
            prob_rationale.push(prob_reduced(&mut tape, mask.bits(), true)?);
            prob_contrast.push(prob_reduced(&mut tape, mask.bits(), false)?);
        }
        let selected = topk_mask(&scores, cfg.plaus_k)?.bits().to_vec();
        out.push(ExampleRecord {
            label: ex.label,
            pred,
            prob_full: probs[pred],
            prob_rationale,
            prob_contrast,
            scores,
            selected,
            gold: ex.rationale.clone(),
        });
    }
    Ok(out)
}

/// Full metric report over `dataset`, stratified by prediction correctness.
/// With `nrg_bounds`, the report also carries NRG scores against them.
pub fn evaluate_model(
    params: &ModelParams,
    dataset: &Dataset,
    cfg: &EvalConfig,
    nrg_bounds: Option<&NrgColumnBounds>,
) -> Result<MetricReport> {
    let records = evaluate_records(params, dataset, cfg)?;
    let mut report = metrics::stratified_report(&records, params.config.num_classes, cfg.averaging)?;
    if let Some(b) = nrg_bounds {
        let row = nrg_row_of(&report, "model", cfg.task_metric)?;
        report.nrg = Some(metrics::nrg_row(&row, b));
    }
    Ok(report)
}

/// NRG input row from a report's metrics.
pub fn nrg_row_of(report: &MetricReport, system: &str, task_metric: TaskMetric) -> Result<NrgRow> {
    let task = match task_metric {
        TaskMetric::Accuracy => report.accuracy,
        TaskMetric::MacroF1 => report.macro_f1,
    }
    .ok_or_else(|| Error::contract("nrg: report has no task metric"))?;
    Ok(NrgRow {
        system: system.into(),
        comp: report.comp_aopc,
        suff: report.suff_aopc,
        tf1: report.tf1,
        auprc: report.auprc,
        task,
    })
}
