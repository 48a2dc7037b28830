//! Faithfulness, plausibility and task metrics, correctness-stratified
//! reports and normalized relative gain (NRG) aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean of `full - reduced` over examples and bins. `reduced[i]` holds one
/// probability per bin for example `i`.
pub fn aopc(prob_full: &[f64], reduced: &[Vec<f64>]) -> Result<f64> {
    if prob_full.len() != reduced.len() {
        return Err(Error::contract(format!(
            "aopc: {} full probabilities but {} reduced rows",
            prob_full.len(),
            reduced.len()
        )));
    }
    if prob_full.is_empty() {
        return Err(Error::degenerate("aopc: no examples"));
    }
    let mut total = 0.0;
    for (&p, row) in prob_full.iter().zip(reduced) {
        if row.is_empty() {
            return Err(Error::contract("aopc: empty bin set"));
        }
        total += row.iter().map(|&q| p - q).sum::<f64>() / row.len() as f64;
    }
    Ok(total / prob_full.len() as f64)
}

/// Token-level overlap of one predicted mask with one gold mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenPrf {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn token_prf(pred: &[u8], gold: &[u8]) -> Result<TokenPrf> {
    if pred.len() != gold.len() {
        return Err(Error::contract(format!(
            "token_prf: prediction length {} != gold length {}",
            pred.len(),
            gold.len()
        )));
    }
    if !gold.contains(&1) {
        return Err(Error::degenerate("token_prf: gold mask marks no tokens"));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(gold) {
        match (p == 1, g == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Ok(TokenPrf {
        tp,
        fp,
        fn_,
        precision,
        recall,
        f1: f1(precision, recall),
        iou: ratio(tp, tp + fp + fn_),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    /// Pool token counts over the corpus.
    #[default]
    Micro,
    /// Average per-instance F1.
    Macro,
}

/// IOU at or above which an instance counts as matched.
pub const IOU_MATCH: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plausibility {
    pub tf1: f64,
    /// Fraction of instances whose IOU reaches [`IOU_MATCH`].
    pub iou_f1: f64,
    pub instances: usize,
    /// Instances skipped because their gold mask is empty.
    pub skipped: usize,
}

/// Corpus TF1 and IOU match rate over `(pred, gold)` pairs.
pub fn corpus_plausibility(pairs: &[(&[u8], &[u8])], averaging: Averaging) -> Result<Option<Plausibility>> {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut f1_sum = 0.0;
    let mut matched = 0;
    let mut instances = 0;
    let mut skipped = 0;
    for &(pred, gold) in pairs {
        let prf = match token_prf(pred, gold) {
            Ok(p) => p,
            Err(Error::Degenerate(_)) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        tp += prf.tp;
        fp += prf.fp;
        fn_ += prf.fn_;
        f1_sum += prf.f1;
        if prf.iou >= IOU_MATCH {
            matched += 1;
        }
        instances += 1;
    }
    if instances == 0 {
        return Ok(None);
    }
    let tf1 = match averaging {
        Averaging::Micro => f1(ratio(tp, tp + fp), ratio(tp, tp + fn_)),
        Averaging::Macro => f1_sum / instances as f64,
    };
    Ok(Some(Plausibility {
        tf1,
        iou_f1: ratio(matched, instances),
        instances,
        skipped,
    }))
}

/// Average precision of scores against gold labels pooled over all tokens,
/// with one threshold per distinct score (tied scores enter together).
pub fn auprc(scores: &[&[f64]], gold: &[&[u8]]) -> Result<f64> {
    if scores.len() != gold.len() {
        return Err(Error::contract("auprc: score and gold lists differ in length"));
    }
    let mut pooled: Vec<(f64, bool)> = Vec::new();
    for (s, g) in scores.iter().zip(gold) {
        if s.len() != g.len() {
            return Err(Error::contract("auprc: score and gold masks differ in length"));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("auprc: non-finite score"));
        }
        pooled.extend(s.iter().zip(g.iter()).map(|(&v, &b)| (v, b == 1)));
    }
    let positives = pooled.iter().filter(|p| p.1).count();
    if positives == 0 {
        return Err(Error::degenerate("auprc: no positive tokens"));
    }
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut seen, mut ap, mut last_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < pooled.len() {
        let v = pooled[i].0;
        while i < pooled.len() && pooled[i].0 == v {
            tp += pooled[i].1 as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        ap += (recall - last_recall) * (tp as f64 / seen as f64);
        last_recall = recall;
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Accuracy and macro-F1 over all `num_classes` classes; a class absent from
/// both predictions and labels contributes F1 0.
pub fn classification_metrics(preds: &[usize], golds: &[usize], num_classes: usize) -> Result<Classification> {
    if preds.len() != golds.len() || preds.is_empty() {
        return Err(Error::contract(format!(
            "classification_metrics: {} predictions, {} labels",
            preds.len(),
            golds.len()
        )));
    }
    if let Some(bad) = preds.iter().chain(golds).find(|&&c| c >= num_classes) {
        return Err(Error::contract(format!("classification_metrics: class {bad} >= {num_classes}")));
    }
    let mut tp = vec![0usize; num_classes];
    let mut pred_count = vec![0usize; num_classes];
    let mut gold_count = vec![0usize; num_classes];
    for (&p, &g) in preds.iter().zip(golds) {
        pred_count[p] += 1;
        gold_count[g] += 1;
        if p == g {
            tp[p] += 1;
        }
    }
    let correct: usize = tp.iter().sum();
    let macro_f1 = (0..num_classes)
        .map(|c| f1(ratio(tp[c], pred_count[c]), ratio(tp[c], gold_count[c])))
        .sum::<f64>()
        / num_classes as f64;
    Ok(Classification {
        accuracy: ratio(correct, preds.len()),
        macro_f1,
    })
}

/// Everything evaluation needs to know about one example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub label: usize,
    pub pred: usize,
    /// Probability of `pred` on the full input.
    pub prob_full: f64,
    /// Probability of `pred` on the rationale-only input, per AOPC bin.
    pub prob_rationale: Vec<f64>,
    /// Probability of `pred` on the contrast input, per AOPC bin.
    pub prob_contrast: Vec<f64>,
    pub scores: Vec<f64>,
    /// Top-k selection at the plausibility k.
    pub selected: Vec<u8>,
    pub gold: Option<Vec<u8>>,
}

impl ExampleRecord {
    pub fn correct(&self) -> bool {
        self.label == self.pred
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NrgScores {
    pub fnrg: f64,
    pub pnrg: Option<f64>,
    pub tnrg: f64,
    pub cnrg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Strata {
    pub correct: Option<Box<MetricReport>>,
    pub incorrect: Option<Box<MetricReport>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub examples: usize,
    pub suff_aopc: f64,
    pub comp_aopc: f64,
    pub tf1: Option<f64>,
    pub auprc: Option<f64>,
    pub iou_f1: Option<f64>,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub stratified: Option<Strata>,
    pub nrg: Option<NrgScores>,
    /// Examples whose gold mask could not be scored.
    pub warnings: usize,
}

/// Metrics over `records`, without strata. Task metrics are included only
/// when `with_task` is set.
pub fn report(records: &[ExampleRecord], num_classes: usize, averaging: Averaging, with_task: bool) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::degenerate("report: no examples"));
    }
    let full: Vec<f64> = records.iter().map(|r| r.prob_full).collect();
    let suff_rows: Vec<Vec<f64>> = records.iter().map(|r| r.prob_rationale.clone()).collect();
    let comp_rows: Vec<Vec<f64>> = records.iter().map(|r| r.prob_contrast.clone()).collect();
    let gold: Vec<&ExampleRecord> = records.iter().filter(|r| r.gold.is_some()).collect();
    let pairs: Vec<(&[u8], &[u8])> = gold
        .iter()
        .map(|r| (r.selected.as_slice(), r.gold.as_deref().unwrap_or(&[])))
        .collect();
    let plaus = corpus_plausibility(&pairs, averaging)?;
    let auprc_value = if plaus.is_some() {
        let s: Vec<&[f64]> = gold.iter().map(|r| r.scores.as_slice()).collect();
        let g: Vec<&[u8]> = gold.iter().map(|r| r.gold.as_deref().unwrap_or(&[])).collect();
        Some(auprc(&s, &g)?)
    } else {
        None
    };
    let task = if with_task {
        let preds: Vec<usize> = records.iter().map(|r| r.pred).collect();
        let golds: Vec<usize> = records.iter().map(|r| r.label).collect();
        Some(classification_metrics(&preds, &golds, num_classes)?)
    } else {
        None
    };
    Ok(MetricReport {
        examples: records.len(),
        suff_aopc: aopc(&full, &suff_rows)?,
        comp_aopc: aopc(&full, &comp_rows)?,
        tf1: plaus.map(|p| p.tf1),
        auprc: auprc_value,
        iou_f1: plaus.map(|p| p.iou_f1),
        accuracy: task.map(|t| t.accuracy),
        macro_f1: task.map(|t| t.macro_f1),
        stratified: None,
        nrg: None,
        warnings: plaus.map_or(0, |p| p.skipped),
    })
}

/// Overall report plus sub-reports over correctly and incorrectly predicted
/// examples. Strata omit task metrics; an empty stratum is absent.
pub fn stratified_report(records: &[ExampleRecord], num_classes: usize, averaging: Averaging) -> Result<MetricReport> {
    let mut overall = report(records, num_classes, averaging, true)?;
    let part = |want: bool| -> Result<Option<Box<MetricReport>>> {
        let subset: Vec<ExampleRecord> = records.iter().filter(|r| r.correct() == want).cloned().collect();
        if subset.is_empty() {
            return Ok(None);
        }
        Ok(Some(Box::new(report(&subset, num_classes, averaging, false)?)))
    };
    overall.stratified = Some(Strata {
        correct: part(true)?,
        incorrect: part(false)?,
    });
    Ok(overall)
}

/// Raw metrics of one system in an NRG comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NrgRow {
    pub system: String,
    pub comp: f64,
    pub suff: f64,
    pub tf1: Option<f64>,
    pub auprc: Option<f64>,
    pub task: f64,
}

/// Column minima and maxima for NRG normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NrgColumnBounds {
    pub comp: [f64; 2],
    pub suff: [f64; 2],
    pub tf1: [f64; 2],
    pub auprc: [f64; 2],
    pub task: [f64; 2],
}

fn column_bounds(values: impl Iterator<Item = f64>) -> [f64; 2] {
    values.fold([f64::INFINITY, f64::NEG_INFINITY], |[lo, hi], v| [lo.min(v), hi.max(v)])
}

impl NrgColumnBounds {
    /// Bounds spanned by `rows`. Absent plausibility values are skipped.
    pub fn from_rows(rows: &[NrgRow]) -> Self {
        Self {
            comp: column_bounds(rows.iter().map(|r| r.comp)),
            suff: column_bounds(rows.iter().map(|r| r.suff)),
            tf1: column_bounds(rows.iter().filter_map(|r| r.tf1)),
            auprc: column_bounds(rows.iter().filter_map(|r| r.auprc)),
            task: column_bounds(rows.iter().map(|r| r.task)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [
            ("comp", self.comp),
            ("suff", self.suff),
            ("tf1", self.tf1),
            ("auprc", self.auprc),
            ("task", self.task),
        ] {
            // A column with no present values keeps its infinite fold seeds.
            if lo.is_finite() && hi.is_finite() && hi < lo {
                return Err(Error::contract(format!("nrg bounds: {name} max {hi} < min {lo}")));
            }
        }
        Ok(())
    }
}

/// Min-max normalization; a constant column maps to 1.
pub fn nrg(v: f64, [lo, hi]: [f64; 2], higher_better: bool) -> f64 {
    if hi == lo {
        return 1.0;
    }
    if higher_better {
        (v - lo) / (hi - lo)
    } else {
        (hi - v) / (hi - lo)
    }
}

/// Composite NRG for one row: faithfulness averages comp (higher better) and
/// suff (lower better), plausibility averages TF1 and AUPRC, task is the task
/// metric, and the composite averages whichever of the three are present.
pub fn nrg_row(row: &NrgRow, b: &NrgColumnBounds) -> NrgScores {
    let fnrg = (nrg(row.comp, b.comp, true) + nrg(row.suff, b.suff, false)) / 2.0;
    let pnrg = match (row.tf1, row.auprc) {
        (Some(t), Some(a)) => Some((nrg(t, b.tf1, true) + nrg(a, b.auprc, true)) / 2.0),
        _ => None,
    };
    let tnrg = nrg(row.task, b.task, true);
    let cnrg = match pnrg {
        Some(p) => (fnrg + p + tnrg) / 3.0,
        None => (fnrg + tnrg) / 2.0,
    };
    NrgScores { fnrg, pnrg, tnrg, cnrg }
}

/// NRG scores of every row against `bounds`, or against the rows' own
/// column ranges when no bounds are given.
pub fn nrg_compose(rows: &[NrgRow], bounds: Option<&NrgColumnBounds>) -> Result<Vec<NrgScores>> {
    if rows.len() < 2 {
        return Err(Error::contract(format!(
            "nrg_compose needs at least 2 systems, got {}",
            rows.len()
        )));
    }
    let b = bounds.copied().unwrap_or_else(|| NrgColumnBounds::from_rows(rows));
    b.validate()?;
    Ok(rows.iter().map(|r| nrg_row(r, &b)).collect())
}
