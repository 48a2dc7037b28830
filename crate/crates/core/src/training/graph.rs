//! Builds the full training objective for one batch on a tape.

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::data::Example;
use crate::error::Result;
use crate::losses::{rationale_input, contrast_input, total_loss, LossBreakdown, LossWeights};
use crate::models::{Bound, Role};
use crate::topk::topk_mask;

/// One top-k selection whose mask sits on the tape as a leaf, so the
/// backward pass yields `dL/dr` for it.
#[derive(Clone, Debug)]
pub struct Selection {
    pub item: usize,
    pub k_index: usize,
    pub r: NodeId,
}

#[derive(Debug)]
pub struct BatchGraph {
    pub total: NodeId,
    pub breakdown: LossBreakdown,
    /// Score node of each batch item.
    pub scores: Vec<NodeId>,
    pub selections: Vec<Selection>,
}

/// Masks to use instead of the top-k of the current scores, indexed
/// `[k_index][item]`.
pub type FixedMasks = Vec<Vec<Vec<u8>>>;

fn ones(tape: &mut Tape, n: usize) -> NodeId {
    tape.constant(Tensor::filled(n, 1, 1.0))
}

fn mean_of(tape: &mut Tape, parts: &[NodeId]) -> Result<Option<NodeId>> {
    if parts.is_empty() {
        return Ok(None);
    }
    let stacked = tape.concat_rows(parts)?;
    Ok(Some(tape.mean_rows(stacked)?))
}

/// Records task, sufficiency, comprehensiveness and plausibility terms and
/// their weighted total.
///
/// The task term is the batch-mean cross-entropy on full inputs. For every
/// k the top-k mask of each item's scores enters as a leaf `r`: the
/// rationale-only input pools hidden states under `r`, the contrast input
/// under `1 - r`. Items whose contrast would be empty (k selects every token)
/// drop out of that k's comprehensiveness mean. Plausibility sums the BCE of
/// items with gold and divides by the batch size, so items without gold
/// contribute 0. Terms with zero weight are reported but kept out of the
/// total node.
pub fn build(
    tape: &mut Tape,
    bound: &Bound,
    batch: &[&Example],
    weights: &LossWeights,
    fixed: Option<&FixedMasks>,
) -> Result<BatchGraph> {
    let b = batch.len();
    let substitution = bound.pooling_is_substitution();
    let shared = bound.config().variant == crate::models::Variant::Shared;

    let mut hidden = Vec::with_capacity(b);
    let mut full_logits = Vec::with_capacity(b);
    let mut scores = Vec::with_capacity(b);
    for ex in batch {
        let h = bound.hidden(tape, Role::Task, &ex.tokens, None)?;
        let all = ones(tape, ex.len());
        full_logits.push(bound.task_head(tape, h, all)?);
        let he = if shared {
            h
        } else {
            bound.hidden(tape, Role::Extractor, &ex.tokens, None)?
        };
        scores.push(bound.extractor_head(tape, he)?);
        hidden.push(h);
    }
    let z = tape.concat_rows(&full_logits)?;
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let task = tape.softmax_cross_entropy(z, &labels)?;

    let mut ce_full = Vec::with_capacity(b);
    for (i, ex) in batch.iter().enumerate() {
        ce_full.push(tape.softmax_cross_entropy(full_logits[i], &[ex.label])?);
    }

    let margin_s = tape.constant(Tensor::scalar(weights.margin_s));
    let margin_c = tape.constant(Tensor::scalar(weights.margin_c));
    let mut selections = Vec::new();
    let mut suff_k = Vec::new();
    let mut comp_k = Vec::new();
    for (ki, &k) in weights.k_set.iter().enumerate() {
        let mut suff_items = Vec::with_capacity(b);
        let mut comp_items = Vec::with_capacity(b);
        for (i, ex) in batch.iter().enumerate() {
            let bits = match fixed {
                Some(f) => f[ki][i].clone(),
                None => topk_mask(tape.value(scores[i]).values(), k)?.bits().to_vec(),
            };
            let mask: Vec<f64> = bits.iter().map(|&x| f64::from(x)).collect();
            let r = tape.leaf(Tensor::column(mask));
            selections.push(Selection { item: i, k_index: ki, r });

            let h_r = if substitution {
                hidden[i]
            } else {
                let (_, attend) = rationale_input(&ex.tokens, &bits)?;
                bound.hidden(tape, Role::Task, &ex.tokens, Some(&attend))?
            };
            let z_r = bound.task_head(tape, h_r, r)?;
            let ce_r = tape.softmax_cross_entropy(z_r, &[ex.label])?;
            let d = tape.sub(ce_r, ce_full[i])?;
            let d = tape.add(d, margin_s)?;
            suff_items.push(tape.relu(d)?);

            if bits.contains(&0) {
                let all = ones(tape, ex.len());
                let c = tape.sub(all, r)?;
                let h_c = if substitution {
                    hidden[i]
                } else {
                    let (_, attend) = contrast_input(&ex.tokens, &bits)?;
                    bound.hidden(tape, Role::Task, &ex.tokens, Some(&attend))?
                };
                let z_c = bound.task_head(tape, h_c, c)?;
                let ce_c = tape.softmax_cross_entropy(z_c, &[ex.label])?;
                let d = tape.sub(ce_full[i], ce_c)?;
                let d = tape.add(d, margin_c)?;
                comp_items.push(tape.relu(d)?);
            }
        }
        suff_k.push(mean_of(tape, &suff_items)?.expect("nonempty batch"));
        comp_k.push(mean_of(tape, &comp_items)?);
    }

    let mut bce = Vec::new();
    for (i, ex) in batch.iter().enumerate() {
        if let Some(gold) = ex.gold_f64() {
            let all = vec![1.0; ex.len()];
            bce.push(tape.binary_cross_entropy_masked(scores[i], &gold, &all, weights.plaus_one_sided)?);
        }
    }
    let plaus = if bce.is_empty() {
        None
    } else {
        let stacked = tape.concat_rows(&bce)?;
        let s = tape.sum(stacked)?;
        Some(tape.mul_scalar(s, 1.0 / b as f64)?)
    };

    let value = |tape: &Tape, n: Option<NodeId>| n.map_or(0.0, |n| tape.value(n).values()[0]);
    let suff_v: Vec<f64> = suff_k.iter().map(|&n| value(tape, Some(n))).collect();
    let comp_v: Vec<f64> = comp_k.iter().map(|&n| value(tape, n)).collect();
    let breakdown = total_loss(
        value(tape, Some(task)),
        &comp_v,
        &suff_v,
        value(tape, plaus),
        weights,
    )?;

    let mut total = task;
    let present_comp: Vec<NodeId> = comp_k.iter().flatten().copied().collect();
    let k_count = weights.k_set.len() as f64;
    if weights.alpha_c > 0.0 && !present_comp.is_empty() {
        // Absent k entries count as 0 in the mean over the k-set.
        let stacked = tape.concat_rows(&present_comp)?;
        let s = tape.sum(stacked)?;
        let term = tape.mul_scalar(s, weights.alpha_c / k_count)?;
        total = tape.add(total, term)?;
    }
    if weights.alpha_s > 0.0 {
        let stacked = tape.concat_rows(&suff_k)?;
        let s = tape.sum(stacked)?;
        let term = tape.mul_scalar(s, weights.alpha_s / k_count)?;
        total = tape.add(total, term)?;
    }
    if weights.alpha_p > 0.0 {
        if let Some(p) = plaus {
            let term = tape.mul_scalar(p, weights.alpha_p)?;
            total = tape.add(total, term)?;
        }
    }

    Ok(BatchGraph {
        total,
        breakdown,
        scores,
        selections,
    })
}
