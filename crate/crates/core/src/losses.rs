//! Training criteria: margin-based sufficiency and comprehensiveness,
//! plausibility BCE, reduced-input construction and the weighted aggregate.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, BCE_EPS};
use crate::data::MASK;
use crate::error::{Error, Result};
use crate::topk::KPercent;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LossWeightsRepr")]
pub struct LossWeights {
    pub alpha_c: f64,
    pub alpha_s: f64,
    pub alpha_p: f64,
    pub margin_s: f64,
    pub margin_c: f64,
    /// Top-k percentages the faithfulness terms average over.
    pub k_set: Vec<KPercent>,
    /// Keep only the positive-class term of the plausibility BCE.
    pub plaus_one_sided: bool,
}

/// Accepts `alpha_f` as shorthand for equal `alpha_c` and `alpha_s`.
#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LossWeightsRepr {
    alpha_f: Option<f64>,
    alpha_c: Option<f64>,
    alpha_s: Option<f64>,
    alpha_p: f64,
    margin_s: f64,
    margin_c: f64,
    k_set: Vec<KPercent>,
    plaus_one_sided: bool,
}

impl Default for LossWeightsRepr {
    fn default() -> Self {
        let d = LossWeights::default();
        Self {
            alpha_f: None,
            alpha_c: None,
            alpha_s: None,
            alpha_p: d.alpha_p,
            margin_s: d.margin_s,
            margin_c: d.margin_c,
            k_set: d.k_set,
            plaus_one_sided: d.plaus_one_sided,
        }
    }
}

impl TryFrom<LossWeightsRepr> for LossWeights {
    type Error = String;

    fn try_from(r: LossWeightsRepr) -> std::result::Result<Self, String> {
        let d = LossWeights::default();
        let (alpha_c, alpha_s) = match (r.alpha_f, r.alpha_c, r.alpha_s) {
            (Some(f), None, None) => (f, f),
            (Some(_), _, _) => return Err("alpha_f cannot be combined with alpha_c or alpha_s".into()),
            (None, c, s) => (c.unwrap_or(d.alpha_c), s.unwrap_or(d.alpha_s)),
        };
        Ok(Self {
            alpha_c,
            alpha_s,
            alpha_p: r.alpha_p,
            margin_s: r.margin_s,
            margin_c: r.margin_c,
            k_set: r.k_set,
            plaus_one_sided: r.plaus_one_sided,
        })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_c: 1.0,
            alpha_s: 1.0,
            alpha_p: 0.5,
            margin_s: 0.1,
            margin_c: 0.1,
            k_set: vec![KPercent::new(50.0).expect("valid")],
            plaus_one_sided: false,
        }
    }
}

impl LossWeights {
    /// Sets both faithfulness weights at once.
    pub fn set_alpha_f(&mut self, alpha_f: f64) {
        self.alpha_c = alpha_f;
        self.alpha_s = alpha_f;
    }

    pub fn with_alpha_f(mut self, alpha_f: f64) -> Self {
        self.set_alpha_f(alpha_f);
        self
    }

    pub fn faithfulness_enabled(&self) -> bool {
        self.alpha_c > 0.0 || self.alpha_s > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_c", self.alpha_c),
            ("alpha_s", self.alpha_s),
            ("alpha_p", self.alpha_p),
            ("margin_s", self.margin_s),
            ("margin_c", self.margin_c),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("weights.{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.k_set.is_empty() {
            return Err(Error::Config("weights.k_set must not be empty".into()));
        }
        Ok(())
    }
}

/// Component values of one loss evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    /// One entry per k in the k-set, in order.
    pub suff: Vec<f64>,
    pub comp: Vec<f64>,
    pub plaus: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.task.is_finite()
            && self.plaus.is_finite()
            && self.total.is_finite()
            && self.suff.iter().chain(&self.comp).all(|v| v.is_finite())
    }

    /// Componentwise weighted mean of breakdowns with equal k-sets.
    pub fn weighted_mean(items: &[(LossBreakdown, f64)]) -> Option<LossBreakdown> {
        let (first, _) = items.first()?;
        let w: f64 = items.iter().map(|(_, w)| w).sum();
        let avg = |f: &dyn Fn(&LossBreakdown) -> f64| items.iter().map(|(b, x)| x * f(b)).sum::<f64>() / w;
        let avg_vec = |f: &dyn Fn(&LossBreakdown) -> &Vec<f64>| {
            (0..f(first).len())
                .map(|j| items.iter().map(|(b, x)| x * f(b)[j]).sum::<f64>() / w)
                .collect()
        };
        Some(LossBreakdown {
            task: avg(&|b| b.task),
            suff: avg_vec(&|b| &b.suff),
            comp: avg_vec(&|b| &b.comp),
            plaus: avg(&|b| b.plaus),
            total: avg(&|b| b.total),
        })
    }
}

fn check_len(tokens: &[u32], r: &[u8], what: &str) -> Result<()> {
    if tokens.len() != r.len() {
        return Err(Error::contract(format!(
            "{what}: {} tokens but mask of length {}",
            tokens.len(),
            r.len()
        )));
    }
    Ok(())
}

fn reduce(tokens: &[u32], r: &[u8], keep_selected: bool) -> (Vec<u32>, Vec<f64>) {
    tokens
        .iter()
        .zip(r)
        .map(|(&t, &b)| {
            if (b == 1) == keep_selected {
                (t, 1.0)
            } else {
                (MASK, 0.0)
            }
        })
        .unzip()
}

/// Input with the rationale removed: selected positions become MASK and are
/// excluded from attention.
pub fn contrast_input(tokens: &[u32], r: &[u8]) -> Result<(Vec<u32>, Vec<f64>)> {
    check_len(tokens, r, "contrast_input")?;
    Ok(reduce(tokens, r, false))
}

/// Input with only the rationale kept.
pub fn rationale_input(tokens: &[u32], r: &[u8]) -> Result<(Vec<u32>, Vec<f64>)> {
    check_len(tokens, r, "rationale_input")?;
    Ok(reduce(tokens, r, true))
}

/// `max(-m, d) + m`, computed as `max(0, d + m)`.
pub fn margin_loss(diff: f64, margin: f64) -> f64 {
    (diff + margin).max(0.0)
}

/// Penalizes a rationale-only input that is less confident than the full one.
pub fn sufficiency_loss(ce_rationale: f64, ce_full: f64, margin: f64) -> f64 {
    margin_loss(ce_rationale - ce_full, margin)
}

/// Penalizes a contrast input that is not less confident than the full one.
pub fn comprehensiveness_loss(ce_full: f64, ce_contrast: f64, margin: f64) -> f64 {
    margin_loss(ce_full - ce_contrast, margin)
}

/// Mean BCE of `sigmoid(scores)` against the gold mask, probabilities clamped
/// to `[1e-7, 1 - 1e-7]`.
pub fn plausibility_loss(scores: &[f64], gold: Option<&[u8]>, one_sided: bool) -> Result<f64> {
    let gold = gold.ok_or_else(|| Error::contract("plausibility_loss: no gold rationale"))?;
    if gold.len() != scores.len() || scores.is_empty() {
        return Err(Error::contract(format!(
            "plausibility_loss: {} scores but {} gold entries",
            scores.len(),
            gold.len()
        )));
    }
    let total: f64 = scores
        .iter()
        .zip(gold)
        .map(|(&s, &g)| {
            let p = sigmoid(s).clamp(BCE_EPS, 1.0 - BCE_EPS);
            let g = f64::from(g);
            let neg = if one_sided { 0.0 } else { (1.0 - g) * (1.0 - p).ln() };
            -(g * p.ln() + neg)
        })
        .sum();
    Ok(total / scores.len() as f64)
}

/// `task + alpha_c mean(comp) + alpha_s mean(suff) + alpha_p plaus`.
pub fn total_loss(task: f64, comp: &[f64], suff: &[f64], plaus: f64, w: &LossWeights) -> Result<LossBreakdown> {
    if comp.is_empty() || suff.is_empty() {
        return Err(Error::contract("total_loss: empty k-set"));
    }
    let values = [task, plaus].into_iter().chain(comp.iter().copied()).chain(suff.iter().copied());
    if values.into_iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("total_loss: non-finite component".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let total = task + w.alpha_c * mean(comp) + w.alpha_s * mean(suff) + w.alpha_p * plaus;
    Ok(LossBreakdown {
        task,
        suff: suff.to_vec(),
        comp: comp.to_vec(),
        plaus,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topk::topk_mask;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn mask(bits: &[f64]) -> Vec<u8> {
        let k = 100.0 * bits.iter().sum::<f64>() / bits.len() as f64;
        let m = topk_mask(bits, KPercent::new(k.max(1.0)).unwrap()).unwrap();
        assert_eq!(m.as_f64(), bits);
        m.bits().to_vec()
    }

    #[test]
    fn contrast_and_rationale_inputs() {
        let tokens = [10, 11, 12, 13];
        let (t, a) = contrast_input(&tokens, &mask(&[0.0, 1.0, 1.0, 0.0])).unwrap();
        assert_eq!(t, vec![10, MASK, MASK, 13]);
        assert_eq!(a, vec![1.0, 0.0, 0.0, 1.0]);
        let (t, a) = rationale_input(&tokens, &mask(&[1.0, 0.0, 0.0, 1.0])).unwrap();
        assert_eq!(t, vec![10, MASK, MASK, 13]);
        assert_eq!(a, vec![1.0, 0.0, 0.0, 1.0]);

        let all = mask(&[1.0; 4]);
        assert_eq!(rationale_input(&tokens, &all).unwrap().0, tokens.to_vec());
        assert!(contrast_input(&tokens, &all).unwrap().1.iter().all(|&a| a == 0.0));

        let r = mask(&[0.0, 1.0, 0.0, 1.0]);
        let (_, ar) = rationale_input(&tokens, &r).unwrap();
        let (_, ac) = contrast_input(&tokens, &r).unwrap();
        assert!(ar.iter().zip(&ac).all(|(x, y)| x + y == 1.0));
        assert!(contrast_input(&tokens[..3], &r).is_err());
    }

    #[test]
    fn contrast_with_no_selection_is_identity() {
        let tokens = [7, 8, 9];
        let (t, a) = contrast_input(&tokens, &[0, 0, 0]).unwrap();
        assert_eq!(t, tokens.to_vec());
        assert_eq!(a, vec![1.0; 3]);
    }

    #[test]
    fn margin_examples() {
        assert!(close(sufficiency_loss(0.9, 0.7, 0.1), 0.3, 1e-12));
        assert_eq!(margin_loss(-0.3, 0.1), 0.0);
        assert!(close(margin_loss(-0.05, 0.1), 0.05, 1e-12));
        assert_eq!(comprehensiveness_loss(0.7, 2.0, 0.2), 0.0);
        assert_eq!(comprehensiveness_loss(0.7, 0.7, 0.2), 0.2);
        assert!(close(margin_loss(0.5, 0.2), 0.7, 1e-12));
    }

    #[test]
    fn plausibility_examples() {
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let v = plausibility_loss(&[logit(0.9), logit(0.1)], Some(&[1, 0]), false).unwrap();
        assert!(close(v, -(0.9f64.ln() + 0.9f64.ln()) / 2.0, 1e-12));
        assert!(close(v, 0.1054, 5e-5));
        let v = plausibility_loss(&[40.0, -40.0], Some(&[1, 0]), false).unwrap();
        assert!(v < 1e-6);
        let v = plausibility_loss(&[0.0; 3], Some(&[1, 0, 1]), false).unwrap();
        assert!(close(v, 2f64.ln(), 1e-12));
        let v = plausibility_loss(&[0.0; 2], Some(&[1, 0]), true).unwrap();
        assert!(close(v, 2f64.ln() / 2.0, 1e-12));
        assert!(plausibility_loss(&[0.0], None, false).is_err());
    }

    #[test]
    fn total_examples() {
        let w = LossWeights {
            alpha_c: 0.5,
            alpha_s: 0.5,
            alpha_p: 1.0,
            ..LossWeights::default()
        };
        let b = total_loss(1.0, &[0.2], &[0.3], 0.4, &w).unwrap();
        assert!(close(b.total, 1.65, 1e-12));
        let zero = LossWeights::default().with_alpha_f(0.0);
        let zero = LossWeights { alpha_p: 0.0, ..zero };
        assert_eq!(total_loss(0.8, &[3.0], &[2.0], 5.0, &zero).unwrap().total, 0.8);
        let b = total_loss(0.0, &[0.2, 0.4], &[0.0, 0.0], 0.0, &w).unwrap();
        assert!(close(b.total, 0.5 * 0.3, 1e-12));
        assert!(total_loss(0.0, &[], &[], 0.0, &w).is_err());
        assert!(total_loss(f64::NAN, &[0.0], &[0.0], 0.0, &w).is_err());
    }

    #[test]
    fn alpha_f_sets_both() {
        let w = LossWeights::default().with_alpha_f(0.7);
        assert_eq!((w.alpha_c, w.alpha_s), (0.7, 0.7));
    }

    proptest! {
        #[test]
        fn margin_losses_nonnegative_with_exact_zero_set(diff in -5.0..5.0f64, m in 0.0..2.0f64) {
            let s = margin_loss(diff, m);
            prop_assert!(s >= 0.0);
            prop_assert_eq!(s == 0.0, diff <= -m);
        }

        #[test]
        fn total_is_linear_in_each_weight(a in 0.0..3.0f64, b in 0.0..3.0f64, task in 0.0..2.0f64,
                                          c in 0.0..2.0f64, s in 0.0..2.0f64, p in 0.0..2.0f64) {
            let base = LossWeights { alpha_c: 0.0, alpha_s: 0.0, alpha_p: 0.0, ..LossWeights::default() };
            let at = |x: f64| total_loss(task, &[c], &[s], p, &LossWeights { alpha_c: x, ..base.clone() }).unwrap().total;
            prop_assert!((at(a + b) - (at(a) + at(b) - at(0.0))).abs() <= 1e-12 * (1.0 + at(a + b).abs()));
        }
    }
}
