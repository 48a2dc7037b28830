//! Finite-difference check of the complete training objective.

use serde::Serialize;

use crate::autodiff::{catalog, grad_check, Tape};
use crate::data::{generate_synthetic, SyntheticSpec};
use crate::error::Result;
use crate::losses::LossWeights;
use crate::models::{EncoderKind, ModelConfig, ModelParams, Variant};
use crate::topk::{topk_mask, KPercent};
use crate::training::graph::{self, FixedMasks};

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub model: String,
    pub tensor: String,
    pub passed: bool,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckSummary {
    pub ops: Vec<catalog::CaseResult>,
    pub full_loss: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn tiny_spec() -> SyntheticSpec {
    SyntheticSpec {
        vocab_size: 16,
        num_classes: 3,
        seq_len: [4, 6],
        rationale_len: [1, 2],
        signal_pool_size: 3,
        num_train: 4,
        num_dev: 0,
        ..SyntheticSpec::default()
    }
}

/// Gradient check of the full weighted loss with respect to every parameter
/// tensor of a tiny model, with the top-k masks frozen at their values for
/// the unperturbed parameters.
pub fn full_loss(seed: u64, encoder: EncoderKind, variant: Variant, step: f64, tol: f64) -> Result<Vec<ParamCheck>> {
    let spec = tiny_spec();
    let data = generate_synthetic(&spec, seed)?;
    let batch: Vec<_> = data.iter().collect();
    let cfg = ModelConfig {
        vocab_size: spec.vocab_size,
        embed_dim: 3,
        hidden_dim: 4,
        num_classes: spec.num_classes,
        encoder,
        variant,
        max_len: 8,
    };
    let mut params = ModelParams::init(&cfg, seed)?;
    // Nonzero biases keep every coordinate on the differentiable path.
    for t in params.tensors.iter_mut().filter(|t| t.name.ends_with(".b")) {
        t.value.values_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.05 + 0.01 * i as f64);
    }
    let weights = LossWeights {
        alpha_c: 0.7,
        alpha_s: 0.6,
        alpha_p: 0.9,
        margin_s: 0.1,
        margin_c: 0.1,
        k_set: vec![KPercent::new(30.0)?, KPercent::new(60.0)?],
        plaus_one_sided: false,
    };
    let masks: FixedMasks = weights
        .k_set
        .iter()
        .map(|&k| {
            batch
                .iter()
                .map(|ex| Ok(topk_mask(&params.extractor_forward(&ex.tokens)?, k)?.bits().to_vec()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let label = format!("{encoder:?}/{variant:?}");
    let mut out = Vec::new();
    for (i, t) in params.tensors.iter().enumerate() {
        let report = grad_check(
            |tape: &mut Tape, x| {
                let bound = params.bind_replacing(tape, i, x);
                Ok(graph::build(tape, &bound, &batch, &weights, Some(&masks))?.total)
            },
            &t.value,
            step,
            tol,
        )?;
        out.push(ParamCheck {
            model: label.clone(),
            tensor: t.name.clone(),
            passed: report.passed,
            max_rel_error: report.max_rel_error,
        });
    }
    Ok(out)
}

/// Op catalog over `seeds` seeds plus the full loss for every encoder and
/// variant.
pub fn gradcheck_all(seed: u64, seeds: usize) -> Result<GradcheckSummary> {
    let ops = catalog::run(seed, seeds)?;
    let mut full = Vec::new();
    for encoder in [EncoderKind::MeanPoolMlp, EncoderKind::SingleHeadAttention] {
        for variant in [Variant::Dual, Variant::Shared] {
            full.extend(full_loss(seed, encoder, variant, catalog::STEP, catalog::TOLERANCE)?);
        }
    }
    let max_rel_error = ops
        .iter()
        .map(|c| c.max_rel_error)
        .chain(full.iter().map(|c| c.max_rel_error))
        .fold(0.0, f64::max);
    let passed = ops.iter().all(|c| c.passed()) && full.iter().all(|c| c.passed);
    Ok(GradcheckSummary {
        ops,
        full_loss: full,
        max_rel_error,
        passed,
    })
}
